//! Finite-type branching mechanism.
//!
//! For type `i` the mechanism acts on `u ∈ [0,∞)^K` as
//!
//! ```text
//! ψ(i,u) = a_i u_i + b_i u_i² − u·η_i + Σ_k g_{i,k} (exp(−u·y_{i,k}) − 1 + u·y_{i,k})
//! ```
//!
//! with finitely many jump atoms `(g_{i,k}, y_{i,k})` per type. Everything the
//! rest of the crate needs (mean generator, second-moment form, cumulant
//! right-hand side) is derived from this value type.

use nalgebra::{ComplexField, DMatrix};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Absolute slack for the cross-mean domination check.
pub const DOMINATION_TOL: f64 = 1e-12;

/// One atom `g δ_y` of a jump measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpAtom {
    pub rate: f64,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mechanism {
    a: Vec<f64>,
    b: Vec<f64>,
    eta: Vec<Vec<f64>>,
    jumps: Vec<Vec<JumpAtom>>,
}

/// On-disk model description. Type indices in `jumps` are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub types: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub eta: Vec<Vec<f64>>,
    #[serde(default)]
    pub jumps: Vec<JumpConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpConfig {
    #[serde(rename = "type")]
    pub type_index: usize,
    pub rate: f64,
    pub vector: Vec<f64>,
}

impl Mechanism {
    /// Builds a mechanism after shape and finiteness checks. Sign and
    /// domination invariants are reported by [`Mechanism::validate`].
    pub fn new(
        a: Vec<f64>,
        b: Vec<f64>,
        eta: Vec<Vec<f64>>,
        jumps: Vec<Vec<JumpAtom>>,
    ) -> Result<Self> {
        let k = a.len();
        if k == 0 {
            return Err(Error::Config("at least one type is required".into()));
        }
        check_len(k, b.len())?;
        check_len(k, eta.len())?;
        for row in &eta {
            check_len(k, row.len())?;
        }
        check_len(k, jumps.len())?;
        for atoms in &jumps {
            for atom in atoms {
                check_len(k, atom.vector.len())?;
            }
        }
        let finite = a
            .iter()
            .chain(&b)
            .chain(eta.iter().flatten())
            .all(|v| v.is_finite())
            && jumps
                .iter()
                .flatten()
                .all(|at| at.rate.is_finite() && at.vector.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::NonFinite("mechanism coefficients".into()));
        }
        Ok(Self { a, b, eta, jumps })
    }

    pub fn from_config(cfg: &ModelConfig) -> Result<Self> {
        let k = cfg.types;
        if k == 0 {
            return Err(Error::Config("`types` must be positive".into()));
        }
        check_len(k, cfg.a.len())?;
        let mut jumps = vec![Vec::new(); k];
        for j in &cfg.jumps {
            if j.type_index == 0 || j.type_index > k {
                return Err(Error::Config(format!(
                    "jump type index {} outside 1..={k}",
                    j.type_index
                )));
            }
            jumps[j.type_index - 1].push(JumpAtom {
                rate: j.rate,
                vector: j.vector.clone(),
            });
        }
        Self::new(cfg.a.clone(), cfg.b.clone(), cfg.eta.clone(), jumps)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_config(&cfg)
    }

    pub fn to_config(&self) -> ModelConfig {
        let jumps = self
            .jumps
            .iter()
            .enumerate()
            .flat_map(|(i, atoms)| {
                atoms.iter().map(move |at| JumpConfig {
                    type_index: i + 1,
                    rate: at.rate,
                    vector: at.vector.clone(),
                })
            })
            .collect();
        ModelConfig {
            types: self.types(),
            a: self.a.clone(),
            b: self.b.clone(),
            eta: self.eta.clone(),
            jumps,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(&self.to_config()).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn types(&self) -> usize {
        self.a.len()
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn eta(&self) -> &[Vec<f64>] {
        &self.eta
    }

    pub fn jumps(&self, i: usize) -> &[JumpAtom] {
        &self.jumps[i]
    }

    pub fn has_jumps(&self) -> bool {
        self.jumps.iter().any(|a| !a.is_empty())
    }

    /// Mean generator `B = −diag(a) + η`.
    pub fn mean_matrix(&self) -> MomentOperators {
        let k = self.types();
        let b = DMatrix::from_fn(
            k,
            k,
            |i, j| if i == j { -self.a[i] } else { self.eta[i][j] },
        );
        MomentOperators {
            generator: b,
            diffusion: self.b.iter().map(|bi| 2.0 * bi).collect(),
            jumps: self.jumps.clone(),
        }
    }

    /// Second-moment form `ϑ[f,g](i) = 2 b_i f_i g_i + Σ_k g_{i,k} (f·y)(g·y)`.
    /// Bilinear, no conjugation: pass `conj(f)` explicitly for `ϑ[f, f̄]`.
    pub fn vartheta<T>(&self, f: &[T], g: &[T]) -> Result<Vec<T>>
    where
        T: ComplexField<RealField = f64> + Copy,
    {
        let k = self.types();
        check_len(k, f.len())?;
        check_len(k, g.len())?;
        Ok((0..k)
            .map(|i| {
                let mut acc = T::from_real(2.0 * self.b[i]) * f[i] * g[i];
                for atom in &self.jumps[i] {
                    let fy = dot(f, &atom.vector);
                    let gy = dot(g, &atom.vector);
                    acc += T::from_real(atom.rate) * fy * gy;
                }
                acc
            })
            .collect())
    }

    /// `ψ(i, u)` for every type.
    pub fn psi(&self, u: &[f64]) -> Vec<f64> {
        let k = self.types();
        (0..k)
            .map(|i| {
                let mut v = self.a[i] * u[i] + self.b[i] * u[i] * u[i];
                v -= (0..k).map(|j| self.eta[i][j] * u[j]).sum::<f64>();
                for atom in &self.jumps[i] {
                    let x: f64 = u.iter().zip(&atom.vector).map(|(a, b)| a * b).sum();
                    // exp(−x) − 1 + x without cancellation for small x
                    v += atom.rate * ((-x).exp_m1() + x);
                }
                v
            })
            .collect()
    }

    pub fn validate(&self) -> ValidationReport {
        let k = self.types();
        let mut checks = Vec::new();

        let neg_b: Vec<usize> = (0..k).filter(|&i| self.b[i] < 0.0).collect();
        checks.push(Check::hard(
            "b nonnegative",
            neg_b.is_empty(),
            format!("negative b at types {}", one_based(&neg_b)),
        ));

        let diag: Vec<usize> = (0..k).filter(|&i| self.eta[i][i] != 0.0).collect();
        checks.push(Check::hard(
            "eta diagonal zero",
            diag.is_empty(),
            format!("nonzero diagonal at types {}", one_based(&diag)),
        ));

        let neg_eta: Vec<String> = (0..k)
            .flat_map(|i| (0..k).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && self.eta[i][j] < 0.0)
            .map(|(i, j)| format!("({},{})", i + 1, j + 1))
            .collect();
        checks.push(Check::hard(
            "eta nonnegative",
            neg_eta.is_empty(),
            format!("negative eta at {}", neg_eta.join(",")),
        ));

        let mut bad_atoms = Vec::new();
        for (i, atoms) in self.jumps.iter().enumerate() {
            for (n, atom) in atoms.iter().enumerate() {
                let ok = atom.rate >= 0.0
                    && atom.vector.iter().all(|&y| y >= 0.0)
                    && atom.vector.iter().any(|&y| y > 0.0);
                if !ok {
                    bad_atoms.push(format!("type {} atom {}", i + 1, n + 1));
                }
            }
        }
        checks.push(Check::hard(
            "jump atoms nonnegative and nonzero",
            bad_atoms.is_empty(),
            bad_atoms.join(", "),
        ));

        let mut dominated = Vec::new();
        for i in 0..k {
            for j in (0..k).filter(|&j| j != i) {
                let mean: f64 = self.jumps[i].iter().map(|at| at.rate * at.vector[j]).sum();
                if mean > self.eta[i][j] + DOMINATION_TOL {
                    dominated.push(format!(
                        "({},{}): jump mean {mean} > eta {}",
                        i + 1,
                        j + 1,
                        self.eta[i][j]
                    ));
                }
            }
        }
        checks.push(Check::hard(
            "cross-mean domination",
            dominated.is_empty(),
            dominated.join("; "),
        ));

        // finite atom lists always carry finite second and fourth moments
        checks.push(Check::hard("second moment finite", true, String::new()));

        let ops = self.mean_matrix();
        let irreducible = is_irreducible(&ops.generator);
        let lambda1 = crate::semigroup::spectral_abscissa(&ops.generator);
        let min_b = self.b.iter().cloned().fold(f64::INFINITY, f64::min);

        checks.push(Check::soft(
            "irreducible",
            irreducible,
            "positive off-diagonal pattern of B is not strongly connected".into(),
        ));
        checks.push(Check::soft(
            "supercritical",
            lambda1 > 0.0,
            format!("lambda1 = {lambda1}"),
        ));

        let mut notes = Vec::new();
        if min_b > 0.0 {
            notes.push(
                "min b > 0: extinction has positive probability (sufficient condition only)".into(),
            );
        } else {
            notes.push(
                "min b = 0: extinction criterion not established; critical-regime Monte Carlo refused"
                    .into(),
            );
        }

        ValidationReport {
            types: k,
            checks,
            irreducible,
            lambda1,
            supercritical: lambda1 > 0.0,
            min_b_positive: min_b > 0.0,
            fourth_moment_finite: true,
            notes,
        }
    }

    /// Validates and turns hard failures into an error.
    pub fn ensure_valid(&self) -> Result<ValidationReport> {
        let report = self.validate();
        let failures = report.hard_failures();
        if failures.is_empty() {
            Ok(report)
        } else {
            Err(Error::Structural(failures))
        }
    }
}

fn dot<T: ComplexField<RealField = f64> + Copy>(f: &[T], y: &[f64]) -> T {
    f.iter()
        .zip(y)
        .fold(T::zero(), |acc, (&fi, &yi)| acc + fi * T::from_real(yi))
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

fn one_based(idx: &[usize]) -> String {
    idx.iter()
        .map(|i| (i + 1).to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Strong connectivity of the graph `i → j` whenever `B_ij > 0`, `i ≠ j`.
pub fn is_irreducible(b: &DMatrix<f64>) -> bool {
    let k = b.nrows();
    let reach = |forward: bool| {
        let mut seen = vec![false; k];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..k {
                let w = if forward { b[(i, j)] } else { b[(j, i)] };
                if i != j && w > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    reach(true) && reach(false)
}

/// First- and second-moment operators of a mechanism.
#[derive(Debug, Clone)]
pub struct MomentOperators {
    /// Mean generator `B` (Metzler).
    pub generator: DMatrix<f64>,
    /// `2 b_i`, the local part of `ϑ`.
    pub diffusion: Vec<f64>,
    /// Jump atoms, the non-local part of `ϑ`.
    pub jumps: Vec<Vec<JumpAtom>>,
}

impl MomentOperators {
    pub fn is_metzler(&self) -> bool {
        let k = self.generator.nrows();
        (0..k).all(|i| (0..k).all(|j| i == j || self.generator[(i, j)] >= 0.0))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Hard checks are structural; soft ones only gate later analysis.
    pub hard: bool,
    pub detail: String,
}

impl Check {
    fn hard(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            hard: true,
            detail: if passed { String::new() } else { detail },
        }
    }

    fn soft(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            hard: false,
            detail: if passed { String::new() } else { detail },
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub types: usize,
    pub checks: Vec<Check>,
    pub irreducible: bool,
    /// Largest real part of the spectrum of `B`.
    pub lambda1: f64,
    pub supercritical: bool,
    /// `min_i b_i > 0`, used as a sufficient condition for positive
    /// extinction probability.
    pub min_b_positive: bool,
    pub fourth_moment_finite: bool,
    pub notes: Vec<String>,
}

impl ValidationReport {
    pub fn hard_failures(&self) -> Vec<String> {
        self.checks
            .iter()
            .filter(|c| c.hard && !c.passed)
            .map(|c| format!("{}: {}", c.name, c.detail))
            .collect()
    }

    pub fn structurally_valid(&self) -> bool {
        self.hard_failures().is_empty()
    }

    /// Structure valid, irreducible and supercritical.
    pub fn analysis_ready(&self) -> bool {
        self.structurally_valid() && self.irreducible && self.supercritical
    }

    pub fn name_failed(&self, name: &str) -> bool {
        self.checks.iter().any(|c| c.name == name && !c.passed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use num_complex::Complex64;

    #[test]
    fn fix1_validates_and_is_supercritical() {
        let r = fixtures::fix1().validate();
        assert!(r.structurally_valid());
        assert!(r.irreducible);
        assert!(r.supercritical);
        assert!((r.lambda1 - 1.0).abs() < 1e-14);
        assert!(r.min_b_positive);
    }

    #[test]
    fn nonzero_diagonal_is_hard_failure() {
        let m = Mechanism::new(
            vec![-1.0, -1.0],
            vec![0.5, 0.5],
            vec![vec![0.3, 0.5], vec![0.5, 0.0]],
            vec![vec![], vec![]],
        )
        .unwrap();
        let r = m.validate();
        assert!(!r.structurally_valid());
        assert!(r.hard_failures()[0].contains("nonzero diagonal"));
        assert!(matches!(m.ensure_valid(), Err(Error::Structural(_))));
    }

    #[test]
    fn fix6_flags_zero_b() {
        let r = fixtures::fix6().validate();
        assert!(r.structurally_valid());
        assert!(!r.min_b_positive);
        assert!(r.notes.iter().any(|n| n.contains("refused")));
    }

    #[test]
    fn domination_violation_detected() {
        let m = Mechanism::new(
            vec![-1.0, -1.0],
            vec![0.5, 0.5],
            vec![vec![0.0, 0.1], vec![0.1, 0.0]],
            vec![
                vec![JumpAtom {
                    rate: 1.0,
                    vector: vec![0.0, 0.2],
                }],
                vec![],
            ],
        )
        .unwrap();
        assert!(m.validate().name_failed("cross-mean domination"));
    }

    #[test]
    fn reducible_is_soft() {
        let m = Mechanism::new(
            vec![-1.0, -1.0],
            vec![0.5, 0.5],
            vec![vec![0.0, 0.5], vec![0.0, 0.0]],
            vec![vec![], vec![]],
        )
        .unwrap();
        let r = m.validate();
        assert!(r.structurally_valid());
        assert!(!r.irreducible);
        assert!(!r.analysis_ready());
    }

    #[test]
    fn mean_matrix_examples() {
        let b2 = fixtures::fix2().mean_matrix().generator;
        assert_eq!(b2, DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]));
        assert_eq!(fixtures::fix1().mean_matrix().generator[(0, 0)], 1.0);
        let b5 = fixtures::fix5().mean_matrix();
        let expect = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 0.0, 2.0, 1.0, 1.0, 0.0, 2.0]);
        assert_eq!(b5.generator, expect);
        assert!(b5.is_metzler());
    }

    #[test]
    fn vartheta_examples() {
        let m2 = fixtures::fix2();
        assert_eq!(
            m2.vartheta(&[1.0, 1.0], &[1.0, 1.0]).unwrap(),
            vec![1.0, 1.0]
        );
        assert_eq!(
            m2.vartheta(&[0.0, 0.0], &[3.0, -2.0]).unwrap(),
            vec![0.0, 0.0]
        );
        let m6 = fixtures::fix6();
        assert_eq!(m6.vartheta(&[1.0], &[1.0]).unwrap(), vec![0.5]);
        assert!(matches!(
            m2.vartheta(&[1.0], &[1.0, 1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn vartheta_conjugate_pair_is_real_nonnegative() {
        let m = fixtures::fix5();
        let f = [
            Complex64::new(0.3, -1.2),
            Complex64::new(-0.7, 0.4),
            Complex64::new(1.1, 0.9),
        ];
        let fbar: Vec<_> = f.iter().map(|z| z.conj()).collect();
        for v in m.vartheta(&f, &fbar).unwrap() {
            assert!(v.im.abs() < 1e-15);
            assert!(v.re >= 0.0);
        }
    }

    #[test]
    fn unknown_config_field_rejected() {
        let text = r#"{"types":1,"a":[-1],"b":[0.5],"eta":[[0]],"jumps":[],"extra":1}"#;
        assert!(matches!(Mechanism::from_json(text), Err(Error::Config(_))));
    }

    #[test]
    fn config_round_trip() {
        let m = fixtures::fix6();
        let back = Mechanism::from_config(&m.to_config()).unwrap();
        assert_eq!(m, back);
        assert_eq!(m.content_hash(), back.content_hash());
    }

    #[test]
    fn psi_matches_riccati_for_fix1() {
        let m = fixtures::fix1();
        let u = 0.7;
        assert!((m.psi(&[u])[0] - (-u + 0.5 * u * u)).abs() < 1e-15);
    }
}
