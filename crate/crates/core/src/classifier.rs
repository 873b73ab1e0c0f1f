//! Fluctuation-regime classification of a test function and the resulting
//! limit-law prediction.

use nalgebra::DVector;
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Mechanism;
use crate::moments::{self, LimitConstants, RhoSq};
use crate::semigroup::{SpectralBlock, SpectralData};

type CVec = DVector<Complex64>;

/// Relative width of the critical band around `λ₁/2`.
pub const CRITICAL_REL_TOL: f64 = 1e-9;
/// Projection coefficients below this (relative) size count as zero.
pub const PROJECTION_REL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Regime {
    Trivial,
    Small,
    Critical,
    Large,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Regime::Trivial => "Trivial",
            Regime::Small => "Small",
            Regime::Critical => "Critical",
            Regime::Large => "Large",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockProjection {
    pub block: usize,
    #[serde(serialize_with = "ser_complex")]
    pub eigenvalue: Complex64,
    #[serde(serialize_with = "ser_complex_vec")]
    pub coeffs: Vec<Complex64>,
    pub nonzero: Vec<bool>,
    /// Polynomial degree `r_n` of each position; `None` when the tail of the
    /// chain from `n` on projects to nothing.
    pub degrees: Vec<Option<usize>>,
}

impl BlockProjection {
    pub fn any_nonzero(&self) -> bool {
        self.nonzero.iter().any(|&b| b)
    }

    pub fn max_degree(&self) -> Option<usize> {
        self.degrees.iter().flatten().copied().max()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ProjectionTable {
    pub blocks: Vec<BlockProjection>,
}

impl ProjectionTable {
    /// `Σ c_n φ_n` over every block.
    pub fn reconstruct(&self, spec: &SpectralData) -> CVec {
        let mut out = CVec::zeros(spec.types());
        for (bp, block) in self.blocks.iter().zip(&spec.blocks) {
            for (c, phi) in bp.coeffs.iter().zip(&block.right) {
                out.axpy(*c, phi, Complex64::new(1.0, 0.0));
            }
        }
        out
    }
}

/// Coefficients `⟨f, φ̂_n⟩` on every block and chain position.
pub fn project(f: &CVec, spec: &SpectralData) -> ProjectionTable {
    let fnorm = f.camax();
    let blocks = spec
        .blocks
        .iter()
        .enumerate()
        .map(|(k, block)| {
            let coeffs = block.project(f);
            let nonzero: Vec<bool> = coeffs
                .iter()
                .zip(&block.dual)
                .map(|(c, d)| c.norm() > PROJECTION_REL_TOL * fnorm * d.camax())
                .collect();
            let degrees = degrees(block, &nonzero);
            BlockProjection {
                block: k,
                eigenvalue: block.eigenvalue,
                coeffs,
                nonzero,
                degrees,
            }
        })
        .collect();
    ProjectionTable { blocks }
}

fn degrees(block: &SpectralBlock, nonzero: &[bool]) -> Vec<Option<usize>> {
    (0..block.size())
        .map(|n| {
            let (start, d) = block.chain_of(n);
            (n..start + d).rev().find(|&m| nonzero[m]).map(|m| m - n)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct LeadingFunction {
    pub block: usize,
    #[serde(serialize_with = "ser_complex")]
    pub eigenvalue: Complex64,
    #[serde(serialize_with = "ser_complex_vec_dv")]
    pub f: CVec,
}

#[derive(Debug, Clone, Serialize)]
pub struct Classification {
    pub lambda1: f64,
    pub mean_coeff: f64,
    pub fhat: Vec<f64>,
    #[serde(serialize_with = "ser_extended")]
    pub alpha: f64,
    pub gamma: usize,
    pub iset: Vec<usize>,
    pub leading: Vec<LeadingFunction>,
    #[serde(serialize_with = "ser_extended")]
    pub epsilon: f64,
    pub regime: Regime,
    /// `F_κ/γ!` when the leading set is a single real block.
    pub fstar: Option<Vec<f64>>,
    pub projections: ProjectionTable,
    pub warnings: Vec<String>,
}

impl Classification {
    pub fn fhat_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.fhat)
    }

    pub fn fstar_vec(&self) -> Option<DVector<f64>> {
        self.fstar.as_deref().map(DVector::from_column_slice)
    }

    pub fn is_oscillatory(&self) -> bool {
        self.iset.len() > 1
    }

    /// `(γ!)⁻¹ Σ_{j∈𝕴} e^{it Im λ_j} F_j`, the limit of `t^{−γ} e^{−αt} T_t f̂`.
    pub fn semigroup_target(&self, t: f64) -> DVector<f64> {
        let k = self.fhat.len();
        let mut out = CVec::zeros(k);
        for lf in &self.leading {
            let phase = Complex64::new(0.0, t * lf.eigenvalue.im).exp();
            out.axpy(phase, &lf.f, Complex64::new(1.0, 0.0));
        }
        out.map(|z| z.re) / factorial(self.gamma)
    }

    /// `‖t^{−γ} e^{−αt} T_t f̂ − target(t)‖∞`.
    pub fn semigroup_residual(&self, spec: &SpectralData, t: f64) -> f64 {
        if self.regime == Regime::Trivial {
            return 0.0;
        }
        let scaled = spec.propagate_centered(t, &self.fhat_vec())
            * ((-self.alpha * t).exp() / t.powi(self.gamma as i32));
        (scaled - self.semigroup_target(t)).amax()
    }
}

pub fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Classify a real test function.
pub fn classify(f: &DVector<f64>, spec: &SpectralData) -> Result<Classification> {
    if f.len() != spec.types() {
        return Err(Error::DimensionMismatch {
            expected: spec.types(),
            got: f.len(),
        });
    }
    if !f.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("test function".into()));
    }
    let lambda1 = spec.lambda1;
    let mean_coeff = spec.mean_coeff(f);
    let fhat = f - &spec.phi * mean_coeff;
    let fc = f.map(|v| Complex64::new(v, 0.0));
    let projections = project(&fc, spec);
    let mut warnings = Vec::new();

    let active: Vec<&BlockProjection> = projections
        .blocks
        .iter()
        .skip(1)
        .filter(|b| b.any_nonzero())
        .collect();
    if active.is_empty() {
        return Ok(Classification {
            lambda1,
            mean_coeff,
            fhat: fhat.iter().copied().collect(),
            alpha: f64::NEG_INFINITY,
            gamma: 0,
            iset: Vec::new(),
            leading: Vec::new(),
            epsilon: f64::INFINITY,
            regime: Regime::Trivial,
            fstar: None,
            projections,
            warnings,
        });
    }

    let alpha = active
        .iter()
        .map(|b| b.eigenvalue.re)
        .fold(f64::NEG_INFINITY, f64::max);
    let at_alpha: Vec<&&BlockProjection> = active
        .iter()
        .filter(|b| (b.eigenvalue.re - alpha).abs() <= spec.cluster_tol)
        .collect();
    let gamma = at_alpha
        .iter()
        .filter_map(|b| b.max_degree())
        .max()
        .unwrap_or(0);
    let iset: Vec<usize> = at_alpha
        .iter()
        .filter(|b| b.max_degree() == Some(gamma))
        .map(|b| b.block)
        .collect();

    let leading: Vec<LeadingFunction> = iset
        .iter()
        .map(|&j| {
            let block = &spec.blocks[j];
            let bp = &projections.blocks[j];
            let mut fj = CVec::zeros(spec.types());
            for n in 0..block.size() {
                if bp.degrees[n] == Some(gamma) {
                    let m = block
                        .shift_in_chain(n, gamma)
                        .expect("degree stays in chain");
                    fj.axpy(bp.coeffs[m], &block.right[n], Complex64::new(1.0, 0.0));
                }
            }
            LeadingFunction {
                block: j,
                eigenvalue: block.eigenvalue,
                f: fj,
            }
        })
        .collect();

    let tol = CRITICAL_REL_TOL * lambda1.max(1.0);
    let half = lambda1 / 2.0;
    let regime = if (alpha - half).abs() <= tol {
        Regime::Critical
    } else if alpha < half {
        Regime::Small
    } else {
        Regime::Large
    };
    if regime != Regime::Critical && (alpha - half).abs() <= 1e-6 * lambda1.max(1.0) {
        warnings.push(format!(
            "alpha - lambda1/2 = {:e} is close to the critical band (tol {tol:e}); classification is ill-conditioned",
            alpha - half
        ));
    }
    let fnorm = f.amax();
    for bp in projections.blocks.iter().skip(1) {
        for (c, nz) in bp.coeffs.iter().zip(&bp.nonzero) {
            let thr = PROJECTION_REL_TOL * fnorm;
            if !nz && c.norm() > 1e-3 * thr || *nz && c.norm() < 1e3 * thr {
                warnings.push(format!(
                    "projection {:e} on block {} is within three decades of the zero threshold",
                    c.norm(),
                    bp.block
                ));
            }
        }
    }

    let fstar = if iset.len() == 1 && spec.blocks[iset[0]].is_real() && regime != Regime::Small {
        Some(
            leading[0]
                .f
                .iter()
                .map(|z| z.re / factorial(gamma))
                .collect(),
        )
    } else {
        None
    };

    Ok(Classification {
        lambda1,
        mean_coeff,
        fhat: fhat.iter().copied().collect(),
        alpha,
        gamma,
        iset,
        leading,
        epsilon: lambda1 - alpha,
        regime,
        fstar,
        projections,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Statistic {
    /// `e^{−λ₁t}⟨f, X_t⟩ − ⟨f, φ̃⟩ W∞`
    CenteredRatio,
    /// `⟨f̂, X_t⟩`
    CenteredFunctional,
}

#[derive(Debug, Clone, Serialize)]
pub struct MartingaleSpec {
    pub block: usize,
    #[serde(serialize_with = "ser_complex")]
    pub eigenvalue: Complex64,
    #[serde(serialize_with = "ser_complex_vec_dv")]
    pub f: CVec,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind")]
pub enum LimitDescriptor {
    /// `√(variance · W∞) · N`
    GaussianMixture {
        variance: f64,
    },
    L2MartingaleLimit {
        martingales: Vec<MartingaleSpec>,
    },
    Degenerate,
}

#[derive(Debug, Clone, Serialize)]
pub struct SecondaryClt {
    /// Exponent of `e^{(λ₁/2 − ε)t}`.
    pub scale_exp: f64,
    pub varrho_sq: f64,
    /// `ϱ²/(λ₁ − 2ε)`
    pub variance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LimitLawPrediction {
    pub regime: Regime,
    /// Normalization is `t^{p_pow} e^{c_exp t}` applied to `statistic`.
    pub c_exp: f64,
    pub p_pow: f64,
    pub statistic: Statistic,
    pub limit: LimitDescriptor,
    pub secondary: Option<SecondaryClt>,
    /// Rate `κ` of the covariance kernel `e^{−κ|t−s|}` of the process limit.
    pub covariance_rate: Option<f64>,
    pub constants: LimitConstants,
    pub rho_sq: Option<RhoSq>,
    pub varrho_sq: Option<f64>,
    pub delta_sq: Option<Vec<f64>>,
    pub notes: Vec<String>,
}

pub fn predict(
    f: &DVector<f64>,
    mech: &Mechanism,
    spec: &SpectralData,
    cls: &Classification,
) -> Result<LimitLawPrediction> {
    let rebuilt = cls.fhat_vec() + &spec.phi * cls.mean_coeff;
    if rebuilt.len() != f.len() || (rebuilt - f).amax() > 1e-9 * f.amax().max(1.0) {
        return Err(Error::InvalidArgument(
            "classification does not belong to this test function".into(),
        ));
    }
    let constants = moments::limit_constants(mech, spec)?;
    let l1 = spec.lambda1;
    let mut notes = Vec::new();
    let mut out = LimitLawPrediction {
        regime: cls.regime,
        c_exp: l1 / 2.0,
        p_pow: 0.0,
        statistic: Statistic::CenteredRatio,
        limit: LimitDescriptor::Degenerate,
        secondary: None,
        covariance_rate: None,
        constants: constants.clone(),
        rho_sq: None,
        varrho_sq: None,
        delta_sq: None,
        notes: Vec::new(),
    };
    match cls.regime {
        Regime::Trivial => {
            let v = cls.mean_coeff.powi(2) * constants.sigma_phi_sq;
            out.limit = gaussian_or_degenerate(v);
            out.covariance_rate = Some(l1 / 2.0);
        }
        Regime::Small => {
            let rho = moments::rho_f_sq(mech, spec, cls)?;
            out.limit = gaussian_or_degenerate(rho.value);
            out.rho_sq = Some(rho);
        }
        Regime::Critical => {
            let varrho = moments::varrho_sq(mech, spec, cls)?;
            let g = cls.gamma as f64;
            out.p_pow = -(0.5 + g);
            out.limit = gaussian_or_degenerate(varrho / (1.0 + 2.0 * g));
            out.varrho_sq = Some(varrho);
            if !mech.validate().min_b_positive {
                notes.push("min b = 0: extinction hypothesis not certified; distributional limit is conditional".into());
            }
            if cls.is_oscillatory() {
                notes.push("leading set is not a single real block: fixed-f* hypothesis not satisfied; oscillatory variance constant used".into());
            }
        }
        Regime::Large => {
            out.c_exp = -cls.alpha;
            out.p_pow = -(cls.gamma as f64);
            out.statistic = Statistic::CenteredFunctional;
            out.limit = LimitDescriptor::L2MartingaleLimit {
                martingales: cls
                    .leading
                    .iter()
                    .map(|lf| MartingaleSpec {
                        block: lf.block,
                        eigenvalue: lf.eigenvalue,
                        f: lf.f.clone(),
                    })
                    .collect(),
            };
            let varrho = moments::varrho_sq(mech, spec, cls)?;
            let eps = cls.epsilon;
            out.varrho_sq = Some(varrho);
            out.secondary = Some(SecondaryClt {
                scale_exp: l1 / 2.0 - eps,
                varrho_sq: varrho,
                variance: varrho / (l1 - 2.0 * eps),
            });
            if let Some(fstar) = cls.fstar_vec() {
                out.delta_sq = Some(
                    moments::delta_sq(mech, spec, &fstar, eps)?
                        .iter()
                        .copied()
                        .collect(),
                );
            } else {
                notes.push(
                    "leading set is not a single real block: secondary limit stated per martingale"
                        .into(),
                );
            }
        }
    }
    out.notes = notes;
    Ok(out)
}

fn gaussian_or_degenerate(v: f64) -> LimitDescriptor {
    if v > 0.0 {
        LimitDescriptor::GaussianMixture { variance: v }
    } else {
        LimitDescriptor::Degenerate
    }
}

fn ser_complex<S: serde::Serializer>(z: &Complex64, s: S) -> std::result::Result<S::Ok, S::Error> {
    [z.re, z.im].serialize(s)
}

fn ser_complex_vec<S: serde::Serializer>(
    v: &[Complex64],
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    v.iter()
        .map(|z| [z.re, z.im])
        .collect::<Vec<_>>()
        .serialize(s)
}

fn ser_complex_vec_dv<S: serde::Serializer>(
    v: &CVec,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    ser_complex_vec(v.as_slice(), s)
}

/// JSON has no infinities; they are written as strings.
fn ser_extended<S: serde::Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if x.is_finite() {
        s.serialize_f64(*x)
    } else if *x > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::semigroup::spectral_decompose;

    fn setup(m: &Mechanism) -> SpectralData {
        spectral_decompose(&m.mean_matrix().generator).unwrap()
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn trichotomy_examples() {
        let f = v(&[1.0, -1.0]);
        let c = classify(&f, &setup(&fixtures::fix2())).unwrap();
        assert_eq!(c.regime, Regime::Small);
        assert!((c.alpha - 0.5).abs() < 1e-12 && (c.epsilon - 1.0).abs() < 1e-12 && c.gamma == 0);

        let c = classify(&f, &setup(&fixtures::fix3())).unwrap();
        assert_eq!(c.regime, Regime::Critical);
        assert!((c.alpha - 1.0).abs() < 1e-12 && c.gamma == 0);
        let fs = c.fstar_vec().unwrap();
        assert!((fs[0] - 1.0).abs() < 1e-12 && (fs[1] + 1.0).abs() < 1e-12);

        let c = classify(&f, &setup(&fixtures::fix4())).unwrap();
        assert_eq!(c.regime, Regime::Large);
        assert!((c.alpha - 1.5).abs() < 1e-12 && (c.epsilon - 0.5).abs() < 1e-12);
        assert_eq!(c.iset, vec![1]);
    }

    #[test]
    fn projection_examples() {
        let s = setup(&fixtures::fix2());
        let f = v(&[1.0, -1.0]).map(|x| Complex64::new(x, 0.0));
        let p = project(&f, &s);
        assert!(p.blocks[0].coeffs[0].norm() < 1e-14);
        assert!((p.blocks[1].coeffs[0].norm() - 2f64.sqrt()).abs() < 1e-12);
        assert!((p.reconstruct(&s) - &f).camax() < 1e-12);

        let phi = s.phi.map(|x| Complex64::new(x, 0.0));
        let p = project(&phi, &s);
        assert!((p.blocks[0].coeffs[0] - 1.0).norm() < 1e-14);
        assert!(!p.blocks[1].any_nonzero());

        let s5 = setup(&fixtures::fix5());
        let f = v(&[1.0, -1.0, 0.0]).map(|x| Complex64::new(x, 0.0));
        let p = project(&f, &s5);
        assert!(p.blocks[0].coeffs[0].norm() < 1e-14);
        assert!(p.blocks[1].coeffs[0].norm() > 0.1);
        assert!((p.blocks[1].coeffs[0] - p.blocks[2].coeffs[0].conj()).norm() < 1e-14);
        assert!((p.reconstruct(&s5) - &f).camax() < 1e-12);
    }

    #[test]
    fn phi_is_trivial() {
        let s = setup(&fixtures::fix2());
        let c = classify(&(&s.phi * 2.0), &s).unwrap();
        assert_eq!(c.regime, Regime::Trivial);
        assert_eq!(c.epsilon, f64::INFINITY);
        assert!((c.mean_coeff - 2.0).abs() < 1e-14);
    }

    #[test]
    fn oscillatory_critical() {
        let s = setup(&fixtures::fix5());
        let c = classify(&v(&[1.0, -1.0, 0.0]), &s).unwrap();
        assert_eq!(c.regime, Regime::Critical);
        assert_eq!(c.iset, vec![1, 2]);
        assert!(c.fstar.is_none());
        let (a, b) = (&c.leading[0].f, &c.leading[1].f);
        assert!((a.map(|z| z.conj()) - b).camax() < 1e-14);
    }

    #[test]
    fn defective_chain_degree() {
        let m = fixtures::defective();
        let s = setup(&m);
        // top of the length-2 chain projects onto both positions
        let top = s.blocks[1].right[1].map(|z| z.re);
        let c = classify(&top, &s).unwrap();
        assert_eq!(c.gamma, 1);
        assert_eq!(c.iset, vec![1]);
        let ev = s.blocks[1].right[0].map(|z| z.re);
        let c = classify(&ev, &s).unwrap();
        assert_eq!(c.gamma, 0);
    }

    #[test]
    fn semigroup_residual_decreases() {
        for (name, m) in fixtures::all() {
            let s = setup(&m);
            let f = DVector::from_fn(m.types(), |i, _| if i == 0 { 1.0 } else { -0.5 * i as f64 });
            let c = classify(&f, &s).unwrap();
            let r: Vec<f64> = [5.0, 10.0, 20.0]
                .iter()
                .map(|&t| c.semigroup_residual(&s, t))
                .collect();
            assert!(
                r[1] <= r[0] + 1e-12 && r[2] <= r[1] + 1e-12,
                "{name}: {r:?}"
            );
        }
    }

    #[test]
    fn prediction_examples() {
        let m = fixtures::fix1();
        let s = setup(&m);
        let p = predict(&s.phi, &m, &s, &classify(&s.phi, &s).unwrap()).unwrap();
        assert!(
            matches!(p.limit, LimitDescriptor::GaussianMixture { variance } if (variance - 1.0).abs() < 1e-10)
        );
        assert_eq!(p.covariance_rate, Some(0.5));

        let f = v(&[1.0, -1.0]);
        let m = fixtures::fix3();
        let s = setup(&m);
        let p = predict(&f, &m, &s, &classify(&f, &s).unwrap()).unwrap();
        assert_eq!((p.c_exp, p.p_pow), (1.0, -0.5));
        assert!(
            matches!(p.limit, LimitDescriptor::GaussianMixture { variance } if (variance - 1.0).abs() < 1e-10)
        );

        let m = fixtures::fix4();
        let s = setup(&m);
        let p = predict(&f, &m, &s, &classify(&f, &s).unwrap()).unwrap();
        assert!((p.c_exp + 1.5).abs() < 1e-12 && p.p_pow == 0.0);
        let sec = p.secondary.unwrap();
        assert!((sec.variance - 1.0).abs() < 1e-10);
        assert!(
            matches!(p.limit, LimitDescriptor::L2MartingaleLimit { ref martingales } if martingales.len() == 1)
        );
    }
}
