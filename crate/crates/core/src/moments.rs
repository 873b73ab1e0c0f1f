//! Second moments and limit constants.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;

use crate::classifier::{factorial, Classification, Regime};
use crate::error::{Error, Result};
use crate::model::Mechanism;
use crate::quadrature::{integrate, QuadOptions};
use crate::semigroup::SpectralData;

type CVec = DVector<Complex64>;

#[derive(Debug, Clone, Serialize)]
pub struct LimitConstants {
    pub sigma_phi_sq: f64,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RhoSq {
    pub value: f64,
    /// `∫₀^∞ e^{−λ₁s}⟨ϑ[T_s f̂], φ̃⟩ ds`
    pub fluctuation: f64,
    /// `⟨f, φ̃⟩² σ²_φ`
    pub mean_part: f64,
    pub horizon: f64,
    pub tail_bound: f64,
}

fn vartheta_real(mech: &Mechanism, f: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(DVector::from_vec(
        mech.vartheta(f.as_slice(), f.as_slice())?,
    ))
}

fn vartheta_complex(mech: &Mechanism, f: &CVec, g: &CVec) -> Result<CVec> {
    Ok(DVector::from_vec(
        mech.vartheta(f.as_slice(), g.as_slice())?,
    ))
}

fn require_supercritical(spec: &SpectralData) -> Result<()> {
    if spec.lambda1 > 0.0 {
        Ok(())
    } else {
        Err(Error::NotSupercritical(spec.lambda1))
    }
}

/// Solve `(cI − B) x = v`.
fn resolvent(b: &DMatrix<f64>, c: Complex64, v: &CVec) -> Result<CVec> {
    let k = b.nrows();
    let m = DMatrix::<Complex64>::identity(k, k) * c - b.map(|x| Complex64::new(x, 0.0));
    m.lu()
        .solve(v)
        .ok_or_else(|| Error::InvalidArgument(format!("resolvent at {c} is singular")))
}

fn resolvent_real(b: &DMatrix<f64>, c: f64, v: &DVector<f64>) -> Result<DVector<f64>> {
    let k = b.nrows();
    let m = DMatrix::<f64>::identity(k, k) * c - b;
    m.lu()
        .solve(v)
        .ok_or_else(|| Error::InvalidArgument(format!("resolvent at {c} is singular")))
}

/// `⟨ϑ[φ], φ̃⟩ / λ₁`
pub fn sigma_phi_sq(mech: &Mechanism, spec: &SpectralData) -> Result<f64> {
    require_supercritical(spec)?;
    Ok(vartheta_real(mech, &spec.phi)?.dot(&spec.phitilde) / spec.lambda1)
}

/// `Θ = ∫₀^∞ e^{−2λ₁s} T_s ϑ[φ] ds = (2λ₁I − B)⁻¹ ϑ[φ]`
pub fn big_theta(mech: &Mechanism, spec: &SpectralData) -> Result<DVector<f64>> {
    require_supercritical(spec)?;
    resolvent_real(
        spec.generator(),
        2.0 * spec.lambda1,
        &vartheta_real(mech, &spec.phi)?,
    )
}

pub fn limit_constants(mech: &Mechanism, spec: &SpectralData) -> Result<LimitConstants> {
    Ok(LimitConstants {
        sigma_phi_sq: sigma_phi_sq(mech, spec)?,
        theta: big_theta(mech, spec)?.iter().copied().collect(),
    })
}

fn check_time(t: f64) -> Result<()> {
    if t.is_finite() && t >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "time must be finite and >= 0, got {t}"
        )))
    }
}

/// `Var_{δx}⟨f, X_t⟩ = ∫₀ᵗ T_{t−s}(ϑ[T_s f])(x) ds` for every starting type `x`.
pub fn variance_vector(
    mech: &Mechanism,
    spec: &SpectralData,
    f: &DVector<f64>,
    t: f64,
) -> Result<DVector<f64>> {
    variance_impl(mech, spec, f, t, false)
}

/// As [`variance_vector`] for `f` with `⟨f, φ̃⟩ = 0`, propagating `f` off the
/// Perron direction exactly.
pub fn centered_variance_vector(
    mech: &Mechanism,
    spec: &SpectralData,
    f: &DVector<f64>,
    t: f64,
) -> Result<DVector<f64>> {
    variance_impl(mech, spec, f, t, true)
}

fn variance_impl(
    mech: &Mechanism,
    spec: &SpectralData,
    f: &DVector<f64>,
    t: f64,
    centered: bool,
) -> Result<DVector<f64>> {
    check_time(t)?;
    if f.len() != spec.types() {
        return Err(Error::DimensionMismatch {
            expected: spec.types(),
            got: f.len(),
        });
    }
    if f.iter().all(|&v| v == 0.0) || t == 0.0 {
        return Ok(DVector::zeros(f.len()));
    }
    let q = integrate(
        |s| {
            let ts = if centered {
                spec.propagate_centered(s, f)
            } else {
                spec.propagate_real(s, f)
            };
            let th = vartheta_real(mech, &ts).expect("length checked");
            spec.propagate_real(t - s, &th)
        },
        0.0,
        t,
        QuadOptions::default(),
    )?;
    Ok(q.value.map(|v| v.max(0.0)))
}

pub fn variance_of_functional(
    mech: &Mechanism,
    spec: &SpectralData,
    f: &DVector<f64>,
    t: f64,
    x: usize,
) -> Result<f64> {
    if x >= spec.types() {
        return Err(Error::InvalidArgument(format!(
            "type index {x} out of range"
        )));
    }
    Ok(variance_vector(mech, spec, f, t)?[x])
}

/// `E_{δx}[⟨f, X_t⟩²] = (T_t f(x))² + Var_{δx}⟨f, X_t⟩`
pub fn second_moment(
    mech: &Mechanism,
    spec: &SpectralData,
    f: &DVector<f64>,
    t: f64,
) -> Result<DVector<f64>> {
    let mean = spec.propagate_real(t, f);
    Ok(mean.component_mul(&mean) + variance_vector(mech, spec, f, t)?)
}

/// `Var_{δx}[W^φ_t] = ∫₀ᵗ e^{−2λ₁s} T_s ϑ[φ] ds`, in closed resolvent form.
pub fn martingale_variance(mech: &Mechanism, spec: &SpectralData, t: f64) -> Result<DVector<f64>> {
    check_time(t)?;
    require_supercritical(spec)?;
    let b = spec.generator();
    let k = b.nrows();
    let shifted = DMatrix::identity(k, k) * (2.0 * spec.lambda1) - b;
    let decay = (-&shifted * t).exp();
    let v = vartheta_real(mech, &spec.phi)?;
    let rhs = (DMatrix::identity(k, k) - decay) * v;
    resolvent_real(b, 2.0 * spec.lambda1, &rhs)
}

/// For an eigenfunction `Bg = λg`, `E_{δx}|W_t|² − |g(x)|²` where
/// `W_t = e^{−λt}⟨g, X_t⟩`; `t = ∞` gives the variance of the limit.
/// Requires `2 Re λ > λ₁` when `t = ∞`.
pub fn eigen_martingale_variance(
    mech: &Mechanism,
    spec: &SpectralData,
    g: &CVec,
    lambda: Complex64,
    t: f64,
) -> Result<DVector<f64>> {
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "time must be >= 0, got {t}"
        )));
    }
    let b = spec.generator();
    let k = b.nrows();
    if g.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: g.len(),
        });
    }
    let c = 2.0 * lambda.re;
    if t.is_infinite() && c <= spec.lambda1 {
        return Err(Error::InvalidArgument(format!(
            "limit variance needs 2 Re λ > λ₁, got {c} <= {}",
            spec.lambda1
        )));
    }
    let th = vartheta_complex(mech, g, &g.map(|z| z.conj()))?.map(|z| z.re);
    let rhs = if t.is_infinite() {
        th
    } else {
        let decay = (-(DMatrix::identity(k, k) * c - b) * t).exp();
        (DMatrix::identity(k, k) - decay) * th
    };
    resolvent_real(b, c, &rhs)
}

pub fn martingale_variance_quadrature(
    mech: &Mechanism,
    spec: &SpectralData,
    t: f64,
) -> Result<DVector<f64>> {
    check_time(t)?;
    require_supercritical(spec)?;
    let v = vartheta_real(mech, &spec.phi)?;
    let q = integrate(
        |s| spec.propagate_real(s, &v) * (-2.0 * spec.lambda1 * s).exp(),
        0.0,
        t,
        QuadOptions::default(),
    )?;
    Ok(q.value)
}

/// Per-entry bound of `ϑ[g]` by `κ ‖g‖∞²`.
fn vartheta_bound(mech: &Mechanism) -> f64 {
    (0..mech.types())
        .map(|i| {
            2.0 * mech.b()[i]
                + mech
                    .jumps(i)
                    .iter()
                    .map(|a| a.rate * a.vector.iter().sum::<f64>().powi(2))
                    .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

/// `ρ²_f` for a Small (or Trivial) classification.
pub fn rho_f_sq(mech: &Mechanism, spec: &SpectralData, cls: &Classification) -> Result<RhoSq> {
    require_supercritical(spec)?;
    if !matches!(cls.regime, Regime::Small | Regime::Trivial) {
        return Err(Error::WrongRegime {
            expected: "Small".into(),
            got: cls.regime.to_string(),
        });
    }
    let l1 = spec.lambda1;
    let mean_part = cls.mean_coeff.powi(2) * sigma_phi_sq(mech, spec)?;
    if cls.regime == Regime::Trivial {
        return Ok(RhoSq {
            value: mean_part,
            fluctuation: 0.0,
            mean_part,
            horizon: 0.0,
            tail_bound: 0.0,
        });
    }

    // ‖T_s f̂‖∞ ≤ P(s) e^{αs} with P(s) = Σ_l a_l s^l / l!
    let depth = spec
        .blocks
        .iter()
        .flat_map(|b| b.chain_lengths.iter().copied())
        .max()
        .unwrap_or(1);
    let mut a = vec![0.0; depth];
    for (bp, block) in cls.projections.blocks.iter().zip(&spec.blocks).skip(1) {
        for n in 0..block.size() {
            let norm = block.right[n].camax();
            for (l, al) in a.iter_mut().enumerate() {
                if let Some(m) = block.shift_in_chain(n, l) {
                    *al += norm * bp.coeffs[m].norm();
                }
            }
        }
    }
    let mut q = vec![0.0; 2 * depth - 1];
    for (l, al) in a.iter().enumerate() {
        for (l2, al2) in a.iter().enumerate() {
            q[l + l2] += al * al2 / (factorial(l) * factorial(l2));
        }
    }
    let beta = l1 - 2.0 * cls.alpha;
    let kappa = vartheta_bound(mech) * spec.phitilde.sum();
    let tail = |s: f64| -> f64 {
        let mut total = 0.0;
        for (m, qm) in q.iter().enumerate() {
            let mut inner = 0.0;
            for i in 0..=m {
                inner +=
                    factorial(m) / factorial(i) * s.powi(i as i32) / beta.powi((m + 1 - i) as i32);
            }
            total += qm * inner;
        }
        kappa * (-beta * s).exp() * total
    };
    let scale = kappa * cls.fhat_vec().amax().powi(2) / l1;
    let target = 1e-10 * scale.max(f64::MIN_POSITIVE);
    let mut horizon = 1.0 / beta;
    let mut bound = tail(horizon);
    while bound > target {
        horizon *= 1.5;
        bound = tail(horizon);
        if horizon > 1e6 / beta {
            return Err(Error::Quadrature {
                estimate: f64::NAN,
                error: bound,
            });
        }
    }

    let fhat = cls.fhat_vec();
    let phit = &spec.phitilde;
    let integral = integrate(
        |s| {
            let ts = spec.propagate_centered(s, &fhat);
            let v = vartheta_real(mech, &ts).expect("length checked").dot(phit);
            DVector::from_element(1, (-l1 * s).exp() * v)
        },
        0.0,
        horizon,
        QuadOptions {
            atol: target,
            ..Default::default()
        },
    )?;
    let fluctuation = integral.value[0];
    Ok(RhoSq {
        value: fluctuation + mean_part,
        fluctuation,
        mean_part,
        horizon,
        tail_bound: bound,
    })
}

/// `ϱ² = (γ!)⁻² Σ_{j∈𝕴} ⟨ϑ[F_j, conj F_j], φ̃⟩`
pub fn varrho_sq(mech: &Mechanism, spec: &SpectralData, cls: &Classification) -> Result<f64> {
    if !matches!(cls.regime, Regime::Critical | Regime::Large) {
        return Err(Error::WrongRegime {
            expected: "Critical or Large".into(),
            got: cls.regime.to_string(),
        });
    }
    let phit = &spec.phitilde;
    let mut total = 0.0;
    for lf in &cls.leading {
        let th = vartheta_complex(mech, &lf.f, &lf.f.map(|z| z.conj()))?;
        total += th
            .iter()
            .zip(phit.iter())
            .map(|(z, w)| z.re * w)
            .sum::<f64>();
    }
    Ok(total / factorial(cls.gamma).powi(2))
}

/// `δ²_{g*} = ∫₀^∞ e^{−2(λ₁−ε)s} T_s ϑ[g*] ds = (2(λ₁−ε)I − B)⁻¹ ϑ[g*]`
pub fn delta_sq(
    mech: &Mechanism,
    spec: &SpectralData,
    fstar: &DVector<f64>,
    eps: f64,
) -> Result<DVector<f64>> {
    require_supercritical(spec)?;
    if !(eps >= 0.0 && eps < spec.lambda1 / 2.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must lie in [0, lambda1/2) = [0, {}), got {eps}",
            spec.lambda1 / 2.0
        )));
    }
    resolvent_real(
        spec.generator(),
        2.0 * (spec.lambda1 - eps),
        &vartheta_real(mech, fstar)?,
    )
}

/// `Cov_{δx}(W^{(j)}_∞, conj W^{(k)}_∞) = ((λ_j + conj λ_k) I − B)⁻¹ ϑ[F_j, conj F_k]`
/// for every pair of leading blocks of a Large classification.
pub fn martingale_covariances(
    mech: &Mechanism,
    spec: &SpectralData,
    cls: &Classification,
) -> Result<Vec<Vec<CVec>>> {
    if cls.regime != Regime::Large {
        return Err(Error::WrongRegime {
            expected: "Large".into(),
            got: cls.regime.to_string(),
        });
    }
    cls.leading
        .iter()
        .map(|fj| {
            cls.leading
                .iter()
                .map(|fk| {
                    let th = vartheta_complex(mech, &fj.f, &fk.f.map(|z| z.conj()))?;
                    resolvent(spec.generator(), fj.eigenvalue + fk.eigenvalue.conj(), &th)
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct AsymptoteRow {
    pub t: f64,
    pub scaled: Vec<f64>,
    pub predicted: Vec<f64>,
    pub deviation: f64,
    pub rel_deviation: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AsymptoteTable {
    pub regime: Regime,
    pub description: String,
    pub rows: Vec<AsymptoteRow>,
    pub decreasing: bool,
}

/// Regime-scaled variance of the centered functional `⟨f̂, X_t⟩` against its
/// limit, per starting type (for Trivial `f = cφ`, of `⟨f, X_t⟩`).
pub fn variance_asymptote(
    mech: &Mechanism,
    spec: &SpectralData,
    cls: &Classification,
    t_grid: &[f64],
) -> Result<AsymptoteTable> {
    require_supercritical(spec)?;
    let l1 = spec.lambda1;
    let k = spec.types();
    let fhat = cls.fhat_vec();
    let g = cls.gamma as f64;
    let (description, functional) = match cls.regime {
        Regime::Trivial => (
            "e^{-2 l1 t} Var<f,X_t> -> c^2 Theta(x)",
            &spec.phi * cls.mean_coeff,
        ),
        Regime::Small => (
            "e^{-l1 t} Var<fhat,X_t> / phi(x) -> rho^2(fhat)",
            fhat.clone(),
        ),
        Regime::Critical => (
            "t^{-(1+2 gamma)} e^{-l1 t} Var<fhat,X_t> / phi(x) -> varrho^2/(1+2 gamma)",
            fhat.clone(),
        ),
        Regime::Large => (
            "t^{-2 gamma} e^{-2 alpha t} Var<fhat,X_t> -> Var of the martingale combination",
            fhat.clone(),
        ),
    };

    let theta = big_theta(mech, spec)?;
    let small_limit = if cls.regime == Regime::Small {
        Some(rho_f_sq(mech, spec, cls)?.fluctuation)
    } else {
        None
    };
    let critical_limit = if cls.regime == Regime::Critical {
        Some(varrho_sq(mech, spec, cls)? / (1.0 + 2.0 * g))
    } else {
        None
    };
    let covs = if cls.regime == Regime::Large {
        Some(martingale_covariances(mech, spec, cls)?)
    } else {
        None
    };
    let gfact = factorial(cls.gamma).powi(2);

    let mut rows = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let var = if cls.regime == Regime::Trivial {
            variance_vector(mech, spec, &functional, t)?
        } else {
            centered_variance_vector(mech, spec, &functional, t)?
        };
        let (scaled, predicted): (Vec<f64>, Vec<f64>) = match cls.regime {
            Regime::Trivial => (
                var.iter().map(|v| v * (-2.0 * l1 * t).exp()).collect(),
                theta.iter().map(|th| th * cls.mean_coeff.powi(2)).collect(),
            ),
            Regime::Small => (
                (0..k)
                    .map(|x| var[x] * (-l1 * t).exp() / spec.phi[x])
                    .collect(),
                vec![small_limit.unwrap(); k],
            ),
            Regime::Critical => (
                (0..k)
                    .map(|x| var[x] * (-l1 * t).exp() / t.powf(1.0 + 2.0 * g) / spec.phi[x])
                    .collect(),
                vec![critical_limit.unwrap(); k],
            ),
            Regime::Large => {
                let c = covs.as_ref().unwrap();
                let mut pred = vec![0.0; k];
                for (j, lj) in cls.leading.iter().enumerate() {
                    for (m, lm) in cls.leading.iter().enumerate() {
                        let phase =
                            Complex64::new(0.0, t * (lj.eigenvalue.im - lm.eigenvalue.im)).exp();
                        for (x, p) in pred.iter_mut().enumerate() {
                            *p += (phase * c[j][m][x]).re / gfact;
                        }
                    }
                }
                (
                    var.iter()
                        .map(|v| v * (-2.0 * cls.alpha * t).exp() / t.powf(2.0 * g))
                        .collect(),
                    pred,
                )
            }
        };
        let deviation = scaled
            .iter()
            .zip(&predicted)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let pmax = predicted.iter().map(|v| v.abs()).fold(0.0, f64::max);
        rows.push(AsymptoteRow {
            t,
            scaled,
            predicted,
            deviation,
            rel_deviation: if pmax > 0.0 {
                deviation / pmax
            } else {
                deviation
            },
        });
    }
    let decreasing = rows.windows(2).all(|w| w[1].deviation <= w[0].deviation);
    Ok(AsymptoteTable {
        regime: cls.regime,
        description: description.into(),
        rows,
        decreasing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::classify;
    use crate::fixtures;
    use crate::semigroup::spectral_decompose;

    fn setup(m: &Mechanism) -> SpectralData {
        spectral_decompose(&m.mean_matrix().generator).unwrap()
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn variance_examples() {
        let m = fixtures::fix1();
        let s = setup(&m);
        let var = variance_of_functional(&m, &s, &v(&[1.0]), 3.0, 0).unwrap();
        let exact = 3f64.exp() * 3f64.exp_m1();
        assert!(((var - exact) / exact).abs() < 1e-9);
        assert_eq!(
            variance_of_functional(&m, &s, &v(&[0.0]), 3.0, 0).unwrap(),
            0.0
        );
        let scaled = var * (-6f64).exp();
        assert!((scaled - 0.950_212_931_632_136).abs() < 1e-9);
    }

    #[test]
    fn theta_examples() {
        let m = fixtures::fix1();
        let s = setup(&m);
        assert!((big_theta(&m, &s).unwrap()[0] - 1.0).abs() < 1e-14);
        assert!((sigma_phi_sq(&m, &s).unwrap() - 1.0).abs() < 1e-14);
        for t in [0.5, 3.0] {
            let w = martingale_variance(&m, &s, t).unwrap()[0];
            assert!((w + (-t).exp_m1()).abs() < 1e-12);
        }

        let m = fixtures::fix6();
        let s = setup(&m);
        assert!((big_theta(&m, &s).unwrap()[0] - 0.5).abs() < 1e-14);
        assert!((sigma_phi_sq(&m, &s).unwrap() - 0.5).abs() < 1e-14);

        let m = fixtures::fix2();
        let s = setup(&m);
        let th = big_theta(&m, &s).unwrap();
        assert!((th[0] - 2.0 / 3.0).abs() < 1e-14 && (th[1] - 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn theta_pairs_to_sigma() {
        for (name, m) in fixtures::all() {
            let s = setup(&m);
            let lhs = big_theta(&m, &s).unwrap().dot(&s.phitilde);
            let rhs = sigma_phi_sq(&m, &s).unwrap();
            assert!((lhs - rhs).abs() < 1e-8 * rhs.max(1.0), "{name}");
        }
    }

    #[test]
    fn martingale_variance_resolvent_vs_quadrature() {
        for (name, m) in fixtures::all() {
            let s = setup(&m);
            let mut prev = DVector::zeros(m.types());
            let theta = big_theta(&m, &s).unwrap();
            for t in [0.5, 1.0, 3.0, 8.0] {
                let r = martingale_variance(&m, &s, t).unwrap();
                let q = martingale_variance_quadrature(&m, &s, t).unwrap();
                assert!((&r - &q).amax() <= 1e-8 * r.amax(), "{name} t={t}");
                assert!(r.iter().zip(prev.iter()).all(|(a, b)| a >= b));
                assert!(r
                    .iter()
                    .zip(theta.iter())
                    .all(|(a, b)| *a <= b * (1.0 + 1e-12)));
                prev = r;
            }
        }
    }

    #[test]
    fn eigen_martingale_variance_cases() {
        for (name, m) in fixtures::all() {
            let s = setup(&m);
            let phi = s.phi.map(|x| Complex64::new(x, 0.0));
            let l1 = Complex64::new(s.lambda1, 0.0);
            for t in [0.5, 3.0] {
                let a = eigen_martingale_variance(&m, &s, &phi, l1, t).unwrap();
                let b = martingale_variance(&m, &s, t).unwrap();
                assert!((&a - &b).amax() <= 1e-10 * b.amax(), "{name}");
            }
        }
        // FIX-4: g = (1, −1) has λ = 3/2, ϑ[g, ḡ] = (1, 1) and (3I − B)(1, 1) = (1, 1)
        let m = fixtures::fix4();
        let s = setup(&m);
        let g = DVector::from_vec(vec![Complex64::new(1.0, 0.0), Complex64::new(-1.0, 0.0)]);
        let inf =
            eigen_martingale_variance(&m, &s, &g, Complex64::new(1.5, 0.0), f64::INFINITY).unwrap();
        assert!((inf - DVector::from_element(2, 1.0)).amax() < 1e-12);
        let at2 = eigen_martingale_variance(&m, &s, &g, Complex64::new(1.5, 0.0), 2.0).unwrap();
        assert!((at2[0] - (1.0 - (-2.0f64).exp())).abs() < 1e-12);
        assert!(
            eigen_martingale_variance(&m, &s, &g, Complex64::new(0.5, 0.0), f64::INFINITY).is_err()
        );
    }

    #[test]
    fn rho_examples() {
        let m = fixtures::fix2();
        let s = setup(&m);
        let c = classify(&v(&[1.0, -1.0]), &s).unwrap();
        let r = rho_f_sq(&m, &s, &c).unwrap();
        assert!((r.value - 2.0).abs() < 1e-8, "{}", r.value);
        assert!(r.tail_bound < 1e-9);

        let c = classify(&s.phi, &s).unwrap();
        let r = rho_f_sq(&m, &s, &c).unwrap();
        assert!((r.value - sigma_phi_sq(&m, &s).unwrap()).abs() < 1e-14);

        let m = fixtures::fix1();
        let s = setup(&m);
        let c = classify(&v(&[1.0]), &s).unwrap();
        assert!((rho_f_sq(&m, &s, &c).unwrap().value - 1.0).abs() < 1e-14);

        let m = fixtures::fix3();
        let s = setup(&m);
        let c = classify(&v(&[1.0, -1.0]), &s).unwrap();
        assert!(matches!(
            rho_f_sq(&m, &s, &c),
            Err(Error::WrongRegime { .. })
        ));
    }

    #[test]
    fn varrho_and_delta_examples() {
        let f = v(&[1.0, -1.0]);
        let m = fixtures::fix3();
        let s = setup(&m);
        let c = classify(&f, &s).unwrap();
        assert!((varrho_sq(&m, &s, &c).unwrap() - 1.0).abs() < 1e-12);

        let m = fixtures::fix4();
        let s = setup(&m);
        let c = classify(&f, &s).unwrap();
        let d = delta_sq(&m, &s, &c.fstar_vec().unwrap(), c.epsilon).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-12 && (d[1] - 1.0).abs() < 1e-12);
        assert!(delta_sq(&m, &s, &f, 1.0).is_err());
        let cov = martingale_covariances(&m, &s, &c).unwrap();
        assert!((cov[0][0][0].re - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oscillatory_varrho() {
        // circulant eigenvectors (1, ω, ω²)/√3 give |F_i|² = |1 − ω|²/9 = 1/3 on
        // each of the two conjugate blocks, and ϑ[F, F̄] = 2b|F|² = |F|²
        let m = fixtures::fix5();
        let s = setup(&m);
        let c = classify(&v(&[1.0, -1.0, 0.0]), &s).unwrap();
        assert!((varrho_sq(&m, &s, &c).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn variance_is_exact_on_fix3() {
        let m = fixtures::fix3();
        let s = setup(&m);
        let f = v(&[1.0, -1.0]);
        for t in [1.0, 5.0] {
            let var = variance_vector(&m, &s, &f, t).unwrap();
            let exact = t * (2.0 * t).exp();
            assert!(((var[0] - exact) / exact).abs() < 1e-9);
        }
    }
}
