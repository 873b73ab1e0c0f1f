//! Mean semigroup `T_t = exp(tB)`, Perron triplet, Jordan spectral data,
//! the uniform gauge `Δ_t` and the cumulant (log-Laplace) solver.

mod cumulant;
mod spectral;

pub use cumulant::{solve_cumulant, CumulantOptions, CumulantSolution};
pub use spectral::{
    spectral_decompose, SpectralBlock, SpectralData, CLUSTER_REL_TOL, RANK_REL_TOL,
};

use nalgebra::{DMatrix, DVector, Schur};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::model::is_irreducible;

/// `exp(tB)` by scaling and squaring with a degree-13 Padé approximant.
pub fn exp_generator(b: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    (b * t).exp()
}

/// `T_t f = exp(tB) f`.
pub fn apply_semigroup(b: &DMatrix<f64>, t: f64, f: &DVector<f64>) -> Result<DVector<f64>> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "time must be finite and >= 0, got {t}"
        )));
    }
    if f.len() != b.nrows() {
        return Err(Error::DimensionMismatch {
            expected: b.nrows(),
            got: f.len(),
        });
    }
    if !f.iter().chain(b.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("semigroup input".into()));
    }
    if t == 0.0 {
        return Ok(f.clone());
    }
    Ok(exp_generator(b, t) * f)
}

pub fn eigenvalues(b: &DMatrix<f64>) -> Vec<Complex64> {
    Schur::new(b.clone())
        .complex_eigenvalues()
        .iter()
        .copied()
        .collect()
}

/// Largest real part of the spectrum.
pub fn spectral_abscissa(b: &DMatrix<f64>) -> f64 {
    eigenvalues(b)
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Max-row-sum norm, used to scale every relative tolerance in this module.
pub(crate) fn norm_inf(b: &DMatrix<f64>) -> f64 {
    b.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct EigenTriplet {
    pub lambda1: f64,
    /// Right Perron vector, `max φ = 1`.
    pub phi: DVector<f64>,
    /// Left Perron vector, `⟨φ, φ̃⟩ = 1`.
    pub phitilde: DVector<f64>,
    pub supercritical: bool,
}

/// Perron eigentriplet of an irreducible Metzler matrix.
pub fn eigen_triplet(b: &DMatrix<f64>) -> Result<EigenTriplet> {
    let k = b.nrows();
    if !b.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("mean matrix".into()));
    }
    if !is_irreducible(b) {
        return Err(Error::Reducible(
            "the directed graph of positive off-diagonal entries is not strongly connected".into(),
        ));
    }
    let scale = norm_inf(b).max(1.0);
    let lambda = spectral_abscissa(b);

    let shifted = b - DMatrix::identity(k, k) * lambda;
    let mut phi = null_vector(&shifted);
    let mut phitilde = null_vector(&shifted.transpose());
    orient_positive(&mut phi);
    orient_positive(&mut phitilde);
    let min_entry = phi.min().min(phitilde.min());
    if min_entry <= 0.0 {
        return Err(Error::Spectral {
            cluster_tol: CLUSTER_REL_TOL * scale,
            detail: format!("Perron vector not strictly positive (min entry {min_entry:e})"),
        });
    }
    phi /= phi.max();
    phitilde /= phi.dot(&phitilde);
    // Rayleigh quotient with the two-sided vectors is accurate to O(eps²).
    let lambda1 = phitilde.dot(&(b * &phi)) / phitilde.dot(&phi);
    Ok(EigenTriplet {
        lambda1,
        phi,
        phitilde,
        supercritical: lambda1 > 0.0,
    })
}

fn null_vector(m: &DMatrix<f64>) -> DVector<f64> {
    let k = m.nrows();
    if k == 1 {
        return DVector::from_element(1, 1.0);
    }
    let svd = m.clone().svd(false, true);
    let vt = svd.v_t.expect("v_t requested");
    // singular values are sorted descending
    vt.row(k - 1).transpose()
}

fn orient_positive(v: &mut DVector<f64>) {
    if v.sum() < 0.0 {
        v.neg_mut();
    }
}

/// `Δ_t = sup_{x, f ∈ [0,1]^K} |φ(x)⁻¹ e^{−λ₁t} T_t f(x) − ⟨f, φ̃⟩|`.
///
/// Row by row, the supremum of a linear functional over the unit cube is the
/// larger of its positive and negative parts.
pub fn delta_t(spec: &SpectralData, b: &DMatrix<f64>, t: f64) -> Result<f64> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "time must be finite and >= 0, got {t}"
        )));
    }
    let k = b.nrows();
    let e = exp_generator(b, t) * (-spec.lambda1 * t).exp();
    let mut best = 0.0f64;
    for x in 0..k {
        let (mut pos, mut neg) = (0.0, 0.0);
        for j in 0..k {
            let m = e[(x, j)] / spec.phi[x] - spec.phitilde[j];
            if m > 0.0 {
                pos += m;
            } else {
                neg -= m;
            }
        }
        best = best.max(pos.max(neg));
    }
    Ok(best)
}
