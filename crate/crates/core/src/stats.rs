//! Sample statistics with standard errors, and a calibrated normality distance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample mean and its standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = mean(xs);
    let s2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (s2 / n).sqrt())
}

/// Unbiased sample variance and its large-sample standard error
/// `√((m₄ − s⁴)/n)`.
pub fn variance_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = mean(xs);
    let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    (m2 * n / (n - 1.0), ((m4 - m2 * m2).max(0.0) / n).sqrt())
}

/// Ratio of means `ū/v̄` with a delta-method standard error.
pub fn ratio_se(u: &[f64], v: &[f64]) -> (f64, f64) {
    let n = u.len() as f64;
    let (mu, mv) = (mean(u), mean(v));
    let r = mu / mv;
    let (mut suu, mut svv, mut suv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        suu += (a - mu).powi(2);
        svv += (b - mv).powi(2);
        suv += (a - mu) * (b - mv);
    }
    let d = n - 1.0;
    let var = (suu / d - 2.0 * r * suv / d + r * r * svv / d) / (n * mv * mv);
    (r, var.max(0.0).sqrt())
}

/// Pearson correlation with the normal-theory standard error `(1 − r²)/√(n − 1)`.
pub fn corr_se(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
        sxy += (a - mx) * (b - my);
    }
    let r = sxy / (sxx * syy).sqrt();
    (r, (1.0 - r * r) / (n - 1.0).sqrt())
}

/// Sample covariance (unbiased).
pub fn covariance(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / (x.len() as f64 - 1.0)
}

/// Kolmogorov distance between the empirical CDF of `xs` and the standard normal.
pub fn ks_normal(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let nd = Normal::standard();
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = nd.cdf(x);
            ((i + 1) as f64 / n - c).max(c - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

/// Null distribution of [`ks_normal`] for samples of size `n`.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct KsCalibration {
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub q99: f64,
    pub sd: f64,
    /// `1.5 · q99`
    pub threshold: f64,
}

pub const KS_NULL_SEED: u64 = 0x6b73_6e75_6c6c;
pub const KS_NULL_REPS: usize = 400;

/// Fixed-seed calibration against true normal samples of the same size.
pub fn ks_calibrate(n: usize) -> KsCalibration {
    let mut d: Vec<f64> = (0..KS_NULL_REPS as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(KS_NULL_SEED);
            rng.set_stream(r);
            let xs: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            ks_normal(&xs)
        })
        .collect();
    let (_, sd) = mean_se(&d);
    d.sort_by(f64::total_cmp);
    let q99 = d[((0.99 * KS_NULL_REPS as f64).ceil() as usize - 1).min(KS_NULL_REPS - 1)];
    KsCalibration {
        n,
        reps: KS_NULL_REPS,
        seed: KS_NULL_SEED,
        q99,
        sd: sd * (KS_NULL_REPS as f64).sqrt(),
        threshold: 1.5 * q99,
    }
}
