//! Euler–Maruyama simulation of the multitype CSBP with compensated Poisson jumps.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Mechanism;
use crate::semigroup::SpectralData;

/// Tolerance (in steps) for a record time to count as lying on the time grid.
const GRID_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Serialize)]
pub struct SimConfig {
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub dt: f64,
    pub record_times: Vec<f64>,
    pub seed: u64,
    pub replica: u64,
}

impl SimConfig {
    pub fn new(x0: Vec<f64>, horizon: f64, dt: f64, record_times: Vec<f64>) -> Self {
        Self {
            x0,
            horizon,
            dt,
            record_times,
            seed: 0,
            replica: 0,
        }
    }

    /// Number of Euler steps and the step index of each record time.
    fn grid(&self, k: usize) -> Result<(usize, Vec<usize>)> {
        if self.x0.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: self.x0.len(),
            });
        }
        if !self.x0.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::Config("x0 must be finite and nonnegative".into()));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Config(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::Config(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        let steps = on_grid(self.horizon, self.dt).ok_or_else(|| {
            Error::Config(format!(
                "horizon {} is not a multiple of dt {}",
                self.horizon, self.dt
            ))
        })?;
        let mut idx = Vec::with_capacity(self.record_times.len());
        let mut prev = None;
        for &t in &self.record_times {
            if !(0.0..=self.horizon).contains(&t) {
                return Err(Error::Config(format!(
                    "record time {t} outside [0, {}]",
                    self.horizon
                )));
            }
            let i = on_grid(t, self.dt).ok_or_else(|| {
                Error::Config(format!(
                    "record time {t} is not a multiple of dt {}",
                    self.dt
                ))
            })?;
            if prev.is_some_and(|p| i <= p) {
                return Err(Error::Config(
                    "record times must be strictly increasing".into(),
                ));
            }
            prev = Some(i);
            idx.push(i);
        }
        Ok((steps, idx))
    }
}

fn on_grid(t: f64, dt: f64) -> Option<usize> {
    let n = (t / dt).round();
    ((t / dt - n).abs() <= GRID_TOL * n.max(1.0)).then_some(n as usize)
}

#[derive(Debug, Clone, Serialize)]
pub struct Trajectory {
    pub replica: u64,
    /// `X_t` at each record time.
    pub states: Vec<Vec<f64>>,
    /// `W^φ_t = e^{−λ₁t}⟨φ, X_t⟩` at each record time.
    pub w: Vec<f64>,
    pub extinction_time: Option<f64>,
    /// `X_T`
    pub final_state: Vec<f64>,
    /// `W^φ_T`, the proxy for the martingale limit.
    pub w_hat: f64,
    pub clamp_events: u64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One replica. The RNG stream is a function of `(cfg.seed, cfg.replica)` only.
pub fn simulate_path(mech: &Mechanism, spec: &SpectralData, cfg: &SimConfig) -> Result<Trajectory> {
    let k = mech.types();
    let (steps, rec_idx) = cfg.grid(k)?;
    let bt: DMatrix<f64> = mech.mean_matrix().generator.transpose();
    let phi: Vec<f64> = spec.phi.iter().copied().collect();
    let l1 = spec.lambda1;
    let b = mech.b();
    let dt = cfg.dt;
    let sdt = dt.sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(cfg.replica);

    let mut x = cfg.x0.clone();
    let mut next = vec![0.0; k];
    let mut states = Vec::with_capacity(rec_idx.len());
    let mut w = Vec::with_capacity(rec_idx.len());
    let mut rec = rec_idx.iter().peekable();
    let mut clamp_events = 0u64;
    let mut extinction_time = x.iter().all(|&v| v == 0.0).then_some(0.0);

    let record = |n: usize, x: &[f64], states: &mut Vec<Vec<f64>>, w: &mut Vec<f64>| {
        let t = n as f64 * dt;
        states.push(x.to_vec());
        w.push((-l1 * t).exp() * dot(&phi, x));
    };

    for n in 0..=steps {
        while rec.peek().is_some_and(|&&i| i == n) {
            record(n, &x, &mut states, &mut w);
            rec.next();
        }
        if n == steps {
            break;
        }
        if extinction_time.is_some() {
            // zero is a trap: remaining records are zero
            for &i in rec.by_ref() {
                record(i, &x, &mut states, &mut w);
            }
            break;
        }
        for i in 0..k {
            let drift: f64 = (0..k).map(|j| bt[(i, j)] * x[j]).sum();
            let z: f64 = rng.sample(StandardNormal);
            next[i] = x[i] + drift * dt + (2.0 * b[i] * x[i]).sqrt() * sdt * z;
        }
        for i in 0..k {
            if x[i] == 0.0 {
                continue;
            }
            for atom in mech.jumps(i) {
                let mean = x[i] * atom.rate * dt;
                let count = if mean > 0.0 {
                    Poisson::new(mean)
                        .map_err(|e| sim_error(cfg, n, dt, e.to_string()))?
                        .sample(&mut rng)
                } else {
                    0.0
                };
                for (nj, yj) in next.iter_mut().zip(&atom.vector) {
                    *nj += (count - mean) * yj;
                }
            }
        }
        for (xi, ni) in x.iter_mut().zip(&next) {
            if !ni.is_finite() {
                return Err(sim_error(
                    cfg,
                    n + 1,
                    dt,
                    format!("non-finite state {:?}", next),
                ));
            }
            if *ni < 0.0 {
                clamp_events += 1;
                *xi = 0.0;
            } else {
                *xi = *ni;
            }
        }
        if x.iter().all(|&v| v == 0.0) {
            extinction_time = Some((n + 1) as f64 * dt);
        }
    }

    let w_hat = (-l1 * steps as f64 * dt).exp() * dot(&phi, &x);
    Ok(Trajectory {
        replica: cfg.replica,
        states,
        w,
        extinction_time,
        final_state: x,
        w_hat,
        clamp_events,
    })
}

fn sim_error(cfg: &SimConfig, step: usize, dt: f64, detail: String) -> Error {
    Error::Simulation {
        replica: cfg.replica,
        step,
        time: step as f64 * dt,
        detail,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleMeta {
    pub model_hash: String,
    pub master_seed: u64,
    pub replicas: usize,
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub dt: f64,
    pub record_times: Vec<f64>,
    pub lambda1: f64,
    pub phi: Vec<f64>,
    pub clamp_events: u64,
    /// Clamps per coordinate-step, a diagnostic that should be small.
    pub clamp_fraction: f64,
    pub extinct: usize,
    pub rng: String,
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub meta: EnsembleMeta,
    pub trajectories: Vec<Trajectory>,
}

/// `n` independent replicas; replica `r` uses stream `r` of a ChaCha8 generator
/// seeded by `master_seed`. The output does not depend on `workers`.
pub fn simulate_ensemble(
    mech: &Mechanism,
    spec: &SpectralData,
    cfg: &SimConfig,
    n: usize,
    master_seed: u64,
    workers: usize,
) -> Result<Ensemble> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "n_replicas must be at least 1".into(),
        ));
    }
    let (steps, _) = cfg.grid(mech.types())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let results: Vec<Result<Trajectory>> = pool.install(|| {
        (0..n as u64)
            .into_par_iter()
            .map(|r| {
                let c = SimConfig {
                    seed: master_seed,
                    replica: r,
                    ..cfg.clone()
                };
                simulate_path(mech, spec, &c)
            })
            .collect()
    });
    let mut trajectories = Vec::with_capacity(n);
    let mut failures = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(t) => trajectories.push(t),
            Err(e) => failures.push((r as u64, e.to_string())),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Ensemble(failures));
    }
    let clamp_events: u64 = trajectories.iter().map(|t| t.clamp_events).sum();
    let meta = EnsembleMeta {
        model_hash: mech.content_hash(),
        master_seed,
        replicas: n,
        x0: cfg.x0.clone(),
        horizon: cfg.horizon,
        dt: cfg.dt,
        record_times: cfg.record_times.clone(),
        lambda1: spec.lambda1,
        phi: spec.phi.iter().copied().collect(),
        clamp_events,
        clamp_fraction: clamp_events as f64 / (n as f64 * steps as f64 * mech.types() as f64),
        extinct: trajectories
            .iter()
            .filter(|t| t.extinction_time.is_some())
            .count(),
        rng: "ChaCha8 seed_from_u64(master_seed), stream = replica".into(),
    };
    Ok(Ensemble { meta, trajectories })
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn types(&self) -> usize {
        self.meta.x0.len()
    }

    /// Index of `t` among the record times.
    pub fn time_index(&self, t: f64) -> Result<usize> {
        self.meta
            .record_times
            .iter()
            .position(|&s| (s - t).abs() <= GRID_TOL * self.meta.dt.max(t))
            .ok_or_else(|| Error::InvalidArgument(format!("time {t} was not recorded")))
    }

    /// `⟨f, X_t⟩` per replica.
    pub fn functional(&self, f: &[f64], t: f64) -> Result<Vec<f64>> {
        if f.len() != self.types() {
            return Err(Error::DimensionMismatch {
                expected: self.types(),
                got: f.len(),
            });
        }
        let i = self.time_index(t)?;
        Ok(self
            .trajectories
            .iter()
            .map(|tr| dot(f, &tr.states[i]))
            .collect())
    }

    /// `⟨f, X_T⟩` per replica.
    pub fn functional_final(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.types() {
            return Err(Error::DimensionMismatch {
                expected: self.types(),
                got: f.len(),
            });
        }
        Ok(self
            .trajectories
            .iter()
            .map(|tr| dot(f, &tr.final_state))
            .collect())
    }

    /// `W^φ_t` per replica.
    pub fn w_at(&self, t: f64) -> Result<Vec<f64>> {
        let i = self.time_index(t)?;
        Ok(self.trajectories.iter().map(|tr| tr.w[i]).collect())
    }

    pub fn w_hat(&self) -> Vec<f64> {
        self.trajectories.iter().map(|tr| tr.w_hat).collect()
    }

    /// `replica,time,type_1..type_K,W`
    pub fn to_csv(&self) -> String {
        let k = self.types();
        let mut s = String::from("replica,time");
        for i in 1..=k {
            let _ = write!(s, ",type_{i}");
        }
        s.push_str(",W\n");
        for tr in &self.trajectories {
            for (j, &t) in self.meta.record_times.iter().enumerate() {
                let _ = write!(s, "{},{:.16e}", tr.replica, t);
                for v in &tr.states[j] {
                    let _ = write!(s, ",{v:.16e}");
                }
                let _ = writeln!(s, ",{:.16e}", tr.w[j]);
            }
        }
        s
    }
}
