//! Verification suites and run manifests behind the command-line tool.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::classifier::{classify, predict, Regime};
use crate::error::{Error, Result};
use crate::fluctlab::{self, ExperimentResult};
use crate::model::Mechanism;
use crate::semigroup::{spectral_decompose, SpectralData};
use crate::simulator::{simulate_ensemble, EnsembleMeta, SimConfig};

pub const WORKERS_ENV: &str = "BRANCHLAB_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Simulator,
    Lln,
    Fclt,
    Regime,
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Simulator => "simulator",
            Suite::Lln => "lln",
            Suite::Fclt => "fclt",
            Suite::Regime => "regime",
        })
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simulator" => Ok(Suite::Simulator),
            "lln" => Ok(Suite::Lln),
            "fclt" => Ok(Suite::Fclt),
            "regime" => Ok(Suite::Regime),
            _ => Err(Error::Config(format!(
                "unknown suite '{s}' (simulator, lln, fclt, regime)"
            ))),
        }
    }
}

/// Parameters of a verify run. Unset fields take suite defaults; a config
/// file supplies values and command-line flags override them.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub suite: Option<Suite>,
    pub seed: Option<u64>,
    pub replicas: Option<usize>,
    pub dt: Option<f64>,
    pub horizon: Option<f64>,
    pub x0: Option<Vec<f64>>,
    pub f: Option<Vec<f64>>,
    pub t_grid: Option<Vec<f64>>,
    pub t: Option<f64>,
    pub s_grid: Option<Vec<f64>>,
    pub laplace_time: Option<f64>,
}

impl VerifyConfig {
    /// Fill unset fields from `other`.
    pub fn or(self, other: VerifyConfig) -> VerifyConfig {
        VerifyConfig {
            suite: self.suite.or(other.suite),
            seed: self.seed.or(other.seed),
            replicas: self.replicas.or(other.replicas),
            dt: self.dt.or(other.dt),
            horizon: self.horizon.or(other.horizon),
            x0: self.x0.or(other.x0),
            f: self.f.or(other.f),
            t_grid: self.t_grid.or(other.t_grid),
            t: self.t.or(other.t),
            s_grid: self.s_grid.or(other.s_grid),
            laplace_time: self.laplace_time.or(other.laplace_time),
        }
    }
}

/// Fully resolved parameters, echoed into the manifest.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedVerify {
    pub suite: Suite,
    pub seed: u64,
    pub replicas: usize,
    pub dt: f64,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub f: Vec<f64>,
    pub t_grid: Vec<f64>,
    pub t: Option<f64>,
    pub s_grid: Vec<f64>,
    pub laplace_time: Option<f64>,
    pub record_times: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyOutput {
    pub params: ResolvedVerify,
    pub ensemble: EnsembleMeta,
    pub results: Vec<ExperimentResult>,
}

impl VerifyOutput {
    pub fn pass(&self) -> bool {
        self.results.iter().all(|r| r.pass)
    }

    pub fn csv(&self) -> String {
        fluctlab::results_csv(&self.results)
    }
}

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_REPLICAS: usize = 20_000;
pub const DEFAULT_DT: f64 = 1e-3;
/// `λ₁(T − t)` used for default FCLT horizons, above the required minimum.
pub const FCLT_HORIZON_DECAY: f64 = 5.0;

/// Smallest multiple of `dt` that is at least `x`.
fn round_up(x: f64, dt: f64) -> f64 {
    ((x / dt) - 1e-9).ceil() * dt
}

pub fn default_workers() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&w| w > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

pub fn analysis(mech: &Mechanism) -> Result<SpectralData> {
    let report = mech.ensure_valid()?;
    if !report.irreducible {
        return Err(Error::Reducible(
            "analysis requires an irreducible mean matrix".into(),
        ));
    }
    let spec = spectral_decompose(&mech.mean_matrix().generator)?;
    if spec.lambda1 <= 0.0 {
        return Err(Error::NotSupercritical(spec.lambda1));
    }
    Ok(spec)
}

pub fn resolve(
    mech: &Mechanism,
    spec: &SpectralData,
    cfg: &VerifyConfig,
) -> Result<ResolvedVerify> {
    let k = mech.types();
    let suite = cfg
        .suite
        .ok_or_else(|| Error::Config("no suite given".into()))?;
    let dt = cfg.dt.unwrap_or(DEFAULT_DT);
    let l1 = spec.lambda1;
    let x0 = cfg.x0.clone().unwrap_or_else(|| {
        let mut v = vec![0.0; k];
        v[0] = 1.0;
        v
    });
    let f = match (&cfg.f, suite) {
        (Some(f), _) => f.clone(),
        (None, Suite::Regime) => {
            return Err(Error::Config(
                "the regime suite needs a test function f".into(),
            ))
        }
        (None, _) => vec![1.0; k],
    };
    if f.len() != k || x0.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: if f.len() != k { f.len() } else { x0.len() },
        });
    }
    let (t_grid, t, s_grid, laplace_time, min_horizon) = match suite {
        Suite::Simulator => {
            let grid = cfg.t_grid.clone().unwrap_or_else(|| vec![1.0, 2.0, 3.0]);
            let last = grid.last().copied().unwrap_or(0.0);
            let lt = cfg
                .laplace_time
                .or(grid.first().copied())
                .ok_or_else(|| Error::Config("empty time grid".into()))?;
            (grid, None, vec![], Some(lt), last)
        }
        Suite::Lln => {
            let grid = cfg.t_grid.clone().unwrap_or_else(|| vec![1.0, 2.0, 4.0]);
            let last = grid.last().copied().unwrap_or(0.0);
            (
                grid,
                None,
                vec![],
                None,
                last + fluctlab::HORIZON_DECAY / l1,
            )
        }
        Suite::Fclt => {
            let t = cfg.t.unwrap_or(4.0);
            let s = cfg.s_grid.clone().unwrap_or_else(|| vec![0.0, 0.5, 1.0]);
            let smax = s.last().copied().unwrap_or(0.0);
            (vec![], Some(t), s, None, t + smax + FCLT_HORIZON_DECAY / l1)
        }
        Suite::Regime => {
            let cls = classify(&DVector::from_column_slice(&f), spec)?;
            let grid = cfg.t_grid.clone().unwrap_or_else(|| match cls.regime {
                Regime::Large => vec![1.0, 2.0, 4.0],
                _ => vec![3.0, 4.0],
            });
            let last = grid.last().copied().unwrap_or(0.0);
            (
                grid,
                None,
                vec![],
                None,
                last + fluctlab::HORIZON_DECAY / l1,
            )
        }
    };
    let horizon = cfg.horizon.unwrap_or_else(|| round_up(min_horizon, dt));
    let mut record: Vec<f64> = t_grid.clone();
    if let Some(t) = t {
        record.extend(s_grid.iter().map(|s| t + s));
    }
    if let Some(lt) = laplace_time {
        record.push(lt);
    }
    record.push(horizon);
    record.sort_by(f64::total_cmp);
    record.dedup_by(|a, b| (*a - *b).abs() < 0.5 * dt);
    Ok(ResolvedVerify {
        suite,
        seed: cfg.seed.unwrap_or(DEFAULT_SEED),
        replicas: cfg.replicas.unwrap_or(DEFAULT_REPLICAS),
        dt,
        horizon,
        x0,
        f,
        t_grid,
        t,
        s_grid,
        laplace_time,
        record_times: record,
    })
}

/// Simulate the ensemble a suite needs and run its experiment.
pub fn verify(mech: &Mechanism, cfg: &VerifyConfig, workers: usize) -> Result<VerifyOutput> {
    let spec = analysis(mech)?;
    let p = resolve(mech, &spec, cfg)?;
    let sim = SimConfig::new(p.x0.clone(), p.horizon, p.dt, p.record_times.clone());
    let ens = simulate_ensemble(mech, &spec, &sim, p.replicas, p.seed, workers)?;
    let result = match p.suite {
        Suite::Simulator => {
            fluctlab::simulator_experiment(mech, &spec, &ens, &p.f, p.laplace_time.unwrap())?
        }
        Suite::Lln => fluctlab::lln_experiment(mech, &spec, &p.f, &ens, &p.t_grid)?,
        Suite::Fclt => fluctlab::fclt_experiment(mech, &spec, &ens, p.t.unwrap(), &p.s_grid)?,
        Suite::Regime => {
            let fv = DVector::from_column_slice(&p.f);
            let cls = classify(&fv, &spec)?;
            let pred = predict(&fv, mech, &spec, &cls)?;
            fluctlab::regime_experiment(mech, &spec, &p.f, &pred, &ens, &p.t_grid)?
        }
    };
    Ok(VerifyOutput {
        params: p,
        ensemble: ens.meta,
        results: vec![result],
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub model_path: String,
    pub model_hash: String,
    pub master_seed: Option<u64>,
    pub workers: usize,
    pub parameters: serde_json::Value,
    pub outputs: Vec<String>,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn new(subcommand: &str, model_path: &Path, mech: &Mechanism) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            model_path: model_path.display().to_string(),
            model_hash: mech.content_hash(),
            master_seed: None,
            workers: 1,
            parameters: serde_json::Value::Null,
            outputs: Vec::new(),
            wall_clock_seconds: 0.0,
        }
    }
}

/// Recover the verify parameters echoed in a manifest.
pub fn config_from_manifest(manifest: &RunManifest) -> Result<VerifyConfig> {
    if manifest.subcommand != "verify" {
        return Err(Error::Config(format!(
            "manifest is for '{}', not verify",
            manifest.subcommand
        )));
    }
    let mut params = manifest.parameters.clone();
    if let Some(obj) = params.as_object_mut() {
        obj.remove("record_times");
    }
    Ok(serde_json::from_value(params)?)
}

/// Write `contents` to `dir/name` and return the path.
pub fn write_artifact(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, contents)?;
    Ok(path)
}

/// Write CSV, structured results and manifest for a verify run.
pub fn write_verify(
    dir: &Path,
    out: &VerifyOutput,
    mut manifest: RunManifest,
) -> Result<RunManifest> {
    let suite = out.params.suite.to_string();
    let csv = write_artifact(dir, &format!("{suite}.csv"), &out.csv())?;
    let json = write_artifact(
        dir,
        &format!("{suite}.json"),
        &serde_json::to_string_pretty(out)?,
    )?;
    manifest.master_seed = Some(out.params.seed);
    manifest.parameters = serde_json::to_value(&out.params)?;
    manifest.outputs = vec![csv.display().to_string(), json.display().to_string()];
    write_artifact(
        dir,
        "manifest.json",
        &serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportLine {
    pub source: String,
    pub experiment: String,
    pub gated: usize,
    pub passed: usize,
    pub pass: bool,
}

/// Summarize every verify result file (`*.json` with a `results` array) under `dirs`.
pub fn report(dirs: &[PathBuf]) -> Result<Vec<ReportLine>> {
    let mut lines = Vec::new();
    for dir in dirs {
        let mut files: Vec<PathBuf> = if dir.is_file() {
            vec![dir.clone()]
        } else {
            std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect()
        };
        files.sort();
        for file in files {
            let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&file)?)?;
            let Some(results) = v.get("results").and_then(|r| r.as_array()) else {
                continue;
            };
            for r in results {
                let rows = r
                    .get("rows")
                    .and_then(|x| x.as_array())
                    .cloned()
                    .unwrap_or_default();
                let gated: Vec<&serde_json::Value> = rows
                    .iter()
                    .filter(|x| x.get("gated") == Some(&serde_json::Value::Bool(true)))
                    .collect();
                let passed = gated
                    .iter()
                    .filter(|x| x.get("pass") == Some(&serde_json::Value::Bool(true)))
                    .count();
                lines.push(ReportLine {
                    source: file.display().to_string(),
                    experiment: r
                        .get("experiment")
                        .and_then(|x| x.as_str())
                        .unwrap_or("?")
                        .into(),
                    gated: gated.len(),
                    passed,
                    pass: r.get("pass").and_then(|x| x.as_bool()).unwrap_or(false),
                });
            }
        }
    }
    Ok(lines)
}
