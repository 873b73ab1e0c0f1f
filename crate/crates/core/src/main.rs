use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use branchlab::classifier::{
    classify, predict, Classification, LimitDescriptor, LimitLawPrediction,
};
use branchlab::model::Mechanism;
use branchlab::pipeline::{self, RunManifest, Suite, VerifyConfig};
use branchlab::semigroup::SpectralData;
use branchlab::simulator::{simulate_ensemble, SimConfig};
use branchlab::Error;
use clap::{Parser, Subcommand};
use nalgebra::DVector;
use num_complex::Complex64;
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "branchlab",
    version,
    about = "Analysis, simulation and Monte Carlo verification of multitype CSBPs"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct ModelArg {
    /// Model JSON file.
    #[arg(long)]
    model: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Structural checks, irreducibility and supercriticality.
    Validate {
        #[command(flatten)]
        m: ModelArg,
        #[arg(long)]
        json: bool,
    },
    /// Perron triplet and Jordan blocks of the mean generator.
    Spectrum {
        #[command(flatten)]
        m: ModelArg,
        #[arg(long)]
        json: bool,
    },
    /// Fluctuation regime of a test function.
    Classify {
        #[command(flatten)]
        m: ModelArg,
        /// Comma-separated reals, or complex entries written `re+imi`.
        #[arg(long, allow_hyphen_values = true)]
        f: String,
        #[arg(long)]
        json: bool,
    },
    /// Limit-law prediction with all constants, as JSON.
    Predict {
        #[command(flatten)]
        m: ModelArg,
        #[arg(long, allow_hyphen_values = true)]
        f: String,
    },
    /// Simulate an ensemble and write its CSV, metadata and manifest.
    Simulate {
        #[command(flatten)]
        m: ModelArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        replicas: usize,
        #[arg(long, default_value_t = pipeline::DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value_t = pipeline::DEFAULT_DT)]
        dt: f64,
        #[arg(long)]
        horizon: f64,
        /// Record times, comma-separated (default: the horizon only).
        #[arg(long)]
        record: Option<String>,
        /// Initial masses (default: unit mass on type 1).
        #[arg(long)]
        x0: Option<String>,
        #[arg(long, env = pipeline::WORKERS_ENV)]
        workers: Option<usize>,
    },
    /// Run a Monte Carlo experiment suite and write its results.
    Verify(VerifyArgs),
    /// Summarize result files from earlier verify runs.
    Report {
        /// Directories (or result files) to scan.
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(clap::Args)]
struct VerifyArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// simulator | lln | fclt | regime
    #[arg(long)]
    suite: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicas: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    x0: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    f: Option<String>,
    #[arg(long)]
    t_grid: Option<String>,
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    s_grid: Option<String>,
    #[arg(long)]
    laplace_time: Option<f64>,
    /// JSON file with verify parameters; flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Re-run the parameters recorded in a manifest (model path included).
    #[arg(long, conflicts_with = "config")]
    replay: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = pipeline::WORKERS_ENV)]
    workers: Option<usize>,
}

/// Failure of a run: usage/config problems exit 2, failed checks and
/// analysis refusals exit 1.
enum Failure {
    Usage(String, String),
    Check(String, String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let kind = format!("{e:?}")
            .split(['(', ' ', '{'])
            .next()
            .unwrap_or("Error")
            .to_string();
        match e {
            Error::Config(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::InvalidArgument(_)
            | Error::DimensionMismatch { .. }
            | Error::NonFinite(_)
            | Error::Structural(_) => Failure::Usage(kind, e.to_string()),
            _ => Failure::Check(kind, e.to_string()),
        }
    }
}

type Run = std::result::Result<bool, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Validate { m, json } => validate(&m.model, json),
        Cmd::Spectrum { m, json } => spectrum(&m.model, json),
        Cmd::Classify { m, f, json } => classify_cmd(&m.model, &f, json),
        Cmd::Predict { m, f } => predict_cmd(&m.model, &f),
        Cmd::Simulate {
            m,
            out,
            replicas,
            seed,
            dt,
            horizon,
            record,
            x0,
            workers,
        } => simulate_cmd(
            &m.model, &out, replicas, seed, dt, horizon, record, x0, workers,
        ),
        Cmd::Verify(args) => verify_cmd(args),
        Cmd::Report { paths, json } => report_cmd(&paths, json),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Usage(kind, msg)) => {
            eprintln!("{}", json!({ "error": kind, "message": msg, "exit": 2 }));
            ExitCode::from(2)
        }
        Err(Failure::Check(kind, msg)) => {
            eprintln!("{}", json!({ "error": kind, "message": msg, "exit": 1 }));
            ExitCode::from(1)
        }
    }
}

fn load(path: &Path) -> std::result::Result<Mechanism, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage("Io".into(), format!("{}: {e}", path.display())))?;
    Ok(Mechanism::from_json(&text)?)
}

fn parse_reals(s: &str) -> std::result::Result<Vec<f64>, Failure> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Failure::Usage("Parse".into(), format!("'{t}' is not a number")))
        })
        .collect()
}

fn parse_complex(token: &str) -> Option<Complex64> {
    let t = token.trim();
    let Some(body) = t.strip_suffix('i') else {
        return t.parse().ok().map(|re| Complex64::new(re, 0.0));
    };
    let bytes = body.as_bytes();
    let split = (1..bytes.len())
        .rev()
        .find(|&p| matches!(bytes[p], b'+' | b'-') && !matches!(bytes[p - 1], b'e' | b'E'));
    let (re, im) = match split {
        Some(p) => (body[..p].parse().ok()?, &body[p..]),
        None => (0.0, body),
    };
    let im = match im {
        "" | "+" => 1.0,
        "-" => -1.0,
        s => s.parse().ok()?,
    };
    Some(Complex64::new(re, im))
}

fn parse_f(s: &str) -> std::result::Result<Vec<Complex64>, Failure> {
    s.split(',')
        .map(|t| {
            parse_complex(t).ok_or_else(|| {
                Failure::Usage("Parse".into(), format!("'{t}' is not a real or re+imi"))
            })
        })
        .collect()
}

fn real_f(s: &str) -> std::result::Result<Vec<f64>, Failure> {
    let f = parse_f(s)?;
    if f.iter().any(|z| z.im != 0.0) {
        return Err(Failure::Usage(
            "InvalidArgument".into(),
            "this command needs a real test function".into(),
        ));
    }
    Ok(f.iter().map(|z| z.re).collect())
}

fn fmt_vec(v: impl IntoIterator<Item = f64>) -> String {
    let parts: Vec<String> = v.into_iter().map(|x| format!("{x}")).collect();
    format!("[{}]", parts.join(", "))
}

fn fmt_c(z: Complex64) -> String {
    if z.im == 0.0 {
        format!("{}", z.re)
    } else {
        format!("{}{:+}i", z.re, z.im)
    }
}

fn validate(path: &Path, as_json: bool) -> Run {
    let mech = load(path)?;
    let r = mech.validate();
    if as_json {
        println!("{}", serde_json::to_string_pretty(&r).map_err(Error::from)?);
    } else {
        println!("types={}", r.types);
        for c in &r.checks {
            let status = if c.passed { "ok" } else { "FAILED" };
            let kind = if c.hard { "hard" } else { "soft" };
            if c.detail.is_empty() {
                println!("check {} [{kind}]: {status}", c.name);
            } else {
                println!("check {} [{kind}]: {status} ({})", c.name, c.detail);
            }
        }
        println!("irreducible={}", r.irreducible);
        println!("lambda1={}", r.lambda1);
        println!("supercritical={}", r.supercritical);
        println!("min_b_positive={}", r.min_b_positive);
        for n in &r.notes {
            println!("note: {n}");
        }
    }
    Ok(r.structurally_valid())
}

fn spectrum_json(spec: &SpectralData) -> serde_json::Value {
    let cv = |v: &DVector<Complex64>| v.iter().map(|z| [z.re, z.im]).collect::<Vec<_>>();
    json!({
        "lambda1": spec.lambda1,
        "phi": spec.phi.as_slice(),
        "phitilde": spec.phitilde.as_slice(),
        "cluster_tol": spec.cluster_tol,
        "biorthonormality_defect": spec.biorthonormality_defect(),
        "chain_residual": spec.chain_residual(),
        "blocks": spec.blocks.iter().enumerate().map(|(k, b)| json!({
            "index": k,
            "eigenvalue": [b.eigenvalue.re, b.eigenvalue.im],
            "chain_lengths": b.chain_lengths,
            "conjugate_block": spec.conj_pair[k],
            "right": b.right.iter().map(cv).collect::<Vec<_>>(),
            "dual": b.dual.iter().map(cv).collect::<Vec<_>>(),
        })).collect::<Vec<_>>(),
    })
}

fn spectrum(path: &Path, as_json: bool) -> Run {
    let mech = load(path)?;
    let spec = pipeline::analysis(&mech)?;
    if as_json {
        println!(
            "{}",
            serde_json::to_string_pretty(&spectrum_json(&spec)).map_err(Error::from)?
        );
        return Ok(true);
    }
    println!("lambda1={}", spec.lambda1);
    println!("phi={}", fmt_vec(spec.phi.iter().copied()));
    println!("phitilde={}", fmt_vec(spec.phitilde.iter().copied()));
    for (k, b) in spec.blocks.iter().enumerate() {
        println!(
            "block {k}: eigenvalue={} size={} chains={:?}",
            fmt_c(b.eigenvalue),
            b.size(),
            b.chain_lengths
        );
    }
    println!(
        "biorthonormality_defect={:e}",
        spec.biorthonormality_defect()
    );
    println!("chain_residual={:e}", spec.chain_residual());
    Ok(true)
}

fn print_classification(label: &str, c: &Classification, p: &LimitLawPrediction) {
    if !label.is_empty() {
        println!("[{label}]");
    }
    println!("regime={}", c.regime);
    println!("lambda1={}", c.lambda1);
    println!("mean_coeff={}", c.mean_coeff);
    println!("fhat={}", fmt_vec(c.fhat.iter().copied()));
    println!("alpha={}", c.alpha);
    println!("gamma={}", c.gamma);
    println!("epsilon={}", c.epsilon);
    println!("leading_blocks={:?}", c.iset);
    if let Some(fs) = &c.fstar {
        println!("fstar={}", fmt_vec(fs.iter().copied()));
    }
    println!("scaling=t^{} e^({} t)", p.p_pow + 0.0, p.c_exp);
    match &p.limit {
        LimitDescriptor::GaussianMixture { variance } => {
            println!("limit=GaussianMixture variance={variance}")
        }
        LimitDescriptor::L2MartingaleLimit { martingales } => {
            println!("limit=L2MartingaleLimit martingales={}", martingales.len())
        }
        LimitDescriptor::Degenerate => println!("limit=Degenerate"),
    }
    if let Some(s) = &p.secondary {
        println!(
            "secondary: exponent={} varrho_sq={} variance={}",
            s.scale_exp, s.varrho_sq, s.variance
        );
    }
    if let Some(d) = &p.delta_sq {
        println!("delta_sq={}", fmt_vec(d.iter().copied()));
    }
    for w in c.warnings.iter().chain(&p.notes) {
        println!("note: {w}");
    }
}

/// Classification and prediction of the real and imaginary parts separately.
fn analyse_parts(
    mech: &Mechanism,
    spec: &SpectralData,
    f: &[Complex64],
) -> std::result::Result<Vec<(String, Classification, LimitLawPrediction)>, Failure> {
    let complex = f.iter().any(|z| z.im != 0.0);
    let mut parts = vec![("", f.iter().map(|z| z.re).collect::<Vec<f64>>())];
    if complex {
        parts[0].0 = "re";
        parts.push(("im", f.iter().map(|z| z.im).collect()));
    }
    let mut out = Vec::new();
    for (label, v) in parts {
        let fv = DVector::from_vec(v);
        let c = classify(&fv, spec)?;
        let p = predict(&fv, mech, spec, &c)?;
        out.push((label.to_string(), c, p));
    }
    Ok(out)
}

fn classify_cmd(path: &Path, f: &str, as_json: bool) -> Run {
    let mech = load(path)?;
    let spec = pipeline::analysis(&mech)?;
    let parts = analyse_parts(&mech, &spec, &parse_f(f)?)?;
    if as_json {
        let v: Vec<_> = parts
            .iter()
            .map(|(l, c, p)| json!({ "part": l, "classification": c, "prediction": p }))
            .collect();
        println!("{}", serde_json::to_string_pretty(&v).map_err(Error::from)?);
    } else {
        for (l, c, p) in &parts {
            print_classification(l, c, p);
        }
    }
    Ok(true)
}

fn predict_cmd(path: &Path, f: &str) -> Run {
    let mech = load(path)?;
    let spec = pipeline::analysis(&mech)?;
    let parts = analyse_parts(&mech, &spec, &parse_f(f)?)?;
    let v: Vec<_> = parts
        .iter()
        .map(|(l, _, p)| json!({ "part": l, "prediction": p }))
        .collect();
    let v = if v.len() == 1 {
        v[0]["prediction"].clone()
    } else {
        json!(v)
    };
    println!("{}", serde_json::to_string_pretty(&v).map_err(Error::from)?);
    Ok(true)
}

#[allow(clippy::too_many_arguments)]
fn simulate_cmd(
    path: &Path,
    out: &Path,
    replicas: usize,
    seed: u64,
    dt: f64,
    horizon: f64,
    record: Option<String>,
    x0: Option<String>,
    workers: Option<usize>,
) -> Run {
    let started = Instant::now();
    let mech = load(path)?;
    let report = mech.ensure_valid()?;
    // simulation is allowed for reducible or subcritical models; λ₁ and φ only weight W
    let spec =
        branchlab::semigroup::spectral_decompose(&mech.mean_matrix().generator).map_err(|e| {
            Failure::Check(
                "Spectral".into(),
                format!(
                    "simulation needs a Perron eigenvector for W (irreducible={}): {e}",
                    report.irreducible
                ),
            )
        })?;
    let k = mech.types();
    let x0 = match x0 {
        Some(s) => parse_reals(&s)?,
        None => {
            let mut v = vec![0.0; k];
            v[0] = 1.0;
            v
        }
    };
    let record = match record {
        Some(s) => parse_reals(&s)?,
        None => vec![horizon],
    };
    let workers = workers.unwrap_or_else(pipeline::default_workers);
    let cfg = SimConfig::new(x0, horizon, dt, record);
    let ens = simulate_ensemble(&mech, &spec, &cfg, replicas, seed, workers)?;
    let csv = pipeline::write_artifact(out, "ensemble.csv", &ens.to_csv())?;
    let meta = pipeline::write_artifact(
        out,
        "ensemble.meta.json",
        &serde_json::to_string_pretty(&ens.meta).map_err(Error::from)?,
    )?;
    let mut man = RunManifest::new("simulate", path, &mech);
    man.master_seed = Some(seed);
    man.workers = workers;
    man.parameters = json!({
        "replicas": replicas, "dt": dt, "horizon": horizon,
        "record_times": cfg.record_times, "x0": cfg.x0,
    });
    man.outputs = vec![csv.display().to_string(), meta.display().to_string()];
    man.wall_clock_seconds = started.elapsed().as_secs_f64();
    pipeline::write_artifact(
        out,
        "manifest.json",
        &serde_json::to_string_pretty(&man).map_err(Error::from)?,
    )?;
    println!(
        "wrote {} replicas to {} (clamp fraction {:.3e}, extinct {})",
        replicas,
        csv.display(),
        ens.meta.clamp_fraction,
        ens.meta.extinct
    );
    Ok(true)
}

fn verify_cmd(a: VerifyArgs) -> Run {
    let started = Instant::now();
    let (base, replay_model) = match (&a.config, &a.replay) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p).map_err(Error::from)?;
            (
                serde_json::from_str::<VerifyConfig>(&text).map_err(Error::from)?,
                None,
            )
        }
        (None, Some(p)) => {
            let text = std::fs::read_to_string(p).map_err(Error::from)?;
            let man: RunManifest = serde_json::from_str(&text).map_err(Error::from)?;
            (pipeline::config_from_manifest(&man)?, Some(man))
        }
        _ => (VerifyConfig::default(), None),
    };
    let flags = VerifyConfig {
        suite: a.suite.as_deref().map(str::parse::<Suite>).transpose()?,
        seed: a.seed,
        replicas: a.replicas,
        dt: a.dt,
        horizon: a.horizon,
        x0: a.x0.as_deref().map(parse_reals).transpose()?,
        f: a.f.as_deref().map(real_f).transpose()?,
        t_grid: a.t_grid.as_deref().map(parse_reals).transpose()?,
        t: a.t,
        s_grid: a.s_grid.as_deref().map(parse_reals).transpose()?,
        laplace_time: a.laplace_time,
    };
    let cfg = flags.or(base);
    let model_path = match (&a.model, &replay_model) {
        (Some(p), _) => p.clone(),
        (None, Some(m)) => PathBuf::from(&m.model_path),
        (None, None) => {
            return Err(Failure::Usage(
                "Config".into(),
                "--model is required".into(),
            ))
        }
    };
    let mech = load(&model_path)?;
    if let Some(m) = &replay_model {
        if m.model_hash != mech.content_hash() {
            return Err(Failure::Usage(
                "Config".into(),
                format!(
                    "model {} does not match the manifest hash",
                    model_path.display()
                ),
            ));
        }
    }
    let workers = a.workers.unwrap_or_else(pipeline::default_workers);
    let out = pipeline::verify(&mech, &cfg, workers)?;
    print!("{}", out.csv());
    for r in &out.results {
        for n in &r.notes {
            println!("# {n}");
        }
        println!(
            "# {}: {}",
            r.experiment,
            if r.pass { "PASS" } else { "FAIL" }
        );
    }
    if let Some(dir) = &a.out {
        let mut man = RunManifest::new("verify", &model_path, &mech);
        man.workers = workers;
        man.wall_clock_seconds = started.elapsed().as_secs_f64();
        pipeline::write_verify(dir, &out, man)?;
    }
    Ok(out.pass())
}

fn report_cmd(paths: &[PathBuf], as_json: bool) -> Run {
    let lines = pipeline::report(paths)?;
    if lines.is_empty() {
        return Err(Failure::Usage(
            "Config".into(),
            "no result files found".into(),
        ));
    }
    if as_json {
        println!(
            "{}",
            serde_json::to_string_pretty(&lines).map_err(Error::from)?
        );
    } else {
        println!(
            "{:<12} {:>7} {:>7}  {:<4}  source",
            "experiment", "gated", "passed", "pass"
        );
        for l in &lines {
            println!(
                "{:<12} {:>7} {:>7}  {:<4}  {}",
                l.experiment,
                l.gated,
                l.passed,
                if l.pass { "yes" } else { "no" },
                l.source
            );
        }
    }
    Ok(lines.iter().all(|l| l.pass))
}
