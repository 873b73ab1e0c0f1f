use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("model config: {0}")]
    Config(String),

    #[error("structural validation failed: {}", .0.join("; "))]
    Structural(Vec<String>),

    #[error("length mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("mean matrix is reducible: {0}")]
    Reducible(String),

    #[error("not supercritical: principal eigenvalue {0} <= 0")]
    NotSupercritical(f64),

    #[error("spectral decomposition failed (cluster tolerance {cluster_tol:e}): {detail}")]
    Spectral { cluster_tol: f64, detail: String },

    #[error("cumulant ODE step size underflow at t = {t_reached}")]
    StepUnderflow { t_reached: f64 },

    #[error("quadrature tolerance not met: estimate {estimate:e}, error bound {error:e}")]
    Quadrature { estimate: f64, error: f64 },

    #[error("regime mismatch: operation requires {expected}, function is {got}")]
    WrongRegime { expected: String, got: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("replica {replica}: non-finite state at step {step} (t = {time}): {detail}")]
    Simulation {
        replica: u64,
        step: usize,
        time: f64,
        detail: String,
    },

    #[error("{} replica(s) failed, first: {}", .0.len(), .0.first().map(|(i, m)| format!("#{i}: {m}")).unwrap_or_default())]
    Ensemble(Vec<(u64, String)>),

    #[error("insufficient horizon: need T >= {need}, have {have}")]
    InsufficientHorizon { need: f64, have: f64 },

    #[error("too few surviving replicas for a distributional test: {survivors} < {required}")]
    LowPower { survivors: usize, required: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
