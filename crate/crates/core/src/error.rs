use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("t = {t} is outside the trajectory span [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },

    /// The integrator could not make progress. Carries the last accepted state.
    #[error("solver failed at t = {t}, h = {h}: {reason}")]
    Solver { t: f64, h: f64, reason: String },

    #[error("sampler initialization failed: {0}")]
    Initialization(String),

    #[error("diagnostic unavailable: {0}")]
    Diagnostic(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
