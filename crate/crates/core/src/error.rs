use dgf_grad::GradError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Grad(#[from] GradError),

    #[error("invalid config `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("{what}: expected length {expected}, got {actual}")]
    Length {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("csv line {line}: {message}")]
    Csv { line: u64, message: String },

    #[error("duplicate row for domain `{domain}`, series `{series}`, timestamp {timestamp} (line {line})")]
    DuplicateRow {
        domain: String,
        series: String,
        timestamp: i64,
        line: u64,
    },

    #[error("data: {0}")]
    Data(String),

    #[error("moving-average kernel must be odd, got {0}")]
    EvenKernel(usize),

    #[error("moving-average kernel {kernel} exceeds window length {len}")]
    KernelTooLarge { kernel: usize, len: usize },

    #[error("domain id {domain_id} is not one of the {num_domains} training domains")]
    UnknownDomain { domain_id: usize, num_domains: usize },

    #[error("latent split index floor({alpha} * {d_z}) = {index} leaves an empty part")]
    DegenerateSplit { alpha: f64, d_z: usize, index: usize },

    #[error("{0} is undefined for this input")]
    Undefined(&'static str),

    #[error("{stage}: non-finite loss at epoch {epoch}, batch {batch} ({terms})")]
    NonFiniteLoss {
        stage: &'static str,
        epoch: usize,
        batch: usize,
        terms: String,
    },

    #[error("training: {0}")]
    Training(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

/// Coarse grouping used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Training,
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config { .. } | Error::Toml(_) => ErrorKind::Usage,
            Error::NonFiniteLoss { .. } | Error::Training(_) | Error::Grad(_) => ErrorKind::Training,
            _ => ErrorKind::Data,
        }
    }
}

/// Lets model code run inside gradient-check closures, which speak the
/// engine's error type.
impl From<Error> for GradError {
    fn from(e: Error) -> Self {
        match e {
            Error::Grad(g) => g,
            other => GradError::Domain {
                op: "model",
                detail: other.to_string(),
            },
        }
    }
}
