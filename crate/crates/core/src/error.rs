use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    /// Coincident interpolation points or a singular coefficient system.
    #[error("degenerate cubic fit: {0}")]
    DegenerateFit(&'static str),

    /// Every particle weight underflowed to zero.
    #[error("particle weights are all zero")]
    WeightDegeneracy,

    #[error("particle filter degenerated for {0} consecutive steps")]
    PersistentDegeneracy(usize),

    #[error("metrics of an empty residual vector")]
    EmptyResiduals,

    #[error("unknown method `{0}` (expected bas, cibas, pf or pf-cibas)")]
    UnknownMethod(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(path: &str, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.to_string(),
            line,
            msg: msg.into(),
        }
    }
}
