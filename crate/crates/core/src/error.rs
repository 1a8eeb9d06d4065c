use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate knots: {0}")]
    DegenerateKnots(String),

    #[error("age {age} outside domain [{low}, {high}]")]
    Domain { age: f64, low: f64, high: f64 },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid value: {0}")]
    Value(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("age {age} beyond table range [0, {max}]")]
    Range { age: f64, max: f64 },

    #[error("initialization failed: {0}")]
    Initialization(String),

    #[error("did not converge: {0}")]
    NonConvergence(String),

    #[error("singular information matrix: {0}")]
    Rank(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code: 2 for bad input, 3 for numeric or convergence trouble.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::DegenerateKnots(_)
            | Error::Initialization(_)
            | Error::NonConvergence(_)
            | Error::Rank(_)
            | Error::UndefinedMetric(_)
            | Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}
