use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("sample size too small: need at least {needed}, got {got}")]
    SampleSize { needed: usize, got: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (lr {lr:e}): {what}")]
    Numerical {
        epoch: usize,
        batch: usize,
        lr: f64,
        what: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numerical { .. } => 4,
            _ => 3,
        }
    }

    /// Stable machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::State(_) => "state",
            Error::MissingGrad(_) => "missing_grad",
            Error::UndefinedCorrelation(_) => "undefined_correlation",
            Error::SampleSize { .. } => "sample_size",
            Error::Numerical { .. } => "numerical",
            Error::Data(_) => "data",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
