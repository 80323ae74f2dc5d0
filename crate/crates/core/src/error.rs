use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("accept function `{name}` is not differentiable at r = {r}")]
    NonDifferentiable { name: &'static str, r: f64 },

    #[error("integration blew up on path {path} at step {step}")]
    Blowup { path: usize, step: usize },

    #[error("chart is degenerate at x = {x:?}")]
    DegenerateChart { x: Vec<f64> },

    #[error("projection did not converge after {iterations} iterations (gradient norm {residual:e})")]
    ProjectionFailure { iterations: usize, residual: f64 },

    #[error("manifold chain aborted at step {step}: {source}")]
    ManifoldStep {
        step: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("importance resampling failed: all weights zero after {retries} retries")]
    ResamplingFailure { retries: usize },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping `Context` wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            e => e,
        }
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        });
    }
    Ok(())
}
