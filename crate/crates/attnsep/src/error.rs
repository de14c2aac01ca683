use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("shape mismatch in {path}: expected {expected:?}, got {got:?}")]
    Shape {
        path: PathBuf,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("attention row of layer {layer} head {head} sums to {sum}")]
    AttnNotNormalized { layer: usize, head: usize, sum: f64 },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("selection covers every token; margins need at least one outside token")]
    NoOutsideTokens,

    #[error("rho0 = {requested} is infeasible; achievable range is [{}, {}]", -.max_abs, .max_abs)]
    Feasibility { requested: f64, max_abs: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing dependency: {0}")]
    Dependency(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the file system or of the on-disk layout.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_) | Error::Format { .. })
    }
}
