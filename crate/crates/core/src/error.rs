use std::path::PathBuf;
use std::time::Duration;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("face references vertex {index} but the mesh has {count} vertices")]
    IndexOutOfRange { index: usize, count: usize },

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("mesh is empty")]
    EmptyMesh,

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("missing required attribute: {0}")]
    MissingAttribute(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("image codec error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("painter timed out after {0:?}")]
    PainterTimeout(Duration),

    #[error("painter process exited with {code:?}: {stderr}")]
    PainterExit { code: Option<i32>, stderr: String },

    #[error("painter reported an error: {0}")]
    PainterReported(String),

    #[error("painting view {view} failed: {source}")]
    ViewFailed {
        view: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("denoiser failed at step {step}: {msg}")]
    Denoiser { step: usize, msg: String },

    #[error("fusion failed: {0}")]
    Fusion(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix square root did not converge: {0}")]
    MatrixSqrt(String),

    #[error("comparison graph is disconnected into components {0:?}")]
    Disconnected(Vec<Vec<String>>),

    #[error("missing render for view {0}")]
    MissingView(usize),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// True for painter-side failures, including a failed view wrapping one.
    pub fn is_painter_failure(&self) -> bool {
        match self {
            Error::PainterTimeout(_) | Error::PainterExit { .. } | Error::PainterReported(_) => {
                true
            }
            Error::ViewFailed { .. } => true,
            Error::Denoiser { .. } => true,
            _ => false,
        }
    }
}
