use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("homography sampling produced degenerate transforms {attempts} times in a row")]
    DegenerateHomography { attempts: usize },

    #[error("homography is singular (|det| = {det:e})")]
    SingularHomography { det: f64 },

    #[error("point ({x}, {y}) maps to infinity")]
    PointAtInfinity { x: f64, y: f64 },

    #[error("insufficient overlap: {valid} valid correspondences, {required} required")]
    InsufficientOverlap { valid: usize, required: usize },

    #[error("unregistered modality `{0}`")]
    UnknownModality(String),

    #[error("unknown synthetic modality recipe `{0}`")]
    UnknownRecipe(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("registration failed: {0}")]
    Registration(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("non-finite loss at step {step}; state dumped to {}", dump.display())]
    NonFiniteLoss { step: usize, dump: PathBuf },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
