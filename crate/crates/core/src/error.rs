use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid landmark set: {0}")]
    InvalidLandmarks(String),
    #[error("corrupt data: {0}")]
    CorruptData(String),
    #[error("degenerate landmark set")]
    DegenerateLandmarks,
    #[error("degenerate inter-ocular distance")]
    DegenerateInterocular,
    #[error("landmark out of frame for mask generation")]
    LandmarkOutOfFrame,
    #[error("face exceeds croppable square")]
    FaceExceedsCrop,
    #[error("invalid boundary box: {0}")]
    InvalidBoundary(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Validation(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input rather than a failure while
    /// running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidLandmarks(_)
                | Error::CorruptData(_)
                | Error::DegenerateLandmarks
                | Error::DegenerateInterocular
                | Error::LandmarkOutOfFrame
                | Error::FaceExceedsCrop
                | Error::InvalidBoundary(_)
                | Error::InvalidImage(_)
                | Error::Config(_)
                | Error::Validation(_)
                | Error::Json(_)
        )
    }
}
