use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = NeoError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NeoError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid FOV target: {0}")]
    InvalidTarget(String),
    #[error("pixel ({x}, {y}) outside {width}x{height} image")]
    PixelOutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("scene generation failed: {0}")]
    SceneGeneration(String),
    #[error("field fit diverged at iteration {iteration}: loss {loss}")]
    FitDiverged { iteration: usize, loss: f64 },
    #[error("outpainter training diverged at iteration {iteration}: loss {loss}")]
    TrainDiverged { iteration: usize, loss: f64 },
    #[error("architecture error: {0}")]
    Architecture(String),
    #[error("DoF spec violation: {0}")]
    SpecViolation(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("dataset error (pair {pair}): {message}")]
    Dataset { pair: String, message: String },
    #[error("stale artifact {path}: expected config hash {expected}, found {found} (use --force to override)")]
    StaleArtifact {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("missing artifact {0}; run the producing stage first")]
    MissingArtifact(PathBuf),
    #[error("stage {stage} failed")]
    Stage {
        stage: String,
        #[source]
        source: Box<NeoError>,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl NeoError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NeoError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        NeoError::Json {
            path: path.into(),
            source,
        }
    }
}
