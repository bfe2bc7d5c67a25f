use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("analytic forward model not applicable ({0}); use numeric integration")]
    AnalyticDomain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{} voxel(s) failed; first: voxel {} ({})", .0.len(), .0[0].0, .0[0].1)]
    VoxelFailures(Vec<(usize, String)>),

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}, voxels {voxels:?}")]
    NonFiniteLoss { epoch: usize, batch: usize, voxels: Vec<usize> },

    #[error("non-finite optimizer update in parameter array {0}")]
    NonFiniteUpdate(usize),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("protocol has no b=0 acquisitions; cannot define the noise level")]
    NoB0,

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
