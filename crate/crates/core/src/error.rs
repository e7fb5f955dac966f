use std::path::PathBuf;

/// Error type shared by every stage of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported volume format for {0}")]
    UnsupportedFormat(PathBuf),

    #[error("unsupported data type {dtype} in {path}")]
    UnsupportedDataType { path: PathBuf, dtype: String },

    #[error("header declares {expected} scalars but payload holds {actual} ({path})")]
    SizeMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),

    #[error("degenerate clustering: volume is constant after windowing")]
    DegenerateClustering,

    #[error("lung segmentation is empty after component filtering")]
    EmptySegmentation,

    #[error("non-finite values during {0}")]
    Divergence(String),

    #[error("volume too small for {op}: dims {dims:?}")]
    TooSmall { op: &'static str, dims: [usize; 3] },

    #[error("correlation undefined: {0} image is constant")]
    ConstantImage(&'static str),

    #[error("landmark {index} at {point:?} lies outside volume dims {dims:?}")]
    LandmarkOutOfBounds {
        index: usize,
        point: [f32; 3],
        dims: [usize; 3],
    },

    #[error("landmark lists differ in length: {fixed} fixed vs {moving} moving")]
    LandmarkLengthMismatch { fixed: usize, moving: usize },

    #[error("need at least 2 cases for a deformation-impedance summary, got {0}")]
    TooFewCases(usize),

    #[error("weight tensor {name}: expected shape {expected:?}, got {actual:?}")]
    WeightShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("missing weight tensor {0}")]
    MissingWeight(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
