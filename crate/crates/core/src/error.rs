use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("layout has no objects")]
    EmptyLayout,
    #[error("object {index}: bounding box {bbox:?} leaves the lattice")]
    BoxOutOfLattice { index: usize, bbox: [f64; 4] },
    #[error("object {index}: label {label} is not in the category set (size {size})")]
    UnknownLabel { index: usize, label: usize, size: usize },
    #[error("unknown category name {0:?}")]
    UnknownCategory(String),
    #[error("layout has {count} objects, at most {max} allowed")]
    TooManyObjects { count: usize, max: usize },
    #[error("layout has {count} objects, at least {min} required")]
    TooFewObjects { count: usize, min: usize },
    #[error("lattice {height}x{width} must have power-of-two sides")]
    BadLattice { height: usize, width: usize },
    #[error("invalid category set: {0}")]
    InvalidCategories(String),
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error("schema version {found} not supported (expected {expected})")]
    SchemaVersionMismatch { found: u64, expected: u64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate box: {0}")]
    DegenerateBox(String),
    #[error("sample {0} has no valid objects")]
    EmptyObjectSet(usize),
    #[error("index {index} out of range for {len} objects")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("checkpoint i/o: {0}")]
    CheckpointIo(String),
    #[error("malformed annotation: {0}")]
    MalformedAnnotation(String),
    #[error("degenerate metric input: {0}")]
    DegenerateInput(String),
    #[error("matrix square root did not converge")]
    NonConvergedSqrt,
    #[error("embedder failure: {0}")]
    EmbedderFailure(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Stable machine-readable name of the violated invariant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyLayout => "EmptyLayout",
            Error::BoxOutOfLattice { .. } => "BoxOutOfLattice",
            Error::UnknownLabel { .. } | Error::UnknownCategory(_) => "UnknownLabel",
            Error::TooManyObjects { .. } => "TooManyObjects",
            Error::TooFewObjects { .. } => "TooFewObjects",
            Error::BadLattice { .. } => "BadLattice",
            Error::InvalidCategories(_) => "InvalidCategories",
            Error::MalformedDocument(_) => "MalformedDocument",
            Error::SchemaVersionMismatch { .. } => "SchemaVersionMismatch",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::DegenerateBox(_) => "DegenerateBox",
            Error::EmptyObjectSet(_) => "EmptyObjectSet",
            Error::IndexOutOfRange { .. } => "IndexOutOfRange",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::CheckpointIo(_) => "CheckpointIOError",
            Error::MalformedAnnotation(_) => "MalformedAnnotation",
            Error::DegenerateInput(_) => "DegenerateInput",
            Error::NonConvergedSqrt => "NonConvergedSqrt",
            Error::EmbedderFailure(_) => "EmbedderFailure",
            Error::InsufficientData(_) => "InsufficientData",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Tensor(_) => "TensorError",
            Error::Io(_) => "IoError",
            Error::Json(_) => "MalformedDocument",
            Error::Image(_) => "ImageError",
        }
    }

    /// True for errors caused by the caller's layout or style input.
    pub fn is_invalid_input(&self) -> bool {
        matches!(
            self,
            Error::EmptyLayout
                | Error::BoxOutOfLattice { .. }
                | Error::UnknownLabel { .. }
                | Error::UnknownCategory(_)
                | Error::TooManyObjects { .. }
                | Error::TooFewObjects { .. }
                | Error::BadLattice { .. }
                | Error::MalformedDocument(_)
                | Error::SchemaVersionMismatch { .. }
                | Error::DimensionMismatch(_)
                | Error::IndexOutOfRange { .. }
                | Error::Json(_)
        )
    }
}
