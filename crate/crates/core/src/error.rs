use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid label {value} (expected < {n_classes})")]
    InvalidLabel { value: u8, n_classes: usize },
    #[error("mask has no voxels in foreground classes {0:?}")]
    EmptyForeground(Vec<u8>),
    #[error("index error: {0}")]
    Index(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("stratification error: {0}")]
    Stratification(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("phantom generation error: {0}")]
    Generation(String),
    #[error("model state error: {0}")]
    State(String),
    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),
    #[error("slice prediction has no positive slice")]
    EmptyPrediction,
    #[error("transfer error on tensor `{tensor}`: {reason}")]
    Transfer { tensor: String, reason: String },
    #[error("triplet sampling error: {0}")]
    Sampling(String),
    #[error("metric input is empty")]
    EmptyInput,
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("summaries need at least 2 runs, got {0}")]
    InsufficientRuns(usize),
    #[error("orchestration error: {0}")]
    Orchestration(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
