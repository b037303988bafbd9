use std::path::PathBuf;

use fetap_tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("degenerate event window [{t_start}, {t_end}] us")]
    DegenerateWindow { t_start: u64, t_end: u64 },
    #[error("ordering error: {0}")]
    Ordering(String),
    #[error("refinement produced non-finite values at iteration {iteration}")]
    Refinement { iteration: usize },
    #[error("training diverged at step {step}: {detail}")]
    Training { step: usize, detail: String },
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("slice {index}: {source}")]
    Slice { index: usize, source: Box<Error> },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn at_slice(self, index: usize) -> Self {
        match self {
            e @ Error::Slice { .. } => e,
            e => Error::Slice { index, source: Box::new(e) },
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), detail: detail.into() }
    }
}
