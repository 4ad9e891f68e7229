use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("ingest error: {0}")]
    Ingest(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("mask generation failed after {attempts} attempts (last coverage {last_coverage:.4})")]
    MaskGeneration { attempts: usize, last_coverage: f64 },
    #[error("merge error at layer `{layer}`: {reason}")]
    Merge { layer: String, reason: String },
    #[error("archive error: {0}")]
    Archive(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("training aborted: {0}")]
    Training(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("report parse error: {0}")]
    Report(String),
    #[error("stage `{stage}` failed{}: {source}", seed.map(|s| format!(" for seed {s}")).unwrap_or_default())]
    Stage {
        stage: String,
        seed: Option<u64>,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
