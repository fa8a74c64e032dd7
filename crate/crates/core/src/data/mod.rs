//! Annotation, feature and split files, corpus assembly and synthetic corpora.

mod annotations;
mod corpus;
mod mcnf;
mod synthetic;

pub use annotations::{
    load_annotations, parse_annotations, write_annotations, AnnotationRecord, IngestReport, KeyAliases,
    DEFAULT_NUM_SEGMENTS, SEGMENT_SECONDS,
};
pub use corpus::{
    read_index, read_splits, write_index, write_splits, Corpus, CorpusPaths, IndexEntry, Split,
};
pub use mcnf::{read_features, write_features, FEATURE_MAGIC, FEATURE_VERSION};
pub use synthetic::{generate_synthetic, is_positional, SyntheticSpec, SyntheticSummary};

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::features::FeatureError;
use crate::language::LanguageError;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: invalid JSON: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("annotation record {index}, field `{field}`: {reason}")]
    Record {
        index: usize,
        field: String,
        reason: String,
    },
    #[error("{}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
    #[error("{}: feature payload has {found} bytes, header needs {expected}", path.display())]
    Length {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{}: non-finite value at frame {row}, dim {col}", path.display())]
    NonFinite { path: PathBuf, row: usize, col: usize },
    #[error("split error: {0}")]
    Split(String),
    #[error("invalid synthetic corpus settings: {0}")]
    Synthetic(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Language(#[from] LanguageError),
}

pub(crate) fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}
