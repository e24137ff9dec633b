//! Typed storage for embedding matrices, label vectors, evaluation pairs and
//! dataset manifests.
//!
//! Embeddings live in a small binary container (`CFRE` magic, little-endian,
//! row-major). Everything else is line-oriented text so that it diffs well.

mod container;
mod labels;
mod manifest;
mod pairs;

use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub use container::{
    read_embeddings, read_matrix, write_embeddings, write_matrix, Dtype, EmbeddingSet, MatrixFile,
    FORMAT_VERSION, HEADER_LEN, MAGIC,
};
pub use labels::{read_labels, write_labels, LabelVector};
pub use manifest::{read_splits, write_splits, DatasetManifest, Split};
pub use pairs::{read_pairs, write_pairs, EvalPair, EvalPairSet};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("bad magic")]
    BadMagic,
    #[error("format version mismatch: found {0}, expected 1")]
    VersionMismatch(u32),
    #[error("unsupported dtype code {0:#04x}")]
    BadDtype(u8),
    #[error("truncated payload")]
    TruncatedPayload,
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("reserved header bytes are not zero")]
    BadReserved,
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("invalid id {0:?}")]
    InvalidId(String),
    #[error("id is not valid utf-8")]
    InvalidUtf8,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("assignment index {index} out of range for k={k} (id {id:?})")]
    UnknownCategory { id: String, index: usize, k: usize },
    #[error("duplicate category name {0:?}")]
    DuplicateCategory(String),
    #[error("invalid category name {0:?}")]
    InvalidCategory(String),
    #[error("id {0:?} not found")]
    UnknownId(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("invalid pair: {0}")]
    InvalidPair(String),
    #[error("manifest: {0}")]
    Manifest(String),
}

impl StoreError {
    /// Stable short code for each failure class.
    pub fn code(&self) -> &'static str {
        match self {
            StoreError::Io { .. } => "io",
            StoreError::BadMagic => "bad-magic",
            StoreError::VersionMismatch(_) => "version-mismatch",
            StoreError::BadDtype(_) => "bad-dtype",
            StoreError::TruncatedPayload => "truncated-payload",
            StoreError::NonFinite { .. } => "non-finite",
            StoreError::TrailingBytes(_) => "trailing-bytes",
            StoreError::BadReserved => "bad-reserved",
            StoreError::DuplicateId(_) => "duplicate-id",
            StoreError::InvalidId(_) => "invalid-id",
            StoreError::InvalidUtf8 => "invalid-utf8",
            StoreError::Shape(_) => "shape",
            StoreError::UnknownCategory { .. } => "unknown-category",
            StoreError::DuplicateCategory(_) => "duplicate-category",
            StoreError::InvalidCategory(_) => "invalid-category",
            StoreError::UnknownId(_) => "unknown-id",
            StoreError::Parse { .. } => "parse",
            StoreError::InvalidPair(_) => "invalid-pair",
            StoreError::Manifest(_) => "manifest",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        StoreError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

/// Ids appear in whitespace-separated text files, so they must be non-empty
/// and free of whitespace.
pub(crate) fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id.chars().any(char::is_whitespace) {
        return Err(StoreError::InvalidId(id.to_string()));
    }
    Ok(())
}
