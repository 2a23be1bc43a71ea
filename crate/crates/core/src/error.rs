use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while parsing IDX files.
#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{path}: bad magic number 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("{path}: truncated file, needed {needed} bytes but found {found}")]
    Truncated {
        path: PathBuf,
        needed: usize,
        found: usize,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// A configuration problem, located by key and (when known) line number.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { key: String, line: usize },
    #[error("line {line}: `{key}` has invalid value `{value}`: {reason}")]
    Type {
        key: String,
        line: usize,
        value: String,
        reason: String,
    },
    #[error("{}`{key}` out of range: {reason}", line_prefix(*.line))]
    Range {
        key: String,
        line: Option<usize>,
        reason: String,
    },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { key: String, line: usize },
    #[error("`{key}` refers to missing path {path}")]
    MissingPath { key: String, path: PathBuf },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn line_prefix(line: Option<usize>) -> String {
    match line {
        Some(l) => format!("line {l}: "),
        None => String::new(),
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("client {client} has no samples")]
    EmptyClient { client: usize },
    #[error("class {class} is absent from the evaluation data")]
    MissingClass { class: usize },
    #[error("local training diverged at round {round}, client {client}: loss = {loss}")]
    Divergence { round: usize, client: usize, loss: f64 },
    #[error(transparent)]
    Idx(#[from] IdxError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
