use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = MiaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unsupported schema_version {got} (expected {expected})")]
    SchemaVersion { expected: u32, got: u32 },
    #[error("{field} must be positive")]
    NonPositive { field: &'static str },
    #[error("{field} must be a positive finite real")]
    NonPositiveReal { field: &'static str },
    #[error("{field} not divisible by {by}")]
    NotDivisible {
        field: &'static str,
        by: &'static str,
    },
    #[error("{field} = {value} outside {range}")]
    OutOfRange {
        field: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("token_grid {got:?} does not match image_size / patch_size = {expected}")]
    GridMismatch { expected: usize, got: [usize; 2] },
}

#[derive(Debug, Error)]
pub enum MiaError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: String,
        got: String,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("non-finite loss at stage {stage}, epoch {epoch}, step {step} (tau {tau}, mean keep: block {block_keep:.3}, head {head_keep:.3}, token {token_keep:.3})")]
    NonFiniteLoss {
        stage: &'static str,
        epoch: usize,
        step: usize,
        tau: f64,
        block_keep: f64,
        head_keep: f64,
        token_keep: f64,
    },
    #[error("non-finite input gradient at attack step {step}")]
    NonFiniteGradient { step: usize },
    #[error("stage prerequisite violated: {0}")]
    Stage(String),
    #[error("dataset error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl MiaError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        MiaError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn shape(what: &'static str, expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Self {
        MiaError::Shape {
            what,
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        }
    }
}
