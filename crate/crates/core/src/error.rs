use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch on axis {axis}: expected {expected}, got {actual}")]
    ShapeMismatch {
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("spatial axis {axis} has size {size}, which is not divisible by {divisor}")]
    NotDivisible {
        axis: &'static str,
        size: usize,
        divisor: usize,
    },

    #[error("label {value} at voxel {index} is out of range for {num_classes} classes")]
    LabelOutOfRange {
        value: u16,
        index: usize,
        num_classes: usize,
    },

    #[error("invalid value: {0}")]
    InvalidArgument(String),

    #[error("unknown view `{0}` (expected axial, sagittal or coronal)")]
    UnknownView(String),

    #[error("class affinity matrix is all zero and cannot be normalized")]
    DegenerateAffinity,

    #[error("could not place {organs} non-overlapping ellipsoids after {attempts} attempts")]
    PlacementFailed { organs: usize, attempts: usize },

    #[error("non-finite loss at iteration {iteration} (case {case_id}): {breakdown}")]
    NonFiniteLoss {
        iteration: usize,
        case_id: String,
        breakdown: String,
    },

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("NIfTI error for {path}: {message}")]
    Nifti { path: PathBuf, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
