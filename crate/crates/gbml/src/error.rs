//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("shape mismatch in `{op}`: lhs {lhs:?}, rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("`{op}` expects {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("backward root must be a scalar, got shape {got:?}")]
    NonScalarRoot { got: Vec<usize> },

    #[error("backward root does not require grad")]
    RootWithoutGrad,

    #[error("node belongs to a foreign graph (op `{op}`, graphs {expected} vs {got})")]
    ForeignGraph {
        op: &'static str,
        expected: u64,
        got: u64,
    },

    #[error("parameter length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("parameter entry mismatch at index {index}: expected `{expected}`, got `{got}`")]
    EntryMismatch {
        index: usize,
        expected: String,
        got: String,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("empty input to `{op}`")]
    EmptyInput { op: &'static str },

    #[error("mask does not cover parameters: {reason}")]
    MaskCoverage { reason: String },

    #[error("invalid configuration: {reason}")]
    InvalidConfig { reason: String },

    #[error("insufficient classes in split `{split}`: need {needed}, have {available}")]
    InsufficientClasses {
        split: String,
        needed: usize,
        available: usize,
    },

    #[error("negative noise std {got}")]
    NegativeNoiseStd { got: f64 },

    #[error("non-finite loss at inner step {step}")]
    NonFiniteLoss { step: usize },

    #[error("support gradient norm {norm:.3e} exceeds stability bound {bound:.3e} at inner step {step}")]
    GradientBlowup { step: usize, norm: f64, bound: f64 },

    #[error("non-finite result in hvp ({mode} mode)")]
    HvpNonFinite { mode: &'static str },

    #[error("task {task} in meta-batch failed: {source}")]
    TaskFailed {
        task: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("degenerate trajectory: {reason}")]
    DegenerateTrajectory { reason: String },

    #[error("non-finite gradient on the scan segment at t = {t}")]
    SegmentNonFinite { t: f64 },

    #[error("symmetric initialization required: {reason}")]
    NonSymmetricInit { reason: String },

    #[error("checkpoint format error: {reason}")]
    Checkpoint { reason: String },
}
