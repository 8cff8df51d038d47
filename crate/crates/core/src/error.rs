use alloc::string::String;
use alloc::vec::Vec;

/// Errors produced by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("stl parse error at byte {offset}: {message}")]
    Stl { offset: usize, message: String },

    #[error("mesh has no triangles")]
    EmptyMesh,

    #[error("triangle {triangle} references vertex {index} but mesh has {count} vertices")]
    BadTriangleIndex { triangle: usize, index: usize, count: usize },

    #[error("resolution mismatch: expected {expected}, got {actual}")]
    ResolutionMismatch { expected: usize, actual: usize },

    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch { what: &'static str, expected: usize, actual: usize },

    #[error("class id {class_id} out of range (num_classes = {num_classes})")]
    ClassOutOfRange { class_id: usize, num_classes: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid screw spec: {0}")]
    InvalidScrew(String),

    #[error("non-finite value encountered in {stage} at step {step}; {snapshot}")]
    NonFinite { stage: &'static str, step: usize, snapshot: String },

    /// Carries the best iterate reached before the divergence rule fired.
    #[error("optimization diverged at step {step} (loss {loss} > 10x initial {initial})")]
    Diverged { step: usize, loss: f64, initial: f64, best: Vec<f64>, best_loss: f64 },

    #[error("parameter set mismatch: {0}")]
    ParamMismatch(String),
}

pub type Result<T> = core::result::Result<T, Error>;
