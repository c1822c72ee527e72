//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] records operations as they are evaluated; [`Graph::backward`]
//! then sweeps the tape once in reverse. Parameters live in a [`ParamStore`]
//! outside the tape, so a fresh graph can be built per sample and per step.

mod gemm;
mod gradcheck;
mod graph;
mod layers;
mod params;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{ConvGeom, Gradients, Graph, Var};
pub use layers::{BiLstm, Conv2d, Dense, GruCell, LstmCell};
pub use params::{adam_step, AdamConfig, Moments, ParamGrads, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data of length {len} does not fill shape {shape:?}")]
    BadData { shape: Vec<usize>, len: usize },
    #[error("axis {axis} out of range for rank-{rank} input to {op}")]
    AxisOutOfRange { op: &'static str, axis: usize, rank: usize },
    #[error("slice {start}..{start}+{len} exceeds extent {extent}")]
    SliceOutOfRange { start: usize, len: usize, extent: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u8, classes: usize },
    #[error("concat of zero tensors")]
    EmptyConcat,
    #[error("recurrent encoder given an empty sequence")]
    EmptySequence,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("gradient/parameter mismatch: {0}")]
    KeyMismatch(String),
    #[error("duplicate parameter name '{0}'")]
    DuplicateParam(String),
}
