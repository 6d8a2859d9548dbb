//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! The op vocabulary covers exactly what the rest of the crate needs; see
//! [`op_set`]. Tensors are immutable values once created, graphs are built
//! and executed on a single logical thread, and heavy kernels parallelize
//! only over independent output coordinates so results are bit-identical
//! across thread counts.

pub mod dtns;
mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use gradcheck::{check_gradients, op_check_graph, rel_err};
pub use graph::{op_set, supports_op, AddKind, Graph, NodeId, Op, OP_SET};
pub use tensor::{Dtype, Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("bad tensor shape: {detail}")]
    BadShape { detail: String },
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar output, got shape {shape}")]
    NonScalarOutput { shape: String },
    #[error("zero-norm row in {op}")]
    ZeroNormRow { op: &'static str },
    #[error("mask-weighted-pool slot sums to zero (image {image}, slot {slot})")]
    EmptyMaskPool { image: usize, slot: usize },
    #[error("invalid argument to {op}: {detail}")]
    BadArg { op: &'static str, detail: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad tensor file {path}: {reason}")]
    Format { path: String, reason: String },
}
