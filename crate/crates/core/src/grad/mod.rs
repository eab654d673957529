//! Reverse-mode differentiable arrays, seeded sampling and a
//! finite-difference oracle.

mod check;
mod graph;
mod rng;

pub use check::{finite_diff_check, finite_diff_flat, FdReport};
pub use graph::{broadcast_shapes, numel, Attrs, Graph, Op, Shape, Value};
pub use rng::{sample_normal, RngState, RNG_ALGORITHM};


#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GradError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch { op: &'static str, shapes: Vec<Shape> },
    #[error("unknown op tag `{0}`")]
    UnknownOp(String),
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity { op: String, expected: usize, got: usize },
    #[error("{op}: {reason}")]
    BadAttr { op: String, reason: String },
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Shape),
    #[error("function value is not finite ({0})")]
    NonFinite(f64),
}
