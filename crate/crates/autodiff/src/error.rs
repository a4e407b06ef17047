use thiserror::Error;

use crate::tape::Primitive;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("gradient requested of a non-scalar output of shape {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },

    #[error("unsupported primitive `{0}`")]
    UnsupportedPrimitive(String),

    #[error("primitive `{primitive}` expects {expected} arguments, got {got}")]
    Arity { primitive: Primitive, expected: usize, got: usize },

    #[error("primitive `{primitive}`: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { primitive: Primitive, lhs: (usize, usize), rhs: (usize, usize) },

    #[error("Hessian-vector product needs a tape recorded with higher_order = true")]
    FirstOrderTape,

    #[error("non-finite value produced by `{primitive}` at node {node}")]
    NonFinite { node: usize, primitive: Primitive },
}
