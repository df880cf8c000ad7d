//! Reverse-mode tape over matrix nodes plus per-point forward-mode
//! Jacobians of 2D → 3D maps.

mod jacobian;
mod mat;
mod tape;

pub use jacobian::{
    jacobian_2d_to_3d, normal_from_jacobian, singular_values_3x2, sym2_eigen, Dual2, DualPoint2,
    Jacobian32, DEGENERACY_FLOOR,
};
pub use mat::{gemm, gemm_into, Mat};
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AutodiffError {
    #[error("unsupported primitive `{0}`")]
    UnsupportedPrimitive(String),
    #[error("primitive `{primitive}` takes {expected} inputs, got {got}")]
    Arity {
        primitive: String,
        expected: usize,
        got: usize,
    },
    #[error("backward requires a scalar root, got a {rows}x{cols} node")]
    NonScalarRoot { rows: usize, cols: usize },
    #[error("degenerate jacobian: |f_u x f_v| = {cross_norm:e}")]
    DegenerateJacobian { cross_norm: f64 },
}
