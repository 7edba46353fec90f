//! Differentiable dense linear algebra.

mod gradcheck;
mod linalg;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, DifferentiableGraph};
pub use linalg::{
    cholesky_factor, cholesky_solve, cholesky_with_jitter, logdet_from_factor, solve_triangular,
    DEFAULT_JITTER, MAX_JITTER,
};
pub use optim::Adam;
pub use params::{ParamStore, ParamVars};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
