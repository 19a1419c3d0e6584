//! Dense tensors with reverse-mode differentiation, parameter storage,
//! checkpoints and a finite-difference gradient checker.

pub mod checkpoint;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_where, jitter, relative_error, ulp, CoordSample, GradCheckReport};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{NodeGrads, Tape, Var};
pub use tensor::{real, Real, Tensor};
