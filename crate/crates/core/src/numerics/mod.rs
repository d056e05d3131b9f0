//! Dense f64 tensors, a reverse-mode autodiff tape, and optimizers.
//!
//! All tensors are row-major and at most rank 2; vectors are treated as a
//! single row wherever a matrix is expected. Every op validates shapes and
//! rejects non-finite outputs instead of propagating them, and every
//! differentiable op can be checked against central finite differences via
//! [`fdcheck`].

pub mod fdcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{Optimizer, OptimizerKind};
pub use params::{ParamId, ParamSet, Parameter};
pub use tape::{Session, Tape, ValueId};
pub use tensor::{NumericsError, Tensor};

/// Shorthand for results in this module.
pub type Result<T> = std::result::Result<T, NumericsError>;
