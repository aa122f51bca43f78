//! Dense `f64` tensors and a reverse-mode tape with the operations the
//! localization pipeline differentiates through.

pub mod gradcheck;
pub mod io;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use params::{Param, ParamSet};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Default guard added to the min-max denominator.
pub const DEFAULT_EPS: f64 = 1e-12;
