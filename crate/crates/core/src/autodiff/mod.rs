//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Forward operations are recorded on a [`Tape`]; [`Tape::backward`]
//! sweeps it once in reverse. Binary elementwise operations require equal
//! shapes; the only broadcasting forms are the explicit [`Var::add_bias`]
//! and [`Var::scale_rows`].

mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use tape::{Gradients, Tape, Var};
