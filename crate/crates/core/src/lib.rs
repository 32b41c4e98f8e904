// Negated float comparisons such as `!(x > 0.0)` are used on purpose: they
// also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod samplers;
pub mod skip_tuning;
pub mod table;
pub mod tensor;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};
