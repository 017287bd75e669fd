//! Differentiable-array substrate: tape, tensor ops, gradient checking.

pub mod gradcheck;
pub mod kernels;
mod tape;
pub mod value;

pub use gradcheck::grad_check;
pub use tape::{Gradients, Tape, Tensor};
pub use value::{median, sample_normal, sample_trunc_normal, seeded_rng, splitmix64, Value};
