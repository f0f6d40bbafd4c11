//! Dense linear algebra, activations, reverse-mode differentiation, Adam and
//! the finite-difference gradient oracle. Everything is `f64`.

mod matrix;
mod ops;
mod param;
mod rng;
pub mod special;
mod tape;

pub use matrix::{dot, Matrix};
pub use ops::{gelu, gelu_grad, layer_norm, relu, sigmoid, softmax_rows, softplus};
pub use param::{adam_step, finite_diff_gradient, max_relative_error, AdamState, ParamId, ParamStore, Parameter};
pub use rng::{derive_seed, SeededRng};
pub use tape::{Tape, Var};
