//! Reverse-mode differentiation, parameters, and optimization.

pub mod gradcheck;
pub mod kernels;
mod ops;
pub mod optim;
pub mod params;
pub mod tape;

pub use gradcheck::{finite_diff_check, param_grad_check};
pub use optim::{AdamWConfig, AdamWState};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};

#[cfg(test)]
mod tests;
