//! Tensor substrate: dense `f32` arrays, forward kernels, a reverse-mode
//! tape, the optimizer and finite-difference checks.

pub mod gradcheck;
pub mod ops;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_indices, relative_error, FD_STEP};
pub use optim::{adamw_step, cosine_lr, AdamWConfig, AdamWState};
pub use params::{Bound, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
