//! Dense matrix primitives, the deterministic RNG and the AdamW step.

mod matrix;
mod optim;
mod real;
mod rng;

pub use matrix::{softmax, Matrix};
pub use optim::{adamw_step, AdamWConfig, AdamWState};
pub use real::Real;
pub use rng::Rng;
