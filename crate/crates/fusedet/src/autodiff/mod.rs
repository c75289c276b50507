//! Dense-tensor reverse-mode automatic differentiation.
//!
//! Eager execution with a recorded tape: ops compute forward values
//! immediately and note what the reverse pass needs. Values are f64
//! throughout; the checkpoint format narrows parameter payloads to f32.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;

#[cfg(test)]
mod tests;

pub use kernels::BorderMode;
pub use optim::{OptimConfig, Optimizer};
pub use params::{Param, ParamStore};
pub use tape::{Tape, Tensor};
