//! Two-frame conditional diffusion transformer on a tiny tape autodiff.

pub mod check;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod task;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use task::Task;
pub use tensor::{ParameterStore, Rng, Tape, Tensor, Var};
