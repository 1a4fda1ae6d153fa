//! Scheduled augmentation distillation for PPO agents on a procedural pixel
//! gridworld.

pub mod augment;
pub mod distill;
pub mod env;
pub mod error;
pub mod harness;
pub mod nn;
pub mod ppo;
pub mod rng;
pub mod scheduler;
pub mod surgery;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
