//! Tensor math, reverse-mode differentiation and the actor-critic network.

pub mod adam;
pub mod checkpoint;
pub mod divergence;
pub mod grad;
pub mod kernels;
pub mod network;
pub mod tape;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use divergence::{js_distance, kl_categorical, log_softmax, softmax};
pub use grad::{backward, GradientSet};
pub use network::{forward, forward_on_tape, init_params, ActorCriticOutput, BatchOutput, Layer, NetworkSpec, ParameterSet};
pub use tape::{Tape, Var};
