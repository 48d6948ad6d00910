//! Small hand-written reverse-mode machinery: parameter buffers, dense MLPs
//! and Adam. Every backward pass in the crate composes these pieces.

mod adam;
pub mod mlp;
mod param;

pub use adam::{adam_step, AdamParams, AdamOutcome};
pub use mlp::{mlp_backward, mlp_forward, Activation, Mlp, MlpCache, MlpSpec, OutputActivation};
pub use param::{GradBuffer, ParamBuffer};
