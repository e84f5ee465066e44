//! Double-precision multilayer perceptrons with hand-derived gradients,
//! an Adam optimizer and target-network soft updates.

mod adam;
mod mlp;

pub use adam::{AdamState, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPSILON};
pub use mlp::{
    soft_update, Activations, HiddenActivation, Layer, MlpParams, OutputActivation, ParamGrads,
};

/// Global-norm threshold applied to every gradient before an optimizer step.
pub const GRAD_CLIP_NORM: f64 = 10.0;
