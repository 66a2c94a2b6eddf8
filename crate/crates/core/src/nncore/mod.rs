//! Dense networks, reverse-mode gradients, Adam, and target-network updates.

mod adam;
pub mod checkpoint;
mod matrix;
mod net;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use matrix::{dot, Matrix};
pub use net::{Activation, DenseLayer, DenseNet, Encoder, LayerNorm, LinearReadout};
pub use tape::{
    row_moments, sigmoid, softplus, weighted_bce_term, GradTape, Gradients, ParamSlot, Var, LAYER_NORM_EPS,
};
