//! Small U-Net style segmentation network with exact analytic gradients.
//!
//! Two 2x2 max-pool levels, nearest-neighbour upsampling with skip
//! concatenation, ReLU everywhere except the 1x1 head, and optional
//! inverted dropout on the input of every convolution.

mod layers;
mod model;
mod params;

pub use model::{
    activation_pattern, backward, forward, forward_with_pattern, predict, BatchItem,
};
pub(crate) use model::{forward_tape, gradients_from_tapes, Tape};
pub use params::{architecture, Block, ConvSpec, Gradients, ModelParams, MODEL_MAGIC, NUM_CONVS};

use crate::error::Result;
use crate::scalar::Scalar;

/// He-normal initialization of the fixed architecture for `classes` outputs.
pub fn init_params<T: Scalar>(classes: usize, seed: u64) -> Result<ModelParams<T>> {
    ModelParams::init(classes, seed)
}
