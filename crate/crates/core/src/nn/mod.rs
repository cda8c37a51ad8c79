//! Differentiable layer primitives and parameter storage.

pub mod checkpoint;
pub mod conv;
pub mod layers;
pub mod norm;
pub mod params;

pub use checkpoint::{Checkpoint, Precision};
pub use conv::{Conv1dGeometry, Conv2dGeometry, ConvTranspose1dGeometry};
pub use layers::{
    Conv1d, ConvNextBlock, ConvNextConfig, ConvSpec, ConvTranspose1d, FeedForward, Grn, LayerNorm,
    Mixer, Taps,
};
pub use norm::GrnPooling;
pub use params::{ParamInit, ParamStore, INIT_STD};
