//! The U-shaped registration network.
//!
//! Moving and fixed images are stacked as two channels. Each encoder stage
//! halves the resolution with a stride-2 `2³` convolution, normalizes, and
//! applies a sparse graph attention block. A separable self-attention block
//! mixes the coarsest tokens. Each decoder stage upsamples trilinearly,
//! concatenates the matching encoder features (the raw input at full
//! resolution) and applies a `3³` convolution with GeLU. A zero-initialized
//! `3³` convolution predicts the displacement field, so an untrained model
//! is the identity transform.

mod config;
mod model;
mod train;
mod transform;

pub use config::{kv_lines, NetworkConfig, CONFIG_KEYS};
pub use model::{decoder_channels, RegistrationModel, INPUT_CHANNELS};
pub use train::{evaluate_loss, loss_tape, train, train_step, train_with, EpochLoss, TrainOptions, TrainPair};
pub use transform::{label_transform, spatial_transform, spatial_transform_tape};
