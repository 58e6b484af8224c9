//! Quantization-aware training for spiking neural networks, including
//! quantization of the membrane state itself during training.
//!
//! Layers, bottom up:
//!
//! - [`tensor`]: dense tensors and a reverse-mode tape with custom backward rules.
//! - [`quantizer`]: uniform and threshold-centred level grids, straight-through quantize.
//! - [`neuron`]: leaky integrate-and-fire dynamics with surrogate spikes.
//! - [`model`]: layer stacks, weight fake-quantization, presets, PTQ, checkpoints.
//! - [`loss`] and [`optim`]: spike-count losses, accuracy, Adam, cosine schedule.
//! - [`data`]: IDX images, direct encoding, synthetic spike trains, event tensors.
//! - [`harness`]: experiment configs, training loop, run matrix, CSV reports.

pub mod data;
pub mod error;
pub mod harness;
pub mod loss;
pub mod model;
pub mod neuron;
pub mod optim;
pub mod quantizer;
pub mod tensor;

pub use error::{Error, ErrorCategory, Result};
