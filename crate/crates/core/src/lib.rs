//! Multi-view recurrent voxel reconstruction.
//!
//! Images are encoded by a 2D CNN, fused view by view in a grid of 3D
//! convolutional LSTM or GRU units, and decoded by a 3D CNN into per-voxel
//! occupancy probabilities.

pub mod carve;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod hash;
pub mod image;
pub mod layers;
pub mod manifest;
pub mod network;
pub mod objective;
pub mod params;
pub mod recurrence;
pub mod selfcheck;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod voxl;

pub use error::{Error, Result};
