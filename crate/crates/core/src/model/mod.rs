//! The dual-encoder VAE and its single-encoder baseline.

pub mod checkpoint;
pub mod config;
pub mod gaussian;
pub mod layers;
pub mod network;
pub mod params;
pub mod shuffle;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ModelKind};
pub use config::{ModelConfig, ParamCounts};
pub use gaussian::{standard_normal, DiagonalGaussian};
pub use layers::Mask;
pub use network::{Batch, DualOutput, DualVae, Noise, VanillaOutput, VanillaVae};
pub use params::ParamStore;
pub use shuffle::shuffle_segments;
