//! # songdisc
//!
//! Whole-song bird vocalization embeddings from a dual-encoder,
//! capacity-constrained variational autoencoder.
//!
//! A global encoder maps a log-Mel spectrogram `[80 × T]` to a per-frame
//! latent `[d_G × T]` that carries temporal layout (note count, positions).
//! A local encoder sees the same spectrogram with its 32-frame segments
//! shuffled and produces one fixed-length vector `[d_L]`: the song
//! embedding. The decoder reconstructs the spectrogram from both.
//!
//! ## Modules
//!
//! - [`data`]: WAV ingestion, Mel transform, length filtering, splits by
//!   individual, the synthetic structured-song corpus, and the spectrogram
//!   container format.
//! - [`model`]: encoders, decoder, segment shuffling, reparameterization,
//!   checkpoints.
//! - [`objective`]: reconstruction NLL plus two capacity-constrained KL terms.
//! - [`train`]: the training loop, the vanilla single-encoder baseline,
//!   metrics logs and resumable state.
//! - [`analysis`]: embedding extraction, per-unit KL informativeness,
//!   compression and reconstruction probes.
//! - [`eval`]: dimension reduction + density clustering behind a backend
//!   trait, parameter search, NMI and projection plots.
//! - [`cli`]: the `songdisc` command-line front end.

pub mod analysis;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod io_util;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
