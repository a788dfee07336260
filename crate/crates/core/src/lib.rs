//! Predictive video VAE.
//!
//! A causal spatiotemporal autoencoder trained to reconstruct whole clips
//! from a randomly truncated prefix, plus the synthetic data, training loop
//! and latent-space diagnostics around it. Tensors are channels-last:
//! `(B, T, H, W, C)`.

pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod diagnostics;
pub mod diffusion;
pub mod error;
pub mod losses;
pub mod model;
pub mod nn;
pub mod norm;
pub mod optim;
pub mod params;
pub mod plot;
pub mod predictive;
pub mod rng;
pub mod tensor_io;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{build_model, LatentPosterior, LatentSequence, VaeConfig, VaeModel, VideoClip};
