//! Latent-space diffusion anomaly detection for parametric IC test data.
//!
//! Devices are compressed to a token grid by an autoencoder, a DiT-style
//! denoiser is trained on normal devices only, and a device is scored by how
//! badly the denoiser predicts the noise injected into its latent.

pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod dataio;
pub mod denoiser;
pub mod diffusion;
pub mod dit;
pub mod error;
pub mod flat_mlp;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod posenc;
pub mod rng;
pub mod scoring;
pub mod trainer;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::ModelBundle;
