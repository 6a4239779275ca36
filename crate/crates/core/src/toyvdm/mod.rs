//! Small trainable video models and their synthetic data.

pub mod checkpoint;
pub mod dataset;
pub mod denoiser;
pub mod train;
pub mod vae;

pub use dataset::{generate_dataset, DatasetSpec, ShapeKind, SyntheticClipSpec};
pub use denoiser::{Denoiser, DenoiserConfig, DenoiserTape};
pub use train::{TrainConfig, TrainReport};
pub use vae::{frame_to_latent, latent_frames, num_latents, CausalVae, DecoderTape, VaeConfig};

/// The decoder, encoder and velocity predictor a guided run needs.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub vae: CausalVae,
    pub denoiser: Denoiser,
}
