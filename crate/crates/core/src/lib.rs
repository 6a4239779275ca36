//! Frame-level guidance for latent video diffusion and flow-matching samplers.
//!
//! The crate is organised bottom-up:
//!
//! - [`schedules`]: noise schedules and per-step sampler arithmetic
//! - [`toyvdm`]: a causal video autoencoder, a velocity denoiser, the
//!   moving-shapes dataset, and training loops
//! - [`slicing`]: frame→latent indexing, windowed decoding, locality and cost
//! - [`losses`]: frame-level guidance losses and proxy feature encoders
//! - [`vlo`]: latent update rules (deterministic and time-travel) and stage plans
//! - [`guidance`]: the guided sampler, gradient-propagation probes, SDEdit
//! - [`analysis`]: layout curves, ablations and figure bundles
//! - [`container`]: the PPM frame-directory video format

pub mod analysis;
pub mod container;
pub mod error;
pub mod guidance;
pub mod losses;
pub mod nn;
pub mod schedules;
pub mod slicing;
pub mod tensor;
pub mod toyvdm;
pub mod vlo;

pub use error::{Error, Result};
pub use schedules::{NoiseSchedule, ScheduleKind};
pub use tensor::{LatentTensor, VideoTensor};
pub use toyvdm::{CausalVae, Denoiser, ModelBundle};
