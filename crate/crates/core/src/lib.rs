//! Incomplete multi-view clustering with per-view latent diffusion.
//!
//! Each view gets its own autoencoder and a time-conditioned denoiser in
//! latent space. Missing views are recovered by running the target view's
//! reverse diffusion chain from the latents of the views that are present.
//! Recovered and real latents are fused with attention weights and clustered
//! end-to-end by a shared softmax classifier trained with contrastive,
//! mutual-information and self-training objectives.

pub mod tape;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod kmeans;
pub mod metrics;
pub mod networks;
pub mod objectives;
pub mod rng;
pub mod training;

pub use error::{DcgError, Result};
