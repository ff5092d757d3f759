//! Latent fingerprint reconstruction with a four-map conditional GAN whose
//! discriminator is fused with features from a frozen Siamese verifier.
//!
//! Pipeline stages, in order: [`synthgen`] builds latent/clean training pairs,
//! [`mapextract`] derives the ridge/frequency/orientation/segmentation targets,
//! [`trainer`] fits the verifier and then the GAN defined in [`nets`] with the
//! losses in [`objectives`], and [`evalkit`] reconstructs and scores latents.

pub mod cli;
pub mod error;
pub mod evalkit;
pub mod image;
pub mod mapextract;
pub mod nets;
pub mod objectives;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
