//! Guided multi-resolution latent diffusion.
//!
//! A frozen base denoiser (θ) samples a latent at the base size. Features
//! hooked from its attention blocks are upsampled to the target size and fed
//! to a second pass through the same backbone, together with the trainable
//! adapters (θ′): guidance fusion, time modulation and scale-aware
//! normalization. Every adapter output layer starts at zero, so a fresh θ′
//! reproduces the base model exactly.
//!
//! [`pipeline::Pipeline`] runs the full two-stage flow and
//! [`trainer::Trainer`] trains either parameter group.

pub mod ablation;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod image_io;
pub mod inr;
pub mod model;
pub mod modulation;
pub mod optim;
pub mod par;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
