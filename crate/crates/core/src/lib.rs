//! Progressive blind-spot self-supervised denoising for low-dose CT.
//!
//! The crate is organised around the training pipeline:
//!
//! - [`data`]: DICOM ingestion, HU windowing, patch extraction and synthetic phantoms.
//! - [`stochastic`]: Bernoulli blind-spot masks and zero-mean Poisson+Gaussian noise.
//! - [`nn`]: a small CPU neural-network stack with U-Net backbones and Adam.
//! - [`trainer`]: the k-step progressive masked training loop.
//! - [`inference`]: multi-mask averaged inference with tiled stitching.
//! - [`metrics`]: PSNR, SSIM, RMSE and per-patient aggregation.
//! - [`experiment`]: configuration, sweeps, ablation tables and image grids.

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod image;
pub mod inference;
pub mod metrics;
pub mod nn;
pub mod stochastic;
pub mod trainer;

pub use error::{Error, Result};
pub use image::Image;
