//! Coarse-to-fine monocular depth estimation for overhead imagery.
//!
//! The pipeline: a ViT-style coarse depth predictor trained with a
//! hierarchical median/MAD-normalized loss, followed by a few-step linear
//! blending refinement loop driven by a conditional U-Net, optionally in the
//! latent space of a small VAE. Ships with a deterministic synthetic-terrain
//! dataset generator, depth metrics, a two-stage trainer with k-fold
//! cross-validation, and a binary checkpoint format.

pub mod autodiff;
pub mod coarse;
pub mod depth;
pub mod error;
pub mod hdn;
pub mod nn;
pub mod optim;
#[cfg(any(test, feature = "oracle"))]
pub mod oracle;
pub mod plbr;
pub mod unet;
pub mod vae;

pub use error::{Error, Result};
