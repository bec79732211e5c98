//! Semantic-layout-driven photo/sketch synthesis.
//!
//! A small dense-tensor engine with reverse-mode differentiation backs a
//! layout-modulated generator, a patch discriminator, region-wise graph
//! losses, and an alternating two-direction training schedule. Evaluation
//! uses SSIM, FSIM, and a Fréchet distance over fixed feature embeddings.

pub mod cli;
pub mod cycletrain;
pub mod datagen;
pub mod error;
pub mod graphrepr;
pub mod layout;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod numerics;
pub mod workers;

pub use error::{Error, Result};
