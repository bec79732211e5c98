//! Layout-conditioned generator and conditional patch discriminator.

mod discriminator;
mod generator;
pub mod si;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::NormKind;

pub use discriminator::PatchDiscriminator;
pub use generator::{Generator, GeneratorOutput};
pub use si::{ConvLayer, SIModule, SIResBlock};

/// Channel cap as a multiple of `base_channels`.
pub const CHANNEL_CAP: usize = 8;

/// Architecture description stored next to every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub use_saliency: bool,
    pub image_size: usize,
    pub seed: u64,
    #[serde(default = "default_si_hidden")]
    pub si_hidden: usize,
    #[serde(default)]
    pub norm: NormKind,
}

fn default_si_hidden() -> usize {
    32
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 5,
            base_channels: 8,
            in_channels: 3,
            out_channels: 1,
            use_saliency: true,
            image_size: 64,
            seed: 0,
            si_hidden: default_si_hidden(),
            norm: NormKind::Instance,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("depth", self.depth),
            ("base_channels", self.base_channels),
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("image_size", self.image_size),
            ("si_hidden", self.si_hidden),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.depth > 12 {
            return Err(Error::config("depth", format!("{} exceeds 12", self.depth)));
        }
        let unit = 1usize << self.depth;
        if !self.image_size.is_multiple_of(unit) {
            return Err(Error::config(
                "image_size",
                format!("{} must be divisible by 2^depth = {unit}", self.image_size),
            ));
        }
        Ok(())
    }

    /// Output channels of each encoder stage: doubling from `base_channels`, capped.
    pub fn encoder_channels(&self) -> Vec<usize> {
        (0..self.depth)
            .map(|i| (self.base_channels << i.min(16)).min(self.base_channels * CHANNEL_CAP))
            .collect()
    }
}
