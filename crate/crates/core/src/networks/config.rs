use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// How the content embedding and the style code are combined before decoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    #[default]
    Add,
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub num_points: usize,
    pub style_dim: usize,
    /// Width of the re-rendered Gaussians, in pixels.
    pub sigma_render: f64,
    /// Channel width per hourglass level; level `i` runs at `image_size / 2^(i+1)`.
    pub hourglass_channels: Vec<usize>,
    /// Channel width per stride-2 encoder stage. The last entry repeats for
    /// any remaining stages, so one list serves every image size.
    pub encoder_channels: Vec<usize>,
    pub use_skips: bool,
    pub fusion: Fusion,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full_scale()
    }
}

impl ModelConfig {
    /// 256x256 input, 30 landmarks, 128-d codes.
    pub fn full_scale() -> Self {
        Self {
            image_size: 256,
            num_points: 30,
            style_dim: 128,
            sigma_render: 4.0,
            hourglass_channels: vec![64, 128, 128, 128],
            encoder_channels: vec![64, 128],
            use_skips: true,
            fusion: Fusion::Add,
            init_std: 0.02,
        }
    }

    /// 64x64 input, 10 landmarks, 64-d codes, narrow layers for CPU training.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            num_points: 10,
            style_dim: 64,
            sigma_render: 4.0,
            hourglass_channels: vec![16, 32, 32, 32],
            encoder_channels: vec![16, 32, 64],
            use_skips: true,
            fusion: Fusion::Add,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if s < 16 || !s.is_power_of_two() {
            return Err(Error::config(format!("image_size must be a power of two >= 16, got {s}")));
        }
        if self.num_points == 0 {
            return Err(Error::config("num_points must be >= 1"));
        }
        if self.style_dim == 0 {
            return Err(Error::config("style_dim must be >= 1"));
        }
        if !(self.sigma_render > 0.0) {
            return Err(Error::config("sigma_render must be positive"));
        }
        if self.hourglass_channels.is_empty() || self.hourglass_channels.contains(&0) {
            return Err(Error::config("hourglass_channels must be non-empty and positive"));
        }
        if 1 << self.hourglass_channels.len() > s {
            return Err(Error::config("hourglass has more levels than the image can be halved"));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::config("encoder_channels must be non-empty and positive"));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::config("init_std must be positive"));
        }
        Ok(())
    }

    /// Number of stride-2 stages that take the image down to 1x1.
    pub fn num_stages(&self) -> usize {
        self.image_size.trailing_zeros() as usize
    }

    /// Channel width of encoder stage `i`.
    pub fn stage_channels(&self, i: usize) -> usize {
        let c = &self.encoder_channels;
        c[i.min(c.len() - 1)]
    }
}
