//! Stochastic views of feature vectors: scale jitter, additive Gaussian noise
//! and coordinate masking.

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::keyed_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub gaussian_noise_sigma: f64,
    pub scale_jitter_range: [f64; 2],
    pub mask_fraction: f64,
    /// Extra key mixed into every augmentation seed.
    pub stream: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            gaussian_noise_sigma: 0.5,
            scale_jitter_range: [0.8, 1.2],
            mask_fraction: 0.1,
            stream: 0,
        }
    }
}

impl AugmentConfig {
    /// No-op augmentation.
    pub fn identity() -> Self {
        AugmentConfig {
            gaussian_noise_sigma: 0.0,
            scale_jitter_range: [1.0, 1.0],
            mask_fraction: 0.0,
            stream: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_jitter_range;
        let finite = self.gaussian_noise_sigma.is_finite() && lo.is_finite() && hi.is_finite();
        if !finite || self.gaussian_noise_sigma < 0.0 {
            return Err(Error::config(
                "augment: noise sigma must be finite and nonnegative",
            ));
        }
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::config(
                "augment: scale jitter range needs 0 < lo <= hi",
            ));
        }
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return Err(Error::config("augment: mask_fraction must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Same family with the noise level multiplied by `factor`.
    pub fn with_noise_scaled(&self, factor: f64) -> Self {
        AugmentConfig {
            gaussian_noise_sigma: self.gaussian_noise_sigma * factor,
            ..self.clone()
        }
    }
}

/// Scales `x` by a uniform draw from the jitter range, adds centered Gaussian
/// noise, then zeroes `floor(mask_fraction · dim)` coordinates chosen without
/// replacement.
pub fn augment(x: &[f64], config: &AugmentConfig, rng: &mut impl Rng) -> Vec<f64> {
    let [lo, hi] = config.scale_jitter_range;
    let scale = if lo < hi {
        rng.random_range(lo..=hi)
    } else {
        lo
    };
    let sigma = config.gaussian_noise_sigma;
    let mut out: Vec<f64> = x
        .iter()
        .map(|v| v * scale + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let masked = (config.mask_fraction * x.len() as f64).floor() as usize;
    if masked > 0 {
        for i in index::sample(rng, x.len(), masked) {
            out[i] = 0.0;
        }
    }
    out
}

/// Augmentation whose randomness depends only on `(seed, stream, keys)`.
pub fn augment_keyed(x: &[f64], config: &AugmentConfig, seed: u64, keys: &[u64]) -> Vec<f64> {
    let mut all = Vec::with_capacity(keys.len() + 1);
    all.push(config.stream);
    all.extend_from_slice(keys);
    augment(x, config, &mut keyed_rng(seed, &all))
}
