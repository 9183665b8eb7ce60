//! Synthetic degradation for LR/HR pair generation, and the pre-cleaning
//! pass applied to severely degraded inputs.
//!
//! The degradation is a single stage: Gaussian blur, bicubic downscale,
//! additive Gaussian noise, 8-bit quantization, then bicubic upscale back to
//! the HR size so the network sees input and output at the same resolution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{gaussian_blur, median3, resize_bicubic, Image};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationParams {
    /// Blur sigma drawn uniformly from `[lo, hi]` (HR pixels).
    pub blur_sigma: [f64; 2],
    pub scale: usize,
    /// Noise sigma drawn uniformly from `[lo, hi]` (in `[0, 1]` units).
    pub noise_sigma: [f64; 2],
    /// Quantize the low-resolution image to 8 bits.
    pub quantize: bool,
}

impl Default for DegradationParams {
    fn default() -> Self {
        Self {
            // Blur 0.2..3 px and noise 1..30 levels, a common blind-SR range.
            blur_sigma: [0.2, 3.0],
            scale: 4,
            noise_sigma: [1.0 / 255.0, 30.0 / 255.0],
            quantize: true,
        }
    }
}

impl DegradationParams {
    pub fn validate(&self) -> Result<()> {
        let ok_range = |r: [f64; 2]| r[0] >= 0.0 && r[0] <= r[1] && r[1].is_finite();
        if !ok_range(self.blur_sigma) || !ok_range(self.noise_sigma) || self.scale < 1 {
            return Err(Error::InvalidRange(format!(
                "invalid degradation parameters {self:?}"
            )));
        }
        Ok(())
    }

    /// No blur, no noise, no quantization: a pure resample round trip.
    pub fn resample_only(scale: usize) -> Self {
        Self {
            blur_sigma: [0.0, 0.0],
            scale,
            noise_sigma: [0.0, 0.0],
            quantize: false,
        }
    }
}

/// Intermediate images of one degradation run.
#[derive(Clone, Debug)]
pub struct DegradeTrace {
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub blurred: Image,
    pub downscaled: Image,
    /// After noise, before quantization.
    pub noisy: Image,
    /// Low-resolution result (quantized when enabled).
    pub lr_small: Image,
    /// `lr_small` upscaled to the HR size and clamped.
    pub lr_up: Image,
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..=r[1])
    } else {
        r[0]
    }
}

pub fn degrade_with_trace(hr: &Image, params: &DegradationParams, seed: u64) -> Result<DegradeTrace> {
    params.validate()?;
    let (h, w) = hr.dims();
    let s = params.scale;
    if h % s != 0 || w % s != 0 || h == 0 || w == 0 {
        return Err(Error::Geometry(format!(
            "{h}x{w} image is not divisible by scale {s}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blur_sigma = uniform(&mut rng, params.blur_sigma);
    let noise_sigma = uniform(&mut rng, params.noise_sigma);
    let blurred = gaussian_blur(hr, blur_sigma);
    let downscaled = resize_bicubic(&blurred, h / s, w / s)?;
    let mut noisy = downscaled.clone();
    if noise_sigma > 0.0 {
        for v in noisy.data_mut() {
            *v += noise_sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let lr_small = if params.quantize {
        noisy.quantized_u8()
    } else {
        noisy.clamped()
    };
    let lr_up = resize_bicubic(&lr_small, h, w)?.clamped();
    Ok(DegradeTrace {
        blur_sigma,
        noise_sigma,
        blurred,
        downscaled,
        noisy,
        lr_small,
        lr_up,
    })
}

/// Degraded low-resolution image, re-upscaled to the HR size.
pub fn degrade(hr: &Image, params: &DegradationParams, seed: u64) -> Result<Image> {
    Ok(degrade_with_trace(hr, params, seed)?.lr_up)
}

/// 3x3 median restoration, 2x bicubic downscale, bicubic upscale back.
pub fn preclean(lr: &Image) -> Result<Image> {
    let (h, w) = lr.dims();
    let restored = median3(lr);
    let small = resize_bicubic(&restored, (h / 2).max(1), (w / 2).max(1))?;
    Ok(resize_bicubic(&small, h, w)?.clamped())
}
