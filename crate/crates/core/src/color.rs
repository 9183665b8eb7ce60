//! Color correction of generated images against the low-resolution input:
//! per-channel mean/std matching in the pixel domain, and low-frequency
//! replacement via an a-trous wavelet decomposition.

use crate::error::{Error, Result};
use crate::image::{reflect, Image};

/// Floor applied to the generated image's channel std.
pub const STD_FLOOR: f64 = 1e-6;

/// Per-channel population mean and standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    pub fn of(img: &Image) -> Self {
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for c in 0..3 {
            let p = img.plane(c);
            let n = p.len() as f64;
            let m = p.iter().sum::<f64>() / n;
            let var = p.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean[c] = m;
            std[c] = var.sqrt();
        }
        Self { mean, std }
    }
}

#[derive(Clone, Debug)]
pub struct ColorCorrection {
    /// Output before the final clamp to `[0, 1]`.
    pub unclamped: Image,
    pub image: Image,
    /// Channels whose std hit [`STD_FLOOR`].
    pub floored_channels: Vec<usize>,
}

/// Matches each channel's mean and std of `y_hat` to those of `x`.
pub fn pixel_color_correct(y_hat: &Image, x: &Image) -> Result<ColorCorrection> {
    let src = ChannelStats::of(y_hat);
    let dst = ChannelStats::of(x);
    let mut out = y_hat.clone();
    let mut floored = Vec::new();
    for c in 0..3 {
        let mut sd = src.std[c];
        if sd < STD_FLOOR {
            sd = STD_FLOOR;
            floored.push(c);
        }
        let (mu_y, mu_x, sd_x) = (src.mean[c], dst.mean[c], dst.std[c]);
        for v in out.plane_mut(c) {
            *v = (*v - mu_y) / sd * sd_x + mu_x;
        }
    }
    Ok(ColorCorrection {
        image: out.clamped(),
        unclamped: out,
        floored_channels: floored,
    })
}

/// The 3x3 a-trous lowpass kernel (a separable `[1, 2, 1] / 4` binomial).
pub const WAVELET_KERNEL: [[f64; 3]; 3] = [
    [1.0 / 16.0, 1.0 / 8.0, 1.0 / 16.0],
    [1.0 / 8.0, 1.0 / 4.0, 1.0 / 8.0],
    [1.0 / 16.0, 1.0 / 8.0, 1.0 / 16.0],
];

/// Dilation used at decomposition level `i` (1-based).
pub fn level_dilation(i: usize) -> usize {
    1 << i
}

/// High-frequency bands `H^1..H^l` and the residual lowpass `L^l`.
#[derive(Clone, Debug)]
pub struct WaveletPyramid {
    pub high: Vec<Image>,
    pub low: Image,
}

impl WaveletPyramid {
    pub fn levels(&self) -> usize {
        self.high.len()
    }

    /// `L^l + sum_i H^i`.
    pub fn reconstruct(&self) -> Image {
        let mut out = self.low.clone();
        for h in &self.high {
            for (o, v) in out.data_mut().iter_mut().zip(h.data()) {
                *o += v;
            }
        }
        out
    }

    /// Sum of all high-frequency bands.
    pub fn high_sum(&self) -> Image {
        let mut out = Image::new(self.low.height(), self.low.width());
        for h in &self.high {
            for (o, v) in out.data_mut().iter_mut().zip(h.data()) {
                *o += v;
            }
        }
        out
    }
}

/// 3x3 convolution with [`WAVELET_KERNEL`] at the given dilation, reflect
/// padding.
pub fn dilated_lowpass(img: &Image, dilation: usize) -> Image {
    let (h, w) = img.dims();
    let d = dilation as isize;
    let mut out = Image::new(h, w);
    for c in 0..3 {
        let src = img.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (ky, row) in WAVELET_KERNEL.iter().enumerate() {
                    let sy = reflect(y as isize + (ky as isize - 1) * d, h);
                    for (kx, k) in row.iter().enumerate() {
                        let sx = reflect(x as isize + (kx as isize - 1) * d, w);
                        s += k * src[sy * w + sx];
                    }
                }
                dst[y * w + x] = s;
            }
        }
    }
    out
}

pub fn wavelet_decompose(img: &Image, levels: usize) -> Result<WaveletPyramid> {
    if levels == 0 {
        return Err(Error::InvalidRange("wavelet levels must be >= 1".into()));
    }
    let max_d = level_dilation(levels);
    let (h, w) = img.dims();
    if max_d >= h || max_d >= w {
        return Err(Error::Geometry(format!(
            "{h}x{w} image too small for {levels} levels (dilation {max_d})"
        )));
    }
    let mut low = img.clone();
    let mut high = Vec::with_capacity(levels);
    for i in 1..=levels {
        let next = dilated_lowpass(&low, level_dilation(i));
        let mut band = low;
        for (b, n) in band.data_mut().iter_mut().zip(next.data()) {
            *b -= n;
        }
        high.push(band);
        low = next;
    }
    Ok(WaveletPyramid { high, low })
}

/// High frequencies of `y_hat` on the low frequencies of `x`; clamped last.
pub fn wavelet_color_correct(y_hat: &Image, x: &Image, levels: usize) -> Result<ColorCorrection> {
    y_hat.expect_same_dims(x)?;
    let py = wavelet_decompose(y_hat, levels)?;
    let px = wavelet_decompose(x, levels)?;
    let mut out = py.high_sum();
    for (o, l) in out.data_mut().iter_mut().zip(px.low.data()) {
        *o += l;
    }
    Ok(ColorCorrection {
        image: out.clamped(),
        unclamped: out,
        floored_channels: Vec::new(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorMode {
    #[default]
    Pixel,
    Wavelet,
    None,
}

impl std::str::FromStr for ColorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel" => Ok(Self::Pixel),
            "wavelet" => Ok(Self::Wavelet),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown color mode `{other}`"))),
        }
    }
}

/// Applies the selected correction; `None` only clamps.
pub fn apply_color_mode(mode: ColorMode, y_hat: &Image, x: &Image, levels: usize) -> Result<Image> {
    match mode {
        ColorMode::Pixel => Ok(pixel_color_correct(y_hat, x)?.image),
        ColorMode::Wavelet => Ok(wavelet_color_correct(y_hat, x, levels)?.image),
        ColorMode::None => Ok(y_hat.clamped()),
    }
}
