//! RGB images in `[0, 1]`, stored channel-planar, plus the resampling and
//! filtering primitives used by the degradation and pre-cleaning stages.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    /// `data[(c * height + y) * width + x]`
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(height, width, |_, _, c| rgb[c])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut img = Self::new(height, width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    img.data[(c * height + y) * width + x] = f(y, x, c);
                }
            }
        }
        img
    }

    pub fn from_planar(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} RGB image needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn expect_same_dims(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "image {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    pub fn clamped(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// As a `[1, 3, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, 3, self.height, self.width], self.data.clone()).expect("shape")
    }

    /// From a `[1, 3, H, W]` or `[3, H, W]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        let s = t.shape();
        let (h, w) = match s {
            [1, 3, h, w] | [3, h, w] => (*h, *w),
            _ => {
                return Err(Error::Shape(format!(
                    "image tensor must be [1, 3, H, W], got {s:?}"
                )))
            }
        };
        Image::from_planar(h, w, t.data().to_vec())
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::new(h, w);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(y as usize, x as usize, c, px.0[c] as f64 / 255.0);
            }
        }
        Ok(out)
    }

    /// 8-bit RGB bytes, row-major interleaved.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(3 * self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    buf.push(quantize_u8(self.get(y, x, c)));
                }
            }
        }
        buf
    }

    /// Encodes as an 8-bit RGB PNG; written atomically.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .ok_or_else(|| Error::Shape("png buffer size".into()))?;
        let mut bytes = Vec::new();
        buf.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
        crate::checkpoint::write_atomic(path, &bytes)
    }

    /// Round-trips through 8-bit quantization.
    pub fn quantized_u8(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&v| quantize_u8(v) as f64 / 255.0)
                .collect(),
        }
    }
}

pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Keys cubic convolution kernel with `a = -0.5`.
fn cubic(x: f64) -> f64 {
    let a = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * a
    } else {
        0.0
    }
}

/// Per output index, the `(input index, weight)` taps along one axis.
/// Downscaling widens the kernel by the scale factor (antialiasing).
fn resample_taps(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_out as f64 / n_in as f64;
    let kscale = if scale < 1.0 { scale } else { 1.0 };
    let support = 2.0 / kscale;
    (0..n_out)
        .map(|o| {
            let center = (o as f64 + 0.5) / scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            let mut total = 0.0;
            for i in lo..=hi {
                let wgt = cubic((i as f64 - center) * kscale);
                if wgt == 0.0 {
                    continue;
                }
                let idx = i.clamp(0, n_in as isize - 1) as usize;
                total += wgt;
                match taps.iter_mut().find(|(j, _)| *j == idx) {
                    Some(t) => t.1 += wgt,
                    None => taps.push((idx, wgt)),
                }
            }
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Separable bicubic resize with edge clamping; no output clamp.
pub fn resize_bicubic(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 || img.height == 0 || img.width == 0 {
        return Err(Error::Geometry(format!(
            "cannot resize {:?} to {out_h}x{out_w}",
            img.dims()
        )));
    }
    let (h, w) = img.dims();
    let tx = resample_taps(w, out_w);
    let ty = resample_taps(h, out_h);
    let mut out = Image::new(out_h, out_w);
    let mut tmp = vec![0.0; h * out_w];
    for c in 0..3 {
        let src = img.plane(c);
        for y in 0..h {
            for (x, taps) in tx.iter().enumerate() {
                tmp[y * out_w + x] = taps.iter().map(|&(i, wt)| wt * src[y * w + i]).sum();
            }
        }
        let dst = out.plane_mut(c);
        for (y, taps) in ty.iter().enumerate() {
            for x in 0..out_w {
                dst[y * out_w + x] = taps.iter().map(|&(i, wt)| wt * tmp[i * out_w + x]).sum();
            }
        }
    }
    Ok(out)
}

/// Mirror index without repeating the edge sample (`-1 -> 1`).
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflect borders; `sigma <= 0` is a copy.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
    let (h, w) = img.dims();
    let mut out = Image::new(h, w);
    let mut tmp = vec![0.0; h * w];
    for c in 0..3 {
        let src = img.plane(c);
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * src[y * w + reflect(x as isize + k as isize - radius, w)])
                    .sum();
            }
        }
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * tmp[reflect(y as isize + k as isize - radius, h) * w + x])
                    .sum();
            }
        }
    }
    out
}

/// Per-channel 3x3 median with replicated borders.
pub fn median3(img: &Image) -> Image {
    let (h, w) = img.dims();
    let mut out = Image::new(h, w);
    for c in 0..3 {
        let src = img.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut win = [0.0; 9];
                let mut k = 0;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        win[k] = src[sy * w + sx];
                        k += 1;
                    }
                }
                win.sort_by(f64::total_cmp);
                dst[y * w + x] = win[4];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_preserves_constants() {
        let img = Image::filled(12, 8, [0.2, 0.5, 0.9]);
        for (h, w) in [(3, 2), (24, 16), (12, 8), (5, 7)] {
            let r = resize_bicubic(&img, h, w).unwrap();
            for c in 0..3 {
                assert!(r.plane(c).iter().all(|v| (v - img.get(0, 0, c)).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn identity_resize_is_exact() {
        let img = Image::from_fn(6, 5, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f64 / 10.0);
        let r = resize_bicubic(&img, 6, 5).unwrap();
        assert!(r.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(3, 5), 3);
    }

    #[test]
    fn median_removes_isolated_spike() {
        let mut img = Image::filled(5, 5, [0.5; 3]);
        img.set(2, 2, 0, 1.0);
        let m = median3(&img);
        assert_eq!(m.get(2, 2, 0), 0.5);
    }

    #[test]
    fn blur_preserves_mean_of_constant() {
        let img = Image::filled(9, 9, [0.3; 3]);
        let b = gaussian_blur(&img, 1.2);
        assert!(b.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = Image::from_fn(4, 6, |y, x, c| ((y + x + c) % 5) as f64 / 4.0).quantized_u8();
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back, img);
    }
}
