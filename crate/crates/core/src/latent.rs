use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A `C x H x W` real field in autoencoder latent space (channel-major).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid(Tensor);

impl LatentGrid {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self(Tensor::zeros(&[channels, height, width]))
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Ok(Self(Tensor::from_vec(&[channels, height, width], data)?))
    }

    /// Accepts `[C, H, W]` or a single-sample `[1, C, H, W]` tensor.
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        match t.shape().len() {
            3 => Ok(Self(t)),
            4 if t.shape()[0] == 1 => {
                let s = t.shape()[1..].to_vec();
                Ok(Self(t.reshape(&s)?))
            }
            _ => Err(Error::Shape(format!(
                "latent grid needs [C, H, W], got {:?}",
                t.shape()
            ))),
        }
    }

    /// Standard normal draw.
    pub fn randn(channels: usize, height: usize, width: usize, rng: &mut impl Rng) -> Self {
        let n = channels * height * width;
        let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self(Tensor::from_vec(&[channels, height, width], data).expect("shape"))
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels(), self.height(), self.width())
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.0.data_mut()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// As a `[1, C, H, W]` batch.
    pub fn to_batch(&self) -> Tensor {
        let (c, h, w) = self.dims();
        self.0.clone().reshape(&[1, c, h, w]).expect("shape")
    }

    pub fn expect_same_shape(&self, other: &LatentGrid) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "latent {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.0.all_finite()
    }

    pub fn bit_eq(&self, other: &LatentGrid) -> bool {
        self.0.bit_eq(&other.0)
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.0.data()[(c * self.height() + y) * self.width() + x]
    }

    /// Copy of the `h x w` window whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<LatentGrid> {
        let (c, hh, ww) = self.dims();
        if row + h > hh || col + w > ww {
            return Err(Error::Geometry(format!(
                "crop ({row}, {col}) size {h}x{w} outside {hh}x{ww}"
            )));
        }
        let mut out = Vec::with_capacity(c * h * w);
        for ci in 0..c {
            for y in row..row + h {
                let base = (ci * hh + y) * ww + col;
                out.extend_from_slice(&self.0.data()[base..base + w]);
            }
        }
        LatentGrid::from_vec(c, h, w, out)
    }
}
