//! Convolutional autoencoder (4x spatial reduction to a 4-channel latent)
//! and controllable feature wrapping (CFW).
//!
//! The decoder has an injection point at half and full resolution. With CFW
//! enabled each decoder feature map becomes
//! `F_m = F_d + w * C(F_e, F_d)` where `F_e` is the matching encoder feature
//! captured while encoding the low-resolution input and `C` is two
//! convolutions over `concat(F_e, F_d)` whose last layer starts at zero.

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::latent::LatentGrid;
use crate::params::ParamStore;
use crate::prior::conv;
use crate::tensor::Tensor;
use crate::train::{self, TrainConfig, TrainReport};

pub const DOWNSAMPLE: usize = 4;
const LATENT_SCALE: &str = "ae.latent_scale";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderConfig {
    pub latent_channels: usize,
    /// Widths at full and half resolution.
    pub widths: [usize; 2],
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            widths: [16, 32],
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.widths.contains(&0) {
            return Err(Error::Config(format!("invalid autoencoder config {self:?}")));
        }
        Ok(())
    }

    /// Feature width at injection scale `s` (0 = full, 1 = half resolution).
    pub fn injection_width(&self, s: usize) -> usize {
        self.widths[s]
    }
}

pub fn init_autoencoder(cfg: &AutoencoderConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let [a0, a1] = cfg.widths;
    p.init_conv(&mut rng, "ae.enc.in", 3, a0, 3);
    p.init_conv(&mut rng, "ae.enc.c0", a0, a0, 3);
    p.init_conv(&mut rng, "ae.enc.down", a0, a1, 3);
    p.init_conv(&mut rng, "ae.enc.c1", a1, a1, 3);
    p.init_conv(&mut rng, "ae.enc.out", a1, cfg.latent_channels, 3);
    p.init_conv(&mut rng, "ae.dec.in", cfg.latent_channels, a1, 3);
    p.init_conv(&mut rng, "ae.dec.cq", a1, a1, 3);
    p.init_conv(&mut rng, "ae.dec.c1", a1, a1, 3);
    p.init_conv(&mut rng, "ae.dec.c0", a1, a0, 3);
    p.init_conv(&mut rng, "ae.dec.out", a0, 3, 3);
    p.insert(LATENT_SCALE, Tensor::full(&[1], 1.0));
    p.freeze(LATENT_SCALE);
    Ok(p)
}

pub fn init_cfw(cfg: &AutoencoderConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    for s in 0..2 {
        let ch = cfg.injection_width(s);
        p.init_conv(&mut rng, &format!("cfw.c{s}.conv1"), 2 * ch, ch, 3);
        p.init_conv_zero(&format!("cfw.c{s}.conv2"), ch, ch, 3);
    }
    Ok(p)
}

/// Multiplier applied to raw encoder outputs so latents have roughly unit
/// variance.
pub fn latent_scale(ae: &ParamStore) -> f64 {
    ae.get(LATENT_SCALE).map_or(1.0, |t| t.data()[0])
}

pub fn set_latent_scale(ae: &mut ParamStore, scale: f64) {
    ae.insert(LATENT_SCALE, Tensor::full(&[1], scale));
    ae.freeze(LATENT_SCALE);
}

/// Encoder features at the decoder's injection scales, `[full, half]`.
#[derive(Clone, Debug)]
pub struct EncoderFeatures(pub [Tensor; 2]);

pub(crate) struct EncodeVars {
    pub latent: Var,
    pub features: [Var; 2],
}

pub(crate) fn build_encode(g: &mut Graph, ae: &ParamStore, img: Var) -> Result<EncodeVars> {
    let (_, c, h, w) = g.value(img).dims4();
    if c != 3 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 || h == 0 || w == 0 {
        return Err(Error::Geometry(format!(
            "autoencoder input {:?} must be RGB with sides divisible by {DOWNSAMPLE}",
            g.value(img).shape()
        )));
    }
    let x = conv(g, ae, "ae.enc.in", img)?;
    let x = g.silu(x);
    let x = conv(g, ae, "ae.enc.c0", x)?;
    let f0 = g.silu(x);
    let x = g.avg_pool2(f0)?;
    let x = conv(g, ae, "ae.enc.down", x)?;
    let x = g.silu(x);
    let x = conv(g, ae, "ae.enc.c1", x)?;
    let f1 = g.silu(x);
    let x = g.avg_pool2(f1)?;
    let z = conv(g, ae, "ae.enc.out", x)?;
    let z = g.scale(z, latent_scale(ae));
    Ok(EncodeVars {
        latent: z,
        features: [f0, f1],
    })
}

/// Injection tensors recorded during decoding, one per scale (half, then
/// full resolution).
#[derive(Clone, Copy, Debug)]
pub struct InjectionTap {
    pub scale: usize,
    pub decoder: Var,
    pub modulated: Var,
}

pub(crate) struct CfwInput<'a> {
    pub params: &'a ParamStore,
    pub features: [Var; 2],
    pub w: f64,
}

pub(crate) fn build_decode(
    g: &mut Graph,
    ae: &ParamStore,
    z: Var,
    cfw: Option<CfwInput<'_>>,
    mut taps: Option<&mut Vec<InjectionTap>>,
) -> Result<Var> {
    let z = g.scale(z, 1.0 / latent_scale(ae));
    let x = conv(g, ae, "ae.dec.in", z)?;
    let x = g.silu(x);
    let x = conv(g, ae, "ae.dec.cq", x)?;
    let x = g.silu(x);
    let mut inject = |g: &mut Graph, fd: Var, s: usize| -> Result<Var> {
        let Some(c) = cfw.as_ref() else {
            if let Some(t) = taps.as_deref_mut() {
                t.push(InjectionTap {
                    scale: s,
                    decoder: fd,
                    modulated: fd,
                });
            }
            return Ok(fd);
        };
        let fe = c.features[s];
        if g.value(fe).shape() != g.value(fd).shape() {
            return Err(Error::Shape(format!(
                "encoder feature {:?} vs decoder feature {:?}",
                g.value(fe).shape(),
                g.value(fd).shape()
            )));
        }
        let cat = g.concat(fe, fd)?;
        let h = conv(g, c.params, &format!("cfw.c{s}.conv1"), cat)?;
        let h = g.silu(h);
        let delta = conv(g, c.params, &format!("cfw.c{s}.conv2"), h)?;
        let delta = g.scale(delta, c.w);
        let fm = g.add(fd, delta)?;
        if let Some(t) = taps.as_deref_mut() {
            t.push(InjectionTap {
                scale: s,
                decoder: fd,
                modulated: fm,
            });
        }
        Ok(fm)
    };
    let x = g.upsample2(x);
    let f1 = conv(g, ae, "ae.dec.c1", x)?;
    let x = inject(g, f1, 1)?;
    let x = g.silu(x);
    let x = g.upsample2(x);
    let f0 = conv(g, ae, "ae.dec.c0", x)?;
    let x = inject(g, f0, 0)?;
    let x = g.silu(x);
    conv(g, ae, "ae.dec.out", x)
}

/// Latent `(h/4, w/4, 4)` plus the features CFW needs later.
pub fn ae_encode(ae: &ParamStore, img: &Image) -> Result<(LatentGrid, EncoderFeatures)> {
    let mut g = Graph::inference();
    let x = g.input(img.to_tensor());
    let out = build_encode(&mut g, ae, x)?;
    let z = LatentGrid::from_tensor(g.value(out.latent).clone())?;
    let f = EncoderFeatures([g.value(out.features[0]).clone(), g.value(out.features[1]).clone()]);
    Ok((z, f))
}

/// CFW coefficient `w`, clamped to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CfwCoefficient(f64);

impl CfwCoefficient {
    pub const DEFAULT: f64 = 0.5;

    pub fn new(w: f64) -> Self {
        Self(if w.is_nan() { 0.0 } else { w.clamp(0.0, 1.0) })
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for CfwCoefficient {
    fn default() -> Self {
        Self(Self::DEFAULT)
    }
}

/// Decodes `z`; with `w > 0` the encoder features are wrapped into the
/// decoder. `w = 0` (or no features) is the plain decoder. Output clamped.
pub fn ae_decode_cfw(
    ae: &ParamStore,
    cfw: Option<&ParamStore>,
    z: &LatentGrid,
    features: Option<&EncoderFeatures>,
    w: CfwCoefficient,
) -> Result<Image> {
    Ok(decode_unclamped(ae, cfw, z, features, w)?.clamped())
}

pub fn decode_unclamped(
    ae: &ParamStore,
    cfw: Option<&ParamStore>,
    z: &LatentGrid,
    features: Option<&EncoderFeatures>,
    w: CfwCoefficient,
) -> Result<Image> {
    let mut g = Graph::inference();
    let zv = g.input(z.to_batch());
    let out = decode_in_graph(&mut g, ae, cfw, zv, features, w, None)?;
    Image::from_tensor(g.value(out))
}

/// Decodes and returns the injection tensors `(F_d, F_m)` per scale.
pub fn decode_injections(
    ae: &ParamStore,
    cfw: &ParamStore,
    z: &LatentGrid,
    features: &EncoderFeatures,
    w: CfwCoefficient,
) -> Result<Vec<(usize, Tensor, Tensor)>> {
    let mut g = Graph::inference();
    let zv = g.input(z.to_batch());
    let mut taps = Vec::new();
    decode_in_graph(&mut g, ae, Some(cfw), zv, Some(features), w, Some(&mut taps))?;
    Ok(taps
        .iter()
        .map(|t| (t.scale, g.value(t.decoder).clone(), g.value(t.modulated).clone()))
        .collect())
}

fn decode_in_graph(
    g: &mut Graph,
    ae: &ParamStore,
    cfw: Option<&ParamStore>,
    z: Var,
    features: Option<&EncoderFeatures>,
    w: CfwCoefficient,
    taps: Option<&mut Vec<InjectionTap>>,
) -> Result<Var> {
    let w = w.get();
    if w > 0.0 && features.is_none() {
        return Err(Error::Config("CFW with w > 0 needs encoder features".into()));
    }
    let wrap = match (cfw, features) {
        (Some(p), Some(f)) if w > 0.0 => {
            let f0 = g.input(f.0[0].clone());
            let f1 = g.input(f.0[1].clone());
            Some(CfwInput {
                params: p,
                features: [f0, f1],
                w,
            })
        }
        (None, Some(_)) if w > 0.0 => {
            return Err(Error::Config("CFW with w > 0 needs CFW parameters".into()))
        }
        _ => None,
    };
    build_decode(g, ae, z, wrap, taps)
}

/// Reconstruction training with pixel MSE.
pub fn train_autoencoder(
    ae: &mut ParamStore,
    images: &[Image],
    train_cfg: &TrainConfig,
) -> Result<TrainReport> {
    if images.is_empty() {
        return Err(Error::Config("autoencoder training set is empty".into()));
    }
    let tensors: Vec<Tensor> = images.iter().map(Image::to_tensor).collect();
    train::run(ae, train_cfg, |p, rng| {
        let batch = pick_batch(&tensors, train_cfg.batch_size, rng)?;
        reconstruction_loss(p, &batch)
    })
}

/// Pixel MSE of encode-then-decode on a batch `[N, 3, H, W]`.
pub fn reconstruction_loss(ae: &ParamStore, images: &Tensor) -> Result<(Graph, Var)> {
    let mut g = Graph::new();
    let x = g.input(images.clone());
    let enc = build_encode(&mut g, ae, x)?;
    let out = build_decode(&mut g, ae, enc.latent, None, None)?;
    let loss = g.mse(out, images)?;
    Ok((g, loss))
}

fn pick_batch(items: &[Tensor], batch: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(rng);
    let chosen: Vec<Tensor> = idx
        .iter()
        .cycle()
        .take(batch)
        .map(|&i| items[i].clone())
        .collect();
    Tensor::concat_batch(&chosen)
}

/// Sets the latent scale to the reciprocal of the latent std over `images`.
pub fn calibrate_latent_scale(ae: &mut ParamStore, images: &[Image]) -> Result<f64> {
    set_latent_scale(ae, 1.0);
    let mut values = Vec::new();
    for img in images {
        values.extend_from_slice(ae_encode(ae, img)?.0.data());
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let scale = if std > 0.0 { 1.0 / std } else { 1.0 };
    set_latent_scale(ae, scale);
    Ok(latent_scale(ae))
}

/// One CFW training example: a generated latent, the encoder features of
/// the degraded input and the HR target.
#[derive(Clone, Debug)]
pub struct CfwExample {
    pub latent: LatentGrid,
    pub features: EncoderFeatures,
    pub target: Image,
}

/// Trains only the CFW parameters (at `w = 1`) with pixel L1 + MSE; the
/// autoencoder is read through a frozen copy.
pub fn train_cfw(
    cfw: &mut ParamStore,
    ae: &ParamStore,
    examples: &[CfwExample],
    train_cfg: &TrainConfig,
) -> Result<TrainReport> {
    if examples.is_empty() {
        return Err(Error::Config("CFW training set is empty".into()));
    }
    let mut frozen = ae.clone();
    frozen.freeze_all();
    let latents: Vec<Tensor> = examples.iter().map(|e| e.latent.to_batch()).collect();
    let targets: Vec<Tensor> = examples.iter().map(|e| e.target.to_tensor()).collect();
    let f0: Vec<Tensor> = examples.iter().map(|e| e.features.0[0].clone()).collect();
    let f1: Vec<Tensor> = examples.iter().map(|e| e.features.0[1].clone()).collect();
    train::run(cfw, train_cfg, |p, rng| {
        let mut idx: Vec<usize> = (0..examples.len()).collect();
        idx.shuffle(rng);
        let pick: Vec<usize> = idx.iter().cycle().take(train_cfg.batch_size).copied().collect();
        let gather = |v: &[Tensor]| Tensor::concat_batch(&pick.iter().map(|&i| v[i].clone()).collect::<Vec<_>>());
        let features = [gather(&f0)?, gather(&f1)?];
        cfw_loss(p, &frozen, &gather(&latents)?, &features, &gather(&targets)?)
    })
}

/// Pixel L1 + MSE of the CFW decoder at `w = 1`.
pub fn cfw_loss(
    cfw: &ParamStore,
    ae: &ParamStore,
    latents: &Tensor,
    features: &[Tensor; 2],
    target: &Tensor,
) -> Result<(Graph, Var)> {
    let mut g = Graph::new();
    let z = g.input(latents.clone());
    let fe0 = g.input(features[0].clone());
    let fe1 = g.input(features[1].clone());
    let out = build_decode(
        &mut g,
        ae,
        z,
        Some(CfwInput {
            params: cfw,
            features: [fe0, fe1],
            w: 1.0,
        }),
        None,
    )?;
    let l1 = g.l1(out, target)?;
    let l2 = g.mse(out, target)?;
    let loss = g.sum_scalars(l1, l2)?;
    Ok((g, loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> AutoencoderConfig {
        AutoencoderConfig {
            latent_channels: 4,
            widths: [3, 5],
        }
    }

    #[test]
    fn latent_shape_contract() {
        let ae = init_autoencoder(&tiny(), 0).unwrap();
        for (h, w) in [(8, 8), (16, 12), (4, 20)] {
            let (z, f) = ae_encode(&ae, &Image::new(h, w)).unwrap();
            assert_eq!(z.dims(), (4, h / 4, w / 4));
            assert_eq!(f.0[0].shape(), &[1, 3, h, w]);
            assert_eq!(f.0[1].shape(), &[1, 5, h / 2, w / 2]);
            let img = ae_decode_cfw(&ae, None, &z, None, CfwCoefficient::new(0.0)).unwrap();
            assert_eq!(img.dims(), (h, w));
        }
        assert!(ae_encode(&ae, &Image::new(6, 8)).is_err());
    }

    #[test]
    fn zero_image_through_zero_params_is_zero_latent() {
        let mut ae = init_autoencoder(&tiny(), 0).unwrap();
        ae.zero_all();
        set_latent_scale(&mut ae, 1.0);
        let (z, _) = ae_encode(&ae, &Image::new(8, 8)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn w_zero_matches_plain_decoder_bitwise() {
        let cfg = tiny();
        let ae = init_autoencoder(&cfg, 1).unwrap();
        let mut cfw = init_cfw(&cfg, 2).unwrap();
        // Make CFW non-trivial so w actually matters.
        for name in cfw.names().cloned().collect::<Vec<_>>() {
            for (i, v) in cfw.get_mut(&name).unwrap().data_mut().iter_mut().enumerate() {
                *v += 0.01 * ((i % 7) as f64 - 3.0);
            }
        }
        let img = Image::from_fn(8, 8, |y, x, c| ((y + 2 * x + c) % 5) as f64 / 4.0);
        let (z, f) = ae_encode(&ae, &img).unwrap();
        let plain = decode_unclamped(&ae, None, &z, None, CfwCoefficient::new(0.0)).unwrap();
        let w0 = decode_unclamped(&ae, Some(&cfw), &z, Some(&f), CfwCoefficient::new(0.0)).unwrap();
        assert_eq!(plain.data().len(), w0.data().len());
        assert!(plain.data().iter().zip(w0.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let w1 = decode_unclamped(&ae, Some(&cfw), &z, Some(&f), CfwCoefficient::new(1.0)).unwrap();
        assert_ne!(plain, w1);
    }

    #[test]
    fn missing_features_with_positive_w() {
        let cfg = tiny();
        let ae = init_autoencoder(&cfg, 1).unwrap();
        let cfw = init_cfw(&cfg, 2).unwrap();
        let z = LatentGrid::zeros(4, 2, 2);
        assert!(ae_decode_cfw(&ae, Some(&cfw), &z, None, CfwCoefficient::new(0.5)).is_err());
    }

    #[test]
    fn coefficient_is_clamped() {
        assert_eq!(CfwCoefficient::new(1.7).get(), 1.0);
        assert_eq!(CfwCoefficient::new(-0.2).get(), 0.0);
        assert_eq!(CfwCoefficient::default().get(), 0.5);
    }
}
