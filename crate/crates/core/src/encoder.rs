//! Time-aware conditioning encoder and SFT modulation of the frozen prior.
//!
//! The encoder mirrors the prior's contracting path at reduced width. It
//! reads the low-resolution latent together with the timestep and produces
//! one feature map per prior scale; a small head per residual block of the
//! prior turns the matching-scale feature map into `(alpha, beta)`. Heads end
//! in a zero-initialised convolution, so an untrained encoder leaves the
//! prior untouched.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::diffusion::{q_sample, snr, NoiseSchedule};
use crate::error::{Error, Result};
use crate::latent::LatentGrid;
use crate::params::ParamStore;
use crate::prior::{
    build_prior, conv, init_res_block, res_block, sample_noised_batch, time_embed_batch, time_mlp,
    FeatureTap, PriorConfig, PriorInputs, SftVars, NULL_CONDITION,
};
use crate::tensor::Tensor;
use crate::train::{self, TrainConfig, TrainReport};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Widths at the prior's two scales.
    pub widths: [usize; 2],
    pub time_dim: usize,
    pub embed_dim: usize,
    /// `false` replaces the time embedding by the constant `t = 0` embedding.
    pub time_aware: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32],
            time_dim: 32,
            embed_dim: 32,
            time_aware: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.time_dim == 0 || self.time_dim % 2 != 0 || self.embed_dim == 0 {
            return Err(Error::Config(format!("invalid encoder config {self:?}")));
        }
        Ok(())
    }
}

pub fn init_encoder(cfg: &EncoderConfig, prior: &PriorConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    prior.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let [e0, e1] = cfg.widths;
    p.init_linear(&mut rng, "enc.time.fc1", cfg.time_dim, cfg.embed_dim);
    p.init_linear(&mut rng, "enc.time.fc2", cfg.embed_dim, cfg.embed_dim);
    p.init_conv(&mut rng, "enc.in", prior.latent_channels, e0, 3);
    init_res_block(&mut p, &mut rng, "enc.block0", e0, cfg.embed_dim);
    p.init_conv(&mut rng, "enc.down", e0, e1, 3);
    init_res_block(&mut p, &mut rng, "enc.block1", e1, cfg.embed_dim);
    for site in prior.block_sites() {
        let ew = cfg.widths[site.scale];
        let name = format!("enc.sft{}", site.name_index);
        p.init_conv(&mut rng, &format!("{name}.conv1"), ew, ew, 3);
        p.init_conv_zero(&format!("{name}.out"), ew, 2 * prior.site_width(site), 3);
    }
    Ok(p)
}

pub(crate) struct EncoderOutputs {
    pub features: [Var; 2],
    pub sft: Vec<SftVars>,
}

pub(crate) fn build_encoder(
    g: &mut Graph,
    cfg: &EncoderConfig,
    prior: &PriorConfig,
    p: &ParamStore,
    lr: Var,
    timesteps: &[usize],
) -> Result<EncoderOutputs> {
    let (n, c, _, _) = g.value(lr).dims4();
    if c != prior.latent_channels || timesteps.len() != n {
        return Err(Error::Shape(format!(
            "encoder input {:?} with {} timesteps",
            g.value(lr).shape(),
            timesteps.len()
        )));
    }
    let ts: Vec<usize> = if cfg.time_aware {
        timesteps.to_vec()
    } else {
        vec![0; n]
    };
    let temb = time_mlp(g, p, "enc.time", time_embed_batch(&ts, cfg.time_dim)?)?;
    let temb = g.silu(temb);
    let x = conv(g, p, "enc.in", lr)?;
    let f0 = res_block(g, p, "enc.block0", x, temb)?;
    let d = g.avg_pool2(f0)?;
    let d = conv(g, p, "enc.down", d)?;
    let f1 = res_block(g, p, "enc.block1", d, temb)?;
    let features = [f0, f1];
    let mut sft = Vec::new();
    for site in prior.block_sites() {
        let name = format!("enc.sft{}", site.name_index);
        let h = conv(g, p, &format!("{name}.conv1"), features[site.scale])?;
        let h = g.silu(h);
        let out = conv(g, p, &format!("{name}.out"), h)?;
        let width = prior.site_width(site);
        let alpha = g.narrow(out, 0, width)?;
        let beta = g.narrow(out, width, width)?;
        sft.push(SftVars { alpha, beta });
    }
    Ok(EncoderOutputs { features, sft })
}

/// Per-scale encoder features `F^n`, each `[C_n, H_n, W_n]`.
#[derive(Clone, Debug)]
pub struct MultiScaleFeatures(pub Vec<Tensor>);

/// `(alpha, beta)` per modulated residual block of the prior.
#[derive(Clone, Debug)]
pub struct SftParams(pub Vec<(Tensor, Tensor)>);

fn squeeze(t: &Tensor) -> Tensor {
    let s = t.shape()[1..].to_vec();
    t.clone().reshape(&s).expect("shape")
}

pub fn encoder_forward(
    enc: &ParamStore,
    cfg: &EncoderConfig,
    prior: &PriorConfig,
    lr_latent: &LatentGrid,
    t: usize,
) -> Result<(MultiScaleFeatures, SftParams)> {
    let mut g = Graph::inference();
    let lr = g.input(lr_latent.to_batch());
    let out = build_encoder(&mut g, cfg, prior, enc, lr, &[t])?;
    let features = out.features.iter().map(|v| squeeze(g.value(*v))).collect();
    let sft = out
        .sft
        .iter()
        .map(|s| (squeeze(g.value(s.alpha)), squeeze(g.value(s.beta))))
        .collect();
    Ok((MultiScaleFeatures(features), SftParams(sft)))
}

/// `(1 + alpha) * f + beta`, elementwise.
pub fn sft_modulate(f: &Tensor, alpha: &Tensor, beta: &Tensor) -> Result<Tensor> {
    f.expect_same_shape(alpha)?;
    f.expect_same_shape(beta)?;
    let data = f
        .data()
        .iter()
        .zip(alpha.data())
        .zip(beta.data())
        .map(|((&x, &a), &b)| (1.0 + a) * x + b)
        .collect();
    Tensor::from_vec(f.shape(), data)
}

/// Both parameter stores and configs of the conditioned denoiser.
#[derive(Clone, Copy)]
pub struct ConditionedModel<'a> {
    pub prior: &'a ParamStore,
    pub prior_cfg: &'a PriorConfig,
    pub enc: &'a ParamStore,
    pub enc_cfg: &'a EncoderConfig,
}

impl ConditionedModel<'_> {
    pub(crate) fn build(
        &self,
        g: &mut Graph,
        z: Var,
        lr: Var,
        timesteps: &[usize],
        conditions: &[usize],
        taps: Option<&mut Vec<FeatureTap>>,
    ) -> Result<Var> {
        if g.value(z).shape() != g.value(lr).shape() {
            return Err(Error::Shape(format!(
                "noisy latent {:?} vs low-resolution latent {:?}",
                g.value(z).shape(),
                g.value(lr).shape()
            )));
        }
        let enc = build_encoder(g, self.enc_cfg, self.prior_cfg, self.enc, lr, timesteps)?;
        build_prior(
            g,
            self.prior_cfg,
            self.prior,
            PriorInputs {
                z,
                timesteps,
                conditions,
                sft: Some(&enc.sft),
                taps,
            },
        )
    }

    /// Noise prediction for `z_t` conditioned on `lr_latent`.
    pub fn forward(&self, z_t: &LatentGrid, lr_latent: &LatentGrid, t: usize) -> Result<LatentGrid> {
        self.forward_with_condition(z_t, lr_latent, t, NULL_CONDITION)
    }

    pub fn forward_with_condition(
        &self,
        z_t: &LatentGrid,
        lr_latent: &LatentGrid,
        t: usize,
        condition: usize,
    ) -> Result<LatentGrid> {
        let mut g = Graph::inference();
        let z = g.input(z_t.to_batch());
        let lr = g.input(lr_latent.to_batch());
        let out = self.build(&mut g, z, lr, &[t], &[condition], None)?;
        LatentGrid::from_tensor(g.value(out).clone())
    }
}

pub fn conditioned_forward(
    model: ConditionedModel<'_>,
    z_t: &LatentGrid,
    lr_latent: &LatentGrid,
    t: usize,
) -> Result<LatentGrid> {
    model.forward(z_t, lr_latent, t)
}

/// A low-resolution / high-resolution latent pair.
#[derive(Clone, Debug)]
pub struct LatentPair {
    pub lr: LatentGrid,
    pub hr: LatentGrid,
}

/// Fine-tunes the encoder and SFT heads against the frozen prior.
///
/// The prior is evaluated through a frozen copy, so `prior` is never
/// written.
pub fn finetune_encoder(
    prior: &ParamStore,
    prior_cfg: &PriorConfig,
    enc: &mut ParamStore,
    enc_cfg: &EncoderConfig,
    pairs: &[LatentPair],
    schedule: &NoiseSchedule,
    train_cfg: &TrainConfig,
) -> Result<TrainReport> {
    if pairs.is_empty() {
        return Err(Error::Config("encoder fine-tuning set is empty".into()));
    }
    let mut frozen = prior.clone();
    frozen.freeze_all();
    let hr: Vec<&LatentGrid> = pairs.iter().map(|p| &p.hr).collect();
    train::run(enc, train_cfg, |e, rng| {
        let batch = sample_noised_batch(&hr, schedule, train_cfg.batch_size, rng)?;
        let lr = Tensor::stack(
            &batch
                .indices
                .iter()
                .map(|&i| pairs[i].lr.tensor().clone())
                .collect::<Vec<_>>(),
        )?;
        let model = ConditionedModel {
            prior: &frozen,
            prior_cfg,
            enc: e,
            enc_cfg,
        };
        let conds = vec![NULL_CONDITION; batch.timesteps.len()];
        conditioned_loss(model, &batch.noisy, &lr, &batch.timesteps, &conds, &batch.eps)
    })
}

/// Epsilon-MSE of the conditioned model on one batch; gradients reach
/// whichever of the two stores is not frozen.
pub fn conditioned_loss(
    model: ConditionedModel<'_>,
    noisy: &Tensor,
    lr: &Tensor,
    timesteps: &[usize],
    conditions: &[usize],
    eps: &Tensor,
) -> Result<(Graph, Var)> {
    let mut g = Graph::new();
    let z = g.input(noisy.clone());
    let lr = g.input(lr.clone());
    let pred = model.build(&mut g, z, lr, timesteps, conditions, None)?;
    let loss = g.mse(pred, eps)?;
    Ok((g, loss))
}

/// Mean epsilon-MSE of the conditioned model over fixed noise draws; the
/// validation metric for encoder comparisons.
pub fn validation_eps_mse(
    model: ConditionedModel<'_>,
    pairs: &[LatentPair],
    schedule: &NoiseSchedule,
    draws_per_pair: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hr: Vec<&LatentGrid> = pairs.iter().map(|p| &p.hr).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, pair) in pairs.iter().enumerate() {
        let one = [hr[i]];
        let batch = sample_noised_batch(&one, schedule, draws_per_pair, &mut rng)?;
        let lr = Tensor::stack(&vec![pair.lr.tensor().clone(); draws_per_pair])?;
        let mut g = Graph::inference();
        let z = g.input(batch.noisy);
        let lr = g.input(lr);
        let conds = vec![NULL_CONDITION; draws_per_pair];
        let pred = model.build(&mut g, z, lr, &batch.timesteps, &conds, None)?;
        let loss = g.mse(pred, &batch.eps)?;
        total += g.value(loss).data()[0];
        count += 1;
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeRow {
    pub t: usize,
    pub snr: f64,
    pub cosine: f64,
}

pub(crate) fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    // Rounding in the norms can leave identical vectors a hair below 1.
    if a == b {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// For each `t`, noises `hr_latent` to `t`, runs the conditioned model and
/// records the mean cosine similarity between each block's features before
/// and after SFT.
pub fn cosine_probe(
    model: ConditionedModel<'_>,
    lr_latent: &LatentGrid,
    hr_latent: &LatentGrid,
    schedule: &NoiseSchedule,
    t_list: &[usize],
    seed: u64,
) -> Result<Vec<ProbeRow>> {
    lr_latent.expect_same_shape(hr_latent)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = hr_latent.dims();
    let eps = LatentGrid::randn(c, h, w, &mut rng);
    let mut rows = Vec::with_capacity(t_list.len());
    for &t in t_list {
        let z = q_sample(hr_latent, t, &eps, schedule)?;
        let mut g = Graph::inference();
        let zv = g.input(z.to_batch());
        let lr = g.input(lr_latent.to_batch());
        let mut taps = Vec::new();
        model.build(&mut g, zv, lr, &[t], &[NULL_CONDITION], Some(&mut taps))?;
        let mean = taps
            .iter()
            .map(|tap| cosine_similarity(g.value(tap.before).data(), g.value(tap.after).data()))
            .sum::<f64>()
            / taps.len().max(1) as f64;
        rows.push(ProbeRow {
            t,
            snr: snr(schedule, t)?,
            cosine: mean,
        });
    }
    Ok(rows)
}

pub const PROBE_CSV_HEADER: &str = "t,snr,cosine";

pub fn write_probe_csv(rows: &[ProbeRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "{PROBE_CSV_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{:e},{}", r.t, r.snr, r.cosine)?;
    }
    Ok(())
}

/// The probed row with the lowest cosine similarity.
pub fn probe_minimum(rows: &[ProbeRow]) -> Option<ProbeRow> {
    rows.iter()
        .copied()
        .min_by(|a, b| a.cosine.total_cmp(&b.cosine))
}
