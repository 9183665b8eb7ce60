//! The frozen generative prior: a small time-conditional U-Net style noise
//! predictor over latents.
//!
//! Layout (scale 0 is the latent resolution, scale 1 half of it):
//!
//! ```text
//! in-conv -> [res, res] @0 -> avg-pool, conv -> [res, res] @1
//!         -> upsample, conv, + skip -> [res, res] @0 -> silu, out-conv
//! ```
//!
//! Each residual block receives the time embedding through a learned
//! per-channel shift, and its output is the attachment point for SFT
//! modulation (see [`crate::encoder`]).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::diffusion::{q_sample_with, NoiseSchedule};
use crate::error::{Error, Result};
use crate::latent::LatentGrid;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{self, TrainConfig, TrainReport};

/// Sinusoidal embedding: `[sin(t f_0), .., sin(t f_{k-1}), cos(t f_0), ..]`
/// with `k = dim / 2` frequencies `f_i = 10^(-4 i / (k - 1))`.
pub fn time_embed(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidRange(format!(
            "time embedding dim must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = if half == 1 {
            1.0
        } else {
            10f64.powf(-4.0 * i as f64 / (half - 1) as f64)
        };
        let phase = t as f64 * freq;
        out[i] = phase.sin();
        out[half + i] = phase.cos();
    }
    Ok(out)
}

/// Batched `[N, dim]` time embedding.
pub fn time_embed_batch(ts: &[usize], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(time_embed(t, dim)?);
    }
    Tensor::from_vec(&[ts.len(), dim], data)
}

/// Condition id of the null (default) condition.
pub const NULL_CONDITION: usize = 0;
/// Condition id trained on degraded latents; the "negative" branch of
/// classifier-free guidance.
pub const NEGATIVE_CONDITION: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub latent_channels: usize,
    /// Channel widths at scale 0 and scale 1.
    pub widths: [usize; 2],
    pub blocks_per_scale: usize,
    /// Sinusoidal embedding size.
    pub time_dim: usize,
    /// Hidden size of the time MLP.
    pub embed_dim: usize,
    pub num_conditions: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            widths: [32, 64],
            blocks_per_scale: 2,
            time_dim: 32,
            embed_dim: 64,
            num_conditions: 2,
        }
    }
}

/// Where a modulated residual block sits in the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSite {
    pub name_index: usize,
    pub scale: usize,
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0
            || self.widths.contains(&0)
            || self.blocks_per_scale == 0
            || self.time_dim % 2 != 0
            || self.time_dim == 0
            || self.embed_dim == 0
            || self.num_conditions == 0
        {
            return Err(Error::Config(format!("invalid prior config {self:?}")));
        }
        Ok(())
    }

    /// Every residual block in forward order: contracting path at scale 0,
    /// the bottleneck at scale 1, then the expanding path at scale 0.
    pub fn block_sites(&self) -> Vec<BlockSite> {
        let b = self.blocks_per_scale;
        (0..3 * b)
            .map(|i| BlockSite {
                name_index: i,
                scale: if i / b == 1 { 1 } else { 0 },
            })
            .collect()
    }

    /// Channel width of the features at a block site.
    pub fn site_width(&self, site: BlockSite) -> usize {
        self.widths[site.scale]
    }
}

pub fn init_prior(cfg: &PriorConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let [c0, c1] = cfg.widths;
    p.init_linear(&mut rng, "prior.time.fc1", cfg.time_dim, cfg.embed_dim);
    p.init_linear(&mut rng, "prior.time.fc2", cfg.embed_dim, cfg.embed_dim);
    p.insert(
        "prior.cond.weight",
        Tensor::zeros(&[cfg.embed_dim, cfg.num_conditions]),
    );
    p.init_conv(&mut rng, "prior.in", cfg.latent_channels, c0, 3);
    for site in cfg.block_sites() {
        init_res_block(
            &mut p,
            &mut rng,
            &format!("prior.block{}", site.name_index),
            cfg.site_width(site),
            cfg.embed_dim,
        );
    }
    p.init_conv(&mut rng, "prior.down", c0, c1, 3);
    p.init_conv(&mut rng, "prior.up", c1, c0, 3);
    p.init_conv_zero("prior.out", c0, cfg.latent_channels, 3);
    Ok(p)
}

pub(crate) fn init_res_block(
    p: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    ch: usize,
    embed_dim: usize,
) {
    p.init_conv(rng, &format!("{name}.conv1"), ch, ch, 3);
    p.init_linear(rng, &format!("{name}.temb"), embed_dim, ch);
    p.init_conv(rng, &format!("{name}.conv2"), ch, ch, 3);
    // Damp the residual branch so stacked blocks start near identity.
    let w = p.get_mut(&format!("{name}.conv2.weight")).expect("just inserted");
    for v in w.data_mut() {
        *v = (*v * 0.1) as f32 as f64;
    }
}

pub(crate) fn conv(g: &mut Graph, p: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(p, &format!("{name}.weight"))?;
    let b = g.param(p, &format!("{name}.bias"))?;
    g.conv2d(x, w, Some(b))
}

pub(crate) fn linear(g: &mut Graph, p: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(p, &format!("{name}.weight"))?;
    let b = g.param(p, &format!("{name}.bias"))?;
    g.linear(x, w, Some(b))
}

/// `x + conv2(silu(conv1(silu(x)) + temb_proj(temb)))`.
pub(crate) fn res_block(g: &mut Graph, p: &ParamStore, name: &str, x: Var, temb: Var) -> Result<Var> {
    let a = g.silu(x);
    let h = conv(g, p, &format!("{name}.conv1"), a)?;
    let shift = linear(g, p, &format!("{name}.temb"), temb)?;
    let h = g.add_channel_bias(h, shift)?;
    let h = g.silu(h);
    let h = conv(g, p, &format!("{name}.conv2"), h)?;
    g.add(x, h)
}

/// Time MLP `fc2(silu(fc1(sinusoid)))`, shared by the prior and encoder.
pub(crate) fn time_mlp(g: &mut Graph, p: &ParamStore, prefix: &str, sinusoid: Tensor) -> Result<Var> {
    let e = g.input(sinusoid);
    let h = linear(g, p, &format!("{prefix}.fc1"), e)?;
    let h = g.silu(h);
    linear(g, p, &format!("{prefix}.fc2"), h)
}

/// SFT parameters for one residual block, as graph variables.
#[derive(Clone, Copy, Debug)]
pub struct SftVars {
    pub alpha: Var,
    pub beta: Var,
}

/// Feature taps recorded around each SFT application.
#[derive(Clone, Copy, Debug)]
pub struct FeatureTap {
    pub site: BlockSite,
    pub before: Var,
    pub after: Var,
}

/// Inputs for one batched prior evaluation.
pub struct PriorInputs<'a> {
    pub z: Var,
    pub timesteps: &'a [usize],
    pub conditions: &'a [usize],
    /// One entry per block site, or `None` for the plain prior.
    pub sft: Option<&'a [SftVars]>,
    pub taps: Option<&'a mut Vec<FeatureTap>>,
}

/// Builds the prior forward pass; returns the `[N, C, H, W]` noise estimate.
pub fn build_prior(g: &mut Graph, cfg: &PriorConfig, p: &ParamStore, inputs: PriorInputs<'_>) -> Result<Var> {
    let PriorInputs {
        z,
        timesteps,
        conditions,
        sft,
        mut taps,
    } = inputs;
    let (n, c, h, w) = g.value(z).dims4();
    if c != cfg.latent_channels || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "prior input {:?} needs {} channels and even spatial dims",
            g.value(z).shape(),
            cfg.latent_channels
        )));
    }
    if timesteps.len() != n || conditions.len() != n {
        return Err(Error::Shape(format!(
            "batch of {n} needs {n} timesteps and conditions"
        )));
    }
    let sites = cfg.block_sites();
    if let Some(s) = sft {
        if s.len() != sites.len() {
            return Err(Error::Shape(format!(
                "{} SFT pairs for {} blocks",
                s.len(),
                sites.len()
            )));
        }
    }

    let temb = time_mlp(g, p, "prior.time", time_embed_batch(timesteps, cfg.time_dim)?)?;
    let mut onehot = Tensor::zeros(&[n, cfg.num_conditions]);
    for (i, &cid) in conditions.iter().enumerate() {
        if cid >= cfg.num_conditions {
            return Err(Error::InvalidRange(format!("condition id {cid}")));
        }
        onehot.data_mut()[i * cfg.num_conditions + cid] = 1.0;
    }
    let onehot = g.input(onehot);
    let cw = g.param(p, "prior.cond.weight")?;
    let cemb = g.linear(onehot, cw, None)?;
    let temb = g.add(temb, cemb)?;
    let temb = g.silu(temb);

    let mut block = |g: &mut Graph, x: Var, site: BlockSite| -> Result<Var> {
        let out = res_block(g, p, &format!("prior.block{}", site.name_index), x, temb)?;
        match sft {
            Some(s) => {
                let m = s[site.name_index];
                let modulated = g.sft(out, m.alpha, m.beta)?;
                if let Some(t) = taps.as_deref_mut() {
                    t.push(FeatureTap {
                        site,
                        before: out,
                        after: modulated,
                    });
                }
                Ok(modulated)
            }
            None => Ok(out),
        }
    };

    let b = cfg.blocks_per_scale;
    let mut x = conv(g, p, "prior.in", z)?;
    for site in &sites[..b] {
        x = block(g, x, *site)?;
    }
    let skip = x;
    let x_down = g.avg_pool2(x)?;
    let mut x = conv(g, p, "prior.down", x_down)?;
    for site in &sites[b..2 * b] {
        x = block(g, x, *site)?;
    }
    let up = g.upsample2(x);
    let up = conv(g, p, "prior.up", up)?;
    let mut x = g.add(up, skip)?;
    for site in &sites[2 * b..] {
        x = block(g, x, *site)?;
    }
    let x = g.silu(x);
    conv(g, p, "prior.out", x)
}

/// Unconditional (null-condition) noise prediction for one latent.
pub fn prior_forward(p: &ParamStore, cfg: &PriorConfig, z_t: &LatentGrid, t: usize) -> Result<LatentGrid> {
    prior_forward_with_condition(p, cfg, z_t, t, NULL_CONDITION)
}

pub fn prior_forward_with_condition(
    p: &ParamStore,
    cfg: &PriorConfig,
    z_t: &LatentGrid,
    t: usize,
    condition: usize,
) -> Result<LatentGrid> {
    let mut g = Graph::inference();
    let z = g.input(z_t.to_batch());
    let out = build_prior(
        &mut g,
        cfg,
        p,
        PriorInputs {
            z,
            timesteps: &[t],
            conditions: &[condition],
            sft: None,
            taps: None,
        },
    )?;
    LatentGrid::from_tensor(g.value(out).clone())
}

/// A training example for the prior: a clean latent and its condition id.
#[derive(Clone, Debug)]
pub struct PriorExample {
    pub latent: LatentGrid,
    pub condition: usize,
}

/// A sampled mini-batch for the epsilon-MSE objective.
pub(crate) struct NoisedBatch {
    pub indices: Vec<usize>,
    pub timesteps: Vec<usize>,
    pub noisy: Tensor,
    pub eps: Tensor,
}

pub(crate) fn sample_noised_batch(
    clean: &[&LatentGrid],
    schedule: &NoiseSchedule,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<NoisedBatch> {
    let mut indices = Vec::with_capacity(batch_size);
    let mut timesteps = Vec::with_capacity(batch_size);
    let mut noisy = Vec::with_capacity(batch_size);
    let mut eps = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let i = rng.random_range(0..clean.len());
        let t = rng.random_range(1..=schedule.len());
        let x0 = clean[i];
        let (c, h, w) = x0.dims();
        let e = LatentGrid::randn(c, h, w, rng);
        noisy.push(q_sample_with(x0, &e, schedule.alpha_bar(t)?).tensor().clone());
        eps.push(e.tensor().clone());
        indices.push(i);
        timesteps.push(t);
    }
    Ok(NoisedBatch {
        indices,
        timesteps,
        noisy: Tensor::stack(&noisy)?,
        eps: Tensor::stack(&eps)?,
    })
}

/// Trains the prior with the epsilon-MSE objective over uniform timesteps.
pub fn train_prior(
    params: &mut ParamStore,
    cfg: &PriorConfig,
    data: &[PriorExample],
    schedule: &NoiseSchedule,
    train_cfg: &TrainConfig,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Config("prior training set is empty".into()));
    }
    let clean: Vec<&LatentGrid> = data.iter().map(|e| &e.latent).collect();
    train::run(params, train_cfg, |p, rng| {
        let batch = sample_noised_batch(&clean, schedule, train_cfg.batch_size, rng)?;
        let conditions: Vec<usize> = batch.indices.iter().map(|&i| data[i].condition).collect();
        prior_loss(p, cfg, &batch.noisy, &batch.timesteps, &conditions, &batch.eps)
    })
}

/// Epsilon-MSE of the prior on one noised batch `[N, C, H, W]`.
pub fn prior_loss(
    p: &ParamStore,
    cfg: &PriorConfig,
    noisy: &Tensor,
    timesteps: &[usize],
    conditions: &[usize],
    eps: &Tensor,
) -> Result<(Graph, Var)> {
    let mut g = Graph::new();
    let z = g.input(noisy.clone());
    let pred = build_prior(
        &mut g,
        cfg,
        p,
        PriorInputs {
            z,
            timesteps,
            conditions,
            sft: None,
            taps: None,
        },
    )?;
    let loss = g.mse(pred, eps)?;
    Ok((g, loss))
}
