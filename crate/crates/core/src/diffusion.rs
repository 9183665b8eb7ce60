//! Noise schedules, the forward process, DDPM reverse steps and the sampling
//! loop.
//!
//! Timesteps are 1-based: `t = 1..=T`, with `alpha_bar(0) := 1` so that the
//! final reverse step is deterministic.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::latent::LatentGrid;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 2e-2;
pub const DEFAULT_SAMPLE_STEPS: usize = 200;

/// Linear beta schedule from `beta_start` to `beta_end` over `t_max` steps.
pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(Error::InvalidRange("T must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidRange(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..t_max)
        .map(|i| {
            if t_max == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
    })
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.len() {
            return Err(Error::InvalidRange(format!(
                "timestep {t} outside [1, {}]",
                self.len()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.beta[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha[t - 1])
    }

    /// Cumulative product; `t = 0` yields 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check(t)?;
        Ok(self.alpha_bar[t - 1])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Evenly strided reverse timesteps `T = t_0 > t_1 > ... >= 1`.
    pub fn strided_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let t_max = self.len();
        if steps < 1 || steps > t_max {
            return Err(Error::InvalidRange(format!(
                "steps {steps} outside [1, {t_max}]"
            )));
        }
        Ok((0..steps).map(|i| t_max - i * t_max / steps).collect())
    }
}

/// Signal-to-noise ratio `alpha_bar / (1 - alpha_bar)`.
pub fn snr(schedule: &NoiseSchedule, t: usize) -> Result<f64> {
    let ab = schedule.alpha_bar(t)?;
    if t == 0 {
        return Err(Error::InvalidRange("timestep 0 has infinite SNR".into()));
    }
    Ok(ab / (1.0 - ab))
}

/// First timestep whose SNR falls below `level`, if any.
pub fn first_t_below_snr(schedule: &NoiseSchedule, level: f64) -> Option<usize> {
    (1..=schedule.len()).find(|&t| snr(schedule, t).map(|s| s < level).unwrap_or(false))
}

/// Forward noising `sqrt(ab) x0 + sqrt(1 - ab) eps`.
pub fn q_sample(
    x0: &LatentGrid,
    t: usize,
    eps: &LatentGrid,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    x0.expect_same_shape(eps)?;
    let ab = schedule.alpha_bar(t)?;
    Ok(q_sample_with(x0, eps, ab))
}

pub(crate) fn q_sample_with(x0: &LatentGrid, eps: &LatentGrid, alpha_bar: f64) -> LatentGrid {
    let a = alpha_bar.sqrt();
    let s = (1.0 - alpha_bar).sqrt();
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| a * x + s * e)
        .collect();
    let (c, h, w) = x0.dims();
    LatentGrid::from_vec(c, h, w, data).expect("shape")
}

/// One reverse DDPM step `t -> t - 1` with posterior variance.
pub fn ddpm_step(
    z_t: &LatentGrid,
    eps_pred: &LatentGrid,
    t: usize,
    schedule: &NoiseSchedule,
    noise: Option<&LatentGrid>,
) -> Result<LatentGrid> {
    schedule.check(t)?;
    ddpm_step_between(z_t, eps_pred, t, t - 1, schedule, noise)
}

/// Reverse step from `t` to any earlier `t_prev`, treating the pair as a
/// single DDPM transition with `alpha = ab(t) / ab(t_prev)`.
pub fn ddpm_step_between(
    z_t: &LatentGrid,
    eps_pred: &LatentGrid,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    noise: Option<&LatentGrid>,
) -> Result<LatentGrid> {
    z_t.expect_same_shape(eps_pred)?;
    if t_prev >= t {
        return Err(Error::InvalidRange(format!("t_prev {t_prev} must be below t {t}")));
    }
    if t_prev == 0 && noise.is_some() {
        return Err(Error::InvalidRange(
            "the final reverse step is deterministic; noise must not be supplied".into(),
        ));
    }
    let ab_t = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar(t_prev)?;
    let alpha = ab_t / ab_prev;
    let beta = 1.0 - alpha;
    let coef = beta / (1.0 - ab_t).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let sigma = ((1.0 - ab_prev) / (1.0 - ab_t) * beta).sqrt();
    let (c, h, w) = z_t.dims();
    let data: Vec<f64> = match noise {
        Some(n) => {
            z_t.expect_same_shape(n)?;
            z_t.data()
                .iter()
                .zip(eps_pred.data())
                .zip(n.data())
                .map(|((z, e), nz)| inv_sqrt_alpha * (z - coef * e) + sigma * nz)
                .collect()
        }
        None => z_t
            .data()
            .iter()
            .zip(eps_pred.data())
            .map(|(z, e)| inv_sqrt_alpha * (z - coef * e))
            .collect(),
    };
    LatentGrid::from_vec(c, h, w, data)
}

/// Posterior standard deviation for the `t -> t_prev` transition.
pub fn posterior_sigma(schedule: &NoiseSchedule, t: usize, t_prev: usize) -> Result<f64> {
    let ab_t = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar(t_prev)?;
    let beta = 1.0 - ab_t / ab_prev;
    Ok(((1.0 - ab_prev) / (1.0 - ab_t) * beta).sqrt())
}

/// Guided estimate `eps_cond + s (eps_null - eps_cond)`.
///
/// `s = 0` returns `eps_cond` and `s = 1` returns `eps_null` exactly.
pub fn cfg_combine(eps_cond: &LatentGrid, eps_null: &LatentGrid, s: f64) -> Result<LatentGrid> {
    eps_cond.expect_same_shape(eps_null)?;
    if s == 0.0 {
        return Ok(eps_cond.clone());
    }
    if s == 1.0 {
        return Ok(eps_null.clone());
    }
    let (c, h, w) = eps_cond.dims();
    let data = eps_cond
        .data()
        .iter()
        .zip(eps_null.data())
        .map(|(ec, en)| ec + s * (en - ec))
        .collect();
    LatentGrid::from_vec(c, h, w, data)
}

/// Guidance setting: scale `s` and the two condition-embedding ids.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub conditioned_id: usize,
    pub unconditioned_id: usize,
}

impl GuidanceConfig {
    pub fn new(scale: f64, conditioned_id: usize, unconditioned_id: usize) -> Result<Self> {
        if !(scale >= 0.0) || !scale.is_finite() {
            return Err(Error::InvalidRange(format!("guidance scale {scale} must be >= 0")));
        }
        Ok(Self {
            scale,
            conditioned_id,
            unconditioned_id,
        })
    }
}

/// A noise predictor `eps(z, cond, t)`; `cond` is the (optional) low-resolution
/// latent aligned with `z`.
pub trait NoisePredictor {
    fn predict(&self, z: &LatentGrid, cond: Option<&LatentGrid>, t: usize) -> Result<LatentGrid>;
}

impl<F> NoisePredictor for F
where
    F: Fn(&LatentGrid, Option<&LatentGrid>, usize) -> Result<LatentGrid>,
{
    fn predict(&self, z: &LatentGrid, cond: Option<&LatentGrid>, t: usize) -> Result<LatentGrid> {
        self(z, cond, t)
    }
}

/// Shape of the latent to sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Source of the per-step Gaussian draws. The initial state comes first,
/// then one full-grid draw per stochastic step.
pub(crate) struct NoiseStream {
    rng: ChaCha8Rng,
    shape: LatentShape,
}

impl NoiseStream {
    pub(crate) fn new(seed: u64, shape: LatentShape) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            shape,
        }
    }

    pub(crate) fn draw(&mut self) -> LatentGrid {
        LatentGrid::randn(self.shape.channels, self.shape.height, self.shape.width, &mut self.rng)
    }
}

/// Ancestral DDPM sampling over `steps` strided timesteps.
pub fn sample(
    predictor: &dyn NoisePredictor,
    cond: Option<&LatentGrid>,
    shape: LatentShape,
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<LatentGrid> {
    if let Some(c) = cond {
        if (c.height(), c.width()) != (shape.height, shape.width) {
            return Err(Error::Shape(format!(
                "condition {:?} does not match sample shape {:?}",
                c.dims(),
                shape
            )));
        }
    }
    run_reverse_chain(schedule, steps, seed, shape, |z, t| predictor.predict(z, cond, t))
}

/// Shared reverse loop: `eps_fn(z_t, t)` supplies the noise estimate.
pub(crate) fn run_reverse_chain(
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
    shape: LatentShape,
    mut eps_fn: impl FnMut(&LatentGrid, usize) -> Result<LatentGrid>,
) -> Result<LatentGrid> {
    let ts = schedule.strided_timesteps(steps)?;
    let mut noise = NoiseStream::new(seed, shape);
    let mut z = noise.draw();
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps = eps_fn(&z, t)?;
        eps.expect_same_shape(&z)?;
        let n = (t_prev > 0).then(|| noise.draw());
        z = ddpm_step_between(&z, &eps, t, t_prev, schedule, n.as_ref())?;
    }
    Ok(z)
}
