//! Shared optimisation loop with the divergence guard.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Adam, AdamConfig, ParamStore};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// The learning rate follows a cosine from `adam.lr` down to
    /// `adam.lr * final_lr_factor`; 1.0 keeps it constant.
    pub final_lr_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            adam: AdamConfig::default(),
            seed: 0,
            final_lr_factor: 1.0,
        }
    }
}

/// Loss guard window: abort once the loss has stayed above ten times the
/// initial loss for this many consecutive steps.
pub const DIVERGENCE_WINDOW: usize = 100;
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Loss per step, in order.
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }

    /// Mean over the first / last `k` steps.
    pub fn head_tail_means(&self, k: usize) -> Option<(f64, f64)> {
        if self.losses.is_empty() {
            return None;
        }
        let k = k.min(self.losses.len()).max(1);
        let head = self.losses[..k].iter().sum::<f64>() / k as f64;
        let tail = self.losses[self.losses.len() - k..].iter().sum::<f64>() / k as f64;
        Some((head, tail))
    }
}

#[derive(Debug)]
pub(crate) struct DivergenceGuard {
    initial: Option<f64>,
    above: usize,
}

impl DivergenceGuard {
    pub(crate) fn new() -> Self {
        Self {
            initial: None,
            above: 0,
        }
    }

    pub(crate) fn observe(&mut self, step: usize, loss: f64) -> Result<()> {
        let initial = *self.initial.get_or_insert(loss);
        if !loss.is_finite() || loss > DIVERGENCE_FACTOR * initial {
            self.above += 1;
        } else {
            self.above = 0;
        }
        if self.above >= DIVERGENCE_WINDOW || !initial.is_finite() {
            return Err(Error::Divergence {
                step,
                loss,
                initial,
                window: DIVERGENCE_WINDOW,
            });
        }
        Ok(())
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        let base = self.adam.lr;
        if self.final_lr_factor == 1.0 || self.steps <= 1 {
            return base;
        }
        let progress = step as f64 / (self.steps - 1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        base * (self.final_lr_factor + (1.0 - self.final_lr_factor) * cos)
    }
}

/// Runs `cfg.steps` Adam updates on `params`. `build_loss` assembles the
/// graph for one mini-batch and returns it with its scalar loss.
pub fn run<F>(params: &mut ParamStore, cfg: &TrainConfig, mut build_loss: F) -> Result<TrainReport>
where
    F: FnMut(&ParamStore, &mut ChaCha8Rng) -> Result<(Graph, Var)>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.adam.clone());
    let mut guard = DivergenceGuard::new();
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let (graph, loss) = build_loss(params, &mut rng)?;
        let value = graph.value(loss).data()[0];
        report.losses.push(value);
        guard.observe(step, value)?;
        if !value.is_finite() {
            continue;
        }
        let grads = graph.backward(loss)?;
        let mut named = graph.param_grads(&grads);
        named.retain(|name, _| params.contains(name) && !params.is_frozen(name));
        opt.set_lr(cfg.lr_at(step));
        opt.step(params, &named)?;
        if step % 100 == 0 {
            log::debug!("step {step}: loss {value:.6}");
        }
    }
    Ok(report)
}
