//! Run configuration, loaded from TOML. Every section is optional and
//! falls back to its defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::{default_overlap, default_sigma};
use crate::autoencoder::AutoencoderConfig;
use crate::color::ColorMode;
use crate::degrade::DegradationParams;
use crate::diffusion::{
    make_schedule, NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_SAMPLE_STEPS,
    DEFAULT_TRAIN_STEPS,
};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::params::AdamConfig;
use crate::prior::PriorConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub autoencoder: AutoencoderConfig,
    pub prior: PriorConfig,
    pub encoder: EncoderConfig,
    pub train: TrainSection,
    pub infer: InferConfig,
    pub eval: EvalConfig,
    pub probe: ProbeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: PathBuf,
    /// Total number of pairs; the last `holdout` are the test split.
    pub count: usize,
    pub holdout: usize,
    pub image_size: usize,
    pub seed: u64,
    pub degradation: DegradationParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            count: 48,
            holdout: 8,
            image_size: 64,
            seed: 1,
            degradation: DegradationParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            t: DEFAULT_TRAIN_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.t, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Cosine decay target as a fraction of `lr`.
    pub final_lr_factor: f64,
    pub seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            lr: AdamConfig::default().lr,
            final_lr_factor: 1.0,
            seed: 0,
        }
    }
}

impl StageConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            seed: self.seed,
            final_lr_factor: self.final_lr_factor,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let f = self.final_lr_factor;
        if self.batch_size == 0 || !(self.lr > 0.0) || !self.lr.is_finite() || !(0.0..=1.0).contains(&f) {
            return Err(Error::Config(format!("invalid [train.{name}] settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub checkpoint_dir: PathBuf,
    /// Also train the prior on degraded latents under the negative
    /// condition id, which classifier-free guidance steers away from.
    pub negative_condition: bool,
    /// Reverse steps used to generate the latents CFW is trained on.
    pub cfw_sample_steps: usize,
    /// Generate CFW latents for all 8 rotations/reflections of each pair.
    pub cfw_augment: bool,
    pub autoencoder: StageConfig,
    pub prior: StageConfig,
    pub encoder: StageConfig,
    pub cfw: StageConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            checkpoint_dir: PathBuf::from("checkpoints"),
            negative_condition: true,
            cfw_sample_steps: 50,
            cfw_augment: true,
            autoencoder: StageConfig::default(),
            prior: StageConfig::default(),
            encoder: StageConfig::default(),
            cfw: StageConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TileConfig {
    /// Patch side in latent cells.
    pub size: usize,
    /// Defaults to `size / 2`.
    pub overlap: Option<usize>,
    /// Defaults to `size / 4`.
    pub sigma: Option<f64>,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self {
            size: 16,
            overlap: None,
            sigma: None,
        }
    }
}

impl TileConfig {
    pub fn overlap(&self) -> usize {
        self.overlap.unwrap_or_else(|| default_overlap(self.size))
    }

    pub fn sigma(&self) -> f64 {
        self.sigma.unwrap_or_else(|| default_sigma(self.size))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub steps: usize,
    pub w: f64,
    pub guidance_scale: f64,
    pub color: ColorMode,
    pub wavelet_levels: usize,
    pub preclean: bool,
    /// Bicubic upscale applied to the input before encoding.
    pub scale: usize,
    pub seed: u64,
    pub tile: TileConfig,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_SAMPLE_STEPS,
            w: 0.5,
            guidance_scale: 1.0,
            color: ColorMode::Pixel,
            wavelet_levels: 3,
            preclean: false,
            scale: 1,
            seed: 0,
            tile: TileConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub w_sweep: Vec<f64>,
    pub s_sweep: Vec<f64>,
    pub output: PathBuf,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            w_sweep: vec![0.0, 0.5, 1.0],
            s_sweep: vec![1.0],
            output: PathBuf::from("metrics.csv"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Number of evenly spaced timesteps.
    pub points: usize,
    /// Which held-out pair to probe.
    pub pair: usize,
    pub seed: u64,
    pub output: PathBuf,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            points: 50,
            pair: 0,
            seed: 0,
            output: PathBuf::from("probe.csv"),
        }
    }
}

fn check_w(w: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Config(format!("w must lie in [0, 1], got {w}")));
    }
    Ok(())
}

fn check_s(s: f64) -> Result<()> {
    if !(s >= 0.0) || !s.is_finite() {
        return Err(Error::Config(format!("guidance scale must be >= 0, got {s}")));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.count == 0 || d.holdout >= d.count {
            return Err(Error::Config(format!(
                "need 0 <= holdout < count, got holdout {} of {}",
                d.holdout, d.count
            )));
        }
        let s = d.degradation.scale;
        if d.image_size == 0 || d.image_size % 4 != 0 || d.image_size % s != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be divisible by 4 and by the degradation scale {s}",
                d.image_size
            )));
        }
        d.degradation.validate()?;
        self.schedule.build()?;
        self.autoencoder.validate()?;
        self.prior.validate()?;
        self.encoder.validate()?;
        if self.autoencoder.latent_channels != self.prior.latent_channels {
            return Err(Error::Config(format!(
                "autoencoder latent channels {} != prior latent channels {}",
                self.autoencoder.latent_channels, self.prior.latent_channels
            )));
        }
        let t = &self.train;
        t.autoencoder.validate("autoencoder")?;
        t.prior.validate("prior")?;
        t.encoder.validate("encoder")?;
        t.cfw.validate("cfw")?;
        if t.cfw_sample_steps == 0 || t.cfw_sample_steps > self.schedule.t {
            return Err(Error::Config("cfw_sample_steps must be in 1..=T".into()));
        }
        let i = &self.infer;
        check_w(i.w)?;
        check_s(i.guidance_scale)?;
        if i.steps == 0 || i.steps > self.schedule.t {
            return Err(Error::Config(format!("steps must be in 1..={}", self.schedule.t)));
        }
        if i.scale == 0 || i.wavelet_levels == 0 {
            return Err(Error::Config("scale and wavelet_levels must be >= 1".into()));
        }
        let tile = &i.tile;
        if tile.size == 0 || tile.size % 2 != 0 {
            return Err(Error::Config(format!("tile size {} must be even and > 0", tile.size)));
        }
        let ov = tile.overlap();
        if ov == 0 || ov >= tile.size || !(tile.sigma() > 0.0) {
            return Err(Error::Config(format!("invalid tile geometry {tile:?}")));
        }
        for &w in &self.eval.w_sweep {
            check_w(w)?;
        }
        for &s in &self.eval.s_sweep {
            check_s(s)?;
        }
        if self.probe.points == 0 {
            return Err(Error::Config("probe points must be >= 1".into()));
        }
        Ok(())
    }
}
