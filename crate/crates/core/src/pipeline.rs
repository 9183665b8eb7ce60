//! The staged workflow behind the command-line tool: dataset generation,
//! training stages, inference, evaluation and the cosine probe.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;

use crate::aggregation::{
    interior_discontinuity, progressive_sample, seam_discontinuity, GuidedPredictor, PatchLayout,
};
use crate::autoencoder::{
    ae_decode_cfw, ae_encode, calibrate_latent_scale, init_autoencoder, init_cfw, train_autoencoder,
    train_cfw, CfwCoefficient, CfwExample, EncoderFeatures,
};
use crate::checkpoint;
use crate::color::apply_color_mode;
use crate::config::{InferConfig, RunConfig};
use crate::degrade::{degrade, preclean};
use crate::diffusion::{GuidanceConfig, NoisePredictor, NoiseSchedule};
use crate::encoder::{
    cosine_probe, finetune_encoder, init_encoder, probe_minimum, write_probe_csv, ConditionedModel,
    LatentPair, ProbeRow,
};
use crate::error::{Error, Result};
use crate::image::{resize_bicubic, Image};
use crate::latent::LatentGrid;
use crate::metrics::{psnr, ssim};
use crate::params::ParamStore;
use crate::prior::{init_prior, train_prior, PriorExample, NEGATIVE_CONDITION, NULL_CONDITION};
use crate::textures::{corpus_item, TextureKind};
use crate::train::TrainReport;

pub const MANIFEST: &str = "manifest.csv";
pub const MANIFEST_HEADER: &str = "index,kind,split,seed,hr,lr,lr_psnr";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub index: usize,
    pub kind: String,
    pub split: Split,
    pub seed: u64,
    /// Paths relative to the dataset directory.
    pub hr: PathBuf,
    pub lr: PathBuf,
    pub lr_psnr: f64,
}

fn pair_seed(base: u64, i: usize) -> u64 {
    base.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(i as u64)
}

/// Writes `count` HR textures and their degraded counterparts plus the
/// manifest. Output is byte-identical for a fixed config.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<Vec<ManifestEntry>> {
    let d = &cfg.data;
    let mut entries = Vec::with_capacity(d.count);
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    for i in 0..d.count {
        let hr = corpus_item(i, d.image_size, d.seed);
        let seed = pair_seed(d.seed, i);
        let lr = degrade(&hr, &d.degradation, seed)?;
        // Score what is actually stored, after 8-bit encoding.
        let lr_psnr = psnr(&hr.quantized_u8(), &lr.quantized_u8())?;
        let split = if i + d.holdout >= d.count { Split::Test } else { Split::Train };
        let entry = ManifestEntry {
            index: i,
            kind: TextureKind::for_index(i).name().to_string(),
            split,
            seed,
            hr: PathBuf::from(format!("hr/{i:04}.png")),
            lr: PathBuf::from(format!("lr/{i:04}.png")),
            lr_psnr,
        };
        hr.save_png(&d.dir.join(&entry.hr))?;
        lr.save_png(&d.dir.join(&entry.lr))?;
        writeln!(
            manifest,
            "{},{},{},{},{},{},{:.6}",
            i,
            entry.kind,
            split.name(),
            seed,
            entry.hr.display(),
            entry.lr.display(),
            lr_psnr
        )
        .expect("string write");
        entries.push(entry);
    }
    checkpoint::write_atomic(&d.dir.join(MANIFEST), manifest.as_bytes())?;
    info!("wrote {} pairs to {}", d.count, d.dir.display());
    Ok(entries)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| {
        Error::Prerequisite(format!("dataset manifest {}: {e} (run gen-data first)", path.display()))
    })?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::Config(format!("{} has an unexpected header", path.display())));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let bad = || Error::Config(format!("malformed manifest line `{line}`"));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad());
            }
            Ok(ManifestEntry {
                index: f[0].parse().map_err(|_| bad())?,
                kind: f[1].to_string(),
                split: match f[2] {
                    "train" => Split::Train,
                    "test" => Split::Test,
                    _ => return Err(bad()),
                },
                seed: f[3].parse().map_err(|_| bad())?,
                hr: PathBuf::from(f[4]),
                lr: PathBuf::from(f[5]),
                lr_psnr: f[6].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// An HR image and its degraded, re-upsampled counterpart.
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub index: usize,
    pub hr: Image,
    pub lr: Image,
}

pub fn load_pairs(dir: &Path, split: Split) -> Result<Vec<ImagePair>> {
    let mut out = Vec::new();
    for e in read_manifest(dir)?.into_iter().filter(|e| e.split == split) {
        let hr = Image::load_png(&dir.join(&e.hr))?;
        let lr = Image::load_png(&dir.join(&e.lr))?;
        if hr.dims() != lr.dims() {
            return Err(Error::Config(format!(
                "pair {}: HR {:?} and LR {:?} differ in size",
                e.index,
                hr.dims(),
                lr.dims()
            )));
        }
        out.push(ImagePair { index: e.index, hr, lr });
    }
    if out.is_empty() {
        return Err(Error::Config(format!("no {} pairs in {}", split.name(), dir.display())));
    }
    Ok(out)
}

/// The 8 rotations and reflections of an image.
pub fn dihedral(img: &Image) -> Vec<Image> {
    let (h, w) = img.dims();
    let mut out = Vec::with_capacity(8);
    for k in 0..8 {
        let swap = k & 4 != 0;
        let (oh, ow) = if swap { (w, h) } else { (h, w) };
        out.push(Image::from_fn(oh, ow, |y, x, c| {
            let (mut sy, mut sx) = if swap { (x, y) } else { (y, x) };
            if k & 1 != 0 {
                sy = h - 1 - sy;
            }
            if k & 2 != 0 {
                sx = w - 1 - sx;
            }
            img.get(sy, sx, c)
        }));
    }
    out
}

fn augmented(pairs: &[ImagePair]) -> Vec<(Image, Image)> {
    pairs
        .iter()
        .flat_map(|p| dihedral(&p.hr).into_iter().zip(dihedral(&p.lr)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Autoencoder,
    Prior,
    Encoder,
    Cfw,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Autoencoder, Stage::Prior, Stage::Encoder, Stage::Cfw];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Autoencoder => "autoencoder",
            Stage::Prior => "prior",
            Stage::Encoder => "encoder",
            Stage::Cfw => "cfw",
        }
    }

    /// Stages whose checkpoints must exist before this one can train.
    pub fn prerequisites(self) -> &'static [Stage] {
        match self {
            Stage::Autoencoder => &[],
            Stage::Prior => &[Stage::Autoencoder],
            Stage::Encoder => &[Stage::Autoencoder, Stage::Prior],
            Stage::Cfw => &[Stage::Autoencoder, Stage::Prior, Stage::Encoder],
        }
    }

    pub fn checkpoint_path(self, cfg: &RunConfig) -> PathBuf {
        cfg.train.checkpoint_dir.join(format!("{}.tdsr", self.name()))
    }

    pub fn loss_csv_path(self, cfg: &RunConfig) -> PathBuf {
        cfg.train.checkpoint_dir.join(format!("{}_loss.csv", self.name()))
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

fn load_stage(cfg: &RunConfig, stage: Stage) -> Result<ParamStore> {
    let path = stage.checkpoint_path(cfg);
    if !path.exists() {
        return Err(Error::Prerequisite(format!(
            "{} checkpoint {} not found (train stage `{}` first)",
            stage.name(),
            path.display(),
            stage.name()
        )));
    }
    let mut p = checkpoint::load(&path)?;
    p.freeze_all();
    Ok(p)
}

/// Digest of a frozen component before and after a stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezeAudit {
    pub component: &'static str,
    pub before: String,
    pub after: String,
}

#[derive(Clone, Debug)]
pub struct StageReport {
    pub stage: Stage,
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub train: TrainReport,
    pub audits: Vec<FreezeAudit>,
}

fn write_loss_csv(path: &Path, report: &TrainReport) -> Result<()> {
    let mut s = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        writeln!(s, "{},{:e}", i + 1, l).expect("string write");
    }
    checkpoint::write_atomic(path, s.as_bytes())
}

/// Trains one stage and writes its checkpoint and loss curve.
pub fn cmd_train(cfg: &RunConfig, stage: Stage) -> Result<StageReport> {
    cfg.validate()?;
    let frozen: Vec<(Stage, ParamStore)> = stage
        .prerequisites()
        .iter()
        .map(|&s| load_stage(cfg, s).map(|p| (s, p)))
        .collect::<Result<_>>()?;
    let before: Vec<String> = frozen.iter().map(|(_, p)| p.digest("")).collect();
    let get = |s: Stage| -> &ParamStore {
        &frozen.iter().find(|(st, _)| *st == s).expect("prerequisite loaded").1
    };
    let pairs = load_pairs(&cfg.data.dir, Split::Train)?;
    let schedule = cfg.schedule.build()?;
    let tc = &cfg.train;
    let started = std::time::Instant::now();
    let (params, report) = match stage {
        Stage::Autoencoder => {
            let mut ae = init_autoencoder(&cfg.autoencoder, tc.autoencoder.seed)?;
            let images: Vec<Image> = augmented(&pairs).into_iter().flat_map(|(h, l)| [h, l]).collect();
            let report = train_autoencoder(&mut ae, &images, &tc.autoencoder.train_config())?;
            let hr: Vec<Image> = pairs.iter().map(|p| p.hr.clone()).collect();
            let scale = calibrate_latent_scale(&mut ae, &hr)?;
            info!("latent scale {scale:.4}");
            (ae, report)
        }
        Stage::Prior => {
            let ae = get(Stage::Autoencoder);
            let mut data = Vec::new();
            for (hr, lr) in augmented(&pairs) {
                data.push(PriorExample {
                    latent: ae_encode(ae, &hr)?.0,
                    condition: NULL_CONDITION,
                });
                if tc.negative_condition {
                    data.push(PriorExample {
                        latent: ae_encode(ae, &lr)?.0,
                        condition: NEGATIVE_CONDITION,
                    });
                }
            }
            let mut prior = init_prior(&cfg.prior, tc.prior.seed)?;
            let report = train_prior(&mut prior, &cfg.prior, &data, &schedule, &tc.prior.train_config())?;
            (prior, report)
        }
        Stage::Encoder => {
            let ae = get(Stage::Autoencoder);
            let latent_pairs = augmented(&pairs)
                .iter()
                .map(|(hr, lr)| {
                    Ok(LatentPair {
                        lr: ae_encode(ae, lr)?.0,
                        hr: ae_encode(ae, hr)?.0,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut enc = init_encoder(&cfg.encoder, &cfg.prior, tc.encoder.seed)?;
            let report = finetune_encoder(
                get(Stage::Prior),
                &cfg.prior,
                &mut enc,
                &cfg.encoder,
                &latent_pairs,
                &schedule,
                &tc.encoder.train_config(),
            )?;
            (enc, report)
        }
        Stage::Cfw => {
            let models = Models {
                ae: get(Stage::Autoencoder).clone(),
                prior: get(Stage::Prior).clone(),
                enc: get(Stage::Encoder).clone(),
                cfw: None,
            };
            let opts = InferConfig {
                steps: tc.cfw_sample_steps,
                ..cfg.infer.clone()
            };
            let sources: Vec<(usize, Image, Image)> = if tc.cfw_augment {
                pairs
                    .iter()
                    .flat_map(|p| {
                        dihedral(&p.hr)
                            .into_iter()
                            .zip(dihedral(&p.lr))
                            .enumerate()
                            .map(move |(k, (h, l))| (8 * p.index + k, h, l))
                    })
                    .collect()
            } else {
                pairs.iter().map(|p| (p.index, p.hr.clone(), p.lr.clone())).collect()
            };
            let mut examples = Vec::with_capacity(sources.len());
            for (key, hr, lr) in sources {
                let seed = pair_seed(tc.cfw.seed, key);
                let s = models.sample(cfg, &schedule, &lr, &opts, true, seed)?;
                examples.push(CfwExample {
                    latent: s.latent,
                    features: s.features,
                    target: hr,
                });
            }
            info!("generated {} CFW training latents", examples.len());
            let mut cfw = init_cfw(&cfg.autoencoder, tc.cfw.seed)?;
            let report = train_cfw(&mut cfw, &models.ae, &examples, &tc.cfw.train_config())?;
            (cfw, report)
        }
    };
    info!("stage {} finished in {:.1} s", stage.name(), started.elapsed().as_secs_f64());
    let audits: Vec<FreezeAudit> = frozen
        .iter()
        .zip(before)
        .map(|((s, p), before)| FreezeAudit {
            component: s.name(),
            before,
            after: p.digest(""),
        })
        .collect();
    for a in &audits {
        info!("freeze audit {}: {} -> {}", a.component, a.before, a.after);
        if a.before != a.after {
            return Err(Error::Checkpoint(format!("frozen component {} changed", a.component)));
        }
    }
    let ckpt = stage.checkpoint_path(cfg);
    let loss_csv = stage.loss_csv_path(cfg);
    checkpoint::save(&params, &ckpt)?;
    write_loss_csv(&loss_csv, &report)?;
    Ok(StageReport {
        stage,
        checkpoint: ckpt,
        loss_csv,
        train: report,
        audits,
    })
}

/// Every trained component, loaded read-only.
#[derive(Clone, Debug)]
pub struct Models {
    pub ae: ParamStore,
    pub prior: ParamStore,
    pub enc: ParamStore,
    /// Absent until the CFW stage has run.
    pub cfw: Option<ParamStore>,
}

/// Output of the sampling half of the pipeline.
#[derive(Clone, Debug)]
pub struct SampledLatent {
    pub input: Image,
    pub lr_latent: LatentGrid,
    pub features: EncoderFeatures,
    pub latent: LatentGrid,
    pub layout: PatchLayout,
}

#[derive(Clone, Debug)]
pub struct SrOutput {
    pub image: Image,
    pub sampled: SampledLatent,
}

/// Seam level of a sampled latent: mean neighbour difference across patch
/// boundary columns relative to the other columns.
#[derive(Clone, Copy, Debug)]
pub struct SeamReport {
    pub patches: usize,
    pub boundary: f64,
    pub interior: f64,
}

impl SampledLatent {
    pub fn seam_report(&self) -> Result<SeamReport> {
        let mut cols: Vec<usize> = self
            .layout
            .origins()
            .iter()
            .map(|o| o.1)
            .filter(|&c| c > 0)
            .collect();
        cols.sort_unstable();
        cols.dedup();
        let boundary = if cols.is_empty() {
            0.0
        } else {
            cols.iter()
                .map(|&c| seam_discontinuity(&self.latent, c))
                .sum::<Result<f64>>()?
                / cols.len() as f64
        };
        let interior = match cols.first() {
            Some(&c) => interior_discontinuity(&self.latent, c)?,
            None => interior_discontinuity(&self.latent, 0)?,
        };
        Ok(SeamReport {
            patches: self.layout.len(),
            boundary,
            interior,
        })
    }
}

impl Models {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            ae: load_stage(cfg, Stage::Autoencoder)?,
            prior: load_stage(cfg, Stage::Prior)?,
            enc: load_stage(cfg, Stage::Encoder)?,
            cfw: Some(load_stage(cfg, Stage::Cfw)?),
        })
    }

    pub fn conditioned<'a>(&'a self, cfg: &'a RunConfig) -> ConditionedModel<'a> {
        ConditionedModel {
            prior: &self.prior,
            prior_cfg: &cfg.prior,
            enc: &self.enc,
            enc_cfg: &cfg.encoder,
        }
    }

    /// Input preparation, encoding and tiled sampling. With `guidance`
    /// false the conditioned model is used directly, bypassing the
    /// classifier-free guidance wrapper.
    pub fn sample(
        &self,
        cfg: &RunConfig,
        schedule: &NoiseSchedule,
        input: &Image,
        opts: &InferConfig,
        guidance: bool,
        seed: u64,
    ) -> Result<SampledLatent> {
        let mut x = input.clone();
        if opts.scale > 1 {
            x = resize_bicubic(&x, x.height() * opts.scale, x.width() * opts.scale)?.clamped();
        }
        if opts.preclean {
            x = preclean(&x)?;
        }
        let (lr_latent, features) = ae_encode(&self.ae, &x)?;
        let layout = PatchLayout::new(
            lr_latent.height(),
            lr_latent.width(),
            opts.tile.size,
            opts.tile.overlap(),
            opts.tile.sigma(),
        )?;
        let model = self.conditioned(cfg);
        let guided = GuidedPredictor {
            model,
            guidance: GuidanceConfig::new(opts.guidance_scale, NEGATIVE_CONDITION, NULL_CONDITION)?,
        };
        let predictor: &dyn NoisePredictor = if guidance { &guided } else { &model };
        let latent = progressive_sample(predictor, &lr_latent, &layout, schedule, opts.steps, seed)?;
        Ok(SampledLatent {
            input: x,
            lr_latent,
            features,
            latent,
            layout,
        })
    }

    /// CFW decoding at coefficient `w` followed by color correction against
    /// the prepared input.
    pub fn finish(&self, s: &SampledLatent, w: f64, opts: &InferConfig) -> Result<Image> {
        let w = CfwCoefficient::new(w);
        let y = ae_decode_cfw(&self.ae, self.cfw.as_ref(), &s.latent, Some(&s.features), w)?;
        apply_color_mode(opts.color, &y, &s.input, opts.wavelet_levels)
    }

    pub fn super_resolve(
        &self,
        cfg: &RunConfig,
        input: &Image,
        opts: &InferConfig,
        guidance: bool,
    ) -> Result<SrOutput> {
        let schedule = cfg.schedule.build()?;
        let sampled = self.sample(cfg, &schedule, input, opts, guidance, opts.seed)?;
        let image = self.finish(&sampled, opts.w, opts)?;
        Ok(SrOutput { image, sampled })
    }
}

pub fn cmd_infer(cfg: &RunConfig, input: &Path, output: &Path) -> Result<SrOutput> {
    cfg.validate()?;
    let models = Models::load(cfg)?;
    let lr = Image::load_png(input)?;
    let out = models.super_resolve(cfg, &lr, &cfg.infer, true)?;
    out.image.save_png(output)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Method {
    Bicubic,
    Sr { w: f64, s: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub method: Method,
    /// `None` for the mean over all pairs.
    pub index: Option<usize>,
    pub psnr: f64,
    pub ssim: f64,
}

pub const EVAL_CSV_HEADER: &str = "method,w,s,index,psnr,ssim";

pub fn write_eval_csv(rows: &[EvalRow]) -> String {
    let mut out = format!("{EVAL_CSV_HEADER}\n");
    for r in rows {
        let (m, w, s) = match r.method {
            Method::Bicubic => ("bicubic".to_string(), String::new(), String::new()),
            Method::Sr { w, s } => ("sr".to_string(), w.to_string(), s.to_string()),
        };
        let idx = r.index.map_or("mean".to_string(), |i| i.to_string());
        writeln!(out, "{m},{w},{s},{idx},{:.6},{:.6}", r.psnr, r.ssim).expect("string write");
    }
    out
}

/// The aggregate row of `method`.
pub fn mean_row<'a>(rows: &'a [EvalRow], method: &Method) -> Option<&'a EvalRow> {
    rows.iter().find(|r| r.index.is_none() && &r.method == method)
}

fn push_with_mean(rows: &mut Vec<EvalRow>, method: Method, per_pair: Vec<(usize, f64, f64)>) {
    let n = per_pair.len() as f64;
    let (mp, ms) = per_pair
        .iter()
        .fold((0.0, 0.0), |(a, b), &(_, p, s)| (a + p, b + s));
    for (i, p, s) in per_pair {
        rows.push(EvalRow {
            method: method.clone(),
            index: Some(i),
            psnr: p,
            ssim: s,
        });
    }
    rows.push(EvalRow {
        method,
        index: None,
        psnr: mp / n,
        ssim: ms / n,
    });
}

/// Evaluates `models` on held-out `pairs` over the configured w and s
/// sweeps; the LR input itself is the bicubic baseline.
pub fn evaluate(models: &Models, cfg: &RunConfig, pairs: &[ImagePair]) -> Result<Vec<EvalRow>> {
    let schedule = cfg.schedule.build()?;
    let mut rows = Vec::new();
    let base = pairs
        .iter()
        .map(|p| Ok((p.index, psnr(&p.lr, &p.hr)?, ssim(&p.lr, &p.hr)?)))
        .collect::<Result<Vec<_>>>()?;
    push_with_mean(&mut rows, Method::Bicubic, base);
    for &s in &cfg.eval.s_sweep {
        let opts = InferConfig {
            guidance_scale: s,
            ..cfg.infer.clone()
        };
        let sampled = pairs
            .iter()
            .map(|p| models.sample(cfg, &schedule, &p.lr, &opts, true, pair_seed(opts.seed, p.index)))
            .collect::<Result<Vec<_>>>()?;
        for &w in &cfg.eval.w_sweep {
            let per_pair = pairs
                .iter()
                .zip(&sampled)
                .map(|(p, sm)| {
                    let y = models.finish(sm, w, &opts)?;
                    Ok((p.index, psnr(&y, &p.hr)?, ssim(&y, &p.hr)?))
                })
                .collect::<Result<Vec<_>>>()?;
            push_with_mean(&mut rows, Method::Sr { w, s }, per_pair);
        }
    }
    Ok(rows)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<Vec<EvalRow>> {
    cfg.validate()?;
    let models = Models::load(cfg)?;
    let pairs = load_pairs(&cfg.data.dir, Split::Test)?;
    let rows = evaluate(&models, cfg, &pairs)?;
    checkpoint::write_atomic(&cfg.eval.output, write_eval_csv(&rows).as_bytes())?;
    Ok(rows)
}

/// `points` timesteps evenly spread over `1..=T`.
pub fn probe_timesteps(t_max: usize, points: usize) -> Vec<usize> {
    if points <= 1 {
        return vec![t_max];
    }
    let mut ts: Vec<usize> = (0..points)
        .map(|i| 1 + ((t_max - 1) as f64 * i as f64 / (points - 1) as f64).round() as usize)
        .collect();
    ts.dedup();
    ts
}

pub fn cmd_probe(cfg: &RunConfig) -> Result<Vec<ProbeRow>> {
    cfg.validate()?;
    let ae = load_stage(cfg, Stage::Autoencoder)?;
    let prior = load_stage(cfg, Stage::Prior)?;
    let enc = load_stage(cfg, Stage::Encoder)?;
    let pairs = load_pairs(&cfg.data.dir, Split::Test)?;
    let pair = pairs.get(cfg.probe.pair).ok_or_else(|| {
        Error::Config(format!("probe pair {} of {} held-out pairs", cfg.probe.pair, pairs.len()))
    })?;
    let schedule = cfg.schedule.build()?;
    let model = ConditionedModel {
        prior: &prior,
        prior_cfg: &cfg.prior,
        enc: &enc,
        enc_cfg: &cfg.encoder,
    };
    let rows = cosine_probe(
        model,
        &ae_encode(&ae, &pair.lr)?.0,
        &ae_encode(&ae, &pair.hr)?.0,
        &schedule,
        &probe_timesteps(schedule.len(), cfg.probe.points),
        cfg.probe.seed,
    )?;
    let mut buf = Vec::new();
    write_probe_csv(&rows, &mut buf)?;
    checkpoint::write_atomic(&cfg.probe.output, &buf)?;
    if let Some(m) = probe_minimum(&rows) {
        info!("cosine minimum {:.4} at t={} (snr {:.3e})", m.cosine, m.t, m.snr);
    }
    Ok(rows)
}
