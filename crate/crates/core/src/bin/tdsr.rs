use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tdsr::color::ColorMode;
use tdsr::config::RunConfig;
use tdsr::encoder::probe_minimum;
use tdsr::pipeline::{self, mean_row, Method, Stage};

#[derive(Parser)]
#[command(name = "tdsr", version, about = "Toy diffusion-prior super-resolution")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate procedural HR textures and degraded LR pairs.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one stage (autoencoder, prior, encoder, cfw) or `all` in order.
    Train {
        #[arg(long)]
        stage: String,
        /// Override the step count of the selected stage(s).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Super-resolve one image.
    Infer {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        opts: InferArgs,
    },
    /// PSNR/SSIM of the held-out pairs over the w and s sweeps.
    Eval {
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        w_sweep: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        s_sweep: Option<Vec<f64>>,
        #[command(flatten)]
        opts: InferArgs,
    },
    /// Cosine similarity of prior features before and after SFT across t.
    Probe {
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        points: Option<usize>,
    },
}

#[derive(Args)]
struct InferArgs {
    /// CFW coefficient in [0, 1].
    #[arg(long)]
    w: Option<f64>,
    #[arg(long)]
    guidance_scale: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    color: Option<ColorMode>,
    #[arg(long)]
    preclean: bool,
    /// Bicubic upscale factor applied to the input first.
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Patch side in latent cells.
    #[arg(long)]
    tile_size: Option<usize>,
    #[arg(long)]
    tile_overlap: Option<usize>,
    #[arg(long)]
    tile_sigma: Option<f64>,
}

impl InferArgs {
    fn apply(self, cfg: &mut RunConfig) {
        let i = &mut cfg.infer;
        if let Some(v) = self.w {
            i.w = v;
        }
        if let Some(v) = self.guidance_scale {
            i.guidance_scale = v;
        }
        if let Some(v) = self.steps {
            i.steps = v;
        }
        if let Some(v) = self.color {
            i.color = v;
        }
        i.preclean |= self.preclean;
        if let Some(v) = self.scale {
            i.scale = v;
        }
        if let Some(v) = self.seed {
            i.seed = v;
        }
        if let Some(v) = self.tile_size {
            i.tile.size = v;
        }
        if self.tile_overlap.is_some() {
            i.tile.overlap = self.tile_overlap;
        }
        if self.tile_sigma.is_some() {
            i.tile.sigma = self.tile_sigma;
        }
    }
}

fn run(cli: Cli) -> tdsr::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::GenData { out, count, seed } => {
            if let Some(v) = out {
                cfg.data.dir = v;
            }
            if let Some(v) = count {
                cfg.data.count = v;
            }
            if let Some(v) = seed {
                cfg.data.seed = v;
            }
            cfg.validate()?;
            let entries = pipeline::cmd_gen_data(&cfg)?;
            println!("wrote {} pairs to {}", entries.len(), cfg.data.dir.display());
        }
        Command::Train { stage, steps } => {
            let stages = if stage == "all" {
                Stage::ALL.to_vec()
            } else {
                vec![stage.parse::<Stage>()?]
            };
            for s in stages {
                if let Some(n) = steps {
                    let t = &mut cfg.train;
                    match s {
                        Stage::Autoencoder => t.autoencoder.steps = n,
                        Stage::Prior => t.prior.steps = n,
                        Stage::Encoder => t.encoder.steps = n,
                        Stage::Cfw => t.cfw.steps = n,
                    }
                }
                let r = pipeline::cmd_train(&cfg, s)?;
                for a in &r.audits {
                    println!("freeze {} {} -> {}", a.component, a.before, a.after);
                }
                println!(
                    "{}: loss {:.6} -> {:.6}, checkpoint {}, curve {}",
                    s.name(),
                    r.train.initial_loss().unwrap_or(f64::NAN),
                    r.train.final_loss().unwrap_or(f64::NAN),
                    r.checkpoint.display(),
                    r.loss_csv.display()
                );
            }
        }
        Command::Infer { input, output, opts } => {
            opts.apply(&mut cfg);
            let out = pipeline::cmd_infer(&cfg, &input, &output)?;
            let seam = out.sampled.seam_report()?;
            println!(
                "wrote {} ({} patches, seam {:.4} vs interior {:.4})",
                output.display(),
                seam.patches,
                seam.boundary,
                seam.interior
            );
        }
        Command::Eval {
            output,
            w_sweep,
            s_sweep,
            opts,
        } => {
            opts.apply(&mut cfg);
            if let Some(v) = output {
                cfg.eval.output = v;
            }
            if let Some(v) = w_sweep {
                cfg.eval.w_sweep = v;
            }
            if let Some(v) = s_sweep {
                cfg.eval.s_sweep = v;
            }
            let rows = pipeline::cmd_eval(&cfg)?;
            let mut methods = vec![Method::Bicubic];
            for &s in &cfg.eval.s_sweep {
                for &w in &cfg.eval.w_sweep {
                    methods.push(Method::Sr { w, s });
                }
            }
            for m in methods {
                if let Some(r) = mean_row(&rows, &m) {
                    println!("{m:?}: psnr {:.3} ssim {:.4}", r.psnr, r.ssim);
                }
            }
            println!("metrics in {}", cfg.eval.output.display());
        }
        Command::Probe { output, points } => {
            if let Some(v) = output {
                cfg.probe.output = v;
            }
            if let Some(v) = points {
                cfg.probe.points = v;
            }
            let rows = pipeline::cmd_probe(&cfg)?;
            if let Some(m) = probe_minimum(&rows) {
                println!("minimum cosine {:.4} at t={} snr={:.3e}", m.cosine, m.t, m.snr);
            }
            println!("curve in {}", cfg.probe.output.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
