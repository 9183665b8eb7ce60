//! The whole pipeline on a small configuration: synthesize data, train the
//! four stages in order, evaluate on the held-out split and probe the
//! conditioning strength. Takes several minutes on one core.
//!
//! ```sh
//! cargo run --release --example end_to_end -- [work_dir]
//! ```

use std::path::PathBuf;
use std::time::Instant;

use tdsr::config::RunConfig;
use tdsr::encoder::probe_minimum;
use tdsr::pipeline::{cmd_eval, cmd_gen_data, cmd_probe, cmd_train, Method, Stage};
use tdsr::Result;

const CONFIG: &str = r#"
[data]
count = 80
holdout = 8
image_size = 32

[autoencoder]
widths = [12, 24]

[prior]
widths = [12, 24]
embed_dim = 24

[encoder]
widths = [12, 24]

[train]
cfw_sample_steps = 25
cfw_augment = false

[train.autoencoder]
steps = 2000
batch_size = 8
lr = 2e-3
final_lr_factor = 0.05

[train.prior]
steps = 2000
batch_size = 16
lr = 1e-3

[train.encoder]
steps = 2000
batch_size = 16
lr = 1e-3

[train.cfw]
steps = 1500
batch_size = 8
lr = 2e-3
final_lr_factor = 0.05

[infer]
steps = 25
color = "wavelet"
tile = { size = 8 }

[probe]
points = 20
"#;

fn main() -> Result<()> {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("tdsr-end-to-end"));
    std::fs::create_dir_all(&root)?;
    let mut cfg = RunConfig::from_toml(CONFIG)?;
    cfg.data.dir = root.join("data");
    cfg.train.checkpoint_dir = root.join("ckpt");
    cfg.eval.output = root.join("metrics.csv");
    cfg.probe.output = root.join("probe.csv");

    println!("{} pairs in {}", cmd_gen_data(&cfg)?.len(), cfg.data.dir.display());
    for stage in Stage::ALL {
        let start = Instant::now();
        let r = cmd_train(&cfg, stage)?;
        println!(
            "{:<12} loss {:.4} -> {:.4} in {:.1} s",
            stage.name(),
            r.train.initial_loss().unwrap_or(f64::NAN),
            r.train.final_loss().unwrap_or(f64::NAN),
            start.elapsed().as_secs_f64()
        );
    }

    for row in cmd_eval(&cfg)?.iter().filter(|r| r.index.is_none()) {
        let name = match row.method {
            Method::Bicubic => "bicubic".to_string(),
            Method::Sr { w, s } => format!("sr w={w} s={s}"),
        };
        println!("{name:<16} psnr {:.2} ssim {:.4}", row.psnr, row.ssim);
    }
    if let Some(m) = probe_minimum(&cmd_probe(&cfg)?) {
        println!("weakest SFT agreement {:.4} at t = {} (snr {:.3e})", m.cosine, m.t, m.snr);
    }
    println!("outputs in {}", root.display());
    Ok(())
}
