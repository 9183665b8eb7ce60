//! Fidelity against the controllable feature wrapping coefficient.
//!
//! Trains a small autoencoder, then the CFW layers on degraded inputs, and
//! decodes the LR latents across a sweep of `w`.
//!
//! ```sh
//! cargo run --release --example cfw_tradeoff
//! ```

use tdsr::autoencoder::{
    ae_decode_cfw, ae_encode, init_autoencoder, init_cfw, train_autoencoder, train_cfw, AutoencoderConfig,
    CfwCoefficient, CfwExample,
};
use tdsr::degrade::{degrade, DegradationParams};
use tdsr::image::Image;
use tdsr::metrics::{psnr, ssim};
use tdsr::params::AdamConfig;
use tdsr::textures::corpus_item;
use tdsr::train::TrainConfig;
use tdsr::Result;

fn tc(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 4,
        adam: AdamConfig {
            lr: 2e-3,
            ..AdamConfig::default()
        },
        seed,
        final_lr_factor: 1.0,
    }
}

fn main() -> Result<()> {
    let cfg = AutoencoderConfig {
        latent_channels: 4,
        widths: [8, 12],
    };
    let hr: Vec<Image> = (0..24).map(|i| corpus_item(i, 16, 3)).collect();
    let mut ae = init_autoencoder(&cfg, 1)?;
    train_autoencoder(&mut ae, &hr, &tc(600, 1))?;
    ae.freeze_all();

    let params = DegradationParams::default();
    let examples: Vec<CfwExample> = hr
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let lr = degrade(h, &params, i as u64)?;
            let (latent, features) = ae_encode(&ae, &lr)?;
            Ok(CfwExample {
                latent,
                features,
                target: h.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let mut cfw = init_cfw(&cfg, 2)?;
    let r = train_cfw(&mut cfw, &ae, &examples, &tc(800, 3))?;
    println!("cfw loss {:.4} -> {:.4}", r.initial_loss().unwrap(), r.final_loss().unwrap());

    println!("{:>5} {:>8} {:>7}", "w", "psnr", "ssim");
    for w in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let (mut p, mut q) = (0.0, 0.0);
        for (ex, h) in examples.iter().zip(&hr) {
            let y = ae_decode_cfw(&ae, Some(&cfw), &ex.latent, Some(&ex.features), CfwCoefficient::new(w))?;
            p += psnr(&y, h)?;
            q += ssim(&y, h)?;
        }
        let n = hr.len() as f64;
        println!("{w:>5.2} {:>8.2} {:>7.4}", p / n, q / n);
    }
    Ok(())
}
