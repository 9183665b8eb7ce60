//! Time-aware SFT conditioning of a frozen prior.
//!
//! Trains a small prior on smooth latents, freezes it, fine-tunes the
//! encoder on LR/HR latent pairs and probes how strongly the modulation
//! changes the prior's features across timesteps.
//!
//! ```sh
//! cargo run --release --example sft_conditioning
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdsr::diffusion::make_schedule;
use tdsr::encoder::{cosine_probe, finetune_encoder, init_encoder, ConditionedModel, EncoderConfig, LatentPair};
use tdsr::params::AdamConfig;
use tdsr::prior::{init_prior, train_prior, PriorConfig, PriorExample, NULL_CONDITION};
use tdsr::train::TrainConfig;
use tdsr::{LatentGrid, Result};

fn tc(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 16,
        adam: AdamConfig {
            lr: 2e-3,
            ..AdamConfig::default()
        },
        seed,
        final_lr_factor: 1.0,
    }
}

fn smooth_latent(rng: &mut ChaCha8Rng) -> LatentGrid {
    let a: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ph = std::f64::consts::FRAC_PI_4;
    let data = (0..2 * 8 * 8)
        .map(|i| {
            let (c, y, x) = (i / 64, (i / 8) % 8, i % 8);
            a[4 * c] * (ph * x as f64 + a[4 * c + 1]).sin() + a[4 * c + 2] * (ph * y as f64).cos() + a[4 * c + 3]
        })
        .collect();
    LatentGrid::from_vec(2, 8, 8, data).unwrap()
}

fn main() -> Result<()> {
    let pc = PriorConfig {
        latent_channels: 2,
        widths: [8, 12],
        blocks_per_scale: 1,
        time_dim: 16,
        embed_dim: 16,
        num_conditions: 2,
    };
    let ec = EncoderConfig {
        widths: [8, 12],
        time_dim: 16,
        embed_dim: 16,
        time_aware: true,
    };
    let s = make_schedule(200, 1e-3, 5e-2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let hr: Vec<LatentGrid> = (0..32).map(|_| smooth_latent(&mut rng)).collect();

    let mut prior = init_prior(&pc, 1)?;
    let data: Vec<PriorExample> = hr
        .iter()
        .map(|z| PriorExample {
            latent: z.clone(),
            condition: NULL_CONDITION,
        })
        .collect();
    let r = train_prior(&mut prior, &pc, &data, &s, &tc(400, 2))?;
    println!("prior loss {:.4} -> {:.4}", r.initial_loss().unwrap(), r.final_loss().unwrap());

    // LR latent: contrast halved plus noise.
    let pairs: Vec<LatentPair> = hr
        .iter()
        .map(|z| {
            let lr = z.data().iter().map(|v| 0.5 * v + 0.1 * rng.random_range(-1.0..1.0)).collect();
            LatentPair {
                lr: LatentGrid::from_vec(2, 8, 8, lr).unwrap(),
                hr: z.clone(),
            }
        })
        .collect();
    let mut enc = init_encoder(&ec, &pc, 3)?;
    let t_list: Vec<usize> = (1..=10).map(|i| i * 20).collect();
    {
        let model = ConditionedModel {
            prior: &prior,
            prior_cfg: &pc,
            enc: &enc,
            enc_cfg: &ec,
        };
        let fresh = cosine_probe(model, &pairs[0].lr, &pairs[0].hr, &s, &t_list, 0)?;
        println!("fresh encoder, cosine at every t: {:?}", fresh.iter().map(|r| r.cosine).collect::<Vec<_>>());
    }
    let r = finetune_encoder(&prior, &pc, &mut enc, &ec, &pairs, &s, &tc(800, 4))?;
    println!("encoder loss {:.4} -> {:.4}", r.initial_loss().unwrap(), r.final_loss().unwrap());
    let model = ConditionedModel {
        prior: &prior,
        prior_cfg: &pc,
        enc: &enc,
        enc_cfg: &ec,
    };
    println!("{:>4} {:>10} {:>8}", "t", "snr", "cosine");
    for row in cosine_probe(model, &pairs[0].lr, &pairs[0].hr, &s, &t_list, 0)? {
        println!("{:>4} {:>10.3e} {:>8.4}", row.t, row.snr, row.cosine);
    }
    Ok(())
}
