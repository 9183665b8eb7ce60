//! Noise schedule quantities and the strided ancestral sampler.
//!
//! For standard normal data the exact noise predictor is
//! `sqrt(1 - abar_t) * z`, so sampling with it shows how the chain behaves
//! without any training.
//!
//! ```sh
//! cargo run --release --example schedule_and_sampling
//! ```

use tdsr::diffusion::{first_t_below_snr, posterior_sigma, sample, snr, LatentShape, NoiseSchedule};
use tdsr::{LatentGrid, Result};

fn main() -> Result<()> {
    let s = NoiseSchedule::default();
    println!("{:>5} {:>10} {:>12} {:>12}", "t", "beta", "alpha_bar", "snr");
    for t in [1, 10, 100, 250, 500, 750, 1000] {
        println!("{t:>5} {:>10.2e} {:>12.6} {:>12.4e}", s.beta(t)?, s.alpha_bar(t)?, snr(&s, t)?);
    }
    if let Some(t) = first_t_below_snr(&s, 5e-2) {
        println!("SNR first drops below 5e-2 at t = {t}");
    }
    println!("posterior sigma 1000 -> 980: {:.4}", posterior_sigma(&s, 1000, 980)?);

    let oracle = |z: &LatentGrid, _: Option<&LatentGrid>, t: usize| -> Result<LatentGrid> {
        let k = (1.0 - s.alpha_bar(t)?).sqrt();
        let (c, h, w) = z.dims();
        LatentGrid::from_vec(c, h, w, z.data().iter().map(|v| k * v).collect())
    };
    let shape = LatentShape {
        channels: 4,
        height: 16,
        width: 16,
    };
    for steps in [1000, 200, 50, 10] {
        let mut sq = 0.0;
        let mut n = 0.0;
        for seed in 0..8 {
            for v in sample(&oracle, None, shape, &s, steps, seed)?.data() {
                sq += v * v;
                n += 1.0;
            }
        }
        println!("{steps:>4} steps: sample variance {:.3}", sq / n);
    }
    Ok(())
}
