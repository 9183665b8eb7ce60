//! Synthesizes LR/HR pairs and writes every intermediate stage as PNG.
//!
//! ```sh
//! cargo run --release --example degradation_pairs -- [out_dir]
//! ```

use std::path::PathBuf;

use tdsr::degrade::{degrade_with_trace, preclean, DegradationParams};
use tdsr::metrics::{psnr, ssim};
use tdsr::textures::{corpus_item, TextureKind};
use tdsr::Result;

fn main() -> Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("tdsr-degradation"));
    std::fs::create_dir_all(&out)?;
    let params = DegradationParams::default();
    println!("{:<15} {:>6} {:>6} {:>8} {:>7} {:>10}", "texture", "blur", "noise", "psnr", "ssim", "precleaned");
    for i in 0..6 {
        let hr = corpus_item(i, 64, 1);
        let tr = degrade_with_trace(&hr, &params, 100 + i as u64)?;
        let cleaned = preclean(&tr.lr_up)?;
        println!(
            "{:<15} {:>6.2} {:>6.3} {:>8.2} {:>7.4} {:>10.2}",
            TextureKind::for_index(i).name(),
            tr.blur_sigma,
            tr.noise_sigma,
            psnr(&tr.lr_up, &hr)?,
            ssim(&tr.lr_up, &hr)?,
            psnr(&cleaned, &hr)?,
        );
        hr.save_png(&out.join(format!("{i}_hr.png")))?;
        tr.blurred.save_png(&out.join(format!("{i}_blurred.png")))?;
        tr.lr_small.save_png(&out.join(format!("{i}_lr_small.png")))?;
        tr.lr_up.save_png(&out.join(format!("{i}_lr.png")))?;
    }
    println!("images in {}", out.display());
    Ok(())
}
