//! Pixel and wavelet color correction of a color-shifted "generation".
//!
//! ```sh
//! cargo run --release --example wavelet_color_correction
//! ```

use tdsr::color::{pixel_color_correct, wavelet_color_correct, wavelet_decompose};
use tdsr::degrade::{degrade, DegradationParams};
use tdsr::image::Image;
use tdsr::metrics::psnr;
use tdsr::textures::corpus_item;
use tdsr::Result;

fn energy(img: &Image) -> f64 {
    img.data().iter().map(|v| v * v).sum::<f64>() / img.data().len() as f64
}

fn main() -> Result<()> {
    let hr = corpus_item(2, 64, 7);
    let lr = degrade(&hr, &DegradationParams::default(), 3)?;

    let pyr = wavelet_decompose(&hr, 4)?;
    for (i, band) in pyr.high.iter().enumerate() {
        println!("H^{} energy {:.2e}", i + 1, energy(band));
    }
    println!("L^4 energy {:.2e}", energy(&pyr.low));

    // A generation with the right detail but a colour cast that drifts
    // across the image, which a global per-channel fix cannot undo.
    let cast = |y: usize, x: usize, c: usize| {
        let (u, v) = (x as f64 / 64.0, y as f64 / 64.0);
        0.12 * (std::f64::consts::TAU * (u + 0.3 * c as f64)).sin() + 0.05 * v
    };
    let generated = Image::from_fn(64, 64, |y, x, c| hr.get(y, x, c) + cast(y, x, c));
    println!("generated vs HR: {:.2} dB", psnr(&generated, &hr)?);
    let pixel = pixel_color_correct(&generated, &lr)?;
    println!("pixel correction: {:.2} dB", psnr(&pixel.image, &hr)?);
    for l in 1..=4 {
        let out = wavelet_color_correct(&generated, &lr, l)?;
        println!("wavelet correction, {l} levels: {:.2} dB", psnr(&out.image, &hr)?);
    }
    Ok(())
}
