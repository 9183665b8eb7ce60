//! Procedural HR textures used as the toy training and evaluation corpus.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::image::{gaussian_blur, Image};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextureKind {
    Sinusoids,
    FilteredNoise,
    Polygons,
}

impl TextureKind {
    pub fn for_index(i: usize) -> Self {
        match i % 3 {
            0 => Self::Sinusoids,
            1 => Self::FilteredNoise,
            _ => Self::Polygons,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Sinusoids => "sinusoids",
            Self::FilteredNoise => "filtered_noise",
            Self::Polygons => "polygons",
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
    ]
}

fn sinusoids(size: usize, rng: &mut ChaCha8Rng) -> Image {
    let base = random_color(rng);
    let waves: Vec<([f64; 3], f64, f64, f64)> = (0..3)
        .map(|_| {
            let amp = [
                rng.random_range(-0.15..0.15),
                rng.random_range(-0.15..0.15),
                rng.random_range(-0.15..0.15),
            ];
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let freq = rng.random_range(0.05..0.6);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (amp, theta, freq, phase)
        })
        .collect();
    Image::from_fn(size, size, |y, x, c| {
        let mut v = base[c];
        for (amp, theta, freq, phase) in &waves {
            let u = x as f64 * theta.cos() + y as f64 * theta.sin();
            v += amp[c] * (freq * u + phase).sin();
        }
        v.clamp(0.0, 1.0)
    })
}

fn filtered_noise(size: usize, rng: &mut ChaCha8Rng) -> Image {
    let base = random_color(rng);
    let mut noise = Image::new(size, size);
    for v in noise.data_mut() {
        *v = rng.sample::<f64, _>(StandardNormal);
    }
    let sigma = rng.random_range(1.0..3.0);
    let smooth = gaussian_blur(&noise, sigma);
    let gain = rng.random_range(0.4..1.0) * sigma;
    let mut out = smooth;
    for c in 0..3 {
        for v in out.plane_mut(c) {
            *v = (base[c] + gain * 0.25 * *v).clamp(0.0, 1.0);
        }
    }
    out
}

fn point_in_polygon(px: f64, py: f64, pts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = pts.len() - 1;
    for i in 0..pts.len() {
        let (xi, yi) = pts[i];
        let (xj, yj) = pts[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn polygons(size: usize, rng: &mut ChaCha8Rng) -> Image {
    let bg = random_color(rng);
    let mut img = Image::filled(size, size, bg);
    let s = size as f64;
    for _ in 0..rng.random_range(2..5) {
        let color = random_color(rng);
        let (cx, cy) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let radius = rng.random_range(0.15 * s..0.45 * s);
        let n = rng.random_range(3..7);
        let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        angles.sort_by(f64::total_cmp);
        let pts: Vec<(f64, f64)> = angles
            .iter()
            .map(|a| {
                let r = radius * rng.random_range(0.6..1.0);
                (cx + r * a.cos(), cy + r * a.sin())
            })
            .collect();
        for y in 0..size {
            for x in 0..size {
                if point_in_polygon(x as f64 + 0.5, y as f64 + 0.5, &pts) {
                    for (c, v) in color.iter().enumerate() {
                        img.set(y, x, c, *v);
                    }
                }
            }
        }
    }
    // Soften edges slightly, as a camera would.
    gaussian_blur(&img, 0.5)
}

pub fn generate(kind: TextureKind, size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        TextureKind::Sinusoids => sinusoids(size, &mut rng),
        TextureKind::FilteredNoise => filtered_noise(size, &mut rng),
        TextureKind::Polygons => polygons(size, &mut rng),
    }
}

/// The `i`-th texture of a corpus with base seed `seed`.
pub fn corpus_item(i: usize, size: usize, seed: u64) -> Image {
    let item_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
    generate(TextureKind::for_index(i), size, item_seed)
}
