//! Progressive patch aggregation: sampling latents larger than the
//! denoiser's training resolution.
//!
//! Each timestep the full-grid state is cut into overlapping `p x p`
//! patches, the noise predictor runs per patch, and the predictions are
//! fused with Gaussian weights normalized by their per-pixel sum. One DDPM
//! step is then taken on the whole grid, so neighbouring patches always see
//! the same state and the same noise.

use crate::diffusion::{
    cfg_combine, ddpm_step_between, GuidanceConfig, LatentShape, NoisePredictor, NoiseSchedule,
    NoiseStream,
};
use crate::encoder::ConditionedModel;
use crate::error::{Error, Result};
use crate::latent::LatentGrid;

/// Separable Gaussian `exp(-r^2 / sigma^2)` over a `p x p` patch, centred
/// at `(p - 1) / 2`, with peak value 1.
pub fn gaussian_weight(p: usize, sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidRange(format!("gaussian sigma must be > 0, got {sigma}")));
    }
    if p == 0 {
        return Err(Error::Geometry("patch size must be >= 1".into()));
    }
    let c = (p as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..p)
        .map(|i| (-((i as f64 - c).powi(2)) / (sigma * sigma)).exp())
        .collect();
    let mut k = Vec::with_capacity(p * p);
    for gy in &g {
        for gx in &g {
            k.push(gy * gx);
        }
    }
    Ok(k)
}

pub fn default_sigma(p: usize) -> f64 {
    p as f64 / 4.0
}

pub fn default_overlap(p: usize) -> usize {
    p / 2
}

/// Patch origins along one axis: stride `p - overlap`, last patch flush
/// with the border.
fn axis_starts(n: usize, p: usize, stride: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut s = 0;
    while s + p < n {
        starts.push(s);
        s += stride;
    }
    starts.push(n - p);
    starts
}

#[derive(Clone, Debug)]
pub struct PatchLayout {
    height: usize,
    width: usize,
    patch: usize,
    overlap: usize,
    sigma: f64,
    /// `(row, col)` of each patch, row-major.
    origins: Vec<(usize, usize)>,
    kernel: Vec<f64>,
    /// `sum_n w_n` over the full grid.
    normalizer: Vec<f64>,
}

/// Layout with the default sigma `p / 4`.
pub fn plan_patches(h: usize, w: usize, p: usize, overlap: usize) -> Result<PatchLayout> {
    PatchLayout::new(h, w, p, overlap, default_sigma(p))
}

impl PatchLayout {
    pub fn new(h: usize, w: usize, p: usize, overlap: usize, sigma: f64) -> Result<Self> {
        if p == 0 || p > h.min(w) {
            return Err(Error::Geometry(format!("patch size {p} does not fit {h}x{w}")));
        }
        if overlap == 0 || overlap >= p {
            return Err(Error::Geometry(format!(
                "overlap must satisfy 0 < overlap < {p}, got {overlap}"
            )));
        }
        let stride = p - overlap;
        let rows = axis_starts(h, p, stride);
        let cols = axis_starts(w, p, stride);
        let origins: Vec<(usize, usize)> = rows
            .iter()
            .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
            .collect();
        let kernel = gaussian_weight(p, sigma)?;
        let mut normalizer = vec![0.0; h * w];
        for &(r, c) in &origins {
            for y in 0..p {
                for x in 0..p {
                    normalizer[(r + y) * w + c + x] += kernel[y * p + x];
                }
            }
        }
        Ok(Self {
            height: h,
            width: w,
            patch: p,
            overlap,
            sigma,
            origins,
            kernel,
            normalizer,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn patch_size(&self) -> usize {
        self.patch
    }

    pub fn overlap(&self) -> usize {
        self.overlap
    }

    pub fn stride(&self) -> usize {
        self.patch - self.overlap
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn origins(&self) -> &[(usize, usize)] {
        &self.origins
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn normalizer(&self) -> &[f64] {
        &self.normalizer
    }

    /// Weight of patch `n` at grid pixel `(y, x)`; zero outside the patch.
    pub fn weight(&self, n: usize, y: usize, x: usize) -> f64 {
        let (r, c) = self.origins[n];
        let p = self.patch;
        if y < r || y >= r + p || x < c || x >= c + p {
            return 0.0;
        }
        self.kernel[(y - r) * p + (x - c)]
    }

    /// `sum_n w_n / w_hat` per pixel; 1 everywhere up to rounding.
    pub fn normalized_sum(&self) -> Vec<f64> {
        let (h, w, p) = (self.height, self.width, self.patch);
        let mut out = vec![0.0; h * w];
        for &(r, c) in &self.origins {
            for y in 0..p {
                for x in 0..p {
                    let i = (r + y) * w + c + x;
                    out[i] += self.kernel[y * p + x] / self.normalizer[i];
                }
            }
        }
        out
    }

    fn check_grid(&self, g: &LatentGrid) -> Result<()> {
        if (g.height(), g.width()) != (self.height, self.width) {
            return Err(Error::Shape(format!(
                "latent {:?} does not match layout {}x{}",
                g.dims(),
                self.height,
                self.width
            )));
        }
        Ok(())
    }

    /// Cuts `g` into the layout's patches, row-major.
    pub fn split(&self, g: &LatentGrid) -> Result<Vec<LatentGrid>> {
        self.check_grid(g)?;
        self.origins
            .iter()
            .map(|&(r, c)| g.crop(r, c, self.patch, self.patch))
            .collect()
    }
}

/// Fuses per-patch predictions: `sum_n (w_n / w_hat) * eps_n`, accumulated
/// in patch order.
pub fn aggregate_eps(preds: &[LatentGrid], layout: &PatchLayout) -> Result<LatentGrid> {
    if preds.len() != layout.len() {
        return Err(Error::Shape(format!(
            "{} predictions for a layout of {} patches",
            preds.len(),
            layout.len()
        )));
    }
    let p = layout.patch;
    let channels = preds[0].channels();
    for e in preds {
        if e.dims() != (channels, p, p) {
            return Err(Error::Shape(format!(
                "patch prediction {:?}, expected ({channels}, {p}, {p})",
                e.dims()
            )));
        }
    }
    let (h, w) = (layout.height, layout.width);
    let mut out = LatentGrid::zeros(channels, h, w);
    let mut touched = vec![false; h * w];
    let data = out.data_mut();
    for (e, &(r, c)) in preds.iter().zip(&layout.origins) {
        let src = e.data();
        for y in 0..p {
            for x in 0..p {
                let i = (r + y) * w + c + x;
                let k = layout.kernel[y * p + x] / layout.normalizer[i];
                for ch in 0..channels {
                    let v = k * src[(ch * p + y) * p + x];
                    let d = &mut data[ch * h * w + i];
                    // Assign on first touch so a lone patch passes through
                    // unchanged, signed zeros included.
                    *d = if touched[i] { *d + v } else { v };
                }
                touched[i] = true;
            }
        }
    }
    Ok(out)
}

/// What the sampler saw at one reverse step.
pub struct StepView<'a> {
    pub t: usize,
    pub patch_inputs: &'a [LatentGrid],
    pub eps: &'a LatentGrid,
    /// Full-grid noise for this step; `None` on the final step.
    pub noise: Option<&'a LatentGrid>,
}

/// Runs the reverse chain with per-patch prediction and fused steps. With
/// a single patch this is exactly [`crate::diffusion::sample`].
pub fn progressive_sample(
    predictor: &dyn NoisePredictor,
    lr_full: &LatentGrid,
    layout: &PatchLayout,
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<LatentGrid> {
    progressive_sample_observed(predictor, lr_full, layout, schedule, steps, seed, |_| {})
}

pub fn progressive_sample_observed(
    predictor: &dyn NoisePredictor,
    lr_full: &LatentGrid,
    layout: &PatchLayout,
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
    mut observe: impl FnMut(&StepView<'_>),
) -> Result<LatentGrid> {
    layout.check_grid(lr_full)?;
    let cond_patches = layout.split(lr_full)?;
    let shape = LatentShape {
        channels: lr_full.channels(),
        height: layout.height,
        width: layout.width,
    };
    let ts = schedule.strided_timesteps(steps)?;
    let mut noise = NoiseStream::new(seed, shape);
    let mut z = noise.draw();
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let inputs = layout.split(&z)?;
        let preds = inputs
            .iter()
            .zip(&cond_patches)
            .map(|(zp, cp)| predictor.predict(zp, Some(cp), t))
            .collect::<Result<Vec<_>>>()?;
        let eps = aggregate_eps(&preds, layout)?;
        let n = (t_prev > 0).then(|| noise.draw());
        observe(&StepView {
            t,
            patch_inputs: &inputs,
            eps: &eps,
            noise: n.as_ref(),
        });
        z = ddpm_step_between(&z, &eps, t, t_prev, schedule, n.as_ref())?;
    }
    Ok(z)
}

/// Baseline without aggregation: disjoint `p x p` tiles, each predicted
/// only from its own state. Noise is still drawn on the full grid so the
/// comparison isolates the fusion. Dims must be multiples of `p`.
pub fn naive_tiled_sample(
    predictor: &dyn NoisePredictor,
    lr_full: &LatentGrid,
    p: usize,
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<LatentGrid> {
    let (channels, h, w) = lr_full.dims();
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Geometry(format!("{h}x{w} is not tiled by {p}x{p}")));
    }
    let shape = LatentShape {
        channels,
        height: h,
        width: w,
    };
    let ts = schedule.strided_timesteps(steps)?;
    let mut noise = NoiseStream::new(seed, shape);
    let mut z = noise.draw();
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let mut eps = LatentGrid::zeros(channels, h, w);
        for r in (0..h).step_by(p) {
            for c in (0..w).step_by(p) {
                let e = predictor.predict(&z.crop(r, c, p, p)?, Some(&lr_full.crop(r, c, p, p)?), t)?;
                paste(&mut eps, &e, r, c);
            }
        }
        let n = (t_prev > 0).then(|| noise.draw());
        z = ddpm_step_between(&z, &eps, t, t_prev, schedule, n.as_ref())?;
    }
    Ok(z)
}

fn paste(dst: &mut LatentGrid, src: &LatentGrid, r: usize, c: usize) {
    let (ch, ph, pw) = src.dims();
    let (h, w) = (dst.height(), dst.width());
    let d = dst.data_mut();
    for k in 0..ch {
        for y in 0..ph {
            for x in 0..pw {
                d[(k * h + r + y) * w + c + x] = src.data()[(k * ph + y) * pw + x];
            }
        }
    }
}

/// Mean absolute difference between columns `col - 1` and `col`, over all
/// channels and rows.
pub fn seam_discontinuity(z: &LatentGrid, col: usize) -> Result<f64> {
    let (channels, h, w) = z.dims();
    if col == 0 || col >= w {
        return Err(Error::Geometry(format!("seam column {col} outside 1..{w}")));
    }
    let mut s = 0.0;
    for c in 0..channels {
        for y in 0..h {
            s += (z.at(c, y, col) - z.at(c, y, col - 1)).abs();
        }
    }
    Ok(s / (channels * h) as f64)
}

/// Mean absolute horizontal neighbour difference over every column pair
/// except `skip`; the reference level for a seam.
pub fn interior_discontinuity(z: &LatentGrid, skip: usize) -> Result<f64> {
    let w = z.width();
    let cols: Vec<usize> = (1..w).filter(|&c| c != skip).collect();
    if cols.is_empty() {
        return Err(Error::Geometry("no interior columns".into()));
    }
    let mut s = 0.0;
    for &c in &cols {
        s += seam_discontinuity(z, c)?;
    }
    Ok(s / cols.len() as f64)
}

/// Classifier-free guided noise predictor over the conditioned model.
///
/// At `s = 1` only the unconditioned branch is evaluated and at `s = 0`
/// only the conditioned one.
pub struct GuidedPredictor<'a> {
    pub model: ConditionedModel<'a>,
    pub guidance: GuidanceConfig,
}

impl NoisePredictor for GuidedPredictor<'_> {
    fn predict(&self, z: &LatentGrid, cond: Option<&LatentGrid>, t: usize) -> Result<LatentGrid> {
        let lr = cond.ok_or_else(|| Error::Config("guided prediction needs a condition".into()))?;
        let g = &self.guidance;
        let branch = |id| self.model.forward_with_condition(z, lr, t, id);
        if g.scale == 1.0 {
            return branch(g.unconditioned_id);
        }
        if g.scale == 0.0 {
            return branch(g.conditioned_id);
        }
        cfg_combine(&branch(g.conditioned_id)?, &branch(g.unconditioned_id)?, g.scale)
    }
}

impl NoisePredictor for ConditionedModel<'_> {
    fn predict(&self, z: &LatentGrid, cond: Option<&LatentGrid>, t: usize) -> Result<LatentGrid> {
        let lr = cond.ok_or_else(|| Error::Config("conditioned prediction needs a condition".into()))?;
        self.forward(z, lr, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, sample};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_patch_layout() {
        let l = plan_patches(16, 16, 16, 8).unwrap();
        assert_eq!(l.origins(), &[(0, 0)]);
    }

    #[test]
    fn exact_two_by_two_tiling() {
        let l = plan_patches(24, 24, 16, 8).unwrap();
        assert_eq!(l.origins(), &[(0, 0), (0, 8), (8, 0), (8, 8)]);
    }

    #[test]
    fn last_patch_is_shifted_inward() {
        let l = plan_patches(37, 20, 16, 8).unwrap();
        let rows: Vec<usize> = l.origins().iter().map(|o| o.0).collect();
        assert!(rows.contains(&21));
        assert!(l.origins().iter().all(|&(r, c)| r + 16 <= 37 && c + 16 <= 20));
    }

    #[test]
    fn invalid_geometry() {
        assert!(plan_patches(8, 8, 16, 4).is_err());
        assert!(plan_patches(16, 16, 8, 0).is_err());
        assert!(plan_patches(16, 16, 8, 8).is_err());
        assert!(gaussian_weight(4, 0.0).is_err());
    }

    #[test]
    fn weight_peak_and_symmetry() {
        let k = gaussian_weight(16, 4.0).unwrap();
        let m = k.iter().cloned().fold(f64::MIN, f64::max);
        assert!(m <= 1.0);
        for (a, b) in [(7, 7), (7, 8), (8, 7), (8, 8)] {
            assert_eq!(k[a * 16 + b], m);
        }
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(k[y * 16 + x], k[(15 - y) * 16 + x]);
                assert_eq!(k[y * 16 + x], k[y * 16 + 15 - x]);
            }
        }
        assert_eq!(gaussian_weight(5, 1.0).unwrap()[12], 1.0);
    }

    #[test]
    fn aggregate_of_constants_is_constant() {
        let l = plan_patches(20, 28, 8, 3).unwrap();
        let preds = vec![LatentGrid::from_vec(2, 8, 8, vec![0.375; 128]).unwrap(); l.len()];
        let agg = aggregate_eps(&preds, &l).unwrap();
        assert!(agg.data().iter().all(|v| (v - 0.375).abs() < 1e-12));
    }

    #[test]
    fn aggregate_count_mismatch() {
        let l = plan_patches(12, 12, 8, 4).unwrap();
        assert!(aggregate_eps(&[LatentGrid::zeros(1, 8, 8)], &l).is_err());
    }

    #[test]
    fn single_patch_matches_plain_sampler() {
        let schedule = make_schedule(20, 1e-3, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lr = LatentGrid::from_vec(2, 4, 4, (0..32).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let f = |z: &LatentGrid, c: Option<&LatentGrid>, t: usize| -> Result<LatentGrid> {
            let c = c.unwrap();
            let mut out = z.clone();
            for (o, v) in out.data_mut().iter_mut().zip(c.data()) {
                *o = 0.3 * *o - 0.2 * v + t as f64 * 1e-3;
            }
            Ok(out)
        };
        let l = plan_patches(4, 4, 4, 2).unwrap();
        let shape = LatentShape {
            channels: 2,
            height: 4,
            width: 4,
        };
        let a = progressive_sample(&f, &lr, &l, &schedule, 10, 11).unwrap();
        let b = sample(&f, Some(&lr), shape, &schedule, 10, 11).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn seam_metric() {
        let mut z = LatentGrid::zeros(1, 2, 4);
        for y in 0..2 {
            for x in 2..4 {
                z.data_mut()[y * 4 + x] = 1.0;
            }
        }
        assert_eq!(seam_discontinuity(&z, 2).unwrap(), 1.0);
        assert_eq!(interior_discontinuity(&z, 2).unwrap(), 0.0);
    }
}
