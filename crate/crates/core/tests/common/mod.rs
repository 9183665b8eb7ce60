//! Shared test helpers: scalar-loop reference networks written directly
//! from the architecture description, a central finite-difference
//! gradient auditor, and parameter randomisation.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdsr::autograd::{Graph, Var};
use tdsr::encoder::EncoderConfig;
use tdsr::params::ParamStore;
use tdsr::prior::PriorConfig;
use tdsr::{Result, Tensor};

/// A single-sample `C x H x W` map.
#[derive(Clone, Debug, PartialEq)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Map {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Map { c, h, w, v: vec![0.0; c * h * w] }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        let (c, h, w) = match s.len() {
            3 => (s[0], s[1], s[2]),
            4 => {
                assert_eq!(s[0], 1);
                (s[1], s[2], s[3])
            }
            _ => panic!("rank"),
        };
        Map { c, h, w, v: t.data().to_vec() }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }
}

fn param<'a>(p: &'a ParamStore, name: &str) -> &'a Tensor {
    p.get(name).unwrap_or_else(|| panic!("missing {name}"))
}

pub fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

pub fn silu_map(m: &Map) -> Map {
    Map { v: m.v.iter().map(|&x| silu(x)).collect(), ..m.clone() }
}

/// Circular-padded cross-correlation, one output element at a time.
pub fn conv(p: &ParamStore, name: &str, x: &Map) -> Map {
    let w = param(p, &format!("{name}.weight"));
    let b = param(p, &format!("{name}.bias"));
    let s = w.shape();
    let (cout, cin, k) = (s[0], s[1], s[2]);
    assert_eq!(cin, x.c, "{name}");
    let r = (k / 2) as isize;
    let mut out = Map::zeros(cout, x.h, x.w);
    for o in 0..cout {
        for y in 0..x.h {
            for xx in 0..x.w {
                let mut acc = b.data()[o];
                for i in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = (y as isize + ky as isize - r).rem_euclid(x.h as isize) as usize;
                            let sx = (xx as isize + kx as isize - r).rem_euclid(x.w as isize) as usize;
                            acc += w.data()[((o * cin + i) * k + ky) * k + kx] * x.at(i, sy, sx);
                        }
                    }
                }
                out.v[(o * x.h + y) * x.w + xx] = acc;
            }
        }
    }
    out
}

pub fn linear(p: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let w = param(p, &format!("{name}.weight"));
    let b = param(p, &format!("{name}.bias"));
    let (dout, din) = (w.shape()[0], w.shape()[1]);
    (0..dout)
        .map(|o| b.data()[o] + (0..din).map(|i| w.data()[o * din + i] * x[i]).sum::<f64>())
        .collect()
}

pub fn add(a: &Map, b: &Map) -> Map {
    Map { v: a.v.iter().zip(&b.v).map(|(x, y)| x + y).collect(), ..a.clone() }
}

pub fn avg_pool(x: &Map) -> Map {
    let mut out = Map::zeros(x.c, x.h / 2, x.w / 2);
    for c in 0..x.c {
        for y in 0..x.h / 2 {
            for xx in 0..x.w / 2 {
                let s = x.at(c, 2 * y, 2 * xx)
                    + x.at(c, 2 * y + 1, 2 * xx)
                    + x.at(c, 2 * y, 2 * xx + 1)
                    + x.at(c, 2 * y + 1, 2 * xx + 1);
                out.v[(c * out.h + y) * out.w + xx] = s / 4.0;
            }
        }
    }
    out
}

pub fn upsample(x: &Map) -> Map {
    let mut out = Map::zeros(x.c, 2 * x.h, 2 * x.w);
    for c in 0..x.c {
        for y in 0..out.h {
            for xx in 0..out.w {
                out.v[(c * out.h + y) * out.w + xx] = x.at(c, y / 2, xx / 2);
            }
        }
    }
    out
}

pub fn concat(a: &Map, b: &Map) -> Map {
    let mut v = a.v.clone();
    v.extend_from_slice(&b.v);
    Map { c: a.c + b.c, h: a.h, w: a.w, v }
}

/// Sinusoidal embedding written from its definition.
pub fn embed(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = 10f64.powf(-4.0 * i as f64 / (half - 1) as f64);
        out[i] = (t as f64 * f).sin();
        out[half + i] = (t as f64 * f).cos();
    }
    out
}

pub fn time_mlp(p: &ParamStore, prefix: &str, t: usize, dim: usize) -> Vec<f64> {
    let h: Vec<f64> = linear(p, &format!("{prefix}.fc1"), &embed(t, dim)).into_iter().map(silu).collect();
    linear(p, &format!("{prefix}.fc2"), &h)
}

/// `x + conv2(silu(conv1(silu(x)) + shift))` with a per-channel shift.
pub fn res_block(p: &ParamStore, name: &str, x: &Map, temb: &[f64]) -> Map {
    let h = conv(p, &format!("{name}.conv1"), &silu_map(x));
    let shift = linear(p, &format!("{name}.temb"), temb);
    let mut h2 = h.clone();
    for c in 0..h.c {
        for i in 0..h.h * h.w {
            h2.v[c * h.h * h.w + i] += shift[c];
        }
    }
    let h3 = conv(p, &format!("{name}.conv2"), &silu_map(&h2));
    add(x, &h3)
}

pub fn sft(f: &Map, alpha: &Map, beta: &Map) -> Map {
    let v = f
        .v
        .iter()
        .zip(&alpha.v)
        .zip(&beta.v)
        .map(|((x, a), b)| (1.0 + a) * x + b)
        .collect();
    Map { v, ..f.clone() }
}

/// Reference prior; `sft` holds `(alpha, beta)` per residual block.
pub fn prior_ref(
    p: &ParamStore,
    cfg: &PriorConfig,
    z: &Map,
    t: usize,
    cond: usize,
    sft_pairs: Option<&[(Map, Map)]>,
) -> Map {
    let mut temb = time_mlp(p, "prior.time", t, cfg.time_dim);
    let cw = param(p, "prior.cond.weight");
    for (e, v) in temb.iter_mut().enumerate() {
        *v += cw.data()[e * cfg.num_conditions + cond];
    }
    let temb: Vec<f64> = temb.into_iter().map(silu).collect();
    let b = cfg.blocks_per_scale;
    let mut idx = 0;
    let mut block = |x: &Map| {
        let out = res_block(p, &format!("prior.block{idx}"), x, &temb);
        let out = match sft_pairs {
            Some(s) => sft(&out, &s[idx].0, &s[idx].1),
            None => out,
        };
        idx += 1;
        out
    };
    let mut x = conv(p, "prior.in", z);
    for _ in 0..b {
        x = block(&x);
    }
    let skip = x.clone();
    let mut x = conv(p, "prior.down", &avg_pool(&x));
    for _ in 0..b {
        x = block(&x);
    }
    let mut x = add(&conv(p, "prior.up", &upsample(&x)), &skip);
    for _ in 0..b {
        x = block(&x);
    }
    conv(p, "prior.out", &silu_map(&x))
}

/// Reference encoder: `(features [f0, f1], sft pairs)`.
pub fn encoder_ref(
    p: &ParamStore,
    cfg: &EncoderConfig,
    prior: &PriorConfig,
    lr: &Map,
    t: usize,
) -> ([Map; 2], Vec<(Map, Map)>) {
    let t_used = if cfg.time_aware { t } else { 0 };
    let temb: Vec<f64> = time_mlp(p, "enc.time", t_used, cfg.time_dim).into_iter().map(silu).collect();
    let f0 = res_block(p, "enc.block0", &conv(p, "enc.in", lr), &temb);
    let f1 = res_block(p, "enc.block1", &conv(p, "enc.down", &avg_pool(&f0)), &temb);
    let feats = [f0, f1];
    let mut pairs = Vec::new();
    for i in 0..3 * prior.blocks_per_scale {
        let scale = usize::from(i / prior.blocks_per_scale == 1);
        let width = prior.widths[scale];
        let h = silu_map(&conv(p, &format!("enc.sft{i}.conv1"), &feats[scale]));
        let out = conv(p, &format!("enc.sft{i}.out"), &h);
        let n = width * out.h * out.w;
        let alpha = Map { c: width, h: out.h, w: out.w, v: out.v[..n].to_vec() };
        let beta = Map { c: width, h: out.h, w: out.w, v: out.v[n..].to_vec() };
        pairs.push((alpha, beta));
    }
    (feats, pairs)
}

/// Reference autoencoder encoder: `(latent, [f_full, f_half])`.
pub fn ae_encode_ref(p: &ParamStore, img: &Map) -> (Map, [Map; 2]) {
    let scale = param(p, "ae.latent_scale").data()[0];
    let f0 = silu_map(&conv(p, "ae.enc.c0", &silu_map(&conv(p, "ae.enc.in", img))));
    let d = silu_map(&conv(p, "ae.enc.down", &avg_pool(&f0)));
    let f1 = silu_map(&conv(p, "ae.enc.c1", &d));
    let mut z = conv(p, "ae.enc.out", &avg_pool(&f1));
    z.v.iter_mut().for_each(|v| *v *= scale);
    (z, [f0, f1])
}

fn cfw_ref(cfw: &ParamStore, s: usize, fe: &Map, fd: &Map, w: f64) -> Map {
    let h = silu_map(&conv(cfw, &format!("cfw.c{s}.conv1"), &concat(fe, fd)));
    let delta = conv(cfw, &format!("cfw.c{s}.conv2"), &h);
    Map { v: fd.v.iter().zip(&delta.v).map(|(a, d)| a + w * d).collect(), ..fd.clone() }
}

/// Reference decoder, unclamped; CFW applied when given.
pub fn ae_decode_ref(p: &ParamStore, z: &Map, cfw: Option<(&ParamStore, &[Map; 2], f64)>) -> Map {
    let scale = param(p, "ae.latent_scale").data()[0];
    let z = Map { v: z.v.iter().map(|v| v / scale).collect(), ..z.clone() };
    let x = silu_map(&conv(p, "ae.dec.cq", &silu_map(&conv(p, "ae.dec.in", &z))));
    let mut f1 = conv(p, "ae.dec.c1", &upsample(&x));
    if let Some((c, fe, w)) = cfw {
        f1 = cfw_ref(c, 1, &fe[1], &f1, w);
    }
    let mut f0 = conv(p, "ae.dec.c0", &upsample(&silu_map(&f1)));
    if let Some((c, fe, w)) = cfw {
        f0 = cfw_ref(c, 0, &fe[0], &f0, w);
    }
    conv(p, "ae.dec.out", &silu_map(&f0))
}

/// Adds uniform noise of amplitude `amp` to every tensor (f32-rounded), so
/// zero-initialised layers carry gradient.
pub fn randomize(p: &mut ParamStore, amp: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = p.names().cloned().collect();
    for n in names {
        if n == "ae.latent_scale" {
            continue;
        }
        for v in p.get_mut(&n).unwrap().data_mut() {
            *v = (*v + rng.random_range(-amp..amp)) as f32 as f64;
        }
    }
}

pub fn rand_tensor(shape: &[usize], amp: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-amp..amp)).collect()).unwrap()
}

#[derive(Debug)]
pub struct AuditReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
    /// Parameters whose analytic gradient is nonzero somewhere.
    pub active_tensors: usize,
    pub tensors: usize,
}

pub const FD_STEP: f64 = 1e-4;
pub const FD_REL_TOL: f64 = 1e-3;
/// Below this magnitude both gradients count as zero.
const FD_ABS_FLOOR: f64 = 1e-7;

/// Compares analytic parameter gradients with central differences of
/// `loss` for every scalar of every trainable tensor in `params`.
pub fn fd_audit(
    params: &ParamStore,
    loss: impl Fn(&ParamStore) -> Result<(Graph, Var)>,
) -> AuditReport {
    let (g, l) = loss(params).unwrap();
    let grads = g.param_grads(&g.backward(l).unwrap());
    let mut work = params.clone();
    let mut report = AuditReport {
        checked: 0,
        max_rel: 0.0,
        worst: String::new(),
        active_tensors: 0,
        tensors: 0,
    };
    let eval = |p: &ParamStore| {
        let (g, l) = loss(p).unwrap();
        g.value(l).data()[0]
    };
    let names: Vec<String> = params.names().filter(|n| !params.is_frozen(n)).cloned().collect();
    for name in names {
        report.tensors += 1;
        let analytic = grads.get(&name).unwrap_or_else(|| panic!("no gradient for {name}"));
        if analytic.data().iter().any(|v| *v != 0.0) {
            report.active_tensors += 1;
        }
        for i in 0..analytic.len() {
            let orig = work.get(&name).unwrap().data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + FD_STEP;
            let up = eval(&work);
            work.get_mut(&name).unwrap().data_mut()[i] = orig - FD_STEP;
            let down = eval(&work);
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data()[i];
            let scale = a.abs().max(numeric.abs());
            let rel = if scale < FD_ABS_FLOOR { 0.0 } else { (a - numeric).abs() / scale };
            report.checked += 1;
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst = format!("{name}[{i}]: analytic {a:e}, numeric {numeric:e}");
            }
        }
    }
    report
}
