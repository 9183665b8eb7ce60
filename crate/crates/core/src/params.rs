//! Named parameter tensors with a frozen partition, plus Adam.
//!
//! Parameter values are kept exactly representable as `f32` so that a
//! checkpoint round trip (which stores 32-bit payloads) is lossless.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

fn round_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor) {
        round_f32(&mut t);
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn freeze(&mut self, name: &str) {
        self.frozen.insert(name.to_string());
    }

    pub fn freeze_all(&mut self) {
        self.frozen = self.tensors.keys().cloned().collect();
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &String> {
        self.frozen.iter()
    }

    /// Merge another store; names must not collide.
    pub fn merge(&mut self, other: ParamStore) -> Result<()> {
        for (name, t) in other.tensors {
            if self.tensors.contains_key(&name) {
                return Err(Error::Config(format!("duplicate parameter `{name}`")));
            }
            self.tensors.insert(name, t);
        }
        self.frozen.extend(other.frozen);
        Ok(())
    }

    /// The subset of parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            frozen: self
                .frozen
                .iter()
                .filter(|k| k.starts_with(prefix))
                .cloned()
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and value bits of the named subset
    /// (or every tensor when `prefix` is empty).
    pub fn digest(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.tensors.iter().filter(|(k, _)| k.starts_with(prefix)) {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Conv weight `[cout, cin, k, k]` with He fan-in scaling and a zero bias.
    pub fn init_conv(&mut self, rng: &mut impl Rng, name: &str, cin: usize, cout: usize, k: usize) {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let n = cout * cin * k * k;
        let w = (0..n).map(|_| normal.sample(rng)).collect();
        self.insert(
            format!("{name}.weight"),
            Tensor::from_vec(&[cout, cin, k, k], w).expect("shape"),
        );
        self.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
    }

    pub fn init_conv_zero(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        self.insert(format!("{name}.weight"), Tensor::zeros(&[cout, cin, k, k]));
        self.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
    }

    /// Linear weight `[dout, din]` with He fan-in scaling and a zero bias.
    pub fn init_linear(&mut self, rng: &mut impl Rng, name: &str, din: usize, dout: usize) {
        let normal = Normal::new(0.0, (2.0 / din as f64).sqrt()).expect("valid std");
        let w = (0..din * dout).map(|_| normal.sample(rng)).collect();
        self.insert(
            format!("{name}.weight"),
            Tensor::from_vec(&[dout, din], w).expect("shape"),
        );
        self.insert(format!("{name}.bias"), Tensor::zeros(&[dout]));
    }

    /// Overwrite every tensor with zeros.
    pub fn zero_all(&mut self) {
        for t in self.tensors.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update. Gradients for frozen or unknown names are
    /// rejected rather than silently dropped.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::MissingParam(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient for `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if params.is_frozen(name) {
                return Err(Error::Config(format!("gradient produced for frozen `{name}`")));
            }
        }
        let clip = match self.config.clip_norm {
            Some(max) => {
                let norm = grads
                    .values()
                    .flat_map(|g| g.data().iter())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let gv = gv * clip;
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let update = c.lr * (*mv / bc1) / ((*vv / bc2).sqrt() + c.eps);
                *pv = (*pv - update) as f32 as f64;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_rejects_frozen_gradients() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::full(&[2], 1.0));
        p.freeze("a");
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::full(&[2], 1.0));
        let mut opt = Adam::new(AdamConfig::default());
        assert!(opt.step(&mut p, &grads).is_err());
        assert_eq!(p.get("a").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::full(&[1], 3.0));
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            clip_norm: None,
            ..AdamConfig::default()
        });
        for _ in 0..500 {
            let x = p.get("x").unwrap().data()[0];
            let mut g = BTreeMap::new();
            g.insert("x".to_string(), Tensor::full(&[1], 2.0 * (x - 1.0)));
            opt.step(&mut p, &g).unwrap();
        }
        assert!((p.get("x").unwrap().data()[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn values_are_f32_representable() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::full(&[1], 0.1));
        let v = p.get("a").unwrap().data()[0];
        assert_eq!(v, v as f32 as f64);
    }

    #[test]
    fn digest_tracks_values() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::full(&[2], 1.0));
        let d0 = p.digest("");
        p.get_mut("a").unwrap().data_mut()[0] = 2.0;
        assert_ne!(d0, p.digest(""));
    }
}
