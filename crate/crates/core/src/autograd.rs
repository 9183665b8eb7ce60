//! A small reverse-mode tape for the convolutional networks in this crate.
//!
//! Every network is written once as a forward pass over a [`Graph`]; the same
//! code then serves inference (nothing requires gradients, nothing is
//! recorded beyond the values) and training (call [`Graph::backward`]).
//! Convolutions use circular padding, stride 1 and odd square kernels.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    Conv2d { x: Var, w: Var, b: Option<Var> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddChannelBias { x: Var, bias: Var },
    Silu(Var),
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Var, Var),
    Narrow { x: Var, start: usize, len: usize },
    Sft { f: Var, alpha: Var, beta: Var },
    Mse { x: Var, target: Tensor },
    L1 { x: Var, target: Tensor },
    Sum(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    no_grad: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph where nothing requires gradients.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            no_grad: true,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && !self.no_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient, e.g. for input-gradient checks.
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?
            .clone();
        let rg = !store.is_frozen(name);
        Ok(self.push(t, Op::Param(name.to_string()), rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if xv.rank() != 4 || wv.rank() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects rank-4 input and weight, got {:?} and {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (_, cin, _, _) = xv.dims4();
        let (_, wcin, kh, kw) = wv.dims4();
        if wcin != cin || kh != kw || kh % 2 == 0 {
            return Err(Error::Shape(format!(
                "conv2d weight {:?} incompatible with input {:?}",
                wv.shape(),
                xv.shape()
            )));
        }
        let bv = b.map(|b| self.value(b));
        if let Some(bv) = bv {
            if bv.shape() != [wv.shape()[0]] {
                return Err(Error::Shape(format!("conv2d bias {:?}", bv.shape())));
            }
        }
        let out = conv2d_forward(xv, wv, bv);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv2d { x, w, b }, rg))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if xv.rank() != 2 || wv.rank() != 2 || xv.shape()[1] != wv.shape()[1] {
            return Err(Error::Shape(format!(
                "linear: input {:?}, weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (n, din) = (xv.shape()[0], xv.shape()[1]);
        let dout = wv.shape()[0];
        let mut out = Tensor::zeros(&[n, dout]);
        gemm(n, din, dout, xv.data(), false, wv.data(), true, out.data_mut(), false);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [dout] {
                return Err(Error::Shape(format!("linear bias {:?}", bv.shape())));
            }
            for row in out.data_mut().chunks_mut(dout) {
                for (o, bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Adds a per-sample, per-channel bias `[N, C]` to a `[N, C, H, W]` map.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let (n, c, h, w) = xv.dims4();
        if bv.shape() != [n, c] {
            return Err(Error::Shape(format!(
                "channel bias {:?} for feature map {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        let hw = h * w;
        for (plane, &bb) in out.data_mut().chunks_mut(hw).zip(bv.data()) {
            plane.iter_mut().for_each(|v| *v += bb);
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddChannelBias { x, bias }, rg))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(x);
        self.push(out, Op::Silu(x), rg)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "avg_pool2 needs even spatial dims, got {:?}",
                xv.shape()
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let src = xv.data();
        for (p, dst) in out.data_mut().chunks_mut(ho * wo).enumerate() {
            let s = &src[p * h * w..(p + 1) * h * w];
            for y in 0..ho {
                for xx in 0..wo {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * wo + xx] = 0.25 * (s[i] + s[i + 1] + s[i + w] + s[i + w + 1]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::AvgPool2(x), rg))
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let src = xv.data();
        for (p, dst) in out.data_mut().chunks_mut(ho * wo).enumerate() {
            let s = &src[p * h * w..(p + 1) * h * w];
            for y in 0..ho {
                for xx in 0..wo {
                    dst[y * wo + xx] = s[(y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Upsample2(x), rg)
    }

    /// Channel concatenation of two `[N, C_i, H, W]` maps.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (n, ca, h, w) = av.dims4();
        let (nb, cb, hb, wb) = bv.dims4();
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::Shape(format!(
                "concat {:?} with {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            data.extend_from_slice(&av.data()[i * ca * hw..(i + 1) * ca * hw]);
            data.extend_from_slice(&bv.data()[i * cb * hw..(i + 1) * cb * hw]);
        }
        let out = Tensor::from_vec(&[n, ca + cb, h, w], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Concat(a, b), rg))
    }

    /// Channels `[start, start + len)` of a `[N, C, H, W]` map.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        if start + len > c {
            return Err(Error::Shape(format!(
                "narrow [{start}, {}) of {c} channels",
                start + len
            )));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * len * hw);
        for i in 0..n {
            let base = (i * c + start) * hw;
            data.extend_from_slice(&xv.data()[base..base + len * hw]);
        }
        let out = Tensor::from_vec(&[n, len, h, w], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Narrow { x, start, len }, rg))
    }

    /// Spatial feature transform `(1 + alpha) * f + beta`.
    pub fn sft(&mut self, f: Var, alpha: Var, beta: Var) -> Result<Var> {
        let fv = self.value(f);
        let av = self.value(alpha);
        let bv = self.value(beta);
        fv.expect_same_shape(av)?;
        fv.expect_same_shape(bv)?;
        let data = fv
            .data()
            .iter()
            .zip(av.data())
            .zip(bv.data())
            .map(|((&x, &a), &b)| (1.0 + a) * x + b)
            .collect();
        let out = Tensor::from_vec(fv.shape(), data)?;
        let rg = self.rg(f) || self.rg(alpha) || self.rg(beta);
        Ok(self.push(out, Op::Sft { f, alpha, beta }, rg))
    }

    /// Mean squared error against a constant target; a scalar `[1]`.
    pub fn mse(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_same_shape(target)?;
        let n = xv.len() as f64;
        let loss: f64 = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::full(&[1], loss),
            Op::Mse {
                x,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// Mean absolute error against a constant target; a scalar `[1]`.
    pub fn l1(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_same_shape(target)?;
        let n = xv.len() as f64;
        let loss: f64 = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::full(&[1], loss),
            Op::L1 {
                x,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// Sum of two scalars.
    pub fn sum_scalars(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != [1] || self.value(b).shape() != [1] {
            return Err(Error::Shape("sum_scalars expects two scalars".into()));
        }
        let out = Tensor::full(&[1], self.value(a).data()[0] + self.value(b).data()[0]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sum(a, b), rg))
    }

    /// Reverse pass from a scalar. Returns gradients for every node that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != [1] {
            return Err(Error::Shape("backward expects a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(&[1], 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, b } => {
                let (dx, dw, db) = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    self.rg(*x),
                    self.rg(*w),
                    b.is_some_and(|b| self.rg(b)),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, din) = (xv.shape()[0], xv.shape()[1]);
                let dout = wv.shape()[0];
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(&[n, din]);
                    gemm(n, dout, din, g.data(), false, wv.data(), false, dx.data_mut(), false);
                    self.accumulate(grads, *x, dx);
                }
                if self.rg(*w) {
                    let mut dw = Tensor::zeros(&[dout, din]);
                    gemm(dout, n, din, g.data(), true, xv.data(), false, dw.data_mut(), false);
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = Tensor::zeros(&[dout]);
                        for row in g.data().chunks(dout) {
                            for (d, v) in db.data_mut().iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.accumulate(grads, *b, db);
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d = g.zip_map(self.value(*b), |x, y| x * y).expect("shape");
                    self.accumulate(grads, *a, d);
                }
                if self.rg(*b) {
                    let d = g.zip_map(self.value(*a), |x, y| x * y).expect("shape");
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::AddChannelBias { x, bias } => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*bias) {
                    let (n, c, h, w) = g.dims4();
                    let mut db = Tensor::zeros(&[n, c]);
                    for (d, plane) in db.data_mut().iter_mut().zip(g.data().chunks(h * w)) {
                        *d = plane.iter().sum();
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Silu(x) => {
                let d = g
                    .zip_map(self.value(*x), |gg, v| {
                        let s = sigmoid(v);
                        gg * (s + v * s * (1.0 - s))
                    })
                    .expect("shape");
                self.accumulate(grads, *x, d);
            }
            Op::AvgPool2(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let (ho, wo) = (h / 2, w / 2);
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                for (p, dst) in dx.data_mut().chunks_mut(h * w).enumerate() {
                    let gs = &g.data()[p * ho * wo..(p + 1) * ho * wo];
                    for y in 0..h {
                        for xx in 0..w {
                            dst[y * w + xx] = 0.25 * gs[(y / 2) * wo + xx / 2];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample2(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let wo = 2 * w;
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                for (p, dst) in dx.data_mut().chunks_mut(h * w).enumerate() {
                    let gs = &g.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            let i = 2 * y * wo + 2 * xx;
                            dst[y * w + xx] = gs[i] + gs[i + 1] + gs[i + wo] + gs[i + wo + 1];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4();
                let cb = self.value(*b).shape()[1];
                let hw = h * w;
                let mut da = Vec::with_capacity(n * ca * hw);
                let mut dbv = Vec::with_capacity(n * cb * hw);
                for i in 0..n {
                    let base = i * (ca + cb) * hw;
                    da.extend_from_slice(&g.data()[base..base + ca * hw]);
                    dbv.extend_from_slice(&g.data()[base + ca * hw..base + (ca + cb) * hw]);
                }
                self.accumulate(grads, *a, Tensor::from_vec(&[n, ca, h, w], da).expect("shape"));
                self.accumulate(grads, *b, Tensor::from_vec(&[n, cb, h, w], dbv).expect("shape"));
            }
            Op::Narrow { x, start, len } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                for i in 0..n {
                    let dst = (i * c + start) * hw;
                    let src = i * len * hw;
                    dx.data_mut()[dst..dst + len * hw]
                        .copy_from_slice(&g.data()[src..src + len * hw]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sft { f, alpha, beta } => {
                if self.rg(*f) {
                    let d = g.zip_map(self.value(*alpha), |gg, a| gg * (1.0 + a)).expect("shape");
                    self.accumulate(grads, *f, d);
                }
                if self.rg(*alpha) {
                    let d = g.zip_map(self.value(*f), |gg, x| gg * x).expect("shape");
                    self.accumulate(grads, *alpha, d);
                }
                self.accumulate(grads, *beta, g.clone());
            }
            Op::Mse { x, target } => {
                let xv = self.value(*x);
                let k = 2.0 * g.data()[0] / xv.len() as f64;
                let d = xv.zip_map(target, |a, b| k * (a - b)).expect("shape");
                self.accumulate(grads, *x, d);
            }
            Op::L1 { x, target } => {
                let xv = self.value(*x);
                let k = g.data()[0] / xv.len() as f64;
                let d = xv
                    .zip_map(target, |a, b| {
                        let r = a - b;
                        if r > 0.0 {
                            k
                        } else if r < 0.0 {
                            -k
                        } else {
                            0.0
                        }
                    })
                    .expect("shape");
                self.accumulate(grads, *x, d);
            }
            Op::Sum(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
        }
    }

    /// Names of all parameter leaves that require gradients.
    pub fn trainable_param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param(name) if n.requires_grad => Some(name.clone()),
                _ => None,
            })
            .collect();
        names.sort();
        names.dedup();
        names
    }

    /// Per-name parameter gradients, summed over every use in the graph.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                if let Some(Some(g)) = grads.grads.get(i) {
                    match out.get_mut(name) {
                        Some(acc) => acc.add_assign(g),
                        None => {
                            out.insert(name.clone(), g.clone());
                        }
                    }
                }
            }
        }
        out
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Circular-padded im2col for one `[C, H, W]` plane stack.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, col: &mut [f64]) {
    let r = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = (y + h + ky - r) % h;
                    let src_row = &plane[sy * w..(sy + 1) * w];
                    let shift = (w + kx - r % w) % w;
                    // dst[y, x] = src[sy, (x + kx - r) mod w]
                    let d = &mut dst[y * w..(y + 1) * w];
                    let split = w - shift;
                    d[..split].copy_from_slice(&src_row[shift..]);
                    d[split..].copy_from_slice(&src_row[..shift]);
                }
            }
        }
    }
}

fn col2im(col: &[f64], c: usize, h: usize, w: usize, k: usize, x: &mut [f64]) {
    let r = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = (y + h + ky - r) % h;
                    let dst_row = &mut plane[sy * w..(sy + 1) * w];
                    let shift = (w + kx - r % w) % w;
                    let s = &src[y * w..(y + 1) * w];
                    let split = w - shift;
                    for (d, v) in dst_row[shift..].iter_mut().zip(&s[..split]) {
                        *d += v;
                    }
                    for (d, v) in dst_row[..shift].iter_mut().zip(&s[split..]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Batch-wide im2col: column `n * hw + p` holds the receptive field of pixel
/// `p` in sample `n`.
fn im2col_batch(x: &Tensor, k: usize) -> Vec<f64> {
    let (n, cin, h, w) = x.dims4();
    let hw = h * w;
    let kk = cin * k * k;
    let mut cols = vec![0.0; kk * n * hw];
    let mut one = vec![0.0; kk * hw];
    for i in 0..n {
        let xs = &x.data()[i * cin * hw..(i + 1) * cin * hw];
        if k == 1 {
            one.copy_from_slice(xs);
        } else {
            im2col(xs, cin, h, w, k, &mut one);
        }
        for r in 0..kk {
            cols[r * n * hw + i * hw..r * n * hw + (i + 1) * hw]
                .copy_from_slice(&one[r * hw..(r + 1) * hw]);
        }
    }
    cols
}

pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (n, cin, h, wd) = x.dims4();
    let (cout, _, k, _) = w.dims4();
    let hw = h * wd;
    let kk = cin * k * k;
    let cols = im2col_batch(x, k);
    let mut tmp = vec![0.0; cout * n * hw];
    gemm(cout, kk, n * hw, w.data(), false, &cols, false, &mut tmp, false);
    let mut out = Tensor::zeros(&[n, cout, h, wd]);
    let od = out.data_mut();
    for co in 0..cout {
        let bb = b.map_or(0.0, |b| b.data()[co]);
        for i in 0..n {
            let src = &tmp[co * n * hw + i * hw..co * n * hw + (i + 1) * hw];
            let dst = &mut od[(i * cout + co) * hw..(i * cout + co + 1) * hw];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + bb;
            }
        }
    }
    out
}

#[allow(clippy::type_complexity)]
fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (n, cin, h, wd) = x.dims4();
    let (cout, _, k, _) = w.dims4();
    let hw = h * wd;
    let kk = cin * k * k;
    // g as [cout, n * hw]
    let mut gt = vec![0.0; cout * n * hw];
    for i in 0..n {
        for co in 0..cout {
            gt[co * n * hw + i * hw..co * n * hw + (i + 1) * hw]
                .copy_from_slice(&g.data()[(i * cout + co) * hw..(i * cout + co + 1) * hw]);
        }
    }
    let db = need_db.then(|| {
        let v = gt.chunks(n * hw).map(|row| row.iter().sum()).collect();
        Tensor::from_vec(&[cout], v).expect("shape")
    });
    let dw = need_dw.then(|| {
        let cols = im2col_batch(x, k);
        let mut dw = Tensor::zeros(w.shape());
        gemm(cout, n * hw, kk, &gt, false, &cols, true, dw.data_mut(), false);
        dw
    });
    let dx = need_dx.then(|| {
        let mut dcol = vec![0.0; kk * n * hw];
        gemm(kk, cout, n * hw, w.data(), true, &gt, false, &mut dcol, false);
        let mut dx = Tensor::zeros(x.shape());
        let mut one = vec![0.0; kk * hw];
        for i in 0..n {
            for r in 0..kk {
                one[r * hw..(r + 1) * hw]
                    .copy_from_slice(&dcol[r * n * hw + i * hw..r * n * hw + (i + 1) * hw]);
            }
            let dxs = &mut dx.data_mut()[i * cin * hw..(i + 1) * cin * hw];
            if k == 1 {
                dxs.copy_from_slice(&one);
            } else {
                col2im(&one, cin, h, wd, k, dxs);
            }
        }
        dx
    });
    (dx, dw, db)
}
