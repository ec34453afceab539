//! Wengert-list reverse-mode differentiation.
//!
//! A `Tape` records one forward pass as a list of nodes in topological order;
//! `backward` walks the list in reverse and accumulates exact gradients into
//! the owning `ParamStore`. The tape is rebuilt every batch and never reused,
//! so there is no support for higher-order derivatives.

use crate::diff::params::{ParamId, ParamStore};
use crate::diff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Handle to a node on a tape. Only valid for the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    /// Constant or parameter leaf.
    Leaf,
    /// inputs: [x(B,I), w(I,O), b(O)].
    Affine,
    Relu,
    Sigmoid,
    /// Lanes along `axis`; rows of a matrix for axis 1.
    Softmax { axis: usize },
    LogSoftmax { axis: usize },
    /// Fused log-sum-exp cross-entropy, mean over batch rows.
    CrossEntropy { labels: Vec<usize> },
    /// Probabilities clamped to [1e-12, 1-1e-12] before the log.
    BinaryCrossEntropy { labels: Vec<f64> },
    /// inputs: [pred, target]; mean over all elements.
    Mse,
    Add,
    Sub,
    Mul,
    Scale { k: f64 },
    Sum,
    Mean,
    SliceCols { start: usize, end: usize },
    /// out = x + noise; the gradient passes through unchanged.
    AddNoise,
    /// inputs: [mu_p, mu_q]; closed-form diagonal-Gaussian KL, mean over rows.
    KlDiagRows { sigma_q: f64 },
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    out: Tensor,
    param: Option<ParamId>,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let lse = log_sum_exp(xs);
    for x in xs.iter_mut() {
        *x = (*x - lse).exp();
    }
}

/// KL(N(mu_p, sigma_p^2 I) || N(mu_q, sigma_q^2 I)) in closed form.
pub fn kl_diag_gaussians(mu_p: &[f64], sigma_p: f64, mu_q: &[f64], sigma_q: f64) -> Result<f64> {
    if sigma_p <= 0.0 || sigma_q <= 0.0 {
        return Err(Error::domain("kl_diag_gaussians needs positive sigmas"));
    }
    if mu_p.len() != mu_q.len() {
        return Err(Error::dim(format!(
            "kl mean lengths differ: {} vs {}",
            mu_p.len(),
            mu_q.len()
        )));
    }
    let d = mu_p.len() as f64;
    let vr = (sigma_p * sigma_p) / (sigma_q * sigma_q);
    let dist2: f64 = mu_p
        .iter()
        .zip(mu_q)
        .map(|(p, q)| (p - q) * (p - q))
        .sum();
    Ok(0.5 * (d * vr + dist2 / (sigma_q * sigma_q) - d - d * vr.ln()))
}

const BCE_CLAMP: f64 = 1e-12;

impl Tape {
    pub fn new() -> Tape {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    // Non-finite values are allowed to flow through; the training loop
    // checks the loss and aborts with the batch position instead.
    fn push(&mut self, op: Op, inputs: Vec<usize>, out: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            inputs,
            out,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, vec![], t)
    }

    /// Registers a parameter leaf; `backward` accumulates its gradient into
    /// the store the parameter came from.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(Op::Leaf, vec![], store.tensor(id).clone());
        self.nodes.last_mut().unwrap().param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].out
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        self.nodes[v.0].out.item()
    }

    /// Gradient of the last `backward` target w.r.t. node `v`, if reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.nodes[x.0].out.shape(),
            self.nodes[w.0].out.shape(),
            self.nodes[b.0].out.shape(),
        );
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(Error::dim(format!(
                "affine shapes do not conform: x{:?} w{:?} b{:?}",
                xs, ws, bs
            )));
        }
        let (bsz, i, o) = (xs[0], xs[1], ws[1]);
        let mut out = vec![0.0; bsz * o];
        {
            let xv = self.nodes[x.0].out.values();
            let wv = self.nodes[w.0].out.values();
            let bv = self.nodes[b.0].out.values();
            for r in 0..bsz {
                let row = &mut out[r * o..(r + 1) * o];
                row.copy_from_slice(bv);
                for k in 0..i {
                    let xrk = xv[r * i + k];
                    if xrk == 0.0 {
                        continue;
                    }
                    let wrow = &wv[k * o..(k + 1) * o];
                    for (c, wkc) in wrow.iter().enumerate() {
                        row[c] += xrk * wkc;
                    }
                }
            }
        }
        let t = Tensor::new(vec![bsz, o], out)?;
        Ok(self.push(Op::Affine, vec![x.0, w.0, b.0], t))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut t = self.nodes[x.0].out.clone();
        for v in t.values_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(Op::Relu, vec![x.0], t)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut t = self.nodes[x.0].out.clone();
        for v in t.values_mut() {
            *v = sigmoid(*v);
        }
        self.push(Op::Sigmoid, vec![x.0], t)
    }

    fn lane_check(&self, x: Var, axis: usize) -> Result<()> {
        let rank = self.nodes[x.0].out.shape().len();
        let ok = (rank == 1 && axis == 0) || (rank == 2 && axis <= 1);
        if ok {
            Ok(())
        } else {
            Err(Error::dim(format!(
                "axis {} invalid for rank-{} tensor",
                axis, rank
            )))
        }
    }

    /// Iterates lanes along `axis`: (lane element count, stride, base offsets).
    fn lanes(shape: &[usize], axis: usize) -> (usize, usize, Vec<usize>) {
        match shape.len() {
            1 => (shape[0], 1, vec![0]),
            2 => {
                let (r, c) = (shape[0], shape[1]);
                if axis == 1 {
                    (c, 1, (0..r).map(|i| i * c).collect())
                } else {
                    (r, c, (0..c).collect())
                }
            }
            _ => unreachable!("lane ops are rank 1 or 2 only"),
        }
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.lane_check(x, axis)?;
        let mut t = self.nodes[x.0].out.clone();
        let (n, stride, bases) = Self::lanes(t.shape(), axis);
        for &b in &bases {
            let mut lane: Vec<f64> = (0..n).map(|i| t.values()[b + i * stride]).collect();
            softmax_in_place(&mut lane);
            for (i, v) in lane.iter().enumerate() {
                t.values_mut()[b + i * stride] = *v;
            }
        }
        Ok(self.push(Op::Softmax { axis }, vec![x.0], t))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.lane_check(x, axis)?;
        let mut t = self.nodes[x.0].out.clone();
        let (n, stride, bases) = Self::lanes(t.shape(), axis);
        for &b in &bases {
            let lane: Vec<f64> = (0..n).map(|i| t.values()[b + i * stride]).collect();
            let lse = log_sum_exp(&lane);
            for i in 0..n {
                t.values_mut()[b + i * stride] -= lse;
            }
        }
        Ok(self.push(Op::LogSoftmax { axis }, vec![x.0], t))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = &self.nodes[logits.0].out;
        if t.shape().len() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::dim(format!(
                "cross_entropy: logits {:?} vs {} labels",
                t.shape(),
                labels.len()
            )));
        }
        let k = t.shape()[1];
        if let Some(bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::domain(format!(
                "label {} out of range for {} classes",
                bad, k
            )));
        }
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = t.row(r);
            total += log_sum_exp(row) - row[y];
        }
        let out = Tensor::scalar(total / labels.len() as f64);
        Ok(self.push(
            Op::CrossEntropy {
                labels: labels.to_vec(),
            },
            vec![logits.0],
            out,
        ))
    }

    pub fn binary_cross_entropy(&mut self, probs: Var, labels: &[f64]) -> Result<Var> {
        let t = &self.nodes[probs.0].out;
        if t.len() != labels.len() {
            return Err(Error::dim(format!(
                "binary_cross_entropy: {} probs vs {} labels",
                t.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|y| !(0.0..=1.0).contains(*y)) {
            return Err(Error::domain(format!("binary label {} outside [0,1]", bad)));
        }
        let mut total = 0.0;
        for (p, y) in t.values().iter().zip(labels) {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        let out = Tensor::scalar(total / labels.len() as f64);
        Ok(self.push(
            Op::BinaryCrossEntropy {
                labels: labels.to_vec(),
            },
            vec![probs.0],
            out,
        ))
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (&self.nodes[pred.0].out, &self.nodes[target.0].out);
        if p.shape() != t.shape() {
            return Err(Error::dim(format!(
                "mse shapes differ: {:?} vs {:?}",
                p.shape(),
                t.shape()
            )));
        }
        if p.is_empty() {
            return Err(Error::usage("mse of empty tensor"));
        }
        let n = p.len() as f64;
        let total: f64 = p
            .values()
            .iter()
            .zip(t.values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let out = Tensor::scalar(total / n);
        Ok(self.push(Op::Mse, vec![pred.0, target.0], out))
    }

    fn elementwise(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].out, &self.nodes[b.0].out);
        if ta.shape() != tb.shape() {
            return Err(Error::dim(format!(
                "elementwise shapes differ: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let values = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), values)?;
        Ok(self.push(op, vec![a.0, b.0], t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let mut t = self.nodes[x.0].out.clone();
        for v in t.values_mut() {
            *v *= k;
        }
        self.push(Op::Scale { k }, vec![x.0], t)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].out.values().iter().sum();
        self.push(Op::Sum, vec![x.0], Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].out;
        if t.is_empty() {
            return Err(Error::usage("mean of empty tensor"));
        }
        let m = t.values().iter().sum::<f64>() / t.len() as f64;
        Ok(self.push(Op::Mean, vec![x.0], Tensor::scalar(m)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = &self.nodes[x.0].out;
        if t.shape().len() != 2 || start > end || end > t.shape()[1] {
            return Err(Error::dim(format!(
                "slice {}..{} invalid for shape {:?}",
                start,
                end,
                t.shape()
            )));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let w = end - start;
        let mut values = Vec::with_capacity(r * w);
        for row in 0..r {
            values.extend_from_slice(&t.values()[row * c + start..row * c + end]);
        }
        let out = Tensor::new(vec![r, w], values)?;
        Ok(self.push(Op::SliceCols { start, end }, vec![x.0], out))
    }

    /// mu + sigma * eps with eps ~ N(0, I); gradient flows to mu with factor 1.
    /// sigma = 0 returns `mu` itself, consuming no randomness.
    pub fn gaussian_reparam_sample(
        &mut self,
        mu: Var,
        sigma: f64,
        rng: &mut StreamRng,
    ) -> Result<Var> {
        if sigma < 0.0 || !sigma.is_finite() {
            return Err(Error::domain(format!("reparam sigma {} invalid", sigma)));
        }
        if sigma == 0.0 {
            return Ok(mu);
        }
        let mut t = self.nodes[mu.0].out.clone();
        let mut noise = vec![0.0; t.len()];
        rng.fill_normal(&mut noise);
        for n in noise.iter_mut() {
            *n *= sigma;
        }
        for (v, n) in t.values_mut().iter_mut().zip(&noise) {
            *v += n;
        }
        Ok(self.push(Op::AddNoise, vec![mu.0], t))
    }

    /// Closed-form KL between row-wise diagonal Gaussians, averaged over rows.
    /// 1-D inputs are treated as a single row. Differentiable w.r.t. both means.
    pub fn kl_diag(&mut self, mu_p: Var, sigma_p: f64, mu_q: Var, sigma_q: f64) -> Result<Var> {
        if sigma_p <= 0.0 || sigma_q <= 0.0 {
            return Err(Error::domain("kl_diag needs positive sigmas"));
        }
        let (tp, tq) = (&self.nodes[mu_p.0].out, &self.nodes[mu_q.0].out);
        if tp.shape() != tq.shape() || tp.shape().is_empty() || tp.shape().len() > 2 {
            return Err(Error::dim(format!(
                "kl_diag shapes: {:?} vs {:?}",
                tp.shape(),
                tq.shape()
            )));
        }
        let rows = tp.rows();
        let mut total = 0.0;
        for r in 0..rows {
            total += kl_diag_gaussians(tp.row(r), sigma_p, tq.row(r), sigma_q)?;
        }
        let out = Tensor::scalar(total / rows as f64);
        Ok(self.push(
            Op::KlDiagRows { sigma_q },
            vec![mu_p.0, mu_q.0],
            out,
        ))
    }

    /// Reverse pass from a scalar node; parameter gradients accumulate into
    /// `store` (on top of whatever is already there).
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if !self.nodes[loss.0].out.is_scalar() {
            return Err(Error::usage(format!(
                "backward target must be scalar, got shape {:?}",
                self.nodes[loss.0].out.shape()
            )));
        }
        self.grads = self.nodes.iter().map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &gout);
            self.grads[i] = Some(gout);
        }

        for node in &self.nodes {
            if let Some(id) = node.param {
                if let Some(g) = self.grads[self.index_of(id)].as_ref() {
                    store.accumulate_grad(id, g);
                }
            }
        }
        Ok(())
    }

    fn index_of(&self, id: ParamId) -> usize {
        // Leaf param nodes are unique per (tape, id) in practice; a linear scan
        // keeps the tape free of side tables.
        self.nodes
            .iter()
            .position(|n| n.param == Some(id))
            .expect("param node present")
    }

    fn add_grad(&mut self, node: usize, delta: &[f64]) {
        let slot = &mut self.grads[node];
        match slot {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn propagate(&mut self, i: usize, gout: &[f64]) {
        let inputs = self.nodes[i].inputs.clone();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Affine => {
                let (x, w, _b) = (inputs[0], inputs[1], inputs[2]);
                let xs = self.nodes[x].out.shape().to_vec();
                let ws = self.nodes[w].out.shape().to_vec();
                let (bsz, icols, o) = (xs[0], xs[1], ws[1]);
                let mut gx = vec![0.0; bsz * icols];
                let mut gw = vec![0.0; icols * o];
                let mut gb = vec![0.0; o];
                {
                    let xv = self.nodes[x].out.values();
                    let wv = self.nodes[w].out.values();
                    for r in 0..bsz {
                        let go = &gout[r * o..(r + 1) * o];
                        for c in 0..o {
                            gb[c] += go[c];
                        }
                        for k in 0..icols {
                            let mut acc = 0.0;
                            let wrow = &wv[k * o..(k + 1) * o];
                            for c in 0..o {
                                acc += go[c] * wrow[c];
                            }
                            gx[r * icols + k] = acc;
                            let xrk = xv[r * icols + k];
                            if xrk != 0.0 {
                                let gwrow = &mut gw[k * o..(k + 1) * o];
                                for c in 0..o {
                                    gwrow[c] += xrk * go[c];
                                }
                            }
                        }
                    }
                }
                self.add_grad(inputs[0], &gx);
                self.add_grad(inputs[1], &gw);
                self.add_grad(inputs[2], &gb);
            }
            Op::Relu => {
                let xin = inputs[0];
                let g: Vec<f64> = self.nodes[xin]
                    .out
                    .values()
                    .iter()
                    .zip(gout)
                    .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.add_grad(xin, &g);
            }
            Op::Sigmoid => {
                let g: Vec<f64> = self.nodes[i]
                    .out
                    .values()
                    .iter()
                    .zip(gout)
                    .map(|(y, g)| g * y * (1.0 - y))
                    .collect();
                self.add_grad(inputs[0], &g);
            }
            Op::Softmax { axis } => {
                let axis = *axis;
                let y = self.nodes[i].out.clone();
                let (n, stride, bases) = Self::lanes(y.shape(), axis);
                let mut g = vec![0.0; y.len()];
                for &b in &bases {
                    let mut dot = 0.0;
                    for k in 0..n {
                        let idx = b + k * stride;
                        dot += gout[idx] * y.values()[idx];
                    }
                    for k in 0..n {
                        let idx = b + k * stride;
                        g[idx] = y.values()[idx] * (gout[idx] - dot);
                    }
                }
                self.add_grad(inputs[0], &g);
            }
            Op::LogSoftmax { axis } => {
                let axis = *axis;
                let y = self.nodes[i].out.clone();
                let (n, stride, bases) = Self::lanes(y.shape(), axis);
                let mut g = vec![0.0; y.len()];
                for &b in &bases {
                    let mut gsum = 0.0;
                    for k in 0..n {
                        gsum += gout[b + k * stride];
                    }
                    for k in 0..n {
                        let idx = b + k * stride;
                        g[idx] = gout[idx] - y.values()[idx].exp() * gsum;
                    }
                }
                self.add_grad(inputs[0], &g);
            }
            Op::CrossEntropy { labels } => {
                let labels = labels.clone();
                let logits = self.nodes[inputs[0]].out.clone();
                let (bsz, k) = (logits.shape()[0], logits.shape()[1]);
                let scale = gout[0] / bsz as f64;
                let mut g = vec![0.0; bsz * k];
                for (r, &y) in labels.iter().enumerate() {
                    let mut row: Vec<f64> = logits.row(r).to_vec();
                    softmax_in_place(&mut row);
                    for c in 0..k {
                        g[r * k + c] = scale * (row[c] - if c == y { 1.0 } else { 0.0 });
                    }
                }
                self.add_grad(inputs[0], &g);
            }
            Op::BinaryCrossEntropy { labels } => {
                let labels = labels.clone();
                let probs = self.nodes[inputs[0]].out.clone();
                let scale = gout[0] / labels.len() as f64;
                let g: Vec<f64> = probs
                    .values()
                    .iter()
                    .zip(&labels)
                    .map(|(p, y)| {
                        let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                        scale * (p - y) / (p * (1.0 - p))
                    })
                    .collect();
                self.add_grad(inputs[0], &g);
            }
            Op::Mse => {
                let (p, t) = (
                    self.nodes[inputs[0]].out.clone(),
                    self.nodes[inputs[1]].out.clone(),
                );
                let scale = 2.0 * gout[0] / p.len() as f64;
                let g: Vec<f64> = p
                    .values()
                    .iter()
                    .zip(t.values())
                    .map(|(a, b)| scale * (a - b))
                    .collect();
                self.add_grad(inputs[0], &g);
                let gneg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.add_grad(inputs[1], &gneg);
            }
            Op::Add => {
                self.add_grad(inputs[0], gout);
                self.add_grad(inputs[1], gout);
            }
            Op::Sub => {
                self.add_grad(inputs[0], gout);
                let gneg: Vec<f64> = gout.iter().map(|v| -v).collect();
                self.add_grad(inputs[1], &gneg);
            }
            Op::Mul => {
                let (a, b) = (
                    self.nodes[inputs[0]].out.clone(),
                    self.nodes[inputs[1]].out.clone(),
                );
                let ga: Vec<f64> = gout.iter().zip(b.values()).map(|(g, y)| g * y).collect();
                let gb: Vec<f64> = gout.iter().zip(a.values()).map(|(g, x)| g * x).collect();
                self.add_grad(inputs[0], &ga);
                self.add_grad(inputs[1], &gb);
            }
            Op::Scale { k } => {
                let k = *k;
                let g: Vec<f64> = gout.iter().map(|v| v * k).collect();
                self.add_grad(inputs[0], &g);
            }
            Op::Sum => {
                let n = self.nodes[inputs[0]].out.len();
                self.add_grad(inputs[0], &vec![gout[0]; n]);
            }
            Op::Mean => {
                let n = self.nodes[inputs[0]].out.len();
                self.add_grad(inputs[0], &vec![gout[0] / n as f64; n]);
            }
            Op::SliceCols { start, end } => {
                let (start, end) = (*start, *end);
                let shape = self.nodes[inputs[0]].out.shape().to_vec();
                let (r, c) = (shape[0], shape[1]);
                let w = end - start;
                let mut g = vec![0.0; r * c];
                for row in 0..r {
                    g[row * c + start..row * c + end]
                        .copy_from_slice(&gout[row * w..(row + 1) * w]);
                }
                self.add_grad(inputs[0], &g);
            }
            Op::AddNoise => {
                self.add_grad(inputs[0], gout);
            }
            Op::KlDiagRows { sigma_q } => {
                let sq2 = sigma_q * sigma_q;
                let (p, q) = (
                    self.nodes[inputs[0]].out.clone(),
                    self.nodes[inputs[1]].out.clone(),
                );
                let rows = p.rows() as f64;
                let scale = gout[0] / (sq2 * rows);
                let g: Vec<f64> = p
                    .values()
                    .iter()
                    .zip(q.values())
                    .map(|(a, b)| scale * (a - b))
                    .collect();
                self.add_grad(inputs[0], &g);
                let gneg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.add_grad(inputs[1], &gneg);
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::params::Init;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{} vs {} (tol {})", a, b, tol);
    }

    #[test]
    fn affine_identity_and_hand_case() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let w = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let b = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(y).values(), &[1.0, 2.0]);

        let x2 = tape.constant(Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap());
        let w2 = tape.constant(Tensor::from_rows(&[vec![2.0], vec![3.0]]).unwrap());
        let b2 = tape.constant(Tensor::vector(vec![1.0]));
        let y2 = tape.affine(x2, w2, b2).unwrap();
        assert_eq!(tape.value(y2).values(), &[6.0]);
    }

    #[test]
    fn affine_rejects_mismatched_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let w = tape.constant(Tensor::from_rows(&[vec![1.0]]).unwrap());
        let b = tape.constant(Tensor::vector(vec![0.0]));
        assert!(tape.affine(x, w, b).is_err());
    }

    #[test]
    fn affine_with_zero_width_input_is_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 0], vec![]).unwrap());
        let w = tape.constant(Tensor::new(vec![0, 2], vec![]).unwrap());
        let b = tape.constant(Tensor::vector(vec![0.5, -1.0]));
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(y).values(), &[0.5, -1.0, 0.5, -1.0, 0.5, -1.0]);
    }

    #[test]
    fn activation_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, -3.2]));
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).values()[0], 0.5);
        let r = tape.relu(x);
        assert_eq!(tape.value(r).values(), &[0.0, 0.0]);

        let u = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0, 0.0]));
        let sm = tape.softmax(u, 0).unwrap();
        for v in tape.value(sm).values() {
            close(*v, 0.25, 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(
            Tensor::from_rows(&[vec![1.0, -2.0, 0.3], vec![400.0, 402.0, 398.0]]).unwrap(),
        );
        let y = tape.softmax(x, 1).unwrap();
        for r in 0..2 {
            let s: f64 = tape.value(y).row(r).iter().sum();
            close(s, 1.0, 1e-12);
        }
        assert!(tape.softmax(x, 2).is_err());
    }

    #[test]
    fn loss_values() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
        let ce = tape.cross_entropy(logits, &[0]).unwrap();
        close(tape.scalar_value(ce).unwrap(), 2f64.ln(), 1e-12);
        assert!(tape.cross_entropy(logits, &[2]).is_err());

        let p = tape.constant(Tensor::vector(vec![0.5]));
        let bce = tape.binary_cross_entropy(p, &[1.0]).unwrap();
        close(tape.scalar_value(bce).unwrap(), 2f64.ln(), 1e-12);

        let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let m = tape.mse(x, x).unwrap();
        assert_eq!(tape.scalar_value(m).unwrap(), 0.0);
    }

    #[test]
    fn reparam_sigma_zero_is_identity() {
        let mut tape = Tape::new();
        let mut rng = StreamRng::new(0, "reparam");
        let mu = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let z = tape.gaussian_reparam_sample(mu, 0.0, &mut rng).unwrap();
        assert_eq!(z, mu);
        assert!(tape.gaussian_reparam_sample(mu, -1.0, &mut rng).is_err());
    }

    #[test]
    fn reparam_mean_and_gradient() {
        let mut tape = Tape::new();
        let mut rng = StreamRng::new(9, "reparam");
        let mu = tape.constant(Tensor::zeros(vec![100_000]));
        let z = tape.gaussian_reparam_sample(mu, 1.0, &mut rng).unwrap();
        let mean = tape.value(z).values().iter().sum::<f64>() / 1e5;
        close(mean, 0.0, 0.02);

        let mut store = ParamStore::new(0);
        let id = store
            .add("mu", Tensor::vector(vec![0.5, -0.5, 2.0]), Init::AsIs)
            .unwrap();
        let mut tape = Tape::new();
        let muv = tape.param(&store, id);
        let z = tape.gaussian_reparam_sample(muv, 0.7, &mut rng).unwrap();
        let s = tape.sum(z);
        tape.backward(s, &mut store).unwrap();
        assert_eq!(store.grad(id), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn kl_closed_form_cases() {
        close(
            kl_diag_gaussians(&[1.0, 2.0], 1.0, &[1.0, 2.0], 1.0).unwrap(),
            0.0,
            1e-15,
        );
        close(kl_diag_gaussians(&[3.0], 1.0, &[0.0], 1.0).unwrap(), 4.5, 1e-12);
        let expect = 0.5 * (2.0 * 0.25 - 2.0 + 2.0 * 4f64.ln());
        close(
            kl_diag_gaussians(&[0.0, 0.0], 1.0, &[0.0, 0.0], 2.0).unwrap(),
            expect,
            1e-12,
        );
        assert!(kl_diag_gaussians(&[0.0], 0.0, &[0.0], 1.0).is_err());
    }

    #[test]
    fn kl_matches_half_squared_distance_at_unit_sigmas() {
        let p = [0.3, -1.2, 5.0];
        let q = [0.0, 0.8, 4.0];
        let d2: f64 = p.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum();
        close(
            kl_diag_gaussians(&p, 1.0, &q, 1.0).unwrap(),
            0.5 * d2,
            1e-10,
        );
    }

    #[test]
    fn kl_rows_averages_over_batch() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(&[vec![3.0], vec![0.0]]).unwrap());
        let q = tape.constant(Tensor::from_rows(&[vec![0.0], vec![0.0]]).unwrap());
        let kl = tape.kl_diag(p, 1.0, q, 1.0).unwrap();
        close(tape.scalar_value(kl).unwrap(), 2.25, 1e-12);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut store = ParamStore::new(0);
        let id = store
            .add("w", Tensor::vector(vec![1.0, 2.0]), Init::AsIs)
            .unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let ww = tape.mul(w, w).unwrap();
        let loss = tape.sum(ww);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(id), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut store = ParamStore::new(0);
        let id = store
            .add("w", Tensor::vector(vec![1.0, 2.0]), Init::AsIs)
            .unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let err = tape.backward(w, &mut store);
        assert!(err.is_err());
    }

    #[test]
    fn slice_cols_scatters_gradient() {
        let mut store = ParamStore::new(0);
        let id = store
            .add(
                "m",
                Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap(),
                Init::AsIs,
            )
            .unwrap();
        let mut tape = Tape::new();
        let m = tape.param(&store, id);
        let s = tape.slice_cols(m, 1, 3).unwrap();
        assert_eq!(tape.value(s).values(), &[2.0, 3.0, 5.0, 6.0]);
        let loss = tape.sum(s);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(id), &[0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn gradient_reaches_reused_parameter_twice() {
        let mut store = ParamStore::new(0);
        let id = store
            .add("w", Tensor::vector(vec![3.0]), Init::AsIs)
            .unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let doubled = tape.add(w, w).unwrap();
        let loss = tape.sum(doubled);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(id), &[2.0]);
    }
}
