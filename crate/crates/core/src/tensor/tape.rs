//! Reverse-mode automatic differentiation over a linear operation record.
//!
//! Every primitive appends one node; node indices are therefore already a
//! topological order and `backward` simply walks them in reverse.

use rand::Rng;

use super::conv::{channel_major_to_nchw, col2im, im2col, nchw_to_channel_major, ConvGeom};
use super::gemm::gemm;
use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::RngState;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Affine(Var, f64),
    Mask(Var, Vec<f64>),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Softmax(Var),
    LogClamp(Var, f64),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        col: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    AvgPool(Var),
    Broadcast(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        pred: Var,
        target: Tensor,
        floor: f64,
    },
    Mse(Var, Var),
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Batch statistics produced by a train-mode batch norm, for running averages.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Lower bound applied inside every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Sum of a row of probabilities may deviate from one by at most this much.
const ROW_SUM_TOL: f64 = 1e-6;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Splits a shape around axis 1 into (outer, channels, inner).
fn channel_split(shape: &[usize]) -> (usize, usize, usize) {
    let outer = shape.first().copied().unwrap_or(1);
    let channels = shape.get(1).copied().unwrap_or(1);
    let inner = shape.iter().skip(2).product();
    (outer, channels, inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant; it never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, false, Op::Leaf)
    }

    /// Records a differentiable leaf.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push_raw(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push_raw(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric { op: name.into() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, requires_grad, op))
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, &[a, b], Op::MatMul(a, b))
    }

    /// Adds a per-channel bias; the channel axis is axis 1.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, channels, inner) = channel_split(&shape);
        if shape.len() < 2 || self.shape(bias) != [channels] {
            return Err(Error::dim("add_bias", &shape, self.shape(bias)));
        }
        let mut out = self.data(x).to_vec();
        let b = self.data(bias);
        for n in 0..outer {
            for c in 0..channels {
                let start = (n * channels + c) * inner;
                for v in &mut out[start..start + inner] {
                    *v += b[c];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push("add_bias", value, &[x, bias], Op::AddBias(x, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", self.shape(a), self.shape(b)));
        }
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push("add", value, &[a, b], Op::Add(a, b))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.data(x).iter().map(|v| scale * v + shift).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("affine", value, &[x], Op::Affine(x, scale))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::dim("mul_const", self.shape(x), &[mask.len()]));
        }
        let out = self.data(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("mul_const", value, &[x], Op::Mask(x, mask))
    }

    /// Inverted dropout. Identity in eval mode or at rate zero.
    pub fn dropout(&mut self, x: Var, rate: f64, train: bool, rng: &mut RngState) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} not in [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask = (0..self.value(x).len())
            .map(|_| if rng.rng().gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        self.mul_const(x, mask)
    }

    fn check_finite_input(&self, x: Var, op: &str) -> Result<()> {
        if self.value(x).all_finite() {
            Ok(())
        } else {
            Err(Error::Numeric {
                op: format!("{op} (input)"),
            })
        }
    }

    fn unary(&mut self, name: &str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        self.check_finite_input(x, name)?;
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(name, value, &[x], op)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(
            "leaky_relu",
            x,
            |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu(x, slope),
        )
    }

    /// Natural log with the argument clamped from below at `floor`.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.unary("log", x, |v| v.max(floor).ln(), Op::LogClamp(x, floor))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check_finite_input(x, "softmax")?;
        let shape = self.shape(x).to_vec();
        let width = *shape.last().ok_or_else(|| Error::dim("softmax", &shape, &[]))?;
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(width.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push("softmax", value, &[x], Op::Softmax(x))
    }

    /// Stride-1 cross-correlation of `[N, C, H, W]` with `[O, C, kh, kw]` plus bias `[O]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, pad: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] {
            return Err(Error::dim("conv2d", &si, &sk));
        }
        if self.shape(bias) != [sk[0]] {
            return Err(Error::dim("conv2d bias", &sk, self.shape(bias)));
        }
        let (out_h, out_w) = match (
            (si[2] + 2 * pad + 1).checked_sub(sk[2]),
            (si[3] + 2 * pad + 1).checked_sub(sk[3]),
        ) {
            (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
            _ => return Err(Error::dim("conv2d window", &si, &sk)),
        };
        let geom = ConvGeom {
            batch: si[0],
            in_ch: si[1],
            height: si[2],
            width: si[3],
            out_ch: sk[0],
            kh: sk[2],
            kw: sk[3],
            pad_h: pad,
            pad_w: pad,
            out_h,
            out_w,
        };
        let col = im2col(self.data(input), &geom);
        let (r, kc, o) = (geom.positions(), geom.taps(), geom.out_ch);
        let mut out_t = vec![0.0; o * r];
        gemm(o, kc, r, self.data(kernel), false, &col, false, &mut out_t, false);
        let b = self.data(bias);
        for (row, bb) in out_t.chunks_mut(r).zip(b) {
            for v in row.iter_mut() {
                *v += bb;
            }
        }
        let out = channel_major_to_nchw(&out_t, &geom);
        let value = Tensor::new(vec![geom.batch, geom.out_ch, out_h, out_w], out)?;
        let col = if self.requires_grad(input) || self.requires_grad(kernel) {
            col
        } else {
            Vec::new()
        };
        self.push(
            "conv2d",
            value,
            &[input, kernel, bias],
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                col,
            },
        )
    }

    /// Train-mode batch normalisation over every axis except axis 1.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let shape = self.shape(x).to_vec();
        let (outer, channels, inner) = channel_split(&shape);
        if shape.len() < 2 || self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(Error::dim("batch_norm", &shape, self.shape(gamma)));
        }
        if outer < 2 {
            return Err(Error::Degenerate(format!(
                "batch norm in train mode needs a batch of at least 2, got {outer}"
            )));
        }
        let count = (outer * inner) as f64;
        let xs = self.data(x);
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        for n in 0..outer {
            for c in 0..channels {
                let start = (n * channels + c) * inner;
                mean[c] += xs[start..start + inner].iter().sum::<f64>();
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        for n in 0..outer {
            for c in 0..channels {
                let start = (n * channels + c) * inner;
                var[c] += xs[start..start + inner]
                    .iter()
                    .map(|v| (v - mean[c]) * (v - mean[c]))
                    .sum::<f64>();
            }
        }
        for v in &mut var {
            *v /= count;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for n in 0..outer {
            for c in 0..channels {
                let start = (n * channels + c) * inner;
                for i in start..start + inner {
                    xhat[i] = (xs[i] - mean[c]) * inv_std[c];
                    out[i] = g[c] * xhat[i] + b[c];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let var_out = self.push(
            "batch_norm",
            value,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )?;
        Ok((var_out, BatchStats { mean, var }))
    }

    /// Eval-mode batch normalisation with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, channels, inner) = channel_split(&shape);
        if shape.len() < 2
            || self.shape(gamma) != [channels]
            || self.shape(beta) != [channels]
            || running_mean.len() != channels
            || running_var.len() != channels
        {
            return Err(Error::dim("batch_norm_eval", &shape, self.shape(gamma)));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xs, g, b) = (self.data(x), self.data(gamma), self.data(beta));
        let mut out = vec![0.0; xs.len()];
        for n in 0..outer {
            for c in 0..channels {
                let start = (n * channels + c) * inner;
                for i in start..start + inner {
                    out[i] = (xs[i] - running_mean[c]) * inv_std[c] * g[c] + b[c];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            "batch_norm_eval",
            value,
            &[x, gamma, beta],
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat axis", &base, &[axis]));
        }
        let outer: usize = base[..axis].iter().product();
        let tail: usize = base[axis + 1..].iter().product();
        let mut extent = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
            extent += s[axis];
        }
        let mut out = Vec::with_capacity(outer * extent * tail);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * tail;
                out.extend_from_slice(&self.data(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = extent;
        let value = Tensor::new(shape, out)?;
        self.push(
            "concat",
            value,
            parts,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::dim("avg_pool", &shape, &[4]));
        }
        let plane = shape[2] * shape[3];
        let out = self
            .data(x)
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new(vec![shape[0], shape[1]], out)?;
        self.push("avg_pool", value, &[x], Op::AvgPool(x))
    }

    /// Tiles `[N, C]` over a spatial grid: `[N, C] -> [N, C, h, w]`.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::dim("broadcast_spatial", &shape, &[2]));
        }
        let mut out = Vec::with_capacity(shape[0] * shape[1] * h * w);
        for &v in self.data(x) {
            out.extend(std::iter::repeat_n(v, h * w));
        }
        let value = Tensor::new(vec![shape[0], shape[1], h, w], out)?;
        self.push("broadcast_spatial", value, &[x], Op::Broadcast(x))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, &[x], Op::Reshape(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.data(x).iter().sum();
        self.push("sum", Tensor::scalar(total), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let total: f64 = self.data(x).iter().sum();
        self.push("mean", Tensor::scalar(total / n as f64), &[x], Op::Mean(x))
    }

    /// Batch-mean cross-entropy between probability rows `pred` and `target`.
    pub fn cross_entropy(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let shape = self.shape(pred).to_vec();
        if shape.len() != 2 || target.shape() != shape.as_slice() {
            return Err(Error::dim("cross_entropy", &shape, target.shape()));
        }
        let (batch, classes) = (shape[0], shape[1]);
        if batch == 0 {
            return Err(Error::Contract("cross-entropy over an empty batch".into()));
        }
        let p = self.data(pred);
        let mut total = 0.0;
        for i in 0..batch {
            let pr = &p[i * classes..(i + 1) * classes];
            let tr = target.row(i);
            let (ps, ts): (f64, f64) = (pr.iter().sum(), tr.iter().sum());
            if (ps - 1.0).abs() > ROW_SUM_TOL || (ts - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Contract(format!(
                    "cross-entropy row {i}: prediction sums to {ps}, target sums to {ts}"
                )));
            }
            total -= pr
                .iter()
                .zip(tr)
                .map(|(p, t)| if *t == 0.0 { 0.0 } else { t * p.max(LOG_FLOOR).ln() })
                .sum::<f64>();
        }
        self.push(
            "cross_entropy",
            Tensor::scalar(total / batch as f64),
            &[pred],
            Op::CrossEntropy {
                pred,
                target: target.clone(),
                floor: LOG_FLOOR,
            },
        )
    }

    /// Sum of squared differences divided by the leading (batch) extent.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mse", self.shape(a), self.shape(b)));
        }
        let (batch, _) = self.value(a).rows_cols();
        if batch == 0 {
            return Err(Error::Contract("mse over an empty batch".into()));
        }
        let total: f64 = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push("mse", Tensor::scalar(total / batch as f64), &[a, b], Op::Mse(a, b))
    }

    /// Back-propagates from a scalar. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(existing) => {
                        for (e, v) in existing.data_mut().iter_mut().zip(&g) {
                            *e += v;
                        }
                    }
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
            } else {
                self.backprop_node(idx, &g, &mut grads);
            }
        }
        Ok(())
    }

    /// Adds `f`'s contribution into the pending gradient of `v`, if it wants one.
    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = self.nodes[idx].value.data();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |da| gemm(m, n, k, g, false, bd, true, da, true));
                self.accumulate(grads, *b, |db| gemm(k, m, n, ad, true, g, false, db, true));
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, |dx| add_into(dx, g));
                let (outer, channels, inner) = channel_split(self.shape(*x));
                self.accumulate(grads, *bias, |db| {
                    for n in 0..outer {
                        for (c, d) in db.iter_mut().enumerate() {
                            let start = (n * channels + c) * inner;
                            *d += g[start..start + inner].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| add_into(d, g));
            }
            Op::Affine(x, scale) => self.accumulate(grads, *x, |d| {
                for (d, gv) in d.iter_mut().zip(g) {
                    *d += scale * gv;
                }
            }),
            Op::Mask(x, mask) => self.accumulate(grads, *x, |d| {
                for ((d, gv), m) in d.iter_mut().zip(g).zip(mask) {
                    *d += gv * m;
                }
            }),
            Op::Tanh(x) => self.accumulate(grads, *x, |d| {
                for ((d, gv), yv) in d.iter_mut().zip(g).zip(y) {
                    *d += gv * (1.0 - yv * yv);
                }
            }),
            Op::Sigmoid(x) => self.accumulate(grads, *x, |d| {
                for ((d, gv), yv) in d.iter_mut().zip(g).zip(y) {
                    *d += gv * yv * (1.0 - yv);
                }
            }),
            Op::LeakyRelu(x, slope) => {
                let xs = self.data(*x);
                self.accumulate(grads, *x, |d| {
                    for ((d, gv), xv) in d.iter_mut().zip(g).zip(xs) {
                        *d += if *xv > 0.0 { *gv } else { slope * gv };
                    }
                })
            }
            Op::LogClamp(x, floor) => {
                let xs = self.data(*x);
                self.accumulate(grads, *x, |d| {
                    for ((d, gv), xv) in d.iter_mut().zip(g).zip(xs) {
                        if *xv > *floor {
                            *d += gv / xv;
                        }
                    }
                })
            }
            Op::Softmax(x) => {
                let width = *self.shape(*x).last().unwrap_or(&1);
                self.accumulate(grads, *x, |d| {
                    for ((dr, gr), yr) in d
                        .chunks_mut(width)
                        .zip(g.chunks(width))
                        .zip(y.chunks(width))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv += yv * (gv - dot);
                        }
                    }
                })
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                col,
            } => {
                let g_t = nchw_to_channel_major(g, geom);
                let (r, kc, o) = (geom.positions(), geom.taps(), geom.out_ch);
                self.accumulate(grads, *kernel, |dk| {
                    gemm(o, r, kc, &g_t, false, col, true, dk, true)
                });
                self.accumulate(grads, *bias, |db| {
                    for (d, row) in db.iter_mut().zip(g_t.chunks(r)) {
                        *d += row.iter().sum::<f64>();
                    }
                });
                let kd = self.data(*kernel);
                self.accumulate(grads, *input, |dx| {
                    let mut dcol = vec![0.0; kc * r];
                    gemm(kc, o, r, kd, true, &g_t, false, &mut dcol, false);
                    col2im(&dcol, geom, dx);
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (outer, channels, inner) = channel_split(self.shape(*x));
                let count = (outer * inner) as f64;
                let gm = self.data(*gamma);
                let mut sum_g = vec![0.0; channels];
                let mut sum_gx = vec![0.0; channels];
                for n in 0..outer {
                    for c in 0..channels {
                        let start = (n * channels + c) * inner;
                        for i in start..start + inner {
                            sum_g[c] += g[i];
                            sum_gx[c] += g[i] * xhat[i];
                        }
                    }
                }
                self.accumulate(grads, *gamma, |d| add_into(d, &sum_gx));
                self.accumulate(grads, *beta, |d| add_into(d, &sum_g));
                self.accumulate(grads, *x, |dx| {
                    for n in 0..outer {
                        for c in 0..channels {
                            let start = (n * channels + c) * inner;
                            let scale = gm[c] * inv_std[c] / count;
                            for i in start..start + inner {
                                dx[i] += scale * (count * g[i] - sum_g[c] - xhat[i] * sum_gx[c]);
                            }
                        }
                    }
                });
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (outer, channels, inner) = channel_split(self.shape(*x));
                let (xs, gm) = (self.data(*x), self.data(*gamma));
                let mut sum_g = vec![0.0; channels];
                let mut sum_gx = vec![0.0; channels];
                for n in 0..outer {
                    for c in 0..channels {
                        let start = (n * channels + c) * inner;
                        for i in start..start + inner {
                            sum_g[c] += g[i];
                            sum_gx[c] += g[i] * (xs[i] - mean[c]) * inv_std[c];
                        }
                    }
                }
                self.accumulate(grads, *gamma, |d| add_into(d, &sum_gx));
                self.accumulate(grads, *beta, |d| add_into(d, &sum_g));
                self.accumulate(grads, *x, |dx| {
                    for n in 0..outer {
                        for c in 0..channels {
                            let start = (n * channels + c) * inner;
                            for i in start..start + inner {
                                dx[i] += g[i] * gm[c] * inv_std[c];
                            }
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let shape = self.nodes[idx].value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let tail: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * tail;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * tail;
                    self.accumulate(grads, p, |d| {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            add_into(&mut d[o * chunk..(o + 1) * chunk], src);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::AvgPool(x) => {
                let s = self.shape(*x);
                let plane = s[2] * s[3];
                self.accumulate(grads, *x, |d| {
                    for (chunk, gv) in d.chunks_mut(plane).zip(g) {
                        for v in chunk {
                            *v += gv / plane as f64;
                        }
                    }
                });
            }
            Op::Broadcast(x) => {
                let plane = y.len() / self.value(*x).len().max(1);
                self.accumulate(grads, *x, |d| {
                    for (dv, chunk) in d.iter_mut().zip(g.chunks(plane)) {
                        *dv += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |d| add_into(d, g)),
            Op::Sum(x) => self.accumulate(grads, *x, |d| {
                for v in d {
                    *v += g[0];
                }
            }),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                self.accumulate(grads, *x, |d| {
                    for v in d {
                        *v += g[0] / n;
                    }
                })
            }
            Op::CrossEntropy {
                pred,
                target,
                floor,
            } => {
                let p = self.data(*pred);
                let batch = self.shape(*pred)[0] as f64;
                self.accumulate(grads, *pred, |d| {
                    for ((dv, pv), tv) in d.iter_mut().zip(p).zip(target.data()) {
                        if *pv > *floor {
                            *dv -= g[0] * tv / (batch * pv);
                        }
                    }
                });
            }
            Op::Mse(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let batch = self.value(*a).rows_cols().0 as f64;
                self.accumulate(grads, *a, |d| {
                    for ((dv, x), y) in d.iter_mut().zip(ad).zip(bd) {
                        *dv += g[0] * 2.0 * (x - y) / batch;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((dv, x), y) in d.iter_mut().zip(ad).zip(bd) {
                        *dv -= g[0] * 2.0 * (x - y) / batch;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
