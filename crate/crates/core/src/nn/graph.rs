//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and whatever it needs
//! for the backward pass. [`Graph::backward`] walks the tape in reverse.

use rand::Rng as _;

use super::conv::{self, ConvGeom};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gemm, MatRef, Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the estimator folded into running statistics.
    pub var: Vec<T>,
}

enum Op<T> {
    Input,
    Param(String),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    GlobalAvgPool(Var),
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Sigmoid(Var),
    ScaleChannels {
        x: Var,
        s: Var,
    },
    Add(Var, Var),
    Concat(Var, Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<T>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one backward pass, retained for leaf nodes only.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_of4(op: &'static str, t: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *t {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(op, format!("expected [N,C,H,W], got {t:?}"))),
    }
}

fn shape_of2(op: &'static str, t: &[usize]) -> Result<(usize, usize)> {
    match *t {
        [n, d] => Ok((n, d)),
        _ => Err(Error::shape(op, format!("expected [N,D], got {t:?}"))),
    }
}

/// Row-wise softmax of a `[N, K]` buffer.
pub fn softmax_rows<T: Real>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&z| (z - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / sum));
    }
    out
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {}", op_name(&op))));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Input)
    }

    /// Binds a named parameter as a leaf so its gradient can be collected.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let value = store.value(name)?.clone();
        self.push(value, Op::Param(name.to_string()))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, padding: Padding) -> Result<Var> {
        let (n, c_in, h, wd) = shape_of4("conv2d", self.value(x).shape())?;
        let (c_out, wc_in, kh, kw) = shape_of4("conv2d", self.value(w).shape())?;
        if wc_in != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c_in} channels, weights expect {wc_in}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} must be odd")));
        }
        if self.value(b).shape() != [c_out] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} for {c_out} output channels", self.value(b).shape()),
            ));
        }
        let (ph, pw, oh, ow) = match padding {
            Padding::Same => (kh / 2, kw / 2, h, wd),
            Padding::Valid => {
                if kh > h || kw > wd {
                    return Err(Error::shape(
                        "conv2d",
                        format!("kernel {kh}x{kw} larger than input {h}x{wd}"),
                    ));
                }
                (0, 0, h - kh + 1, wd - kw + 1)
            }
        };
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            ph,
            pw,
            oh,
            ow,
        };
        let out = conv::forward(
            &geom,
            n,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let value = Tensor::new(vec![n, c_out, oh, ow], out)?;
        self.push(value, Op::Conv2d { x, w, b, geom })
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let shape = self.value(x).shape();
        if shape.len() < 2 {
            return Err(Error::shape("batch_norm", format!("input {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("gamma/beta must be [{c}]"),
            ));
        }
        Ok((n, c, spatial))
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    ) -> Result<Var> {
        let (n, c, spatial) = self.bn_dims(x, gamma, beta)?;
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![T::zero(); xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * spatial;
                let scale = g[ch] * inv_std[ch];
                for i in off..off + spatial {
                    out[i] = (xv.data()[i] - mean[ch]) * scale + bt[ch];
                }
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
        )
    }

    /// Batch norm over `[N, C, ...]` using batch statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, BatchStats<T>)> {
        let (n, c, spatial) = self.bn_dims(x, gamma, beta)?;
        if n < 2 {
            return Err(Error::InvalidArgument(
                "batch_norm in train mode needs at least 2 samples".into(),
            ));
        }
        let m = n * spatial;
        let xv = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut acc = T::zero();
            for s in 0..n {
                let off = (s * c + ch) * spatial;
                acc += xv[off..off + spatial].iter().copied().sum::<T>();
            }
            let mu = acc / T::lit(m as f64);
            let mut sq = T::zero();
            for s in 0..n {
                let off = (s * c + ch) * spatial;
                sq += xv[off..off + spatial]
                    .iter()
                    .map(|&v| (v - mu) * (v - mu))
                    .sum::<T>();
            }
            mean[ch] = mu;
            var[ch] = sq / T::lit(m as f64);
        }
        let eps = T::lit(BN_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let unbiased = T::lit(m as f64 / (m as f64 - 1.0).max(1.0));
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.iter().map(|&v| v * unbiased).collect(),
        };
        let out = self.bn_apply(x, gamma, beta, mean, inv_std, true)?;
        Ok((out, stats))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
    ) -> Result<Var> {
        let (_, c, _) = self.bn_dims(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm", "running stats length"));
        }
        let eps = T::lit(BN_EPS);
        let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, mean.to_vec(), inv_std, false)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(value, Op::Sigmoid(x))
    }

    /// 2x2 max pooling with stride 2; a trailing odd row or column is dropped.
    pub fn max_pool2x2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = shape_of4("max_pool2x2", self.value(x).shape())?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::shape("max_pool2x2", format!("input {h}x{w} too small")));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push(value, Op::MaxPool2 { x, argmax })
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = shape_of4("global_avg_pool", self.value(x).shape())?;
        let area = T::lit((h * w) as f64);
        let out = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() / area)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        self.push(value, Op::GlobalAvgPool(x))
    }

    /// `y = x @ w^T + b` with `w: [out, in]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, d_in) = shape_of2("dense", self.value(x).shape())?;
        let (d_out, w_in) = shape_of2("dense", self.value(w).shape())?;
        if w_in != d_in || self.value(b).shape() != [d_out] {
            return Err(Error::shape(
                "dense",
                format!(
                    "input [{n},{d_in}], weights [{d_out},{w_in}], bias {:?}",
                    self.value(b).shape()
                ),
            ));
        }
        let bias = self.value(b).data();
        let mut out: Vec<T> = (0..n).flat_map(|_| bias.iter().copied()).collect();
        gemm(
            MatRef::new(self.value(x).data(), n, d_in),
            MatRef::new(self.value(w).data(), d_out, d_in).t(),
            T::one(),
            &mut out,
        );
        let value = Tensor::new(vec![n, d_out], out)?;
        self.push(value, Op::Dense { x, w, b })
    }

    /// Inverted dropout: kept activations are scaled by `1 / (1 - rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rate > 0.0 && rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(value, Op::Dropout { x, mask })
    }

    /// Multiplies each `[H, W]` plane of `x: [N, C, H, W]` by `s[n, c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, c, h, w) = shape_of4("scale_channels", self.value(x).shape())?;
        if self.value(s).shape() != [n, c] {
            return Err(Error::shape(
                "scale_channels",
                format!("scale {:?} for input [{n},{c},{h},{w}]", self.value(s).shape()),
            ));
        }
        let sv = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .zip(sv)
            .flat_map(|(p, &k)| p.iter().map(move |&v| v * k))
            .collect();
        let value = Tensor::new(vec![n, c, h, w], data)?;
        self.push(value, Op::ScaleChannels { x, s })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b))?;
        self.push(value, Op::Add(a, b))
    }

    /// `[N, P] ++ [N, Q] -> [N, P + Q]`, `a` first.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, p) = shape_of2("concat", self.value(a).shape())?;
        let (m, q) = shape_of2("concat", self.value(b).shape())?;
        if n != m {
            return Err(Error::shape("concat", format!("{n} rows vs {m} rows")));
        }
        let mut data = Vec::with_capacity(n * (p + q));
        for (ra, rb) in self
            .value(a)
            .data()
            .chunks(p)
            .zip(self.value(b).data().chunks(q))
        {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let value = Tensor::new(vec![n, p + q], data)?;
        self.push(value, Op::Concat(a, b))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(x).slice_rows(start, end)?;
        self.push(value, Op::SliceRows { x, start })
    }

    /// Mean cross entropy between `softmax(logits)` and soft `targets`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let (n, k) = shape_of2("softmax_cross_entropy", self.value(logits).shape())?;
        if targets.shape() != [n, k] {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("targets {:?} for logits [{n},{k}]", targets.shape()),
            ));
        }
        for (i, row) in targets.data().chunks(k).enumerate() {
            let sum: T = row.iter().copied().sum();
            if (sum.as_f64() - 1.0).abs() > 1e-6 || row.iter().any(|&t| t < T::zero()) {
                return Err(Error::InvalidArgument(format!(
                    "target row {i} is not a probability vector (sums to {sum})"
                )));
            }
        }
        let z = self.value(logits).data();
        let mut loss = T::zero();
        for (row, t) in z.chunks(k).zip(targets.data().chunks(k)) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for (&zi, &ti) in row.iter().zip(t) {
                if ti != T::zero() {
                    loss -= ti * (zi - lse);
                }
            }
        }
        loss /= T::lit(n as f64);
        let probs = softmax_rows(z, k);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.data().to_vec(),
                probs,
            },
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Input | Op::Param(_)) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            for (target, g) in self.node_backward(node, &dy)? {
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!(
                        "gradient through {}",
                        op_name(&node.op)
                    )));
                }
                match &mut grads[target.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node<T>, dy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let dyd = dy.data();
        let like = |v: Var, data: Vec<T>| Tensor::new(self.value(v).shape().to_vec(), data);
        Ok(match &node.op {
            Op::Input | Op::Param(_) => Vec::new(),
            Op::Conv2d { x, w, b, geom } => {
                let n = self.value(*x).shape()[0];
                let (dx, dw, db) =
                    conv::backward(geom, n, self.value(*x).data(), self.value(*w).data(), dyd);
                vec![(*x, like(*x, dx)?), (*w, like(*w, dw)?), (*b, like(*b, db)?)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let shape = self.value(*x).shape();
                let (n, c) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let m = T::lit((n * spatial) as f64);
                let xv = self.value(*x).data();
                let g = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * spatial;
                        for i in off..off + spatial {
                            let xhat = (xv[i] - mean[ch]) * inv_std[ch];
                            dgamma[ch] += dyd[i] * xhat;
                            dbeta[ch] += dyd[i];
                        }
                    }
                }
                let mut dx = vec![T::zero(); xv.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * spatial;
                        let k = g[ch] * inv_std[ch];
                        for i in off..off + spatial {
                            dx[i] = if *batch_stats {
                                let xhat = (xv[i] - mean[ch]) * inv_std[ch];
                                k / m * (m * dyd[i] - dbeta[ch] - xhat * dgamma[ch])
                            } else {
                                k * dyd[i]
                            };
                        }
                    }
                }
                vec![
                    (*x, like(*x, dx)?),
                    (*gamma, like(*gamma, dgamma)?),
                    (*beta, like(*beta, dbeta)?),
                ]
            }
            Op::Relu(x) => {
                let out = node.value.data();
                let dx = dyd
                    .iter()
                    .zip(out)
                    .map(|(&d, &o)| if o > T::zero() { d } else { T::zero() })
                    .collect();
                vec![(*x, like(*x, dx)?)]
            }
            Op::Sigmoid(x) => {
                let out = node.value.data();
                let dx = dyd
                    .iter()
                    .zip(out)
                    .map(|(&d, &s)| d * s * (T::one() - s))
                    .collect();
                vec![(*x, like(*x, dx)?)]
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&idx, &d) in argmax.iter().zip(dyd) {
                    dx[idx as usize] += d;
                }
                vec![(*x, like(*x, dx)?)]
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.value(*x).shape();
                let area = shape[2] * shape[3];
                let inv = T::one() / T::lit(area as f64);
                let dx = dyd
                    .iter()
                    .flat_map(|&d| std::iter::repeat_n(d * inv, area))
                    .collect();
                vec![(*x, like(*x, dx)?)]
            }
            Op::Dense { x, w, b } => {
                let (n, d_in) = shape_of2("dense", self.value(*x).shape())?;
                let d_out = self.value(*w).shape()[0];
                let mut dx = vec![T::zero(); n * d_in];
                gemm(
                    MatRef::new(dyd, n, d_out),
                    MatRef::new(self.value(*w).data(), d_out, d_in),
                    T::zero(),
                    &mut dx,
                );
                let mut dw = vec![T::zero(); d_out * d_in];
                gemm(
                    MatRef::new(dyd, n, d_out).t(),
                    MatRef::new(self.value(*x).data(), n, d_in),
                    T::zero(),
                    &mut dw,
                );
                let mut db = vec![T::zero(); d_out];
                for row in dyd.chunks(d_out) {
                    db.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                }
                vec![(*x, like(*x, dx)?), (*w, like(*w, dw)?), (*b, like(*b, db)?)]
            }
            Op::Dropout { x, mask } => {
                let dx = dyd.iter().zip(mask).map(|(&d, &m)| d * m).collect();
                vec![(*x, like(*x, dx)?)]
            }
            Op::ScaleChannels { x, s } => {
                let shape = self.value(*x).shape();
                let area = shape[2] * shape[3];
                let xv = self.value(*x).data();
                let sv = self.value(*s).data();
                let mut dx = vec![T::zero(); xv.len()];
                let mut ds = vec![T::zero(); sv.len()];
                for (p, &k) in sv.iter().enumerate() {
                    let r = p * area..(p + 1) * area;
                    for i in r {
                        dx[i] = dyd[i] * k;
                        ds[p] += dyd[i] * xv[i];
                    }
                }
                vec![(*x, like(*x, dx)?), (*s, like(*s, ds)?)]
            }
            Op::Add(a, b) => vec![(*a, dy.clone()), (*b, dy.clone())],
            Op::Concat(a, b) => {
                let p = self.value(*a).shape()[1];
                let q = self.value(*b).shape()[1];
                let mut da = Vec::with_capacity(self.value(*a).len());
                let mut db = Vec::with_capacity(self.value(*b).len());
                for row in dyd.chunks(p + q) {
                    da.extend_from_slice(&row[..p]);
                    db.extend_from_slice(&row[p..]);
                }
                vec![(*a, like(*a, da)?), (*b, like(*b, db)?)]
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let stride = xv.len() / xv.shape()[0];
                let mut dx = vec![T::zero(); xv.len()];
                dx[start * stride..start * stride + dyd.len()].copy_from_slice(dyd);
                vec![(*x, like(*x, dx)?)]
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = self.value(*logits).shape()[0];
                let scale = dyd[0] / T::lit(n as f64);
                let dx = probs
                    .iter()
                    .zip(targets)
                    .map(|(&p, &t)| (p - t) * scale)
                    .collect();
                vec![(*logits, like(*logits, dx)?)]
            }
        })
    }

    /// Names and gradients of every parameter leaf reached by `grads`.
    pub fn param_grads<'a>(
        &'a self,
        grads: &'a Gradients<T>,
    ) -> impl Iterator<Item = (&'a str, &'a Tensor<T>)> + 'a {
        self.nodes.iter().enumerate().filter_map(move |(i, node)| match &node.op {
            Op::Param(name) => grads.get(Var(i)).map(|g| (name.as_str(), g)),
            _ => None,
        })
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Param(_) => "param",
        Op::Conv2d { .. } => "conv2d",
        Op::BatchNorm { .. } => "batch_norm",
        Op::Relu(_) => "relu",
        Op::MaxPool2 { .. } => "max_pool2x2",
        Op::GlobalAvgPool(_) => "global_avg_pool",
        Op::Dense { .. } => "dense",
        Op::Dropout { .. } => "dropout",
        Op::Sigmoid(_) => "sigmoid",
        Op::ScaleChannels { .. } => "scale_channels",
        Op::Add(..) => "add",
        Op::Concat(..) => "concat",
        Op::SliceRows { .. } => "slice_rows",
        Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
    }
}
