//! Reverse-mode autodiff over a linear tape of recorded operations.
//!
//! Every op appends a node holding its forward value plus whatever it needs
//! for the backward pass. [`Tape::backward`] consumes the tape, so a recorded
//! graph can be differentiated exactly once.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{EngineError, Result};
use crate::kernels::{self, ConvGeom};
use crate::par::map_indexed;
use crate::scalar::{matmul, Scalar};
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        filters: usize,
        cols: Vec<Vec<T>>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        in_channels: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    WeightedSum {
        terms: Vec<(Var, T)>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Mse {
        a: Var,
        b: Var,
    },
    L1 {
        a: Var,
        b: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation graph.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the loss with respect to every trainable leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> EngineError {
    EngineError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf holding a copy of `t`; gradients flow to it when
    /// `trainable` is set.
    pub fn leaf(&mut self, t: &Tensor<T>, trainable: bool) -> Var {
        let mut value = t.clone();
        value.clear_grad();
        self.push(value, Op::Leaf, trainable)
    }

    /// Records a constant leaf that owns `t`.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        let ng = self.any_grad(&[x]);
        self.push(value, op, ng)
    }

    fn nchw(&self, op: &'static str, x: Var) -> Result<[usize; 4]> {
        match *self.shape(x) {
            [n, c, h, w] => Ok([n, c, h, w]),
            ref s => Err(mismatch(op, s, &[0, 0, 0, 0])),
        }
    }

    /// 2-D convolution with square kernel `k` (from the weight shape
    /// `[filters, channels, k, k]`), padding `k / 2` and the given stride.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let [n, c, h, wd] = self.nchw("conv2d", x)?;
        let ws = self.shape(w).to_vec();
        let (filters, k) = match ws[..] {
            [f, wc, k1, k2] if wc == c && k1 == k2 => (f, k1),
            _ => return Err(mismatch("conv2d", self.shape(x), &ws)),
        };
        if self.shape(b) != [filters] {
            return Err(mismatch("conv2d bias", self.shape(b), &[filters]));
        }
        let geom = ConvGeom::new(c, h, wd, k, stride, k / 2).ok_or_else(|| mismatch("conv2d", self.shape(x), &ws))?;
        let xin = self.value(x).data();
        let wt = self.value(w).data();
        let bt = self.value(b).data();
        let per_out = filters * geom.positions();
        let samples = map_indexed(n, |i| {
            let mut cols = vec![T::zero(); geom.patch() * geom.positions()];
            let mut out = vec![T::zero(); per_out];
            let xs = &xin[i * geom.input_len()..(i + 1) * geom.input_len()];
            kernels::conv_forward(&geom, filters, xs, wt, bt, &mut cols, &mut out);
            (cols, out)
        });
        let mut data = Vec::with_capacity(n * per_out);
        let mut cols = Vec::with_capacity(n);
        for (cl, o) in samples {
            data.extend_from_slice(&o);
            cols.push(cl);
        }
        let value = Tensor::new(vec![n, filters, geom.oh, geom.ow], data)?;
        let ng = self.any_grad(&[x, w, b]);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                filters,
                cols,
            },
            ng,
        ))
    }

    /// 3x3 transposed convolution, stride 2, doubling height and width.
    /// Weight shape is `[in_channels, filters, 3, 3]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [n, c, h, wd] = self.nchw("conv_transpose2d", x)?;
        let ws = self.shape(w).to_vec();
        let filters = match ws[..] {
            [wc, f, 3, 3] if wc == c => f,
            _ => return Err(mismatch("conv_transpose2d", self.shape(x), &ws)),
        };
        if self.shape(b) != [filters] {
            return Err(mismatch("conv_transpose2d bias", self.shape(b), &[filters]));
        }
        let geom = ConvGeom::new(filters, 2 * h, 2 * wd, 3, 2, 1).expect("valid geometry");
        debug_assert_eq!((geom.oh, geom.ow), (h, wd));
        let xin = self.value(x).data();
        let wt = self.value(w).data();
        let bt = self.value(b).data();
        let in_len = c * h * wd;
        let outs = map_indexed(n, |i| {
            let mut scratch = vec![T::zero(); geom.patch() * geom.positions()];
            let mut out = vec![T::zero(); geom.input_len()];
            let xs = &xin[i * in_len..(i + 1) * in_len];
            kernels::conv_transpose_forward(&geom, c, xs, wt, bt, &mut scratch, &mut out);
            out
        });
        let value = Tensor::new(vec![n, filters, 2 * h, 2 * wd], outs.concat())?;
        let ng = self.any_grad(&[x, w, b]);
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                geom,
                in_channels: c,
            },
            ng,
        ))
    }

    /// 2x2 max pooling with stride 2 (odd trailing rows/columns are dropped).
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.nchw("maxpool2", x)?;
        if h < 2 || w < 2 {
            return Err(mismatch("maxpool2", self.shape(x), &[n, c, 2, 2]));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xin = self.value(x).data();
        let (plen, olen) = (c * h * w, c * oh * ow);
        let parts = map_indexed(n, |i| {
            let mut out = vec![T::zero(); olen];
            let mut arg = vec![0u32; olen];
            kernels::maxpool_forward(c, h, w, &xin[i * plen..(i + 1) * plen], &mut out, &mut arg);
            (out, arg)
        });
        let mut data = Vec::with_capacity(n * olen);
        let mut argmax = Vec::with_capacity(n * olen);
        for (o, a) in parts {
            data.extend_from_slice(&o);
            argmax.extend_from_slice(&a);
        }
        let value = Tensor::new(vec![n, c, oh, ow], data)?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, ng))
    }

    /// Fully connected layer; all non-batch dimensions of `x` are flattened.
    /// Weight shape is `[width, fan_in]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let n = *xs.first().ok_or_else(|| mismatch("dense", &xs, self.shape(w)))?;
        let d: usize = xs[1..].iter().product();
        let (o, wd) = match *self.shape(w) {
            [o, wd] => (o, wd),
            ref s => return Err(mismatch("dense", &xs, s)),
        };
        if wd != d {
            return Err(mismatch("dense", &xs, &[o, wd]));
        }
        if self.shape(b) != [o] {
            return Err(mismatch("dense bias", self.shape(b), &[o]));
        }
        let bt = self.value(b).data();
        let mut out: Vec<T> = (0..n).flat_map(|_| bt.iter().copied()).collect();
        matmul(
            n,
            d,
            o,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            true,
        );
        let value = Tensor::new(vec![n, o], out)?;
        let ng = self.any_grad(&[x, w, b]);
        Ok(self.push(value, Op::Dense { x, w, b }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh { x })
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = *shape.last().ok_or_else(|| mismatch("softmax", &shape, &[1]))?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(k) {
            softmax_in_place(row);
        }
        let value = Tensor::new(shape, data)?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(value, Op::Softmax { x }, ng))
    }

    /// Inverted dropout with a mask drawn from `seed`.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(EngineError::InvalidLayer(format!("dropout rate {rate}")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() >= rate { keep } else { T::zero() })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(value, Op::Dropout { x, mask }, ng))
    }

    /// Per-sample, per-channel normalisation over the spatial axes with a
    /// learned affine `gamma * xhat + beta`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let [n, c, h, w] = self.nchw("instance_norm", x)?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(mismatch("instance_norm", self.shape(x), self.shape(p)));
            }
        }
        let m = h * w;
        let eps = T::from_f64(NORM_EPS);
        let mf = T::from_f64(m as f64);
        let xin = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xin.len()];
        let mut inv_std = vec![T::zero(); n * c];
        let mut out = vec![T::zero(); xin.len()];
        for (plane, ((xs, xh), o)) in xin.chunks(m).zip(xhat.chunks_mut(m)).zip(out.chunks_mut(m)).enumerate() {
            let ch = plane % c;
            let mean = xs.iter().copied().sum::<T>() / mf;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[plane] = is;
            for ((&v, xh), o) in xs.iter().zip(xh.iter_mut()).zip(o.iter_mut()) {
                *xh = (v - mean) * is;
                *o = g[ch] * *xh + bt[ch];
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let ng = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, ng))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        self.unary(x, |v| v * factor, Op::Scale { x, factor })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let ng = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::from_f64(v.len() as f64);
        let ng = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Mean { x }, ng)
    }

    /// `sum_i weight_i * term_i` over scalar terms, accumulated left to right.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, wgt) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(EngineError::NotScalar(t.shape().to_vec()));
            }
            total += wgt * t.data()[0];
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let ng = self.any_grad(&vars);
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum { terms: terms.to_vec() }, ng))
    }

    /// Mean softmax negative log-likelihood of `labels` under `logits [batch, classes]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let (n, k) = match shape[..] {
            [n, k] => (n, k),
            _ => return Err(mismatch("cross_entropy", &shape, &[labels.len(), 0])),
        };
        if labels.is_empty() {
            return Err(EngineError::EmptyBatch("cross_entropy"));
        }
        if labels.len() != n {
            return Err(mismatch("cross_entropy", &shape, &[labels.len(), k]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(EngineError::LabelOutOfRange { label: bad, classes: k });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = T::zero();
        for (row, &label) in probs.chunks_mut(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += lse - row[label];
            softmax_in_place(row);
        }
        let value = Tensor::scalar(total / T::from_f64(n as f64));
        let ng = self.any_grad(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    fn paired(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.paired("mse", a, b)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let s = va.iter().zip(vb).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>();
        let value = Tensor::scalar(s / T::from_f64(va.len() as f64));
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mse { a, b }, ng))
    }

    /// Mean absolute difference.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.paired("l1", a, b)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let s = va.iter().zip(vb).map(|(&x, &y)| (x - y).abs()).sum::<T>();
        let value = Tensor::scalar(s / T::from_f64(va.len() as f64));
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::L1 { a, b }, ng))
    }

    /// Differentiates the scalar `loss` with respect to every trainable leaf.
    /// Trainable leaves the loss does not depend on receive zero gradients.
    pub fn backward(mut self, loss: Var) -> Result<Gradients<T>> {
        let node = self.nodes.get(loss.0).ok_or(EngineError::NoGraph)?;
        if matches!(node.op, Op::Leaf) {
            return Err(EngineError::NoGraph);
        }
        if node.value.len() != 1 {
            return Err(EngineError::NotScalar(node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop(i, op, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let keep = node.needs_grad && matches!(node.op, Op::Leaf);
            if !keep {
                grads[i] = None;
            } else if grads[i].is_none() {
                grads[i] = Some(vec![T::zero(); node.value.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contribution: Vec<T>) {
        match &mut grads[v.0] {
            Some(existing) => add_into(existing, &contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, at: usize, op: Op<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &self.nodes[at].value;
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                filters,
                cols,
            } => {
                let n = cols.len();
                let p = geom.positions();
                let per_out = filters * p;
                let (need_x, need_w, need_b) = (self.wants(x), self.wants(w), self.wants(b));
                let wt = self.value(w).data();
                let parts = map_indexed(n, |i| {
                    let gy = &g[i * per_out..(i + 1) * per_out];
                    let dw = need_w.then(|| {
                        let mut dw = vec![T::zero(); filters * geom.patch()];
                        matmul(filters, p, geom.patch(), gy, false, &cols[i], true, &mut dw, false);
                        dw
                    });
                    let db = need_b.then(|| gy.chunks(p).map(|r| r.iter().copied().sum::<T>()).collect::<Vec<_>>());
                    let dx = need_x.then(|| {
                        let mut dcols = vec![T::zero(); geom.patch() * p];
                        matmul(geom.patch(), filters, p, wt, true, gy, false, &mut dcols, false);
                        let mut dx = vec![T::zero(); geom.input_len()];
                        kernels::col2im(&geom, &dcols, &mut dx);
                        dx
                    });
                    (dw, db, dx)
                });
                self.reduce_sample_grads(grads, parts, x, w, b);
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                geom,
                in_channels,
            } => {
                let xs = self.value(x).data();
                let n = xs.len() / (in_channels * geom.positions());
                let p = geom.positions();
                let big = geom.input_len();
                let (need_x, need_w, need_b) = (self.wants(x), self.wants(w), self.wants(b));
                let wt = self.value(w).data();
                let plane = geom.h * geom.w;
                let parts = map_indexed(n, |i| {
                    let gy = &g[i * big..(i + 1) * big];
                    let mut gcols = vec![T::zero(); geom.patch() * p];
                    kernels::im2col(&geom, gy, &mut gcols);
                    let xi = &xs[i * in_channels * p..(i + 1) * in_channels * p];
                    let dw = need_w.then(|| {
                        let mut dw = vec![T::zero(); in_channels * geom.patch()];
                        matmul(in_channels, p, geom.patch(), xi, false, &gcols, true, &mut dw, false);
                        dw
                    });
                    let db = need_b.then(|| {
                        gy.chunks(plane)
                            .map(|r| r.iter().copied().sum::<T>())
                            .collect::<Vec<_>>()
                    });
                    let dx = need_x.then(|| {
                        let mut dx = vec![T::zero(); in_channels * p];
                        matmul(in_channels, geom.patch(), p, wt, false, &gcols, false, &mut dx, false);
                        dx
                    });
                    (dw, db, dx)
                });
                self.reduce_sample_grads(grads, parts, x, w, b);
            }
            Op::MaxPool2 { x, argmax } => {
                let [n, c, h, w] = self.nchw("maxpool2", x).expect("recorded shape");
                let (plen, olen) = (c * h * w, g.len() / n);
                let mut dx = vec![T::zero(); n * plen];
                for (i, (gs, ars)) in g.chunks(olen).zip(argmax.chunks(olen)).enumerate() {
                    let dst = &mut dx[i * plen..(i + 1) * plen];
                    for (&gv, &a) in gs.iter().zip(ars) {
                        dst[a as usize] += gv;
                    }
                }
                self.accumulate(grads, x, dx);
            }
            Op::Dense { x, w, b } => {
                let (n, o) = (out.shape()[0], out.shape()[1]);
                let xs = self.value(x).data();
                let d = xs.len() / n;
                if self.wants(w) {
                    let mut dw = vec![T::zero(); o * d];
                    matmul(o, n, d, g, true, xs, false, &mut dw, false);
                    self.accumulate(grads, w, dw);
                }
                if self.wants(b) {
                    let mut db = vec![T::zero(); o];
                    for row in g.chunks(o) {
                        add_into(&mut db, row);
                    }
                    self.accumulate(grads, b, db);
                }
                if self.wants(x) {
                    let mut dx = vec![T::zero(); n * d];
                    matmul(n, o, d, g, false, self.value(w).data(), false, &mut dx, false);
                    self.accumulate(grads, x, dx);
                }
            }
            Op::Relu { x } => {
                let dx = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, x, dx);
            }
            Op::Tanh { x } => {
                let dx = out
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gv)| gv * (T::one() - y * y))
                    .collect();
                self.accumulate(grads, x, dx);
            }
            Op::Softmax { x } => {
                let k = *out.shape().last().expect("softmax rank");
                let mut dx = Vec::with_capacity(g.len());
                for (ys, gs) in out.data().chunks(k).zip(g.chunks(k)) {
                    let dot = ys.iter().zip(gs).map(|(&y, &gv)| y * gv).sum::<T>();
                    dx.extend(ys.iter().zip(gs).map(|(&y, &gv)| y * (gv - dot)));
                }
                self.accumulate(grads, x, dx);
            }
            Op::Dropout { x, mask } => {
                let dx = g.iter().zip(&mask).map(|(&gv, &m)| gv * m).collect();
                self.accumulate(grads, x, dx);
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let [_, c, h, w] = self.nchw("instance_norm", x).expect("recorded shape");
                let m = h * w;
                let mf = T::from_f64(m as f64);
                let gm = self.value(gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); g.len()];
                for (plane, ((gs, xh), dxs)) in g.chunks(m).zip(xhat.chunks(m)).zip(dx.chunks_mut(m)).enumerate() {
                    let ch = plane % c;
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for (&gv, &xv) in gs.iter().zip(xh) {
                        dgamma[ch] += gv * xv;
                        dbeta[ch] += gv;
                        let d = gv * gm[ch];
                        s1 += d;
                        s2 += d * xv;
                    }
                    let scale = inv_std[plane] / mf;
                    for ((o, &gv), &xv) in dxs.iter_mut().zip(gs).zip(xh) {
                        *o = scale * (mf * gv * gm[ch] - s1 - xv * s2);
                    }
                }
                if self.wants(gamma) {
                    self.accumulate(grads, gamma, dgamma);
                }
                if self.wants(beta) {
                    self.accumulate(grads, beta, dbeta);
                }
                if self.wants(x) {
                    self.accumulate(grads, x, dx);
                }
            }
            Op::Add { a, b } => {
                if self.wants(a) {
                    self.accumulate(grads, a, g.to_vec());
                }
                if self.wants(b) {
                    self.accumulate(grads, b, g.to_vec());
                }
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, x, g.iter().map(|&v| v * factor).collect());
            }
            Op::Sum { x } => {
                let len = self.value(x).len();
                self.accumulate(grads, x, vec![g[0]; len]);
            }
            Op::Mean { x } => {
                let len = self.value(x).len();
                self.accumulate(grads, x, vec![g[0] / T::from_f64(len as f64); len]);
            }
            Op::WeightedSum { terms } => {
                for (v, wgt) in terms {
                    if self.wants(v) {
                        self.accumulate(grads, v, vec![g[0] * wgt]);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                mut probs,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / T::from_f64(n as f64);
                for (row, &label) in probs.chunks_mut(k).zip(&labels) {
                    row[label] -= T::one();
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                self.accumulate(grads, logits, probs);
            }
            Op::Mse { a, b } => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                let scale = T::from_f64(2.0) * g[0] / T::from_f64(va.len() as f64);
                let da: Vec<T> = va.iter().zip(vb).map(|(&x, &y)| (x - y) * scale).collect();
                self.split_pair(grads, a, b, da);
            }
            Op::L1 { a, b } => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                let scale = g[0] / T::from_f64(va.len() as f64);
                let da: Vec<T> = va
                    .iter()
                    .zip(vb)
                    .map(|(&x, &y)| {
                        let d = x - y;
                        if d > T::zero() {
                            scale
                        } else if d < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.split_pair(grads, a, b, da);
            }
        }
    }

    fn split_pair(&self, grads: &mut [Option<Vec<T>>], a: Var, b: Var, da: Vec<T>) {
        if self.wants(b) {
            self.accumulate(grads, b, da.iter().map(|&v| -v).collect());
        }
        if self.wants(a) {
            self.accumulate(grads, a, da);
        }
    }

    /// Sums per-sample weight and bias partials in sample order and stacks
    /// the per-sample input gradients.
    #[allow(clippy::type_complexity)]
    fn reduce_sample_grads(
        &self,
        grads: &mut [Option<Vec<T>>],
        parts: Vec<(Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>)>,
        x: Var,
        w: Var,
        b: Var,
    ) {
        let mut dw: Option<Vec<T>> = None;
        let mut db: Option<Vec<T>> = None;
        let mut dx: Vec<T> = Vec::new();
        for (pw, pb, px) in parts {
            if let Some(pw) = pw {
                match &mut dw {
                    Some(acc) => add_into(acc, &pw),
                    None => dw = Some(pw),
                }
            }
            if let Some(pb) = pb {
                match &mut db {
                    Some(acc) => add_into(acc, &pb),
                    None => db = Some(pb),
                }
            }
            if let Some(px) = px {
                dx.extend_from_slice(&px);
            }
        }
        if let Some(dw) = dw {
            self.accumulate(grads, w, dw);
        }
        if let Some(db) = db {
            self.accumulate(grads, b, db);
        }
        if !dx.is_empty() {
            self.accumulate(grads, x, dx);
        }
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn ones_kernel_on_ones_input_sums_to_nine_at_center() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros(vec![1]));
        let y = tape.conv2d(x, w, b, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
        assert_eq!(tape.value(y).data()[4], 9.0);
    }

    #[test]
    fn same_padding_conv_shape() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 3, 224, 224]));
        let w = tape.constant(Tensor::zeros(vec![64, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(vec![64]));
        let y = tape.conv2d(x, w, b, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 64, 224, 224]);
    }

    #[test]
    fn conv_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 3, 8, 8]));
        let w = tape.constant(Tensor::zeros(vec![4, 2, 3, 3]));
        let b = tape.constant(Tensor::zeros(vec![4]));
        let err = tape.conv2d(x, w, b, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3, 8, 8]") && msg.contains("[4, 2, 3, 3]"), "{msg}");
    }

    #[test]
    fn softmax_of_constant_row_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 4], &[2.0; 4]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(&t(&[2, 3], &[0.5; 6]), true);
        let s = tape.sum(w);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn unused_trainable_leaf_gets_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0]), true);
        let c = tape.leaf(&t(&[2], &[4.0, 5.0]), true);
        let s = tape.sum(c);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn backward_on_leaf_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(&Tensor::scalar(1.0), true);
        assert_eq!(tape.backward(w).unwrap_err(), EngineError::NoGraph);
    }

    #[test]
    fn backward_on_non_scalar_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(&t(&[2], &[1.0, 2.0]), true);
        let y = tape.relu(w);
        assert!(matches!(tape.backward(y), Err(EngineError::NotScalar(_))));
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_classes() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(vec![3, 4]));
        let l = tape.cross_entropy(z, &[0, 1, 3]).unwrap();
        assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_correct_is_near_zero() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(t(&[1, 3], &[100.0, 0.0, 0.0]));
        let l = tape.cross_entropy(z, &[0]).unwrap();
        assert!(tape.value(l).data()[0] < 1e-40);
    }

    #[test]
    fn cross_entropy_matches_hand_computation() {
        // Row 1: logits (1, 2, 3), label 2: lse = ln(e + e^2 + e^3) = 3.40760596444438
        //   nll = 0.40760596444438
        // Row 2: logits (0, 0), label 1: nll = ln 2 = 0.693147180559945
        // mean = 0.550376572502163
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 0.0, 0.0, -1e9]));
        let l = tape.cross_entropy(z, &[2, 1]).unwrap();
        assert!((tape.value(l).data()[0] - 0.550376572502163).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_empty_batch_and_bad_label() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(vec![1, 4]));
        assert!(matches!(tape.cross_entropy(z, &[]), Err(EngineError::EmptyBatch(_))));
        assert!(matches!(
            tape.cross_entropy(z, &[4]),
            Err(EngineError::LabelOutOfRange { label: 4, classes: 4 })
        ));
    }

    #[test]
    fn mse_and_l1_hand_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[4.0, 6.0]));
        let m = tape.mse(a, b).unwrap();
        let l = tape.l1(a, b).unwrap();
        assert_eq!(tape.value(m).data()[0], 12.5);
        assert_eq!(tape.value(l).data()[0], 3.5);
    }

    #[test]
    fn mse_and_l1_zero_vs_ones() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3, 4]));
        let b = tape.constant(Tensor::full(vec![2, 3, 4], 1.0));
        let m = tape.mse(a, b).unwrap();
        let l = tape.l1(a, b).unwrap();
        assert_eq!(tape.value(m).data()[0], 1.0);
        assert_eq!(tape.value(l).data()[0], 1.0);
        let z = tape.mse(a, a).unwrap();
        assert_eq!(tape.value(z).data()[0], 0.0);
    }

    #[test]
    fn loss_shape_mismatch_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(vec![2]));
        let b = tape.constant(Tensor::zeros(vec![3]));
        assert!(tape.mse(a, b).is_err());
        assert!(tape.l1(a, b).is_err());
    }

    #[test]
    fn transpose_conv_doubles_resolution() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![2, 8, 16, 16]));
        let w = tape.constant(Tensor::zeros(vec![8, 4, 3, 3]));
        let b = tape.constant(Tensor::full(vec![4], 0.5));
        let y = tape.conv_transpose2d(x, w, b).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 32, 32]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn dropout_zero_rate_is_identity_var() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(vec![4], 1.0));
        assert_eq!(tape.dropout(x, 0.0, 1).unwrap(), x);
        assert!(tape.dropout(x, 1.0, 1).is_err());
    }
}
