//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] walks the record in reverse and returns the gradient of a
//! scalar with respect to every node that requires one. A fresh tape is built
//! for each optimization step; parameters enter it through
//! [`crate::params::ParamStore::bind`].

pub(crate) mod kernels;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::{col2im, conv_out_len, gemm, im2col, permute_into, sigmoid, softmax_rows, softplus, split_axis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Normalization statistics for [`Tape::batch_norm`].
#[derive(Debug, Clone, Copy)]
pub enum NormStats<'a> {
    /// Per-channel mean and variance of the current batch.
    Batch,
    /// Fixed per-channel running statistics.
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

enum Op {
    Leaf,
    Add(Var, Var),
    AddTrailing(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Softplus(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Select {
        x: Var,
        axis: usize,
        index: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Mean(Var),
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-channel batch mean and biased variance.
pub type MeanVar = (Vec<f64>, Vec<f64>);

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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copies the value of `v` into a new constant node, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`.
    pub fn add_trailing(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_trailing", format!("{sa:?} vs {sb:?}")));
        }
        let tb = self.value(b).data().to_vec();
        let mut v = self.value(a).clone();
        for chunk in v.data_mut().chunks_mut(tb.len()) {
            for (x, y) in chunk.iter_mut().zip(&tb) {
                *x += y;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::AddTrailing(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).map(|e| e * s);
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, s), rg)
    }

    /// `x + c`, element-wise.
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|e| e + c);
        let rg = self.rg(x);
        self.push(v, Op::Shift(x), rg)
    }

    /// `1 - x`, element-wise.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        self.add_scalar(neg, 1.0)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(v, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |e| e.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    /// `ln(1 + e^x)`; `softplus(-l)` is `-ln σ(l)`.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    /// `x·wᵀ + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let fan_in = *xs.last().unwrap_or(&0);
        if ws.len() != 2 || ws[1] != fan_in {
            return Err(Error::shape("linear", format!("input {xs:?}, weight {ws:?}")));
        }
        let out = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?}, expected [{out}]", self.shape(b)),
                ));
            }
        }
        let rows = self.value(x).len() / fan_in.max(1);
        let mut y = vec![0.0; rows * out];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in y.chunks_mut(out) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            rows,
            fan_in,
            out,
            self.value(x).data(),
            (fan_in, 1),
            self.value(w).data(),
            (1, fan_in),
            1.0,
            &mut y,
            (out, 1),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = out;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(&shape, y)?, Op::Linear { x, w, b }, rg))
    }

    /// Batched `a·b` (or `a·bᵀ` when `trans_b`) over identical leading dims.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let nd = sa.len();
        if nd < 2 || sb.len() != nd || sa[..nd - 2] != sb[..nd - 2] {
            return Err(Error::shape("matmul", format!("{sa:?} vs {sb:?}")));
        }
        let (m, k) = (sa[nd - 2], sa[nd - 1]);
        let (kb, n) = if trans_b {
            (sb[nd - 1], sb[nd - 2])
        } else {
            (sb[nd - 2], sb[nd - 1])
        };
        if k != kb {
            return Err(Error::shape("matmul", format!("{sa:?} vs {sb:?} (trans_b={trans_b})")));
        }
        let batch: usize = sa[..nd - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let bstride = if trans_b { (1, k) } else { (n, 1) };
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                (k, 1),
                &bv[i * k * n..(i + 1) * k * n],
                bstride,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
                (n, 1),
            );
        }
        let mut shape = sa;
        shape[nd - 1] = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    /// 1-D convolution: `x` `[B, Cin, L]`, `w` `[Cout, Cin, k]`, `b` `[Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] || self.shape(b) != [ws[0]] {
            return Err(Error::shape(
                "conv1d",
                format!("input {xs:?}, weight {ws:?}, bias {:?}", self.shape(b)),
            ));
        }
        let (batch, cin, len) = (xs[0], xs[1], xs[2]);
        let (cout, kernel) = (ws[0], ws[2]);
        let out_len = conv_out_len(len, kernel, stride, pad)
            .ok_or_else(|| Error::shape("conv1d", format!("length {len} too short for kernel {kernel}")))?;
        let ck = cin * kernel;
        let mut cols = vec![0.0; batch * ck * out_len];
        let mut out = vec![0.0; batch * cout * out_len];
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        for s in 0..batch {
            let c = &mut cols[s * ck * out_len..(s + 1) * ck * out_len];
            im2col(
                &xv[s * cin * len..(s + 1) * cin * len],
                cin,
                len,
                kernel,
                stride,
                pad,
                out_len,
                c,
            );
            let o = &mut out[s * cout * out_len..(s + 1) * cout * out_len];
            for (co, row) in o.chunks_mut(out_len).enumerate() {
                row.fill(bv[co]);
            }
            gemm(cout, ck, out_len, wv, (ck, 1), c, (out_len, 1), 1.0, o, (out_len, 1));
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let v = Tensor::new(&[batch, cout, out_len], out)?;
        Ok(self.push(
            v,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            rg,
        ))
    }

    /// Per-channel normalization of `[B, C, L]` followed by a learned affine.
    ///
    /// Returns the output and, for [`NormStats::Batch`], the batch mean and
    /// (biased) variance so callers can maintain running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        stats: NormStats<'_>,
    ) -> Result<(Var, Option<MeanVar>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(Error::shape("batch_norm", format!("input {xs:?}")));
        }
        let (batch, ch, len) = (xs[0], xs[1], xs[2]);
        let xv = self.value(x).data();
        let count = (batch * len) as f64;
        let (mean, var, batch_stats) = match stats {
            NormStats::Batch => {
                let mut mean = vec![0.0; ch];
                let mut var = vec![0.0; ch];
                for s in 0..batch {
                    for c in 0..ch {
                        let row = &xv[(s * ch + c) * len..(s * ch + c + 1) * len];
                        mean[c] += row.iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for s in 0..batch {
                    for c in 0..ch {
                        let row = &xv[(s * ch + c) * len..(s * ch + c + 1) * len];
                        var[c] += row.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                (mean, var, true)
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != ch || var.len() != ch {
                    return Err(Error::shape("batch_norm", "running statistics width"));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for s in 0..batch {
            for c in 0..ch {
                let base = (s * ch + c) * len;
                for t in 0..len {
                    let h = (xv[base + t] - mean[c]) * inv_std[c];
                    xhat[base + t] = h;
                    out[base + t] = g[c] * h + bt[c];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = Tensor::new(&xs, out)?;
        let var_out = self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((var_out, batch_stats.then_some((mean, var))))
    }

    /// Normalizes over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let w = *xs.last().unwrap_or(&0);
        if self.shape(gamma) != [w] || self.shape(beta) != [w] {
            return Err(Error::shape("layer_norm", format!("input {xs:?}")));
        }
        let xv = self.value(x).data();
        let rows = xv.len() / w.max(1);
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * w..(r + 1) * w];
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..w {
                let h = (row[j] - mean) * is;
                xhat[r * w + j] = h;
                out[r * w + j] = g[j] * h + bt[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = Tensor::new(&xs, out)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        let w = *v.shape().last().unwrap();
        softmax_rows(v.data_mut(), w);
        let rg = self.rg(x);
        self.push(v, Op::Softmax(x), rg)
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::shape("mean_axis", format!("axis {axis} for {xs:?}")));
        }
        let (outer, dim, inner) = split_axis(&xs, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &xv[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= dim as f64);
        let mut shape = xs;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MeanAxis { x, axis }, rg))
    }

    /// Slice `index` along `axis`, removing the axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || index >= xs[axis] {
            return Err(Error::shape(
                "select",
                format!("index {index} on axis {axis} of {xs:?}"),
            ));
        }
        let (outer, dim, inner) = split_axis(&xs, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv[(o * dim + index) * inner..(o * dim + index + 1) * inner]);
        }
        let mut shape = xs;
        shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Select { x, axis, index }, rg))
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] || len == 0 {
            return Err(Error::shape(
                "narrow",
                format!("{start}..{} on axis {axis} of {xs:?}", start + len),
            ));
        }
        let (outer, dim, inner) = split_axis(&xs, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv[(o * dim + start) * inner..(o * dim + start + len) * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Narrow { x, axis, start }, rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if perm.len() != xs.len()
            || perm
                .iter()
                .any(|&p| p >= xs.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape("permute", format!("{perm:?} for {xs:?}")));
        }
        let mut out = vec![0.0; self.value(x).len()];
        permute_into(self.value(x).data(), &xs, perm, &mut out);
        let shape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Permute { x, perm: perm.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Mean cross-entropy of `[N, C]` logits against the rows whose target is
    /// `Some`; rows with `None` contribute neither loss nor gradient. Returns 0
    /// when no row has a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {ls:?} for {} targets", targets.len()),
            ));
        }
        let classes = ls[1];
        if let Some(&label) = targets.iter().flatten().find(|&&t| t >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let mut probs = self.value(logits).data().to_vec();
        softmax_rows(&mut probs, classes);
        let lv = self.value(logits).data();
        let mut total = 0.0;
        let mut count = 0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let row = &lv[i * classes..(i + 1) * classes];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum::<f64>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Gradient of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| axpy(d, gd, 1.0));
                self.acc(grads, *b, |d| axpy(d, gd, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| axpy(d, gd, 1.0));
                self.acc(grads, *b, |d| axpy(d, gd, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(gd).zip(bv) {
                        *d += g * y;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((d, g), x) in d.iter_mut().zip(gd).zip(av) {
                        *d += g * x;
                    }
                });
            }
            Op::AddTrailing(a, b) => {
                self.acc(grads, *a, |d| axpy(d, gd, 1.0));
                self.acc(grads, *b, |d| {
                    let w = d.len();
                    for chunk in gd.chunks(w) {
                        axpy(d, chunk, 1.0);
                    }
                });
            }
            Op::Scale(x, s) => self.acc(grads, *x, |d| axpy(d, gd, *s)),
            Op::Reshape(x) | Op::Shift(x) => self.acc(grads, *x, |d| axpy(d, gd, 1.0)),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for ((d, g), v) in d.iter_mut().zip(gd).zip(xv) {
                        if *v > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                self.acc(grads, *x, |d| {
                    for ((d, g), y) in d.iter_mut().zip(gd).zip(y) {
                        *d += g * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                self.acc(grads, *x, |d| {
                    for ((d, g), y) in d.iter_mut().zip(gd).zip(y) {
                        *d += g * (1.0 - y * y);
                    }
                });
            }
            Op::Exp(x) => {
                let y = node.value.data();
                self.acc(grads, *x, |d| {
                    for ((d, g), y) in d.iter_mut().zip(gd).zip(y) {
                        *d += g * y;
                    }
                });
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for ((d, g), v) in d.iter_mut().zip(gd).zip(xv) {
                        *d += g * sigmoid(*v);
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let ws = self.shape(*w);
                let (out, fan_in) = (ws[0], ws[1]);
                let rows = xv.len() / fan_in.max(1);
                // dx = g · w
                self.acc(grads, *x, |d| {
                    gemm(rows, out, fan_in, gd, (out, 1), wv, (fan_in, 1), 1.0, d, (fan_in, 1));
                });
                // dw = gᵀ · x
                self.acc(grads, *w, |d| {
                    gemm(out, rows, fan_in, gd, (1, out), xv, (fan_in, 1), 1.0, d, (fan_in, 1));
                });
                if let Some(b) = b {
                    self.acc(grads, *b, |d| {
                        for row in gd.chunks(out) {
                            axpy(d, row, 1.0);
                        }
                    });
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let nd = sa.len();
                let (m, k) = (sa[nd - 2], sa[nd - 1]);
                let n = node.value.shape()[nd - 1];
                let batch: usize = sa[..nd - 2].iter().product();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let trans_b = *trans_b;
                // b is [k, n] (or [n, k] when transposed)
                let b_kn = if trans_b { (1, k) } else { (n, 1) };
                self.acc(grads, *a, |d| {
                    for i in 0..batch {
                        // da = g · bᵀ : [m,n]·[n,k]
                        gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..(i + 1) * m * n],
                            (n, 1),
                            &bv[i * k * n..(i + 1) * k * n],
                            (b_kn.1, b_kn.0),
                            1.0,
                            &mut d[i * m * k..(i + 1) * m * k],
                            (k, 1),
                        );
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..batch {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let di = &mut d[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            // db = gᵀ · a : [n,m]·[m,k]
                            gemm(n, m, k, gi, (1, n), ai, (k, 1), 1.0, di, (k, 1));
                        } else {
                            // db = aᵀ · g : [k,m]·[m,n]
                            gemm(k, m, n, ai, (1, k), gi, (n, 1), 1.0, di, (n, 1));
                        }
                    }
                });
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (batch, cin, len) = (xs[0], xs[1], xs[2]);
                let (cout, kernel) = (ws[0], ws[2]);
                let out_len = node.value.shape()[2];
                let ck = cin * kernel;
                let wv = self.value(*w).data();
                self.acc(grads, *w, |d| {
                    for s in 0..batch {
                        gemm(
                            cout,
                            out_len,
                            ck,
                            &gd[s * cout * out_len..(s + 1) * cout * out_len],
                            (out_len, 1),
                            &cols[s * ck * out_len..(s + 1) * ck * out_len],
                            (1, out_len),
                            1.0,
                            d,
                            (ck, 1),
                        );
                    }
                });
                self.acc(grads, *b, |d| {
                    for s in 0..batch {
                        for co in 0..cout {
                            let base = (s * cout + co) * out_len;
                            d[co] += gd[base..base + out_len].iter().sum::<f64>();
                        }
                    }
                });
                self.acc(grads, *x, |d| {
                    let mut dcols = vec![0.0; ck * out_len];
                    for s in 0..batch {
                        gemm(
                            ck,
                            cout,
                            out_len,
                            wv,
                            (1, ck),
                            &gd[s * cout * out_len..(s + 1) * cout * out_len],
                            (out_len, 1),
                            0.0,
                            &mut dcols,
                            (out_len, 1),
                        );
                        col2im(
                            &dcols,
                            cin,
                            len,
                            kernel,
                            *stride,
                            *pad,
                            out_len,
                            &mut d[s * cin * len..(s + 1) * cin * len],
                        );
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xs = self.shape(*x);
                let (batch, ch, len) = (xs[0], xs[1], xs[2]);
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![0.0; ch];
                let mut dbeta = vec![0.0; ch];
                for s in 0..batch {
                    for c in 0..ch {
                        let base = (s * ch + c) * len;
                        for t in 0..len {
                            dgamma[c] += gd[base + t] * xhat[base + t];
                            dbeta[c] += gd[base + t];
                        }
                    }
                }
                self.acc(grads, *x, |d| {
                    let count = (batch * len) as f64;
                    for s in 0..batch {
                        for c in 0..ch {
                            let base = (s * ch + c) * len;
                            for t in 0..len {
                                let dxhat = gd[base + t] * gv[c];
                                d[base + t] += if *batch_stats {
                                    // dx = γ·inv_std/N · (N·g − Σg − x̂·Σ(g·x̂))
                                    inv_std[c] / count
                                        * (count * dxhat - gv[c] * dbeta[c] - xhat[base + t] * gv[c] * dgamma[c])
                                } else {
                                    dxhat * inv_std[c]
                                };
                            }
                        }
                    }
                });
                self.acc(grads, *gamma, |d| axpy(d, &dgamma, 1.0));
                self.acc(grads, *beta, |d| axpy(d, &dbeta, 1.0));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let w = self.shape(*gamma)[0];
                let gv = self.value(*gamma).data();
                self.acc(grads, *x, |d| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &gd[r * w..(r + 1) * w];
                        let hr = &xhat[r * w..(r + 1) * w];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..w {
                            let dh = gr[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        for j in 0..w {
                            let dh = gr[j] * gv[j];
                            d[r * w + j] += is / w as f64 * (w as f64 * dh - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                });
                self.acc(grads, *gamma, |d| {
                    for (gr, hr) in gd.chunks(w).zip(xhat.chunks(w)) {
                        for j in 0..w {
                            d[j] += gr[j] * hr[j];
                        }
                    }
                });
                self.acc(grads, *beta, |d| {
                    for gr in gd.chunks(w) {
                        axpy(d, gr, 1.0);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let w = *node.value.shape().last().unwrap();
                self.acc(grads, *x, |d| {
                    for ((dr, gr), yr) in d.chunks_mut(w).zip(gd.chunks(w)).zip(y.chunks(w)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for j in 0..w {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::MeanAxis { x, axis } => {
                let (outer, dim, inner) = split_axis(self.shape(*x), *axis);
                self.acc(grads, *x, |d| {
                    let inv = 1.0 / dim as f64;
                    for o in 0..outer {
                        let src = &gd[o * inner..(o + 1) * inner];
                        for k in 0..dim {
                            let dst = &mut d[(o * dim + k) * inner..(o * dim + k + 1) * inner];
                            axpy(dst, src, inv);
                        }
                    }
                });
            }
            Op::Select { x, axis, index } => {
                let (outer, dim, inner) = split_axis(self.shape(*x), *axis);
                self.acc(grads, *x, |d| {
                    for o in 0..outer {
                        let dst = &mut d[(o * dim + index) * inner..(o * dim + index + 1) * inner];
                        axpy(dst, &gd[o * inner..(o + 1) * inner], 1.0);
                    }
                });
            }
            Op::Narrow { x, axis, start } => {
                let (outer, dim, inner) = split_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                self.acc(grads, *x, |d| {
                    for o in 0..outer {
                        let dst = &mut d[(o * dim + start) * inner..(o * dim + start + len) * inner];
                        axpy(dst, &gd[o * len * inner..(o + 1) * len * inner], 1.0);
                    }
                });
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let mut back = vec![0.0; gd.len()];
                permute_into(gd, node.value.shape(), &inverse, &mut back);
                self.acc(grads, *x, |d| axpy(d, &back, 1.0));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let classes = self.shape(*logits)[1];
                let scale = gd[0] / *count as f64;
                self.acc(grads, *logits, |d| {
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for c in 0..classes {
                                let ind = if c == t { 1.0 } else { 0.0 };
                                d[i * classes + c] += scale * (probs[i * classes + c] - ind);
                            }
                        }
                    }
                });
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                self.acc(grads, *x, |d| d.iter_mut().for_each(|v| *v += gd[0] / n));
            }
            Op::Sum(x) => {
                self.acc(grads, *x, |d| d.iter_mut().for_each(|v| *v += gd[0]));
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.shape(v)));
        f(slot.data_mut());
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

#[cfg(test)]
mod tests;
