//! Reverse-mode differentiation over an append-only tape.
//!
//! Every forward op appends a node holding its output value. Node indices are
//! a topological order by construction, so backward is a single reverse sweep.

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{real, split_axis, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param,
    MatMul,
    Add,
    Sub,
    Mul,
    AddBias,
    ScaleCols,
    ScaleRows,
    Scale(T),
    Concat {
        axis: usize,
    },
    Relu,
    Sigmoid,
    Tanh,
    Softmax {
        axis: usize,
    },
    LogSoftmax {
        axis: usize,
    },
    Conv1d {
        stride: usize,
        padding: usize,
    },
    MaxPool1d {
        argmax: Vec<usize>,
        width: usize,
        stride: usize,
    },
    LayerNorm {
        axis: usize,
        rstd: Vec<T>,
    },
    Gather {
        indices: Vec<usize>,
    },
    ScatterAdd {
        indices: Vec<usize>,
    },
    Sum {
        axis: usize,
    },
    Mean {
        axis: usize,
    },
    Max {
        argmax: Vec<usize>,
        axis: usize,
    },
    SumAll,
    L2NormRows,
    SmoothL1 {
        beta: T,
    },
    Reshape,
    Narrow {
        axis: usize,
        start: usize,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    inputs: Vec<usize>,
    requires_grad: bool,
}

/// Gradients for every node on a tape, produced by [`Tape::backward_nodes`].
#[derive(Debug)]
pub struct NodeGrads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> NodeGrads<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

/// Records forward computations for later differentiation.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<Option<Var>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Smallest distance, over every recorded relu input, max-reduction
    /// runner-up gap and l2-norm row, from the point where that op stops
    /// being differentiable. Exact zeros and exact ties are skipped: they
    /// come from padding and masks, not from parameters.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        let mut note = |v: f64| {
            if v != 0.0 {
                margin = margin.min(v.abs());
            }
        };
        let gap = |xs: &mut dyn Iterator<Item = f64>| {
            let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for v in xs {
                if v > a {
                    b = a;
                    a = v;
                } else if v > b {
                    b = v;
                }
            }
            a - b
        };
        for node in &self.nodes {
            let Some(&input) = node.inputs.first() else {
                continue;
            };
            let x = &self.nodes[input].value;
            let xd = x.data();
            match &node.op {
                Op::Relu => xd.iter().for_each(|v| note(v.to_f64().unwrap_or(0.0))),
                Op::L2NormRows => node.value.data().iter().for_each(|v| note(v.to_f64().unwrap_or(0.0))),
                Op::Max { axis, .. } => {
                    let Ok((outer, n, inner)) = split_axis("max", x.shape(), *axis) else {
                        continue;
                    };
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut it = (0..n).map(|k| xd[(o * n + k) * inner + i].to_f64().unwrap_or(0.0));
                            if n > 1 {
                                note(gap(&mut it));
                            }
                        }
                    }
                }
                Op::MaxPool1d { width, stride, .. } => {
                    let len = x.shape()[2];
                    let lout = (len - width) / stride + 1;
                    for r in 0..x.shape()[0] * x.shape()[1] {
                        for t in 0..lout {
                            let start = r * len + t * stride;
                            let mut it = xd[start..start + width].iter().map(|v| v.to_f64().unwrap_or(0.0));
                            if *width > 1 {
                                note(gap(&mut it));
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: Vec<usize>) -> Var {
        let requires_grad = match op {
            Op::Param => true,
            _ => inputs.iter().any(|&i| self.nodes[i].requires_grad),
        };
        debug_assert!(
            inputs.is_empty() || !inputs.iter().all(|&i| self.nodes[i].value.all_finite()) || value.all_finite(),
            "non-finite output from {op:?} on finite inputs"
        );
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, vec![])
    }

    /// Records a differentiable input that is not a stored parameter.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, vec![]);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Loads a parameter onto the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if self.params.len() <= id.0 {
            self.params.resize(id.0 + 1, None);
        }
        if let Some(v) = self.params[id.0] {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, vec![]);
        self.params[id.0] = Some(v);
        v
    }

    /// Like [`Tape::param`] but records the value as a constant, so the
    /// parameter receives no gradient.
    pub fn frozen_param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.constant(store.get(id).clone())
    }

    // ---- elementwise binary ------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, op, vec![a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add, "add", |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub, "sub", |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul, "mul", |p, q| p * q)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let c = real::<T>(factor);
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(c), vec![a.0])
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatMul, vec![a.0, b.0]))
    }

    /// Adds a rank-1 bias along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.last_dim_match("add_bias", x, bias)?;
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b[i % n];
        }
        Ok(self.push(out, Op::AddBias, vec![x.0, bias.0]))
    }

    /// Multiplies by a rank-1 gain along the last axis.
    pub fn scale_cols(&mut self, x: Var, gain: Var) -> Result<Var> {
        let n = self.last_dim_match("scale_cols", x, gain)?;
        let g = self.value(gain).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= g[i % n];
        }
        Ok(self.push(out, Op::ScaleCols, vec![x.0, gain.0]))
    }

    fn last_dim_match(&self, op: &'static str, x: Var, v: Var) -> Result<usize> {
        let (sx, sv) = (self.shape(x), self.shape(v));
        match (sx.last(), sv) {
            (Some(&n), [m]) if n == *m => Ok(n),
            _ => Err(shape_err(op, sx, sv)),
        }
    }

    /// Multiplies each leading-axis slice `x[i, ..]` by `s[i]`. `s` is `[m]` or `[m, 1]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (sx, ss) = (self.shape(x).to_vec(), self.shape(s).to_vec());
        let ok =
            !sx.is_empty() && ((ss.len() == 1 && ss[0] == sx[0]) || (ss.len() == 2 && ss[0] == sx[0] && ss[1] == 1));
        if !ok {
            return Err(shape_err("scale_rows", &sx, &ss));
        }
        let inner: usize = sx[1..].iter().product();
        let sv = self.value(s).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= sv[i / inner.max(1)];
        }
        Ok(self.push(out, Op::ScaleRows, vec![x.0, s.0]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        split_axis("concat", &base, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis("concat", &shape, axis)?;
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat { axis }, parts.iter().map(|p| p.0).collect()))
    }

    // ---- activations ---------------------------------------------------------

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu, vec![x.0])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid, vec![x.0])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::tanh);
        self.push(out, Op::Tanh, vec![x.0])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = softmax_raw(self.value(x), axis, false)?;
        Ok(self.push(out, Op::Softmax { axis }, vec![x.0]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = softmax_raw(self.value(x), axis, true)?;
        Ok(self.push(out, Op::LogSoftmax { axis }, vec![x.0]))
    }

    // ---- temporal ops --------------------------------------------------------

    /// 1-D convolution of `x: [B, C_in, L]` with `w: [C_out, C_in, K]` and optional bias `[C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] || stride == 0 {
            return Err(shape_err("conv1d", &sx, &sw));
        }
        let (b, cin, len) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        if k > len + 2 * padding {
            return Err(shape_err("conv1d", &sx, &sw));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return Err(shape_err("conv1d", &sw, self.shape(bv)));
            }
        }
        let lout = (len + 2 * padding - k) / stride + 1;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![T::zero(); b * cout * lout];
        for bi in 0..b {
            for o in 0..cout {
                let base = (bi * cout + o) * lout;
                if let Some(bv) = bias {
                    let bb = self.value(bv).data()[o];
                    out[base..base + lout].iter_mut().for_each(|v| *v = bb);
                }
                for c in 0..cin {
                    let xrow = &xd[(bi * cin + c) * len..(bi * cin + c + 1) * len];
                    let wrow = &wd[(o * cin + c) * k..(o * cin + c + 1) * k];
                    for t in 0..lout {
                        let mut acc = T::zero();
                        for (kk, &wv) in wrow.iter().enumerate() {
                            let pos = (t * stride + kk) as isize - padding as isize;
                            if pos >= 0 && (pos as usize) < len {
                                acc += wv * xrow[pos as usize];
                            }
                        }
                        out[base + t] += acc;
                    }
                }
            }
        }
        let out = Tensor::new(vec![b, cout, lout], out)?;
        let mut inputs = vec![x.0, w.0];
        inputs.extend(bias.map(|v| v.0));
        Ok(self.push(out, Op::Conv1d { stride, padding }, inputs))
    }

    /// Max pooling over the last axis of `[B, C, L]`; ties go to the lowest index.
    pub fn maxpool1d(&mut self, x: Var, width: usize, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || width == 0 || stride == 0 || width > sx[2] {
            return Err(shape_err("maxpool1d", &sx, &[width, stride]));
        }
        let (rows, len) = (sx[0] * sx[1], sx[2]);
        let lout = (len - width) / stride + 1;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(rows * lout);
        let mut argmax = Vec::with_capacity(rows * lout);
        for r in 0..rows {
            for t in 0..lout {
                let start = r * len + t * stride;
                let (best, idx) = argmax_lowest(&xd[start..start + width]);
                out.push(best);
                argmax.push(start + idx);
            }
        }
        let out = Tensor::new(vec![sx[0], sx[1], lout], out)?;
        Ok(self.push(out, Op::MaxPool1d { argmax, width, stride }, vec![x.0]))
    }

    // ---- normalization -------------------------------------------------------

    /// Zero-mean unit-variance normalization along `axis` (biased variance, no affine).
    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (outer, n, inner) = split_axis("layer_norm", xv.shape(), axis)?;
        let eps = real::<T>(eps);
        let nf = real::<T>(n as f64);
        let xd = xv.data();
        let mut out = vec![T::zero(); xd.len()];
        let mut rstd = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let mean = (0..n).map(|k| xd[idx(k)]).sum::<T>() / nf;
                let var = (0..n).map(|k| (xd[idx(k)] - mean).powi(2)).sum::<T>() / nf;
                let r = T::one() / (var + eps).sqrt();
                for k in 0..n {
                    out[idx(k)] = (xd[idx(k)] - mean) * r;
                }
                rstd.push(r);
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(out, Op::LayerNorm { axis, rstd }, vec![x.0]))
    }

    // ---- indexing ------------------------------------------------------------

    /// Selects leading-axis slices: `[N, ..] -> [M, ..]`.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.is_empty() {
            return Err(shape_err("gather", &sx, &[indices.len()]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= sx[0]) {
            return Err(Error::contract(format!("gather index {bad} out of range {}", sx[0])));
        }
        let inner: usize = sx[1..].iter().product();
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            data.extend_from_slice(&xd[i * inner..(i + 1) * inner]);
        }
        let mut shape = sx.clone();
        shape[0] = indices.len();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::Gather {
                indices: indices.to_vec(),
            },
            vec![x.0],
        ))
    }

    /// Sums leading-axis slices into `size` buckets: `[M, ..] -> [size, ..]`.
    pub fn scatter_add(&mut self, x: Var, indices: &[usize], size: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.is_empty() || sx[0] != indices.len() {
            return Err(shape_err("scatter_add", &sx, &[indices.len()]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= size) {
            return Err(Error::contract(format!("scatter index {bad} out of range {size}")));
        }
        let inner: usize = sx[1..].iter().product();
        let xd = self.value(x).data();
        let mut data = vec![T::zero(); size * inner];
        for (m, &i) in indices.iter().enumerate() {
            for e in 0..inner {
                data[i * inner + e] += xd[m * inner + e];
            }
        }
        let mut shape = sx.clone();
        shape[0] = size;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::ScatterAdd {
                indices: indices.to_vec(),
            },
            vec![x.0],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape, vec![x.0]))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (outer, n, inner) = split_axis("narrow", xv.shape(), axis)?;
        if start + len > n {
            return Err(shape_err("narrow", xv.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * n + start) * inner;
            data.extend_from_slice(&xv.data()[s..s + len * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Narrow { axis, start }, vec![x.0]))
    }

    // ---- reductions ----------------------------------------------------------

    fn reduce(&mut self, x: Var, axis: usize, name: &'static str, mean: bool) -> Result<Var> {
        let xv = self.value(x);
        let (outer, n, inner) = split_axis(name, xv.shape(), axis)?;
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    data[o * inner + i] += xv.data()[(o * n + k) * inner + i];
                }
            }
        }
        if mean {
            let nf = real::<T>(n as f64);
            data.iter_mut().for_each(|v| *v = *v / nf);
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(shape, data)?;
        let op = if mean { Op::Mean { axis } } else { Op::Sum { axis } };
        Ok(self.push(out, op, vec![x.0]))
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, "sum", false)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        if self.shape(x).get(axis) == Some(&0) {
            return Err(Error::contract("mean over empty axis"));
        }
        self.reduce(x, axis, "mean", true)
    }

    /// Maximum along `axis`; ties go to the lowest index.
    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (outer, n, inner) = split_axis("max", xv.shape(), axis)?;
        if n == 0 {
            return Err(Error::contract("max over empty axis"));
        }
        let mut data = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (xv.data()[o * n * inner + i], o * n * inner + i);
                for k in 1..n {
                    let idx = (o * n + k) * inner + i;
                    if xv.data()[idx] > best.0 {
                        best = (xv.data()[idx], idx);
                    }
                }
                data.push(best.0);
                argmax.push(best.1);
            }
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Max { argmax, axis }, vec![x.0]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::SumAll, vec![x.0])
    }

    /// Euclidean norm of each row of `[N, D]`.
    pub fn l2_norm_rows(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(shape_err("l2_norm_rows", &sx, &[]));
        }
        let d = sx[1];
        let data = self
            .value(x)
            .data()
            .chunks(d.max(1))
            .take(sx[0])
            .map(|row| row.iter().map(|v| *v * *v).sum::<T>().sqrt())
            .collect();
        let out = Tensor::new(vec![sx[0]], data)?;
        Ok(self.push(out, Op::L2NormRows, vec![x.0]))
    }

    /// Elementwise smooth-L1 (Huber with threshold `beta`, divided by `beta`).
    pub fn smooth_l1(&mut self, x: Var, beta: f64) -> Result<Var> {
        if beta <= 0.0 {
            return Err(Error::contract("smooth_l1 requires beta > 0"));
        }
        let b = real::<T>(beta);
        let half = real::<T>(0.5);
        let out = self.value(x).map(|v| {
            let a = v.abs();
            if a < b {
                half * v * v / b
            } else {
                a - half * b
            }
        });
        Ok(self.push(out, Op::SmoothL1 { beta: b }, vec![x.0]))
    }

    // ---- backward ------------------------------------------------------------

    /// Reverse sweep from a scalar `loss`, returning gradients for every node.
    pub fn backward_nodes(&self, loss: Var) -> Result<NodeGrads<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let input_grads = self.input_grads(idx, &gy);
            grads[idx] = Some(gy);
            for (&inp, g) in node.inputs.iter().zip(input_grads) {
                if let Some(g) = g {
                    match &mut grads[inp] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(NodeGrads { grads })
    }

    /// Gradients of `loss` with respect to every parameter in `store`. Parameters
    /// never loaded onto this tape get zero gradients.
    pub fn backward(&self, loss: Var, store: &ParamStore<T>) -> Result<Gradients<T>> {
        let node_grads = self.backward_nodes(loss)?;
        let grads = store
            .ids()
            .map(|id| {
                self.params
                    .get(id.0)
                    .copied()
                    .flatten()
                    .and_then(|v| node_grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect();
        Ok(Gradients::from_vec(grads))
    }

    fn input_grads(&self, idx: usize, gy: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let node = &self.nodes[idx];
        let needs = |k: usize| self.nodes[node.inputs[k]].requires_grad;
        let input = |k: usize| &self.nodes[node.inputs[k]].value;
        let y = &node.value;
        let g = gy.data();
        let like = |t: &Tensor<T>, data: Vec<T>| Tensor::new(t.shape().to_vec(), data).expect("shape");
        let elementwise = |f: &dyn Fn(usize) -> T| like(y, (0..g.len()).map(f).collect());

        match &node.op {
            Op::Leaf | Op::Param => vec![],
            Op::Add => vec![Some(gy.clone()), Some(gy.clone())],
            Op::Sub => vec![Some(gy.clone()), Some(gy.map(|v| -v))],
            Op::Mul => {
                let (a, b) = (input(0).data(), input(1).data());
                vec![
                    needs(0).then(|| elementwise(&|i| g[i] * b[i])),
                    needs(1).then(|| elementwise(&|i| g[i] * a[i])),
                ]
            }
            Op::Scale(c) => vec![Some(gy.map(|v| v * *c))],
            Op::MatMul => {
                let (a, b) = (input(0), input(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let ga = needs(0).then(|| {
                    // g [m,n] x b^T [n,k]
                    let mut out = vec![T::zero(); m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == T::zero() {
                                continue;
                            }
                            for p in 0..k {
                                out[i * k + p] += gv * b.data()[p * n + j];
                            }
                        }
                    }
                    like(a, out)
                });
                let gb = needs(1).then(|| {
                    // a^T [k,m] x g [m,n]
                    let mut out = vec![T::zero(); k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = a.data()[i * k + p];
                            if av == T::zero() {
                                continue;
                            }
                            for j in 0..n {
                                out[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                    like(b, out)
                });
                vec![ga, gb]
            }
            Op::AddBias => {
                let n = input(1).len();
                let gb = needs(1).then(|| {
                    let mut out = vec![T::zero(); n];
                    for (i, &v) in g.iter().enumerate() {
                        out[i % n] += v;
                    }
                    like(input(1), out)
                });
                vec![Some(gy.clone()), gb]
            }
            Op::ScaleCols => {
                let (x, s) = (input(0).data(), input(1).data());
                let n = s.len();
                let gx = needs(0).then(|| elementwise(&|i| g[i] * s[i % n]));
                let gs = needs(1).then(|| {
                    let mut out = vec![T::zero(); n];
                    for i in 0..g.len() {
                        out[i % n] += g[i] * x[i];
                    }
                    like(input(1), out)
                });
                vec![gx, gs]
            }
            Op::ScaleRows => {
                let (x, s) = (input(0), input(1));
                let inner: usize = x.shape()[1..].iter().product::<usize>().max(1);
                let gx = needs(0).then(|| elementwise(&|i| g[i] * s.data()[i / inner]));
                let gs = needs(1).then(|| {
                    let mut out = vec![T::zero(); s.len()];
                    for i in 0..g.len() {
                        out[i / inner] += g[i] * x.data()[i];
                    }
                    like(s, out)
                });
                vec![gx, gs]
            }
            Op::Concat { axis } => {
                let (outer, total, inner) = split_axis("concat", y.shape(), *axis).expect("axis");
                let mut offset = 0;
                node.inputs
                    .iter()
                    .enumerate()
                    .map(|(k, _)| {
                        let part = input(k);
                        let len = part.shape()[*axis];
                        let res = needs(k).then(|| {
                            let mut out = Vec::with_capacity(part.len());
                            for o in 0..outer {
                                let s = (o * total + offset) * inner;
                                out.extend_from_slice(&g[s..s + len * inner]);
                            }
                            like(part, out)
                        });
                        offset += len;
                        res
                    })
                    .collect()
            }
            Op::Relu => {
                let x = input(0).data();
                vec![Some(elementwise(&|i| {
                    if x[i] > T::zero() {
                        g[i]
                    } else {
                        T::zero()
                    }
                }))]
            }
            Op::Sigmoid => {
                let yd = y.data();
                vec![Some(elementwise(&|i| g[i] * yd[i] * (T::one() - yd[i])))]
            }
            Op::Tanh => {
                let yd = y.data();
                vec![Some(elementwise(&|i| g[i] * (T::one() - yd[i] * yd[i])))]
            }
            Op::Softmax { axis } => {
                let (outer, n, inner) = split_axis("softmax", y.shape(), *axis).expect("axis");
                let yd = y.data();
                let mut out = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let dot = (0..n).map(|k| g[idx(k)] * yd[idx(k)]).sum::<T>();
                        for k in 0..n {
                            out[idx(k)] = yd[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                vec![Some(like(y, out))]
            }
            Op::LogSoftmax { axis } => {
                let (outer, n, inner) = split_axis("log_softmax", y.shape(), *axis).expect("axis");
                let yd = y.data();
                let mut out = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let gsum = (0..n).map(|k| g[idx(k)]).sum::<T>();
                        for k in 0..n {
                            out[idx(k)] = g[idx(k)] - yd[idx(k)].exp() * gsum;
                        }
                    }
                }
                vec![Some(like(y, out))]
            }
            Op::Conv1d { stride, padding } => {
                let (x, w) = (input(0), input(1));
                let (b, cin, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (cout, k) = (w.shape()[0], w.shape()[2]);
                let lout = y.shape()[2];
                let mut gx = vec![T::zero(); x.len()];
                let mut gw = vec![T::zero(); w.len()];
                for bi in 0..b {
                    for o in 0..cout {
                        let grow = &g[(bi * cout + o) * lout..(bi * cout + o + 1) * lout];
                        for c in 0..cin {
                            let xoff = (bi * cin + c) * len;
                            let woff = (o * cin + c) * k;
                            for (t, &gv) in grow.iter().enumerate() {
                                for kk in 0..k {
                                    let pos = (t * stride + kk) as isize - *padding as isize;
                                    if pos >= 0 && (pos as usize) < len {
                                        let p = pos as usize;
                                        gx[xoff + p] += gv * w.data()[woff + kk];
                                        gw[woff + kk] += gv * x.data()[xoff + p];
                                    }
                                }
                            }
                        }
                    }
                }
                let mut res = vec![needs(0).then(|| like(x, gx)), needs(1).then(|| like(w, gw))];
                if node.inputs.len() == 3 {
                    res.push(needs(2).then(|| {
                        let mut gb = vec![T::zero(); cout];
                        for (i, &v) in g.iter().enumerate() {
                            gb[(i / lout) % cout] += v;
                        }
                        like(input(2), gb)
                    }));
                }
                res
            }
            Op::MaxPool1d { argmax, .. } | Op::Max { argmax, .. } => {
                let mut out = vec![T::zero(); input(0).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    out[src] += gv;
                }
                vec![Some(like(input(0), out))]
            }
            Op::LayerNorm { axis, rstd } => {
                let (outer, n, inner) = split_axis("layer_norm", y.shape(), *axis).expect("axis");
                let nf = real::<T>(n as f64);
                let yd = y.data();
                let mut out = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let mg = (0..n).map(|k| g[idx(k)]).sum::<T>() / nf;
                        let mgy = (0..n).map(|k| g[idx(k)] * yd[idx(k)]).sum::<T>() / nf;
                        let r = rstd[o * inner + i];
                        for k in 0..n {
                            out[idx(k)] = r * (g[idx(k)] - mg - yd[idx(k)] * mgy);
                        }
                    }
                }
                vec![Some(like(y, out))]
            }
            Op::Gather { indices } => {
                let x = input(0);
                let inner: usize = x.shape()[1..].iter().product();
                let mut out = vec![T::zero(); x.len()];
                for (m, &i) in indices.iter().enumerate() {
                    for e in 0..inner {
                        out[i * inner + e] += g[m * inner + e];
                    }
                }
                vec![Some(like(x, out))]
            }
            Op::ScatterAdd { indices } => {
                let x = input(0);
                let inner: usize = x.shape()[1..].iter().product();
                let mut out = Vec::with_capacity(x.len());
                for &i in indices {
                    out.extend_from_slice(&g[i * inner..(i + 1) * inner]);
                }
                vec![Some(like(x, out))]
            }
            Op::Sum { axis } | Op::Mean { axis } => {
                let x = input(0);
                let (outer, n, inner) = split_axis("sum", x.shape(), *axis).expect("axis");
                let scale = match node.op {
                    Op::Mean { .. } => T::one() / real::<T>(n as f64),
                    _ => T::one(),
                };
                let mut out = vec![T::zero(); x.len()];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            out[(o * n + k) * inner + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                vec![Some(like(x, out))]
            }
            Op::SumAll => {
                let x = input(0);
                vec![Some(Tensor::full(x.shape(), g[0]))]
            }
            Op::L2NormRows => {
                let x = input(0);
                let d = x.shape()[1];
                let out = (0..x.len())
                    .map(|i| {
                        let norm = y.data()[i / d];
                        if norm > T::zero() {
                            g[i / d] * x.data()[i] / norm
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                vec![Some(like(x, out))]
            }
            Op::SmoothL1 { beta } => {
                let x = input(0).data();
                vec![Some(elementwise(&|i| {
                    let v = x[i];
                    let d = if v.abs() < *beta {
                        v / *beta
                    } else if v > T::zero() {
                        T::one()
                    } else {
                        -T::one()
                    };
                    g[i] * d
                }))]
            }
            Op::Reshape => vec![Some(like(input(0), g.to_vec()))],
            Op::Narrow { axis, start } => {
                let x = input(0);
                let (outer, n, inner) = split_axis("narrow", x.shape(), *axis).expect("axis");
                let len = y.shape()[*axis];
                let mut out = vec![T::zero(); x.len()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    out[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![Some(like(x, out))]
            }
        }
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn argmax_lowest<T: Real>(xs: &[T]) -> (T, usize) {
    let mut best = (xs[0], 0);
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > best.0 {
            best = (v, i);
        }
    }
    best
}

fn matmul_raw<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn softmax_raw<T: Real>(x: &Tensor<T>, axis: usize, log: bool) -> Result<Tensor<T>> {
    let (outer, n, inner) = split_axis(if log { "log_softmax" } else { "softmax" }, x.shape(), axis)?;
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let m = (0..n).map(|k| xd[idx(k)]).fold(T::neg_infinity(), T::max);
            let z = (0..n).map(|k| (xd[idx(k)] - m).exp()).sum::<T>();
            let lz = z.ln();
            for k in 0..n {
                out[idx(k)] = if log {
                    xd[idx(k)] - m - lz
                } else {
                    (xd[idx(k)] - m).exp() / z
                };
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}
