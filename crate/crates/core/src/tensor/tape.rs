use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};

use super::kernels::{self, ConvDims, NormDims};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

/// Operation kinds, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Mul,
    Scale,
    Square,
    Sum,
    Concat,
    MatMul,
    Linear,
    Softmax,
    Relu,
    Conv2d,
    BatchNorm,
    Reshape,
    Scatter,
    CrossEntropy,
}

impl std::str::FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "add" => OpKind::Add,
            "mul" => OpKind::Mul,
            "scale" => OpKind::Scale,
            "square" => OpKind::Square,
            "sum" => OpKind::Sum,
            "concat" => OpKind::Concat,
            "matmul" => OpKind::MatMul,
            "linear" => OpKind::Linear,
            "softmax" => OpKind::Softmax,
            "relu" => OpKind::Relu,
            "conv2d" | "conv" => OpKind::Conv2d,
            "batchnorm" | "bn" => OpKind::BatchNorm,
            "reshape" => OpKind::Reshape,
            "scatter" => OpKind::Scatter,
            "cross_entropy" | "loss" => OpKind::CrossEntropy,
            other => return Err(Error::Config(format!("unknown op kind {other}"))),
        })
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Square(Var),
    Sum(Var),
    Concat { a: Var, b: Var, outer: usize, la: usize, lb: usize },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, b: Var, batch: usize, n_in: usize, n_out: usize },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    Relu(Var),
    Conv2d { x: Var, w: Var, b: Var, dims: ConvDims },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, dims: NormDims, batch_stats: bool },
    Reshape(Var),
    Scatter { src: Var, base: Var, positions: Vec<usize> },
    CrossEntropy { probs: Var, targets: Vec<usize>, classes: usize, floor: T },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Square(..) => OpKind::Square,
            Op::Sum(..) => OpKind::Sum,
            Op::Concat { .. } => OpKind::Concat,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Relu(..) => OpKind::Relu,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Scatter { .. } => OpKind::Scatter,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

/// Batch statistics produced by a train-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance over batch and spatial positions.
    pub var: Vec<T>,
    /// Number of values each statistic was computed from.
    pub count: usize,
}

/// Records a computation in creation order and runs reverse-mode
/// differentiation over it.
///
/// A tape is single-threaded. Nodes are appended as operations execute, so
/// every node's inputs precede it and backward walks indices in reverse.
pub struct Tape<T> {
    id: u32,
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    needs_grad: Vec<bool>,
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(String, Var)>,
    overrides: HashMap<String, Var>,
    record: bool,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A recording tape.
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    /// A tape that only evaluates: nothing requires gradients and no
    /// intermediates are saved for backward.
    pub fn inference() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(record: bool) -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
            grads: Vec::new(),
            params: Vec::new(),
            overrides: HashMap::new(),
            record,
            fault: None,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Corrupts the backward rule of every node of `kind` (input gradients
    /// are scaled by 1.5). Exists so gradient checks can be mutation-tested.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index() >= self.values.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs = self.record && inputs.iter().any(|v| self.needs_grad[v.index()]);
        let var = Var { tape: self.id, idx: self.values.len() as u32 };
        self.values.push(value);
        self.ops.push(if needs { op } else { Op::Leaf });
        self.needs_grad.push(needs);
        self.grads.push(None);
        var
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let var = Var { tape: self.id, idx: self.values.len() as u32 };
        self.values.push(Tensor { grad: None, ..value });
        self.ops.push(Op::Leaf);
        self.needs_grad.push(requires_grad && self.record);
        self.grads.push(None);
        var
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Registers a named model parameter. A variable supplied through
    /// [`Tape::override_param`] for the same name takes its place.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(v) = self.overrides.get(name) {
            return *v;
        }
        let var = self.leaf(value.clone(), true);
        if self.record {
            self.params.push((name.to_string(), var));
        }
        var
    }

    /// Makes subsequent `param(name, ..)` calls return `var`.
    pub fn override_param(&mut self, name: &str, var: Var) -> Result<()> {
        self.check(var)?;
        self.overrides.insert(name.to_string(), var);
        Ok(())
    }

    /// Parameters registered on this tape, in registration order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.index()]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.index()].shape()
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.index()).and_then(|g| g.as_deref())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch { op, left: sa.to_vec(), right: sb.to_vec() });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| *p + *q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        self.same_shape("elementwise_mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| *p * *q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| *v * factor).collect())?;
        Ok(self.push(out, Op::Scale(a, factor), &[a]))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| *v * *v).collect())?;
        Ok(self.push(out, Op::Square(a), &[a]))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s: T = self.value(a).data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (x, y) = (self.value(a), self.value(b));
        let (shape, data) = kernels::concat(x.shape(), x.data(), y.shape(), y.data(), axis)?;
        let outer = x.shape()[..axis].iter().product();
        let inner: usize = x.shape()[axis + 1..].iter().product();
        let (la, lb) = (x.shape()[axis] * inner, y.shape()[axis] * inner);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat { a, b, outer, la, lb }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", left: sa.to_vec(), right: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), m, k, self.value(b).data(), n);
        let out = Tensor::new([m, n], data)?;
        Ok(self.push(out, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// `x * w^T + b` with `x: [batch, n_in]`, `w: [n_out, n_in]`, `b: [n_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] || sb != [sw[0]] {
            return Err(Error::ShapeMismatch { op: "linear", left: sx.to_vec(), right: sw.to_vec() });
        }
        let (batch, n_in, n_out) = (sx[0], sx[1], sw[0]);
        let data = kernels::linear(self.value(x).data(), batch, n_in, self.value(w).data(), self.value(b).data(), n_out);
        let out = Tensor::new([batch, n_out], data)?;
        Ok(self.push(out, Op::Linear { x, w, b, batch, n_in, n_out }, &[x, w, b]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let (outer, len, inner) = kernels::axis_split(t.shape(), axis)?;
        let data = kernels::softmax(t.data(), outer, len, inner)?;
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.max(T::zero())).collect())?;
        Ok(self.push(out, Op::Relu(x), &[x]))
    }

    /// Valid stride-1 cross-correlation. `x: [b, c_in, h, w]`,
    /// `w: [c_out, c_in, k, k]`, `bias: [c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        self.check(bias)?;
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] || self.shape(bias) != [sw[0]] {
            return Err(Error::ShapeMismatch { op: "conv2d", left: sx.to_vec(), right: sw.to_vec() });
        }
        let dims = ConvDims { batch: sx[0], c_in: sx[1], h: sx[2], w: sx[3], c_out: sw[0], k: sw[2] };
        if dims.h < dims.k || dims.w < dims.k {
            return Err(Error::InvalidShape {
                op: "conv2d",
                msg: format!("input {}x{} smaller than kernel {}", dims.h, dims.w, dims.k),
            });
        }
        let data = kernels::conv2d(self.value(x).data(), self.value(w).data(), self.value(bias).data(), &dims);
        let out = Tensor::new([dims.batch, dims.c_out, dims.oh(), dims.ow()], data)?;
        Ok(self.push(out, Op::Conv2d { x, w, b: bias, dims }, &[x, w, bias]))
    }

    /// Per-channel normalization over axis 1 of a `[b, c, ...]` input.
    ///
    /// With `running = None` batch statistics are used and returned;
    /// otherwise the given `(mean, var)` are applied as a fixed affine map.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || self.shape(gamma) != [sx[1]] || self.shape(beta) != [sx[1]] {
            return Err(Error::ShapeMismatch { op: "batch_norm", left: sx, right: self.shape(gamma).to_vec() });
        }
        let dims = NormDims { batch: sx[0], channels: sx[1], spatial: sx[2..].iter().product() };
        if let Some((m, v)) = running {
            if m.len() != dims.channels || v.len() != dims.channels {
                return Err(Error::LengthMismatch { left: dims.channels, right: m.len().min(v.len()) });
            }
        }
        let f = kernels::batchnorm(self.value(x).data(), self.value(gamma).data(), self.value(beta).data(), &dims, eps, running);
        let batch_stats = running.is_none();
        let moments = batch_stats.then(|| BatchMoments { mean: f.mean, var: f.var, count: dims.batch * dims.spatial });
        let out = Tensor::new(sx, f.y)?;
        let op = Op::BatchNorm { x, gamma, beta, xhat: f.xhat, inv_std: f.inv_std, dims, batch_stats };
        Ok((self.push(out, op, &[x, gamma, beta]), moments))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Copy of `base` with `out[positions[j]] = src[j]`.
    pub fn scatter(&mut self, base: Var, src: Var, positions: &[usize]) -> Result<Var> {
        self.check(base)?;
        self.check(src)?;
        let n = self.value(base).numel();
        if positions.len() != self.value(src).numel() || positions.iter().any(|p| *p >= n) {
            return Err(Error::InvalidShape { op: "scatter", msg: "positions do not match source/base".into() });
        }
        let mut out = self.value(base).clone();
        for (j, p) in positions.iter().enumerate() {
            out.data_mut()[*p] = self.value(src).data()[j];
        }
        Ok(self.push(out, Op::Scatter { src, base, positions: positions.to_vec() }, &[base, src]))
    }

    /// Mean over rows of `-ln(max(p[row, target], floor))` for `probs: [batch, classes]`.
    pub fn cross_entropy(&mut self, probs: Var, targets: &[usize], floor: T) -> Result<Var> {
        self.check(probs)?;
        let sp = self.shape(probs).to_vec();
        if sp.len() != 2 {
            return Err(Error::InvalidShape { op: "cross_entropy", msg: format!("expected [batch, classes], got {:?}", sp) });
        }
        if sp[0] == 0 || targets.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if targets.len() != sp[0] {
            return Err(Error::LengthMismatch { left: sp[0], right: targets.len() });
        }
        let classes = sp[1];
        if targets.iter().any(|t| *t >= classes) {
            return Err(Error::InvalidShape { op: "cross_entropy", msg: "target class out of range".into() });
        }
        let p = self.value(probs).data();
        let total: T = targets.iter().enumerate().map(|(r, t)| -p[r * classes + t].max(floor).ln()).sum();
        let loss = total / T::of(targets.len() as f64);
        let op = Op::CrossEntropy { probs, targets: targets.to_vec(), classes, floor };
        Ok(self.push(Tensor::scalar(loss), op, &[probs]))
    }

    /// Accumulates `d loss / d node` into every node that requires a
    /// gradient. Previous gradients on this tape are discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.check(loss)?;
        if self.values[root].numel() != 1 {
            return Err(Error::NotScalar(self.values[root].shape().to_vec()));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.needs_grad[root] {
            return Ok(());
        }
        self.grads[root] = Some(vec![T::one()]);
        for i in (0..=root).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            let mut contributions = self.local_backward(i, &g);
            if self.fault == Some(self.ops[i].kind()) {
                for (_, d) in &mut contributions {
                    d.iter_mut().for_each(|v| *v *= T::of(1.5));
                }
            }
            for (j, d) in contributions {
                if !self.needs_grad[j] {
                    continue;
                }
                match &mut self.grads[j] {
                    Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(d),
                }
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.needs_grad[v.index()]
    }

    fn local_backward(&self, i: usize, g: &[T]) -> Vec<(usize, Vec<T>)> {
        let val = |v: Var| self.values[v.index()].data();
        match &self.ops[i] {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(a.index(), g.to_vec()), (b.index(), g.to_vec())],
            Op::Mul(a, b) => {
                let da = g.iter().zip(val(*b)).map(|(g, y)| *g * *y).collect();
                let db = g.iter().zip(val(*a)).map(|(g, x)| *g * *x).collect();
                vec![(a.index(), da), (b.index(), db)]
            }
            Op::Scale(a, f) => vec![(a.index(), g.iter().map(|v| *v * *f).collect())],
            Op::Square(a) => vec![(a.index(), g.iter().zip(val(*a)).map(|(g, x)| T::of(2.0) * *g * *x).collect())],
            Op::Sum(a) => vec![(a.index(), vec![g[0]; val(*a).len()])],
            Op::Concat { a, b, outer, la, lb } => {
                let (ga, gb) = kernels::split_rows(g, *outer, *la, *lb);
                vec![(a.index(), ga), (b.index(), gb)]
            }
            Op::MatMul { a, b, m, k, n } => {
                use crate::scalar::{gemm, MatRef};
                let mut out = Vec::new();
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(T::one(), MatRef::row_major(g, *m, *n), MatRef::transposed(val(*b), *k, *n), T::zero(), &mut da);
                    out.push((a.index(), da));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(T::one(), MatRef::transposed(val(*a), *m, *k), MatRef::row_major(g, *m, *n), T::zero(), &mut db);
                    out.push((b.index(), db));
                }
                out
            }
            Op::Linear { x, w, b, batch, n_in, n_out } => {
                let r = kernels::linear_backward(
                    val(*x),
                    *batch,
                    *n_in,
                    val(*w),
                    *n_out,
                    g,
                    [self.wants(*x), self.wants(*w), self.wants(*b)],
                );
                [(x, r.dx), (w, r.dw), (b, r.db)].into_iter().filter_map(|(v, d)| d.map(|d| (v.index(), d))).collect()
            }
            Op::Softmax { x, outer, len, inner } => {
                vec![(x.index(), kernels::softmax_backward(self.values[i].data(), g, *outer, *len, *inner))]
            }
            Op::Relu(x) => {
                let d = g.iter().zip(val(*x)).map(|(g, v)| if *v > T::zero() { *g } else { T::zero() }).collect();
                vec![(x.index(), d)]
            }
            Op::Conv2d { x, w, b, dims } => {
                let r = kernels::conv2d_backward(val(*x), val(*w), g, dims, [self.wants(*x), self.wants(*w), self.wants(*b)]);
                [(x, r.dx), (w, r.dw), (b, r.db)].into_iter().filter_map(|(v, d)| d.map(|d| (v.index(), d))).collect()
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, dims, batch_stats } => {
                let (dx, dg, db) = kernels::batchnorm_backward(g, xhat, inv_std, val(*gamma), dims, *batch_stats);
                vec![(x.index(), dx), (gamma.index(), dg), (beta.index(), db)]
            }
            Op::Reshape(x) => vec![(x.index(), g.to_vec())],
            Op::Scatter { src, base, positions } => {
                let mut dbase = g.to_vec();
                let mut dsrc = Vec::with_capacity(positions.len());
                for p in positions {
                    dsrc.push(g[*p]);
                    dbase[*p] = T::zero();
                }
                vec![(base.index(), dbase), (src.index(), dsrc)]
            }
            Op::CrossEntropy { probs, targets, classes, floor } => {
                let p = val(*probs);
                let n = T::of(targets.len() as f64);
                let mut d = vec![T::zero(); p.len()];
                for (r, t) in targets.iter().enumerate() {
                    let v = p[r * classes + t];
                    if v > *floor {
                        d[r * classes + t] = -g[0] / (n * v);
                    }
                }
                vec![(probs.index(), d)]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multiplicative_identity_and_hand_values() {
        let mut t = Tape::<f32>::new();
        let ones = t.constant(Tensor::ones([3]));
        let v = t.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let w = t.constant(Tensor::from_vec(vec![4.0, 5.0, 6.0]));
        let a = t.mul(ones, v).unwrap();
        assert_eq!(t.value(a).data(), &[1.0, 2.0, 3.0]);
        let b = t.mul(v, w).unwrap();
        assert_eq!(t.value(b).data(), &[4.0, 10.0, 18.0]);
    }

    #[test]
    fn mul_shape_mismatch_names_both_shapes() {
        let mut t = Tape::<f32>::new();
        let a = t.constant(Tensor::zeros([2]));
        let b = t.constant(Tensor::zeros([3]));
        let err = t.mul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn backward_of_sum_of_product() {
        let mut t = Tape::<f32>::new();
        let a = t.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let b = t.leaf(Tensor::from_vec(vec![3.0, 4.0]), true);
        let p = t.mul(a, b).unwrap();
        let s = t.sum(p).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[3.0, 4.0]);
        assert_eq!(t.grad(b).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_of_sum_and_sum_of_squares() {
        let mut t = Tape::<f32>::new();
        let w = t.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let s = t.sum(w).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[1.0, 1.0]);
        let sq = t.square(w).unwrap();
        let s2 = t.sum(sq).unwrap();
        t.backward(s2).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn concat_backward_splits_ones() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::from_vec(vec![1.0; 4]), true);
        let b = t.leaf(Tensor::from_vec(vec![2.0; 3]), true);
        let c = t.concat(a, b, 0).unwrap();
        assert_eq!(t.shape(c), &[7]);
        let s = t.sum(c).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[1.0; 4]);
        assert_eq!(t.grad(b).unwrap(), &[1.0; 3]);
    }

    #[test]
    fn matmul_identity_and_small_product() {
        let mut t = Tape::<f32>::new();
        let id = t.constant(Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = t.constant(Tensor::new([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let p = t.matmul(id, b).unwrap();
        assert_eq!(t.value(p), t.value(b));
        let r = t.constant(Tensor::new([1, 2], vec![1.0, 2.0]).unwrap());
        let c = t.constant(Tensor::new([2, 1], vec![3.0, 4.0]).unwrap());
        let q = t.matmul(r, c).unwrap();
        assert_eq!(t.value(q).data(), &[11.0]);
        assert!(t.matmul(r, r).is_err());
    }

    #[test]
    fn softmax_symmetry_and_nan() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::from_vec(vec![0.0, 0.0]));
        let y = t.softmax(x, 0).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
        let bad = t.constant(Tensor::from_vec(vec![f32::NAN, 1.0]));
        assert!(matches!(t.softmax(bad, 0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::<f32>::new();
        let w = t.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        assert!(matches!(t.backward(w), Err(Error::NotScalar(_))));
    }

    #[test]
    fn foreign_var_is_rejected() {
        let mut t1 = Tape::<f32>::new();
        let mut t2 = Tape::<f32>::new();
        let a = t1.constant(Tensor::ones([1]));
        assert!(matches!(t2.sum(a), Err(Error::ForeignVar)));
    }

    #[test]
    fn constants_never_receive_gradients() {
        let mut t = Tape::<f32>::new();
        let w = t.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let c = t.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let p = t.mul(w, c).unwrap();
        let s = t.sum(p).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(w).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn repeated_backward_is_deterministic() {
        let mut t = Tape::<f32>::new();
        let w = t.leaf(Tensor::from_vec(vec![0.3, -1.2, 2.5]), true);
        let x = t.constant(Tensor::from_vec(vec![1.5, 0.5, -0.25]));
        let p = t.mul(w, x).unwrap();
        let y = t.softmax(p, 0).unwrap();
        let q = t.square(y).unwrap();
        let s = t.sum(q).unwrap();
        t.backward(s).unwrap();
        let first = t.grad(w).unwrap().to_vec();
        t.backward(s).unwrap();
        assert_eq!(t.grad(w).unwrap(), first.as_slice());
    }

    #[test]
    fn inference_tape_records_no_gradients() {
        let mut t = Tape::<f32>::inference();
        let w = t.param("w", &Tensor::from_vec(vec![1.0, 2.0]));
        let s = t.sum(w).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(w).is_none());
        assert!(t.params().is_empty());
    }

    #[test]
    fn cross_entropy_half_is_ln2() {
        let mut t = Tape::<f64>::new();
        let p = t.constant(Tensor::new([3, 2], vec![0.5; 6]).unwrap());
        let l = t.cross_entropy(p, &[0, 1, 0], 1e-7).unwrap();
        assert!((t.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(matches!(t.cross_entropy(p, &[], 1e-7), Err(Error::EmptyBatch)));
    }
}
