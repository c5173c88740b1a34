//! Tape-recorded tensor graph with reverse-mode differentiation.
//!
//! Every operation appends a node to the [`Graph`]; [`Graph::backward`]
//! walks the tape once in reverse and is refused on a second call.

use std::borrow::Cow;
use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom};
use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRowBias(Var, Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Exp(Var),
    Log(Var),
    Sum(Var),
    MeanRows(Var),
    AvgPool2(Var),
    AdaptiveAvgPool(Var),
    Conv2d { input: Var, kernels: Var, bias: Var, geom: ConvGeom },
    Concat(Vec<Var>),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    Reshape(Var),
    SliceRows(Var, usize),
    OuterSum(Var, Var),
    SoftmaxMasked(Var, Vec<bool>),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    by_var: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a graph leaf (or any node that required grad).
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_var.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of every trainable parameter bound into the graph.
    /// Parameters the loss does not depend on get an explicit zero tensor;
    /// frozen parameters are absent.
    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }
}

pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    bound: BTreeMap<String, (Var, bool)>,
    consumed: bool,
}

impl<'a, T: Scalar> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bound: BTreeMap::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Free leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a named parameter by reference. Frozen parameters enter the
    /// graph as constants.
    pub fn param(&mut self, set: &'a ParamSet<T>, name: &str) -> Result<Var> {
        if let Some(&(v, _)) = self.bound.get(name) {
            return Ok(v);
        }
        let p = set.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        self.nodes.push(Node { value: Cow::Borrowed(&p.tensor), op: Op::Leaf, requires_grad: p.trainable });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(name.to_string(), (v, p.trainable));
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [m, n] => Ok((m, n)),
            ref s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// `x[m×n] + b[n]` row-wise; a 1-D `x` is treated as a single row.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.shape(x).last().expect("rank >= 1");
        if self.shape(x).len() > 2 || self.value(b).len() != n {
            return Err(Error::shape("add_row_bias", format!("{:?} + {:?}", self.shape(x), self.shape(b))));
        }
        let bias = self.value(b).data();
        let data = self.value(x).data().iter().enumerate().map(|(i, &v)| v + bias[i % n]).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddRowBias(x, b), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: T) -> Var {
        let t = self.value(a).map(|x| if x > T::zero() { x } else { alpha * x });
        let rg = self.rg(a);
        self.push(t, Op::LeakyRelu(a, alpha), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(T::exp);
        let rg = self.rg(a);
        self.push(t, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).data().iter().find(|&&x| !(x > T::zero())) {
            return Err(Error::Domain { op: "log", detail: format!("non-positive input {x}") });
        }
        let t = self.value(a).map(T::ln);
        let rg = self.rg(a);
        Ok(self.push(t, Op::Log(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Average over the rows of a matrix: `[m×n] -> [n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("mean_rows", a)?;
        let src = self.value(a).data();
        let inv = T::one() / T::lit(m as f64);
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            for (o, &x) in out.iter_mut().zip(&src[i * n..(i + 1) * n]) {
                *o = *o + x;
            }
        }
        out.iter_mut().for_each(|o| *o = *o * inv);
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![n], out), Op::MeanRows(a), rg))
    }

    fn dims3(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize)> {
        match *self.shape(v) {
            [c, h, w] => Ok((c, h, w)),
            ref s => Err(Error::shape(op, format!("expected [c,h,w], got {s:?}"))),
        }
    }

    /// 2×2 average pooling with stride 2 (trailing odd row/column dropped).
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.dims3("avg_pool2", a)?;
        if h < 2 || w < 2 {
            return Err(Error::shape("avg_pool2", format!("spatial size {h}x{w} below 2x2")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(a).data();
        let q = T::lit(0.25);
        let mut out = vec![T::zero(); c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for x in 0..wo {
                    let base = ch * h * w + 2 * y * w + 2 * x;
                    out[(ch * ho + y) * wo + x] = (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]) * q;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![c, ho, wo], out), Op::AvgPool2(a), rg))
    }

    /// Adaptive average pooling of `[c,h,w]` to `[c,th,tw]`.
    pub fn adaptive_avg_pool(&mut self, a: Var, target: (usize, usize)) -> Result<Var> {
        let (c, h, w) = self.dims3("adaptive_avg_pool", a)?;
        let (th, tw) = target;
        if th == 0 || tw == 0 {
            return Err(Error::shape("adaptive_avg_pool", "zero target size"));
        }
        let src = self.value(a).data();
        let mut out = vec![T::zero(); c * th * tw];
        for ch in 0..c {
            for y in 0..th {
                let (y0, y1) = kernels::adaptive_window(y, h, th);
                for x in 0..tw {
                    let (x0, x1) = kernels::adaptive_window(x, w, tw);
                    let mut s = T::zero();
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            s = s + src[ch * h * w + yy * w + xx];
                        }
                    }
                    out[(ch * th + y) * tw + x] = s / T::lit(((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![c, th, tw], out), Op::AdaptiveAvgPool(a), rg))
    }

    /// 3×3 cross-correlation with zero padding 1 and per-channel bias.
    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var, stride: usize) -> Result<Var> {
        let (c, h, w) = self.dims3("conv2d", input)?;
        if !(stride == 1 || stride == 2) {
            return Err(Error::shape("conv2d", format!("stride must be 1 or 2, got {stride}")));
        }
        if h < 3 || w < 3 {
            return Err(Error::shape("conv2d", format!("spatial size {h}x{w} below 3x3")));
        }
        let o = match *self.shape(kernels) {
            [o, kc, 3, 3] if kc == c => o,
            ref s => return Err(Error::shape("conv2d", format!("kernels {s:?} for input channels {c}"))),
        };
        if self.value(bias).len() != o {
            return Err(Error::shape("conv2d", format!("bias {:?} for {o} output channels", self.shape(bias))));
        }
        let geom = ConvGeom::new(c, h, w, o, stride);
        let out = kernels::conv3x3(self.value(input).data(), self.value(kernels).data(), self.value(bias).data(), geom);
        let rg = self.rg(input) || self.rg(kernels) || self.rg(bias);
        Ok(self.push(
            Tensor::from_parts(vec![o, geom.ho, geom.wo], out),
            Op::Conv2d { input, kernels, bias, geom },
            rg,
        ))
    }

    /// Flattens and joins: `concat([1,2],[3]) = [1,2,3]`.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no operands"));
        }
        let data: Vec<T> = parts.iter().flat_map(|&p| self.value(p).data().iter().copied()).collect();
        let rg = parts.iter().any(|&p| self.rg(p));
        let n = data.len();
        Ok(self.push(Tensor::from_parts(vec![n], data), Op::Concat(parts.to_vec()), rg))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no operands"));
        };
        let (m, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2("concat_cols", p)?;
            if pm != m {
                return Err(Error::shape("concat_cols", format!("row counts {m} vs {pm}")));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &pn) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * pn..(i + 1) * pn]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_parts(vec![m, total], out), Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacks equally sized tensors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let Some(&first) = rows.first() else {
            return Err(Error::shape("stack_rows", "no operands"));
        };
        let k = self.value(first).len();
        if rows.iter().any(|&r| self.value(r).len() != k) {
            return Err(Error::shape("stack_rows", "rows differ in length"));
        }
        let data: Vec<T> = rows.iter().flat_map(|&r| self.value(r).data().iter().copied()).collect();
        let rg = rows.iter().any(|&r| self.rg(r));
        Ok(self.push(Tensor::from_parts(vec![rows.len(), k], data), Op::StackRows(rows.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn flatten(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        self.reshape(a, vec![n]).expect("flatten preserves length")
    }

    /// Rows `[start, end)` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_rows", a)?;
        if start >= end || end > m {
            return Err(Error::shape("slice_rows", format!("rows {start}..{end} of {m}")));
        }
        let data = self.value(a).data()[start * n..end * n].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![end - start, n], data), Op::SliceRows(a, start), rg))
    }

    /// `out[i][j] = s[i] + r[j]` for two length-n operands.
    pub fn outer_sum(&mut self, s: Var, r: Var) -> Result<Var> {
        let n = self.value(s).len();
        if self.value(r).len() != n {
            return Err(Error::shape("outer_sum", format!("{n} vs {}", self.value(r).len())));
        }
        let (sv, rv) = (self.value(s).data(), self.value(r).data());
        let mut out = Vec::with_capacity(n * n);
        for &si in sv {
            out.extend(rv.iter().map(|&rj| si + rj));
        }
        let rg = self.rg(s) || self.rg(r);
        Ok(self.push(Tensor::from_parts(vec![n, n], out), Op::OuterSum(s, r), rg))
    }

    /// Softmax along the last axis restricted to entries whose mask is set.
    /// Masked entries are exactly zero. `mask` is laid out like the data.
    pub fn softmax_masked(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let x = self.value(a);
        if mask.len() != x.len() {
            return Err(Error::shape("softmax_masked", format!("mask {} for {} values", mask.len(), x.len())));
        }
        let n = *x.shape().last().expect("rank >= 1");
        let mut out = vec![T::zero(); x.len()];
        for (row, (xs, ms)) in x.data().chunks(n).zip(mask.chunks(n)).enumerate() {
            let max = xs
                .iter()
                .zip(ms)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.max(v))));
            let Some(max) = max else {
                return Err(Error::Domain { op: "softmax_masked", detail: format!("row {row} has an empty mask") });
            };
            let o = &mut out[row * n..(row + 1) * n];
            let mut z = T::zero();
            for ((ov, &xv), &m) in o.iter_mut().zip(xs).zip(ms) {
                if m {
                    *ov = (xv - max).exp();
                    z = z + *ov;
                }
            }
            o.iter_mut().for_each(|v| *v = *v / z);
        }
        let shape = x.shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SoftmaxMasked(a, mask.to_vec()), rg))
    }

    /// Mean negative log-likelihood of `labels` under softmax(`logits[b×c]`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.dims2("cross_entropy", logits)?;
        if labels.len() != b {
            return Err(Error::shape("cross_entropy", format!("{} labels for batch {b}", labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Domain { op: "cross_entropy", detail: format!("label {l} out of range for {c} classes") });
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); b * c];
        let mut total = T::zero();
        for i in 0..b {
            let row = &x[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + z.ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            total = total + (lse - row[labels[i]]);
        }
        let loss = total / T::lit(b as f64);
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, rg))
    }

    /// `x · w + b` for `x` of shape `[k]` or `[m×k]`; returns `[m×n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let x = if self.shape(x).len() == 1 {
            let k = self.value(x).len();
            self.reshape(x, vec![1, k])?
        } else {
            x
        };
        let y = self.matmul(x, w)?;
        self.add_row_bias(y, b)
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::from_parts(self.shape(loss).to_vec(), vec![T::one()]));
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            if is_leaf {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }

        let params = self
            .bound
            .iter()
            .filter(|(_, &(_, trainable))| trainable)
            .map(|(name, &(v, _))| {
                let g = grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(self.shape(v).to_vec()));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { by_var: grads, params })
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    let ga = slot(self, grads, *a);
                    kernels::matmul_grad_a(g.data(), self.value(*b).data(), ga.data_mut(), m, k, n);
                }
                if self.rg(*b) {
                    let gb = slot(self, grads, *b);
                    kernels::matmul_grad_b(g.data(), self.value(*a).data(), gb.data_mut(), m, k, n);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let ga = slot(self, grads, *a);
                let gd = ga.data_mut();
                for r in 0..m {
                    for c in 0..n {
                        gd[r * n + c] = gd[r * n + c] + g.data()[c * m + r];
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        slot(self, grads, v).add_assign(g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    zip_acc(slot(self, grads, *a).data_mut(), g.data(), bv, |g, y| g * y);
                }
                if self.rg(*b) {
                    zip_acc(slot(self, grads, *b).data_mut(), g.data(), av, |g, x| g * x);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                let ga = slot(self, grads, *a);
                for (x, &gv) in ga.data_mut().iter_mut().zip(g.data()) {
                    *x = *x + gv * c;
                }
            }
            Op::AddRowBias(x, b) => {
                if self.rg(*x) {
                    slot(self, grads, *x).add_assign(g);
                }
                if self.rg(*b) {
                    let n = self.value(*b).len();
                    let gb = slot(self, grads, *b);
                    for (j, &gv) in g.data().iter().enumerate() {
                        gb.data_mut()[j % n] = gb.data()[j % n] + gv;
                    }
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                zip_acc(slot(self, grads, *a).data_mut(), g.data(), x, |g, x| if x > T::zero() { g } else { T::zero() });
            }
            Op::LeakyRelu(a, alpha) => {
                let alpha = *alpha;
                let x = self.value(*a).data();
                zip_acc(slot(self, grads, *a).data_mut(), g.data(), x, |g, x| if x > T::zero() { g } else { g * alpha });
            }
            Op::Exp(a) => {
                zip_acc(slot(self, grads, *a).data_mut(), g.data(), out.data(), |g, y| g * y);
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                zip_acc(slot(self, grads, *a).data_mut(), g.data(), x, |g, x| g / x);
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                slot(self, grads, *a).data_mut().iter_mut().for_each(|x| *x = *x + gv);
            }
            Op::MeanRows(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let inv = T::one() / T::lit(m as f64);
                let ga = slot(self, grads, *a);
                for r in 0..m {
                    for (x, &gv) in ga.data_mut()[r * n..(r + 1) * n].iter_mut().zip(g.data()) {
                        *x = *x + gv * inv;
                    }
                }
            }
            Op::AvgPool2(a) => {
                let [c, h, w] = <[usize; 3]>::try_from(self.shape(*a)).expect("rank 3");
                let (ho, wo) = (h / 2, w / 2);
                let q = T::lit(0.25);
                let gd = slot(self, grads, *a).data_mut();
                for ch in 0..c {
                    for y in 0..ho {
                        for x in 0..wo {
                            let gv = g.data()[(ch * ho + y) * wo + x] * q;
                            let base = ch * h * w + 2 * y * w + 2 * x;
                            for off in [0, 1, w, w + 1] {
                                gd[base + off] = gd[base + off] + gv;
                            }
                        }
                    }
                }
            }
            Op::AdaptiveAvgPool(a) => {
                let [c, h, w] = <[usize; 3]>::try_from(self.shape(*a)).expect("rank 3");
                let (th, tw) = (out.shape()[1], out.shape()[2]);
                let gd = slot(self, grads, *a).data_mut();
                for ch in 0..c {
                    for y in 0..th {
                        let (y0, y1) = kernels::adaptive_window(y, h, th);
                        for x in 0..tw {
                            let (x0, x1) = kernels::adaptive_window(x, w, tw);
                            let gv = g.data()[(ch * th + y) * tw + x] / T::lit(((y1 - y0) * (x1 - x0)) as f64);
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    let idx = ch * h * w + yy * w + xx;
                                    gd[idx] = gd[idx] + gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Conv2d { input, kernels: k, bias, geom } => {
                let mut gi = self.rg(*input).then(|| take_slot(self, grads, *input));
                let mut gk = self.rg(*k).then(|| take_slot(self, grads, *k));
                let mut gb = self.rg(*bias).then(|| take_slot(self, grads, *bias));
                kernels::conv3x3_backward(
                    g.data(),
                    self.value(*input).data(),
                    self.value(*k).data(),
                    *geom,
                    gi.as_mut().map(|t| t.data_mut()),
                    gk.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
                for (v, t) in [(*input, gi), (*k, gk), (*bias, gb)] {
                    if let Some(t) = t {
                        grads[v.0] = Some(t);
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.rg(p) {
                        let gp = slot(self, grads, p);
                        for (x, &gv) in gp.data_mut().iter_mut().zip(&g.data()[off..off + n]) {
                            *x = *x + gv;
                        }
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let m = out.shape()[0];
                let total = out.shape()[1];
                let mut col = 0;
                for &p in parts {
                    let pn = self.shape(p)[1];
                    if self.rg(p) {
                        let gp = slot(self, grads, p);
                        for r in 0..m {
                            for c in 0..pn {
                                let idx = r * pn + c;
                                gp.data_mut()[idx] = gp.data()[idx] + g.data()[r * total + col + c];
                            }
                        }
                    }
                    col += pn;
                }
            }
            Op::StackRows(rows) => {
                let k = out.shape()[1];
                for (r, &v) in rows.iter().enumerate() {
                    if self.rg(v) {
                        let gv = slot(self, grads, v);
                        for (x, &y) in gv.data_mut().iter_mut().zip(&g.data()[r * k..(r + 1) * k]) {
                            *x = *x + y;
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                let ga = slot(self, grads, *a);
                for (x, &y) in ga.data_mut().iter_mut().zip(g.data()) {
                    *x = *x + y;
                }
            }
            Op::SliceRows(a, start) => {
                let n = self.shape(*a)[1];
                let ga = slot(self, grads, *a);
                for (x, &y) in ga.data_mut()[start * n..start * n + g.len()].iter_mut().zip(g.data()) {
                    *x = *x + y;
                }
            }
            Op::OuterSum(s, r) => {
                let n = self.value(*s).len();
                if self.rg(*s) {
                    let gs = slot(self, grads, *s);
                    for i in 0..n {
                        let row: T = g.data()[i * n..(i + 1) * n].iter().copied().sum();
                        gs.data_mut()[i] = gs.data()[i] + row;
                    }
                }
                if self.rg(*r) {
                    let gr = slot(self, grads, *r);
                    for i in 0..n {
                        for j in 0..n {
                            gr.data_mut()[j] = gr.data()[j] + g.data()[i * n + j];
                        }
                    }
                }
            }
            Op::SoftmaxMasked(a, mask) => {
                let n = *out.shape().last().expect("rank >= 1");
                let ga = slot(self, grads, *a);
                for ((ys, gs), (gx, ms)) in out
                    .data()
                    .chunks(n)
                    .zip(g.data().chunks(n))
                    .zip(ga.data_mut().chunks_mut(n).zip(mask.chunks(n)))
                {
                    let dot: T = ys.iter().zip(gs).map(|(&y, &gv)| y * gv).sum();
                    for j in 0..n {
                        if ms[j] {
                            gx[j] = gx[j] + ys[j] * (gs[j] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.shape(*logits)[1];
                let b = labels.len();
                let scale = g.data()[0] / T::lit(b as f64);
                let gl = slot(self, grads, *logits);
                for (i, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == label { T::one() } else { T::zero() };
                        let idx = i * c + j;
                        gl.data_mut()[idx] = gl.data()[idx] + (probs[idx] - onehot) * scale;
                    }
                }
            }
        }
    }
}

fn slot<'g, T: Scalar>(graph: &Graph<'_, T>, grads: &'g mut [Option<Tensor<T>>], v: Var) -> &'g mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(graph.shape(v).to_vec()))
}

fn take_slot<T: Scalar>(graph: &Graph<'_, T>, grads: &mut [Option<Tensor<T>>], v: Var) -> Tensor<T> {
    grads[v.0].take().unwrap_or_else(|| Tensor::zeros(graph.shape(v).to_vec()))
}

fn zip_acc<T: Scalar>(acc: &mut [T], g: &[T], other: &[T], f: impl Fn(T, T) -> T) {
    for ((a, &gv), &o) in acc.iter_mut().zip(g).zip(other) {
        *a = *a + f(gv, o);
    }
}
