//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and the ids of
//! its inputs. [`Tape::backward`] walks the tape in reverse and accumulates
//! exact first-order gradients. Parameters enter the tape as leaves tagged
//! with their [`ParamId`], so gradients can be read back per parameter.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::mask::{surrogate_step_grad, unit_step};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulLast(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    SoftmaxLast(Var),
    SumLast(Var),
    SumAll(Var),
    MeanAll(Var),
    ConcatLast(Var, Var),
    SliceLast { x: Var, start: usize },
    SelectAxis1 { x: Var, index: usize },
    Reshape(Var),
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    CrossEntropy { logits: Var, labels: Vec<usize> },
    ThresholdMask { r: Var, s: Var },
    CosineLast { x: Var, m: Var },
    WeightedTokens { w: Var, x: Var },
    L2NormLast(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
}

/// Append-only record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of one scalar with respect to every node on a tape.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the node, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    /// Gradient of the node, zero-filled when the loss does not reach it.
    pub fn get_or_zero(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Gradients for every parameter registered on the tape.
    pub fn params(&self) -> Vec<(ParamId, Tensor)> {
        self.params.iter().map(|&(id, v)| (id, self.get_or_zero(v))).collect()
    }

    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, v)| self.get(v))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn softmax_row(row: &mut [f64]) {
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

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op, param: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that is not a parameter. Gradients still reach it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A copy of `v`'s value as a fresh leaf; gradient does not flow back.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.leaf(value)
    }

    /// Registers parameter `id` on the tape (once per tape).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("sub", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// `x[..., d] + b[d]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let d = xv.last_dim();
        if bv.shape() != [d] {
            return Err(Error::shape(
                "add_bias",
                format!("input {:?}, bias {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        Ok(self.push(out, Op::AddBias(x, b)))
    }

    /// `x[..., d] * v[d]`, broadcasting `v` over leading axes.
    pub fn mul_last(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xv, vv) = (self.value(x), self.value(v));
        let d = xv.last_dim();
        if vv.shape() != [d] {
            return Err(Error::shape(
                "mul_last",
                format!("input {:?}, vector {:?}", xv.shape(), vv.shape()),
            ));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, m) in row.iter_mut().zip(vv.data()) {
                *o *= m;
            }
        }
        Ok(self.push(out, Op::MulLast(x, v)))
    }

    /// Scales each row of `x[..., d]` by the matching entry of `w[...]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let d = xv.last_dim();
        if xv.shape().is_empty() || wv.shape() != &xv.shape()[..xv.shape().len() - 1] {
            return Err(Error::shape(
                "scale_rows",
                format!("input {:?}, weights {:?}", xv.shape(), wv.shape()),
            ));
        }
        let mut out = xv.clone();
        for (row, s) in out.data_mut().chunks_mut(d).zip(wv.data()) {
            row.iter_mut().for_each(|o| *o *= s);
        }
        Ok(self.push(out, Op::ScaleRows(x, w)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v + c);
        self.push(t, Op::AddScalar(x))
    }

    /// `x[..., k] @ w[k, n] -> [..., n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let k = xv.last_dim();
        if wv.shape().len() != 2 || wv.shape()[0] != k || xv.shape().is_empty() {
            return Err(Error::shape("matmul", format!("{:?} @ {:?}", xv.shape(), wv.shape())));
        }
        let n = wv.shape()[1];
        let m = xv.numel() / k.max(1);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, xv.data(), false, wv.data(), false, &mut out, 0.0);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::MatMul(x, w)))
    }

    /// Batched product `a[B, m, k] @ b[B, k, n]`, or `a @ b^T` for
    /// `b[B, n, k]` when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        let bad = || Error::shape("batch_matmul", format!("{sa:?} @ {sb:?} (trans_b={trans_b})"));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                false,
                &bv.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let t = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(t, Op::BatchMatMul { a, b, trans_b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push(t, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::tanh);
        self.push(t, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(t, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::exp);
        self.push(t, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::ln);
        self.push(t, Op::Ln(x))
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        let d = t.last_dim();
        for row in t.data_mut().chunks_mut(d) {
            softmax_row(row);
        }
        self.push(t, Op::SoftmaxLast(x))
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape()[..xv.shape().len().saturating_sub(1)].to_vec();
        let data = xv.rows().map(|r| r.iter().sum()).collect();
        let t = Tensor::new(shape, data).expect("sum_last shape");
        self.push(t, Op::SumLast(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor::scalar(xv.sum() / xv.numel() as f64);
        self.push(t, Op::MeanAll(x))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.is_empty() || sb.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("concat", format!("{sa:?} ; {sb:?}")));
        }
        let (da, db) = (av.last_dim(), bv.last_dim());
        let mut data = Vec::with_capacity(av.numel() + bv.numel());
        for (ra, rb) in av.rows().zip(bv.rows()) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = da + db;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::ConcatLast(a, b)))
    }

    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if xv.shape().is_empty() || start + len > d {
            return Err(Error::shape(
                "slice_last",
                format!("{start}..{} of {:?}", start + len, xv.shape()),
            ));
        }
        let data = xv.rows().flat_map(|r| r[start..start + len].iter().copied()).collect();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::SliceLast { x, start }))
    }

    /// `x[B, T, d] -> x[:, index, :]`.
    pub fn select_axis1(&mut self, x: Var, index: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 3 || index >= s[1] {
            return Err(Error::shape("select", format!("index {index} of {s:?}")));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let mut data = Vec::with_capacity(b * d);
        for i in 0..b {
            let off = (i * t + index) * d;
            data.extend_from_slice(&xv.data()[off..off + d]);
        }
        let out = Tensor::new(vec![b, d], data)?;
        Ok(self.push(out, Op::SelectAxis1 { x, index }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// `[B, T, h*e] -> [B*h, T, e]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(Error::shape("split_heads", format!("{s:?} into {heads}")));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let e = d / heads;
        let mut out = vec![0.0; xv.numel()];
        for i in 0..b {
            for j in 0..t {
                for h in 0..heads {
                    let src = (i * t + j) * d + h * e;
                    let dst = ((i * heads + h) * t + j) * e;
                    out[dst..dst + e].copy_from_slice(&xv.data()[src..src + e]);
                }
            }
        }
        let out = Tensor::new(vec![b * heads, t, e], out)?;
        Ok(self.push(out, Op::SplitHeads { x, heads }))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 3 || heads == 0 || !s[0].is_multiple_of(heads) {
            return Err(Error::shape("merge_heads", format!("{s:?} from {heads}")));
        }
        let (bh, t, e) = (s[0], s[1], s[2]);
        let b = bh / heads;
        let d = e * heads;
        let mut out = vec![0.0; xv.numel()];
        for i in 0..b {
            for j in 0..t {
                for h in 0..heads {
                    let src = ((i * heads + h) * t + j) * e;
                    let dst = (i * t + j) * d + h * e;
                    out[dst..dst + e].copy_from_slice(&xv.data()[src..src + e]);
                }
            }
        }
        let out = Tensor::new(vec![b, t, d], out)?;
        Ok(self.push(out, Op::MergeHeads { x, heads }))
    }

    /// Mean cross-entropy of `logits[B, K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let s = lv.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {s:?}, {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= s[1]) {
            return Err(Error::Input(format!("label {bad} out of range 0..{}", s[1])));
        }
        let mut total = 0.0;
        for (row, &y) in lv.rows().zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let t = Tensor::scalar(total / labels.len() as f64);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Learnable threshold mask `m = r * step(|r| - s)`. The backward pass
    /// replaces the step's derivative with [`surrogate_step_grad`].
    pub fn threshold_mask(&mut self, r: Var, s: Var) -> Result<Var> {
        let (rv, sv) = (self.value(r), self.value(s));
        if rv.shape().len() != 1 || rv.shape() != sv.shape() {
            return Err(Error::shape(
                "threshold_mask",
                format!("r {:?}, s {:?}", rv.shape(), sv.shape()),
            ));
        }
        let data = rv
            .data()
            .iter()
            .zip(sv.data())
            .map(|(&ri, &si)| ri * unit_step(ri.abs() - si))
            .collect();
        let t = Tensor::new(rv.shape().to_vec(), data)?;
        Ok(self.push(t, Op::ThresholdMask { r, s }))
    }

    /// Cosine similarity between every row of `x[..., d]` and `m[d]`;
    /// zero whenever either vector is all zeros.
    pub fn cosine_last(&mut self, x: Var, m: Var) -> Result<Var> {
        let (xv, mv) = (self.value(x), self.value(m));
        let d = xv.last_dim();
        if mv.shape() != [d] || xv.shape().is_empty() {
            return Err(Error::shape(
                "cosine",
                format!("rows {:?}, vector {:?}", xv.shape(), mv.shape()),
            ));
        }
        let mnorm = norm(mv.data());
        let data = xv
            .rows()
            .map(|row| {
                let xn = norm(row);
                if xn == 0.0 || mnorm == 0.0 {
                    0.0
                } else {
                    dot(row, mv.data()) / (xn * mnorm)
                }
            })
            .collect();
        let shape = xv.shape()[..xv.shape().len() - 1].to_vec();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::CosineLast { x, m }))
    }

    /// `out[b, :] = sum_j w[b, j] * x[b, j, :]`.
    pub fn weighted_tokens(&mut self, w: Var, x: Var) -> Result<Var> {
        let (wv, xv) = (self.value(w), self.value(x));
        let (sw, sx) = (wv.shape(), xv.shape());
        if sx.len() != 3 || sw != &sx[..2] {
            return Err(Error::shape("weighted_tokens", format!("w {sw:?}, x {sx:?}")));
        }
        let (b, t, d) = (sx[0], sx[1], sx[2]);
        let mut out = vec![0.0; b * d];
        for i in 0..b {
            for j in 0..t {
                let a = wv.data()[i * t + j];
                let row = &xv.data()[(i * t + j) * d..(i * t + j + 1) * d];
                for (o, v) in out[i * d..(i + 1) * d].iter_mut().zip(row) {
                    *o += a * v;
                }
            }
        }
        let t = Tensor::new(vec![b, d], out)?;
        Ok(self.push(t, Op::WeightedTokens { w, x }))
    }

    /// Euclidean norm of every row; the gradient at a zero row is zero.
    pub fn l2_norm_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape()[..xv.shape().len().saturating_sub(1)].to_vec();
        let data = xv.rows().map(norm).collect();
        let t = Tensor::new(shape, data).expect("norm shape");
        self.push(t, Op::L2NormLast(x))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        params.sort_by_key(|(p, _)| p.index());
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params,
        })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, contrib: Vec<f64>| match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contrib),
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                acc(*b, g.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::AddBias(x, b) => {
                let d = self.nodes[b.0].value.numel();
                let mut gb = vec![0.0; d];
                for row in g.chunks(d) {
                    gb.iter_mut().zip(row).for_each(|(s, r)| *s += r);
                }
                acc(*x, g.to_vec());
                acc(*b, gb);
            }
            Op::MulLast(x, v) => {
                let (xv, vv) = (val(*x), val(*v));
                let d = vv.len();
                let mut gx = g.to_vec();
                let mut gv = vec![0.0; d];
                for (gr, xr) in gx.chunks_mut(d).zip(xv.chunks(d)) {
                    for j in 0..d {
                        gv[j] += gr[j] * xr[j];
                        gr[j] *= vv[j];
                    }
                }
                acc(*x, gx);
                acc(*v, gv);
            }
            Op::ScaleRows(x, w) => {
                let (xv, wv) = (val(*x), val(*w));
                let d = self.nodes[x.0].value.last_dim();
                let mut gx = g.to_vec();
                let mut gw = vec![0.0; wv.len()];
                for (i, (gr, xr)) in gx.chunks_mut(d).zip(xv.chunks(d)).enumerate() {
                    gw[i] = dot(gr, xr);
                    gr.iter_mut().for_each(|v| *v *= wv[i]);
                }
                acc(*x, gx);
                acc(*w, gw);
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) => acc(*x, g.to_vec()),
            Op::MatMul(x, w) => {
                let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let (k, n) = (wv.shape()[0], wv.shape()[1]);
                let m = xv.numel() / k.max(1);
                let mut gx = vec![0.0; m * k];
                gemm(m, n, k, g, false, wv.data(), true, &mut gx, 0.0);
                let mut gw = vec![0.0; k * n];
                gemm(k, m, n, xv.data(), true, g, false, &mut gw, 0.0);
                acc(*x, gx);
                acc(*w, gw);
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = node.value.shape()[2];
                let mut ga = vec![0.0; av.numel()];
                let mut gb = vec![0.0; bv.numel()];
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &av.data()[i * m * k..(i + 1) * m * k];
                    let bi = &bv.data()[i * k * n..(i + 1) * k * n];
                    let ga_i = &mut ga[i * m * k..(i + 1) * m * k];
                    let gb_i = &mut gb[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        // C = A B^T, B is n x k: dA = dC B, dB = dC^T A.
                        gemm(m, n, k, gi, false, bi, false, ga_i, 0.0);
                        gemm(n, m, k, gi, true, ai, false, gb_i, 0.0);
                    } else {
                        gemm(m, n, k, gi, false, bi, true, ga_i, 0.0);
                        gemm(k, m, n, ai, true, gi, false, gb_i, 0.0);
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Relu(x) => {
                let xv = val(*x);
                acc(
                    *x,
                    g.iter().zip(xv).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                );
            }
            Op::Tanh(x) => acc(*x, g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect()),
            Op::Sigmoid(x) => acc(*x, g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect()),
            Op::Exp(x) => acc(*x, g.iter().zip(out).map(|(g, y)| g * y).collect()),
            Op::Ln(x) => acc(*x, g.iter().zip(val(*x)).map(|(g, x)| g / x).collect()),
            Op::SoftmaxLast(x) => {
                let d = node.value.last_dim();
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), outr) in g.chunks(d).zip(out.chunks(d)).zip(gx.chunks_mut(d)) {
                    let inner = dot(gr, yr);
                    for j in 0..d {
                        outr[j] = yr[j] * (gr[j] - inner);
                    }
                }
                acc(*x, gx);
            }
            Op::SumLast(x) => {
                let d = self.nodes[x.0].value.last_dim();
                acc(*x, g.iter().flat_map(|&v| std::iter::repeat_n(v, d)).collect());
            }
            Op::SumAll(x) => acc(*x, vec![g[0]; self.nodes[x.0].value.numel()]),
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].value.numel();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::ConcatLast(a, b) => {
                let (da, db) = (self.nodes[a.0].value.last_dim(), self.nodes[b.0].value.last_dim());
                let mut ga = Vec::with_capacity(self.nodes[a.0].value.numel());
                let mut gb = Vec::with_capacity(self.nodes[b.0].value.numel());
                for row in g.chunks(da + db) {
                    ga.extend_from_slice(&row[..da]);
                    gb.extend_from_slice(&row[da..]);
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::SliceLast { x, start } => {
                let d = self.nodes[x.0].value.last_dim();
                let len = node.value.last_dim();
                let mut gx = vec![0.0; self.nodes[x.0].value.numel()];
                for (dst, src) in gx.chunks_mut(d).zip(g.chunks(len)) {
                    dst[*start..start + len].copy_from_slice(src);
                }
                acc(*x, gx);
            }
            Op::SelectAxis1 { x, index } => {
                let s = self.nodes[x.0].value.shape();
                let (b, t, d) = (s[0], s[1], s[2]);
                let mut gx = vec![0.0; b * t * d];
                for i in 0..b {
                    let off = (i * t + index) * d;
                    gx[off..off + d].copy_from_slice(&g[i * d..(i + 1) * d]);
                }
                acc(*x, gx);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::SplitHeads { x, heads } => {
                let s = self.nodes[x.0].value.shape();
                let (b, t, d) = (s[0], s[1], s[2]);
                let e = d / heads;
                let mut gx = vec![0.0; g.len()];
                for i in 0..b {
                    for j in 0..t {
                        for h in 0..*heads {
                            let dst = (i * t + j) * d + h * e;
                            let src = ((i * heads + h) * t + j) * e;
                            gx[dst..dst + e].copy_from_slice(&g[src..src + e]);
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::MergeHeads { x, heads } => {
                let s = self.nodes[x.0].value.shape();
                let (bh, t, e) = (s[0], s[1], s[2]);
                let b = bh / heads;
                let d = e * heads;
                let mut gx = vec![0.0; g.len()];
                for i in 0..b {
                    for j in 0..t {
                        for h in 0..*heads {
                            let dst = ((i * heads + h) * t + j) * e;
                            let src = (i * t + j) * d + h * e;
                            gx[dst..dst + e].copy_from_slice(&g[src..src + e]);
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::CrossEntropy { logits, labels } => {
                let lv = &self.nodes[logits.0].value;
                let k = lv.last_dim();
                let scale = g[0] / labels.len() as f64;
                let mut gl = lv.data().to_vec();
                for (row, &y) in gl.chunks_mut(k).zip(labels) {
                    softmax_row(row);
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                acc(*logits, gl);
            }
            Op::ThresholdMask { r, s } => {
                let (rv, sv) = (val(*r), val(*s));
                let mut gr = vec![0.0; rv.len()];
                let mut gs = vec![0.0; sv.len()];
                for i in 0..rv.len() {
                    let t = rv[i].abs() - sv[i];
                    let p = unit_step(t);
                    let dstep = surrogate_step_grad(t);
                    let sign = if rv[i] > 0.0 {
                        1.0
                    } else if rv[i] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    // m = r * F(|r| - s)
                    gr[i] = g[i] * (p + rv[i] * dstep * sign);
                    gs[i] = -g[i] * rv[i] * dstep;
                }
                acc(*r, gr);
                acc(*s, gs);
            }
            Op::CosineLast { x, m } => {
                let (xv, mv) = (val(*x), val(*m));
                let d = mv.len();
                let mnorm = norm(mv);
                let mut gx = vec![0.0; xv.len()];
                let mut gm = vec![0.0; d];
                for (i, row) in xv.chunks(d).enumerate() {
                    let xn = norm(row);
                    if xn == 0.0 || mnorm == 0.0 {
                        continue;
                    }
                    let c = out[i];
                    let gi = g[i];
                    let inv = 1.0 / (xn * mnorm);
                    for j in 0..d {
                        gx[i * d + j] += gi * (mv[j] * inv - c * row[j] / (xn * xn));
                        gm[j] += gi * (row[j] * inv - c * mv[j] / (mnorm * mnorm));
                    }
                }
                acc(*x, gx);
                acc(*m, gm);
            }
            Op::WeightedTokens { w, x } => {
                let (wv, xv) = (val(*w), val(*x));
                let s = self.nodes[x.0].value.shape();
                let (b, t, d) = (s[0], s[1], s[2]);
                let mut gw = vec![0.0; wv.len()];
                let mut gx = vec![0.0; xv.len()];
                for i in 0..b {
                    let gi = &g[i * d..(i + 1) * d];
                    for j in 0..t {
                        let off = (i * t + j) * d;
                        gw[i * t + j] = dot(gi, &xv[off..off + d]);
                        let a = wv[i * t + j];
                        for (o, gv) in gx[off..off + d].iter_mut().zip(gi) {
                            *o = a * gv;
                        }
                    }
                }
                acc(*w, gw);
                acc(*x, gx);
            }
            Op::L2NormLast(x) => {
                let xv = val(*x);
                let d = self.nodes[x.0].value.last_dim();
                let mut gx = vec![0.0; xv.len()];
                for (i, (row, grow)) in xv.chunks(d).zip(gx.chunks_mut(d)).enumerate() {
                    if out[i] > 0.0 {
                        for (o, v) in grow.iter_mut().zip(row) {
                            *o = g[i] * v / out[i];
                        }
                    }
                }
                acc(*x, gx);
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
