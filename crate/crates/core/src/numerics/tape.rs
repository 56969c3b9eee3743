//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations
//! return lightweight [`Var`] handles; [`Tape::backward`] walks the recorded
//! nodes in reverse and returns a [`Gradients`] table indexed by `Var`.
//! Nodes whose inputs do not require gradients are stored as constants, so a
//! tape built entirely from constants doubles as a plain inference engine.

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    GatherRows(Var, Vec<usize>),
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceLast { x: Var, start: usize },
    Reshape(Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Gelu(Var),
    Relu(Var),
    Dropout(Var, Vec<f64>),
    LogSumExp { x: Var, keep: Option<Vec<bool>> },
    PickLast(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    MeanSquaredError(Var, Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` is not on
    /// any path to the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but materializes zeros for vars off the path.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.lens[v.0]])
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((&cols, lead)) => (lead.iter().product(), cols),
        None => (1, 1),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.clone()).expect("node shape is consistent")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.nodes[a.0].shape.clone(),
            rhs: self.nodes[b.0].shape.clone(),
        }
    }

    /// Records a copy of `tensor`; it is differentiable iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.values().to_vec(),
            tensor.requires_grad,
            Op::Leaf,
        )
    }

    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::Shape {
                op: "constant",
                lhs: shape.to_vec(),
                rhs: vec![values.len()],
            });
        }
        Ok(self.push(shape.to_vec(), values, false, Op::Leaf))
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(op, a, b));
        }
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, value, rg, make(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb || sb.is_empty() {
            return Err(self.mismatch(op, a, b));
        }
        Ok(())
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s (bias, positional rows).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("add_broadcast", a, b)?;
        let bv = self.value(b);
        let n = bv.len();
        let value = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % n])
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, value, rg, Op::AddBroadcast(a, b)))
    }

    /// `a * b` where `b`'s shape is a trailing suffix of `a`'s (layer-norm gain).
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("mul_broadcast", a, b)?;
        let bv = self.value(b);
        let n = bv.len();
        let value = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bv[i % n])
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, value, rg, Op::MulBroadcast(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, rg, Op::Scale(x, c)))
    }

    /// Multiplies row `r` of `x` (viewed as `[rows, last]`) by `coeffs[r]`.
    pub fn scale_rows(&mut self, x: Var, coeffs: &[f64]) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if rows != coeffs.len() {
            return Err(Error::Shape {
                op: "scale_rows",
                lhs: self.shape(x).to_vec(),
                rhs: vec![coeffs.len()],
            });
        }
        let xv = self.value(x);
        let value = (0..rows * cols).map(|i| xv[i] * coeffs[i / cols]).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, rg, Op::ScaleRows(x, coeffs.to_vec())))
    }

    /// `[.., k] x [k, m] -> [.., m]`; leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let (rows, k) = rows_cols(sa);
        let m = sb[1];
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; rows * m];
        for r in 0..rows {
            let orow = &mut out[r * m..(r + 1) * m];
            for i in 0..k {
                let x = av[r * k + i];
                if x == 0.0 {
                    continue;
                }
                for (o, &w) in orow.iter_mut().zip(&bv[i * m..(i + 1) * m]) {
                    *o += x * w;
                }
            }
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = m;
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, rg, Op::MatMul(a, b)))
    }

    /// `[r, k] x [v, k]^T -> [r, v]`; leading axes of `a` are flattened into rows.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[1] {
            return Err(self.mismatch("matmul_nt", a, b));
        }
        let (rows, k) = rows_cols(sa);
        let v = sb[0];
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(rows * v);
        for r in 0..rows {
            let arow = &av[r * k..(r + 1) * k];
            for j in 0..v {
                out.push(dot(arow, &bv[j * k..(j + 1) * k]));
            }
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = v;
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, rg, Op::MatMulNt(a, b)))
    }

    /// Batched product over a leading batch axis: `[B, n, k] x [B, k, m]`, or
    /// `[B, n, k] x [B, m, k]^T` when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(self.mismatch("batch_matmul", a, b));
        }
        let (batch, n, k) = (sa[0], sa[1], sa[2]);
        let (kb, m) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(self.mismatch("batch_matmul", a, b));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; batch * n * m];
        for bi in 0..batch {
            let ab = &av[bi * n * k..(bi + 1) * n * k];
            let bb = &bv[bi * k * m..(bi + 1) * k * m];
            let ob = &mut out[bi * n * m..(bi + 1) * n * m];
            for r in 0..n {
                let arow = &ab[r * k..(r + 1) * k];
                let orow = &mut ob[r * m..(r + 1) * m];
                if trans_b {
                    for (j, o) in orow.iter_mut().enumerate() {
                        *o = dot(arow, &bb[j * k..(j + 1) * k]);
                    }
                } else {
                    for (i, &x) in arow.iter().enumerate() {
                        for (o, &w) in orow.iter_mut().zip(&bb[i * m..(i + 1) * m]) {
                            *o += x * w;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![batch, n, m], out, rg, Op::BatchMatMul { a, b, trans_b }))
    }

    /// Gathers rows of `x` (viewed as `[rows, last]`) into a tensor of shape
    /// `lead ++ [last]`. Embedding lookup is `gather_rows(table, ids, ...)`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize], lead: &[usize]) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if lead.iter().product::<usize>() != idx.len() {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: lead.to_vec(),
                rhs: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(
                "gather_rows",
                format!("row index {bad} out of range for {rows} rows"),
            ));
        }
        let xv = self.value(x);
        let mut value = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            value.extend_from_slice(&xv[i * cols..(i + 1) * cols]);
        }
        let mut shape = lead.to_vec();
        shape.push(cols);
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, rg, Op::GatherRows(x, idx.to_vec())))
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_last", "no inputs"))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(self.mismatch("concat_last", first, p));
            }
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|&p| *self.shape(p).last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.rg(parts);
        Ok(self.push(shape, value, rg, Op::ConcatLast(parts.to_vec())))
    }

    /// Concatenates along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows", "no inputs"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(self.mismatch("concat_rows", first, p));
            }
            rows += s[0];
        }
        let mut value = Vec::new();
        for &p in parts {
            value.extend_from_slice(self.value(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = self.rg(parts);
        Ok(self.push(shape, value, rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if start + len > cols || self.shape(x).is_empty() {
            return Err(Error::invalid(
                "slice_last",
                format!("range {start}..{} exceeds last axis of {:?}", start + len, self.shape(x)),
            ));
        }
        let xv = self.value(x);
        let mut value = Vec::with_capacity(rows * len);
        for r in 0..rows {
            value.extend_from_slice(&xv[r * cols + start..r * cols + start + len]);
        }
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, rg, Op::SliceLast { x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), value, rg, Op::Reshape(x)))
    }

    fn check_mask(&self, op: &'static str, x: Var, keep: Option<&[bool]>) -> Result<()> {
        if let Some(mask) = keep {
            if mask.len() != self.value(x).len() {
                return Err(Error::Shape {
                    op,
                    lhs: self.shape(x).to_vec(),
                    rhs: vec![mask.len()],
                });
            }
        }
        Ok(())
    }

    /// Softmax over the last axis. Entries with `keep[i] == false` get
    /// probability zero; a fully masked row yields all zeros.
    pub fn softmax(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        self.check_mask("softmax", x, keep)?;
        let (rows, cols) = rows_cols(self.shape(x));
        let xv = self.value(x);
        let mut value = vec![0.0; rows * cols];
        for r in 0..rows {
            let span = r * cols..(r + 1) * cols;
            let kept = |i: usize| keep.is_none_or(|m| m[i]);
            let max = span
                .clone()
                .filter(|&i| kept(i))
                .map(|i| xv[i])
                .fold(f64::NEG_INFINITY, f64::max);
            if span.clone().any(|i| kept(i) && xv[i].is_nan()) {
                value[span].fill(f64::NAN);
                continue;
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for i in span.clone() {
                if kept(i) {
                    value[i] = (xv[i] - max).exp();
                    total += value[i];
                }
            }
            for v in &mut value[span] {
                *v /= total;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, rg, Op::Softmax(x)))
    }

    /// Normalizes each last-axis row to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        let xv = self.value(x);
        let mut value = vec![0.0; rows * cols];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, &v) in value[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, rg, Op::LayerNorm { x, inv_std }))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self
            .value(x)
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, rg, Op::Gelu(x)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, rg, Op::Relu(x)))
    }

    /// Inverted dropout: with an RNG (train mode) each entry is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`;
    /// without one (eval mode) this is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        let rng = match rng {
            Some(rng) if rate > 0.0 => rng,
            _ => return Ok(x),
        };
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep_scale })
            .collect();
        let value = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, rg, Op::Dropout(x, mask)))
    }

    /// Log-sum-exp over the last axis, restricted to `keep` entries when given.
    /// Output drops the last axis.
    pub fn logsumexp(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        self.check_mask("logsumexp", x, keep)?;
        let (rows, cols) = rows_cols(self.shape(x));
        let xv = self.value(x);
        let mut value = Vec::with_capacity(rows);
        for r in 0..rows {
            let kept = |i: &usize| keep.is_none_or(|m| m[*i]);
            let span = r * cols..(r + 1) * cols;
            let max = span
                .clone()
                .filter(kept)
                .map(|i| xv[i])
                .fold(f64::NEG_INFINITY, f64::max);
            if span.clone().filter(kept).any(|i| xv[i].is_nan()) {
                value.push(f64::NAN);
                continue;
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::invalid("logsumexp", format!("row {r} has no unmasked entries")));
            }
            let total: f64 = span.filter(kept).map(|i| (xv[i] - max).exp()).sum();
            value.push(max + total.ln());
        }
        let shape = self.shape(x)[..self.shape(x).len().saturating_sub(1)].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, rg, Op::LogSumExp { x, keep: keep.map(<[bool]>::to_vec) }))
    }

    /// Picks `x[r, idx[r]]` from each last-axis row.
    pub fn pick_last(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if rows != idx.len() {
            return Err(Error::Shape {
                op: "pick_last",
                lhs: self.shape(x).to_vec(),
                rhs: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(Error::invalid("pick_last", format!("column {bad} out of range for {cols}")));
        }
        let xv = self.value(x);
        let value = idx.iter().enumerate().map(|(r, &c)| xv[r * cols + c]).collect();
        let shape = self.shape(x)[..self.shape(x).len() - 1].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, rg, Op::PickLast(x, idx.to_vec())))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = vec![self.value(x).iter().sum()];
        let rg = self.rg(&[x]);
        Ok(self.push(Vec::new(), value, rg, Op::Sum(x)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::invalid("mean", "empty input"));
        }
        let value = vec![self.value(x).iter().sum::<f64>() / n as f64];
        let rg = self.rg(&[x]);
        Ok(self.push(Vec::new(), value, rg, Op::Mean(x)))
    }

    /// `mean((a - b)^2)` over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mse", a, b));
        }
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::invalid("mse", "empty input"));
        }
        let total: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Vec::new(), vec![total / n as f64], rg, Op::MeanSquaredError(a, b)))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward", "empty tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let lens: Vec<usize> = self.nodes.iter().map(|n| n.value.len()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads, &lens);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, lens })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], lens: &[usize]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if needs(v) {
                        let ga = accumulate(&mut grads[v.0], lens[v.0]);
                        ga.iter_mut().zip(g).for_each(|(o, gi)| *o += sign * gi);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if needs(v) {
                        let ga = accumulate(&mut grads[v.0], lens[v.0]);
                        ga.iter_mut().zip(g).for_each(|(o, gi)| *o += sign * gi);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    let ga = accumulate(&mut grads[a.0], lens[a.0]);
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if needs(*b) {
                    let gb = accumulate(&mut grads[b.0], lens[b.0]);
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddBroadcast(a, b) => {
                if needs(*a) {
                    let ga = accumulate(&mut grads[a.0], lens[a.0]);
                    ga.iter_mut().zip(g).for_each(|(o, gi)| *o += gi);
                }
                if needs(*b) {
                    let n = lens[b.0];
                    let gb = accumulate(&mut grads[b.0], n);
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % n] += gi;
                    }
                }
            }
            Op::MulBroadcast(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = bv.len();
                if needs(*a) {
                    let ga = accumulate(&mut grads[a.0], lens[a.0]);
                    for (i, gi) in g.iter().enumerate() {
                        ga[i] += gi * bv[i % n];
                    }
                }
                if needs(*b) {
                    let gb = accumulate(&mut grads[b.0], n);
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % n] += gi * av[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                let gx = accumulate(&mut grads[x.0], lens[x.0]);
                gx.iter_mut().zip(g).for_each(|(o, gi)| *o += c * gi);
            }
            Op::ScaleRows(x, coeffs) => {
                let cols = g.len() / coeffs.len().max(1);
                let gx = accumulate(&mut grads[x.0], lens[x.0]);
                for (i, gi) in g.iter().enumerate() {
                    gx[i] += coeffs[i / cols] * gi;
                }
            }
            Op::MatMul(a, b) => {
                let (rows, k) = rows_cols(self.shape(*a));
                let m = self.shape(*b)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    let ga = accumulate(&mut grads[a.0], lens[a.0]);
                    for r in 0..rows {
                        let grow = &g[r * m..(r + 1) * m];
                        for i in 0..k {
                            ga[r * k + i] += dot(grow, &bv[i * m..(i + 1) * m]);
                        }
                    }
                }
                if needs(*b) {
                    let gb = accumulate(&mut grads[b.0], lens[b.0]);
                    for r in 0..rows {
                        let grow = &g[r * m..(r + 1) * m];
                        for i in 0..k {
                            let x = av[r * k + i];
                            if x == 0.0 {
                                continue;
                            }
                            axpy(x, grow, &mut gb[i * m..(i + 1) * m]);
                        }
                    }
                }
            }
            Op::MatMulNt(a, b) => {
                let (rows, k) = rows_cols(self.shape(*a));
                let v = self.shape(*b)[0];
                let (av, bv) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    let ga = accumulate(&mut grads[a.0], lens[a.0]);
                    for r in 0..rows {
                        for j in 0..v {
                            let gv = g[r * v + j];
                            if gv != 0.0 {
                                axpy(gv, &bv[j * k..(j + 1) * k], &mut ga[r * k..(r + 1) * k]);
                            }
                        }
                    }
                }
                if needs(*b) {
                    let gb = accumulate(&mut grads[b.0], lens[b.0]);
                    for r in 0..rows {
                        for j in 0..v {
                            let gv = g[r * v + j];
                            if gv != 0.0 {
                                axpy(gv, &av[r * k..(r + 1) * k], &mut gb[j * k..(j + 1) * k]);
                            }
                        }
                    }
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (batch, n, k) = (sa[0], sa[1], sa[2]);
                let m = node.shape[2];
                let (av, bv) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    let ga = accumulate(&mut grads[a.0], lens[a.0]);
                    for bi in 0..batch {
                        let bb = &bv[bi * k * m..(bi + 1) * k * m];
                        for r in 0..n {
                            let grow = &g[(bi * n + r) * m..(bi * n + r + 1) * m];
                            let garow = &mut ga[(bi * n + r) * k..(bi * n + r + 1) * k];
                            if *trans_b {
                                // out[r, j] = a[r] . b[j]
                                for (j, &gv) in grow.iter().enumerate() {
                                    if gv != 0.0 {
                                        axpy(gv, &bb[j * k..(j + 1) * k], garow);
                                    }
                                }
                            } else {
                                for (i, o) in garow.iter_mut().enumerate() {
                                    *o += dot(grow, &bb[i * m..(i + 1) * m]);
                                }
                            }
                        }
                    }
                }
                if needs(*b) {
                    let gb = accumulate(&mut grads[b.0], lens[b.0]);
                    for bi in 0..batch {
                        let ab = &av[bi * n * k..(bi + 1) * n * k];
                        let gbb = &mut gb[bi * k * m..(bi + 1) * k * m];
                        for r in 0..n {
                            let grow = &g[(bi * n + r) * m..(bi * n + r + 1) * m];
                            let arow = &ab[r * k..(r + 1) * k];
                            if *trans_b {
                                for (j, &gv) in grow.iter().enumerate() {
                                    if gv != 0.0 {
                                        axpy(gv, arow, &mut gbb[j * k..(j + 1) * k]);
                                    }
                                }
                            } else {
                                for (i, &x) in arow.iter().enumerate() {
                                    if x != 0.0 {
                                        axpy(x, grow, &mut gbb[i * m..(i + 1) * m]);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::GatherRows(x, idx) => {
                let cols = *node.shape.last().unwrap();
                let gx = accumulate(&mut grads[x.0], lens[x.0]);
                for (o, &row) in idx.iter().enumerate() {
                    axpy(1.0, &g[o * cols..(o + 1) * cols], &mut gx[row * cols..(row + 1) * cols]);
                }
            }
            Op::ConcatLast(parts) => {
                let total = *node.shape.last().unwrap();
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                for p in parts {
                    let w = *self.shape(*p).last().unwrap();
                    if needs(*p) {
                        let gp = accumulate(&mut grads[p.0], lens[p.0]);
                        for r in 0..rows {
                            axpy(1.0, &g[r * total + offset..r * total + offset + w], &mut gp[r * w..(r + 1) * w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = lens[p.0];
                    if needs(*p) {
                        let gp = accumulate(&mut grads[p.0], len);
                        axpy(1.0, &g[offset..offset + len], gp);
                    }
                    offset += len;
                }
            }
            Op::SliceLast { x, start } => {
                let (rows, cols) = rows_cols(self.shape(*x));
                let w = *node.shape.last().unwrap();
                let gx = accumulate(&mut grads[x.0], lens[x.0]);
                for r in 0..rows {
                    axpy(1.0, &g[r * w..(r + 1) * w], &mut gx[r * cols + start..r * cols + start + w]);
                }
            }
            Op::Reshape(x) => {
                let gx = accumulate(&mut grads[x.0], lens[x.0]);
                axpy(1.0, g, gx);
            }
            Op::Softmax(x) => {
                let (rows, cols) = rows_cols(&node.shape);
                let y = &node.value;
                let gx = accumulate(&mut grads[x.0], lens[x.0]);
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let inner = dot(&g[span.clone()], &y[span.clone()]);
                    for i in span {
                        gx[i] += y[i] * (g[i] - inner);
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let (rows, cols) = rows_cols(&node.shape);
                let y = &node.value;
                let n = cols as f64;
                let gx = accumulate(&mut grads[x.0], lens[x.0]);
                for (r, &s) in inv_std.iter().enumerate().take(rows) {
                    let span = r * cols..(r + 1) * cols;
                    let gsum: f64 = g[span.clone()].iter().sum();
                    let gy = dot(&g[span.clone()], &y[span.clone()]);
                    for i in span {
                        gx[i] += s / n * (n * g[i] - gsum - y[i] * gy);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let gx = accumulate(&mut grads[x.0], lens[x.0]);
                for i in 0..g.len() {
                    let v = xv[i];
                    let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                    let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    gx[i] += g[i] * d;
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let gx = accumulate(&mut grads[x.0], lens[x.0]);
                for i in 0..g.len() {
                    if xv[i] > 0.0 {
                        gx[i] += g[i];
                    }
                }
            }
            Op::Dropout(x, mask) => {
                let gx = accumulate(&mut grads[x.0], lens[x.0]);
                for i in 0..g.len() {
                    gx[i] += g[i] * mask[i];
                }
            }
            Op::LogSumExp { x, keep } => {
                let (rows, cols) = rows_cols(self.shape(*x));
                let xv = self.value(*x);
                let out = &node.value;
                let gx = accumulate(&mut grads[x.0], lens[x.0]);
                for r in 0..rows {
                    for i in r * cols..(r + 1) * cols {
                        if keep.as_ref().is_none_or(|m| m[i]) {
                            gx[i] += g[r] * (xv[i] - out[r]).exp();
                        }
                    }
                }
            }
            Op::PickLast(x, idx) => {
                let (_, cols) = rows_cols(self.shape(*x));
                let gx = accumulate(&mut grads[x.0], lens[x.0]);
                for (r, &c) in idx.iter().enumerate() {
                    gx[r * cols + c] += g[r];
                }
            }
            Op::Sum(x) => {
                let gx = accumulate(&mut grads[x.0], lens[x.0]);
                gx.iter_mut().for_each(|o| *o += g[0]);
            }
            Op::Mean(x) => {
                let n = lens[x.0] as f64;
                let gx = accumulate(&mut grads[x.0], lens[x.0]);
                gx.iter_mut().for_each(|o| *o += g[0] / n);
            }
            Op::MeanSquaredError(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = av.len() as f64;
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if needs(v) {
                        let gv = accumulate(&mut grads[v.0], lens[v.0]);
                        for i in 0..av.len() {
                            gv[i] += sign * 2.0 * (av[i] - bv[i]) / n * g[0];
                        }
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::random::seeded;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(&[2], vec![0.0, 0.0]).unwrap();
        let y = tape.softmax(x, None).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(&[3], vec![1.0, 1.0, 1.0]).unwrap();
        let y = tape.layer_norm(x).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_of_ones() {
        let mut tape = Tape::new();
        let a = tape.constant(&[2, 3], vec![1.0; 6]).unwrap();
        let b = tape.constant(&[3, 2], vec![1.0; 6]).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 2]);
        assert_eq!(tape.value(c), &[3.0; 4]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(&[2, 3], vec![1.0; 6]).unwrap();
        let b = tape.constant(&[2, 2], vec![1.0; 4]).unwrap();
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn grad_of_logsumexp_is_softmax() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![0.0, 0.0]).with_grad());
        let lse = tape.logsumexp(x, None).unwrap();
        let grads = tape.backward(lse).unwrap();
        assert!(close(grads.get(x).unwrap(), &[0.5, 0.5], 1e-15));
    }

    #[test]
    fn leaf_off_path_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0]).with_grad());
        let unused = tape.leaf(&Tensor::from_vec(vec![3.0, 4.0, 5.0]).with_grad());
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.wrt(unused), vec![0.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_empty() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0]).with_grad());
        assert!(tape.backward(x).is_err());
        let empty = Tape::new();
        assert!(empty.backward(Var(0)).is_err());
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut tape = Tape::new();
        let x = tape.constant(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let keep = [true, false, true, false, false, false];
        let y = tape.softmax(x, Some(&keep)).unwrap();
        let v = tape.value(y);
        assert_eq!(v[1], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
        assert_eq!(&v[3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn fully_masked_logsumexp_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
        assert!(tape.logsumexp(x, Some(&[false, false])).is_err());
    }

    #[test]
    fn dropout_eval_is_identity_and_rejects_bad_rate() {
        let mut tape = Tape::new();
        let x = tape.constant(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = tape.dropout::<crate::numerics::Rng>(x, 0.5, None).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let mut rng = seeded(0);
        assert!(tape.dropout(x, 1.0, Some(&mut rng)).is_err());
    }

    #[test]
    fn constant_inputs_record_no_backward_context() {
        let mut tape = Tape::new();
        let a = tape.constant(&[2], vec![1.0, 2.0]).unwrap();
        let b = tape.add(a, a).unwrap();
        assert!(!tape.requires_grad(b));
    }
}
