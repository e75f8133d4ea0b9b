//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends one node holding its forward value. [`Tape::backward`]
//! walks the nodes in reverse and applies each node's vector-Jacobian rule.
//! Leaf gradients persist across calls and accumulate until
//! [`Tape::zero_grads`].

use std::sync::Arc;

use super::tensor::{matmul_at_kernel, matmul_bt_kernel, matmul_kernel};
use super::{Real, Tensor, TensorError};

const GELU_COEF: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Gather(Var, Arc<[usize]>),
    Concat(Vec<Var>),
    ReplaceRows {
        x: Var,
        token: Var,
        rows: Arc<[bool]>,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    SmoothL1 {
        pred: Var,
        target: Var,
        beta: T,
        mask: Option<Vec<T>>,
        count: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Gather(..) => "gather",
            Op::Concat(..) => "concat",
            Op::ReplaceRows { .. } => "replace_rows",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Clamp(..) => "clamp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SmoothL1 { .. } => "smooth_l1",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a forward computation.
///
/// Single-owner; each adaptation or training step builds its own.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Copies `v` into a fresh constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
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

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shape preserved")
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shape preserved")
    }

    fn rows_cols(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::BadShape {
                op,
                detail: format!("expected a matrix, got {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var, TensorError> {
        let out = self.map(a, |x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// `x[n,e] + bias[e]` applied to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (n, e) = self.rows_cols("add_row", x)?;
        if self.shape(bias) != [e] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(e) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
        let out = Tensor::new(vec![n, e], data)?;
        self.push(out, Op::AddRow(x, bias), &[x, bias])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (n, k) = self.rows_cols("matmul", a)?;
        let (k2, m) = self.rows_cols("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![n, k],
                rhs: vec![k2, m],
            });
        }
        let mut data = vec![T::zero(); n * m];
        matmul_kernel(self.value(a).data(), self.value(b).data(), &mut data, n, k, m);
        let out = Tensor::new(vec![n, m], data)?;
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a[n,k] · b[m,k]ᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (n, k) = self.rows_cols("matmul_bt", a)?;
        let (m, k2) = self.rows_cols("matmul_bt", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_bt",
                lhs: vec![n, k],
                rhs: vec![m, k2],
            });
        }
        let mut data = vec![T::zero(); n * m];
        matmul_bt_kernel(self.value(a).data(), self.value(b).data(), &mut data, n, k, m);
        let out = Tensor::new(vec![n, m], data)?;
        self.push(out, Op::MatMulBt(a, b), &[a, b])
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    ///
    /// Covers reshape, transpose, slicing and patch rearrangement.
    pub fn gather(
        &mut self,
        x: Var,
        index: Arc<[usize]>,
        shape: &[usize],
    ) -> Result<Var, TensorError> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(TensorError::BadShape {
                op: "gather",
                detail: format!("index {bad} out of range for {} elements", src.len()),
            });
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        self.push(out, Op::Gather(x, index), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let n = self.value(x).len();
        let index: Arc<[usize]> = (0..n).collect();
        self.gather(x, index, shape)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = self.rows_cols("transpose", x)?;
        let index: Arc<[usize]> = (0..r * c).map(|o| (o % r) * c + o / r).collect();
        self.gather(x, index, &[c, r])
    }

    /// Columns `[start, start+len)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.rows_cols("slice_cols", x)?;
        if len == 0 || start + len > c {
            return Err(TensorError::BadShape {
                op: "slice_cols",
                detail: format!("columns {start}..{} of {c}", start + len),
            });
        }
        let index: Arc<[usize]> = (0..r)
            .flat_map(|i| (start..start + len).map(move |j| i * c + j))
            .collect();
        self.gather(x, index, &[r, len])
    }

    /// Flat concatenation; the result is one-dimensional.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::BadShape {
                op: "concat",
                detail: "no inputs".into(),
            });
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let n = data.len();
        let out = Tensor::new(vec![n], data)?;
        self.push(out, Op::Concat(parts.to_vec()), parts)
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let mut widths = Vec::with_capacity(parts.len());
        let mut rows = None;
        for &p in parts {
            let (r, c) = self.rows_cols("concat_cols", p)?;
            if *rows.get_or_insert(r) != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: vec![r, c],
                });
            }
            widths.push(c);
        }
        let rows = rows.ok_or(TensorError::BadShape {
            op: "concat_cols",
            detail: "no inputs".into(),
        })?;
        let total: usize = widths.iter().sum();
        let flat = self.concat(parts)?;
        let mut index = Vec::with_capacity(rows * total);
        for i in 0..rows {
            let mut offset = 0;
            for &w in &widths {
                index.extend((0..w).map(|j| offset + i * w + j));
                offset += rows * w;
            }
        }
        self.gather(flat, index.into(), &[rows, total])
    }

    /// Rows flagged in `rows` are replaced by the vector `token`.
    pub fn replace_rows(
        &mut self,
        x: Var,
        token: Var,
        rows: Arc<[bool]>,
    ) -> Result<Var, TensorError> {
        let (n, d) = self.rows_cols("replace_rows", x)?;
        if self.shape(token) != [d] || rows.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "replace_rows",
                lhs: vec![n, d],
                rhs: self.shape(token).to_vec(),
            });
        }
        let tok = self.value(token).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for (row, &masked) in data.chunks_exact_mut(d).zip(rows.iter()) {
            if masked {
                row.copy_from_slice(&tok);
            }
        }
        let out = Tensor::new(vec![n, d], data)?;
        self.push(out, Op::ReplaceRows { x, token, rows }, &[x, token])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let d = *t.shape().last().expect("nonempty shape");
        let mut data = t.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Layer normalization over the last axis with affine `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var, TensorError> {
        let t = self.value(x);
        let d = *t.shape().last().expect("nonempty shape");
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: t.shape().to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let dn = T::from_f64(d as f64);
        let mut xhat = t.data().to_vec();
        let mut rstd = Vec::with_capacity(t.len() / d);
        let mut data = vec![T::zero(); t.len()];
        for (row, out) in xhat.chunks_exact_mut(d).zip(data.chunks_exact_mut(d)) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for ((h, o), (&gv, &bv)) in row.iter_mut().zip(out.iter_mut()).zip(g.iter().zip(b)) {
                *h = (*h - mean) * r;
                *o = *h * gv + bv;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        let c = T::from_f64(SQRT_2_OVER_PI);
        let k = T::from_f64(GELU_COEF);
        let half = T::from_f64(0.5);
        let out = self.map(x, |v| half * v * (T::one() + (c * (v + k * v * v * v)).tanh()));
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.map(x, |v| T::one() / (T::one() + (-v).exp()));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Clamp with pass-through gradient inside `[lo, hi]` and zero outside.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var, TensorError> {
        let out = self.map(x, |v| v.max(lo).min(hi));
        self.push(out, Op::Clamp(x, lo, hi), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::from_f64(t.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Smooth-L1 averaged over the elements where `mask` is 1.
    ///
    /// Per element: `0.5·d²/beta` if `|d| < beta`, else `|d| − 0.5·beta`.
    pub fn smooth_l1(
        &mut self,
        pred: Var,
        target: Var,
        beta: T,
        mask: Option<&Tensor<T>>,
    ) -> Result<Var, TensorError> {
        if !(beta > T::zero()) {
            return Err(TensorError::InvalidArgument {
                op: "smooth_l1",
                reason: format!("beta must be positive, got {beta}"),
            });
        }
        self.same_shape("smooth_l1", pred, target)?;
        let mask = match mask {
            Some(m) => {
                if m.shape() != self.shape(pred) {
                    return Err(TensorError::ShapeMismatch {
                        op: "smooth_l1",
                        lhs: self.shape(pred).to_vec(),
                        rhs: m.shape().to_vec(),
                    });
                }
                Some(m.data().to_vec())
            }
            None => None,
        };
        let count = match &mask {
            Some(m) => m.iter().filter(|&&w| w != T::zero()).count(),
            None => self.value(pred).len(),
        };
        if count == 0 {
            return Err(TensorError::InvalidArgument {
                op: "smooth_l1",
                reason: "mask selects no elements".into(),
            });
        }
        let half = T::from_f64(0.5);
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let mut total = T::zero();
        for i in 0..p.len() {
            if mask.as_ref().is_some_and(|m| m[i] == T::zero()) {
                continue;
            }
            let d = (p[i] - t[i]).abs();
            total = total
                + if d < beta {
                    half * d * d / beta
                } else {
                    d - half * beta
                };
        }
        let value = total / T::from_f64(count as f64);
        self.push(
            Tensor::scalar(value),
            Op::SmoothL1 {
                pred,
                target,
                beta,
                mask,
                count,
            },
            &[pred, target],
        )
    }

    /// Propagates `∂root/∂leaf` into every reachable trainable leaf.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        if self.nodes.is_empty() || root.0 >= self.nodes.len() {
            return Err(TensorError::EmptyTape);
        }
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: root_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![T::one()]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let acc = &mut self.leaf_grads[idx];
                match acc {
                    Some(t) => {
                        for (a, &b) in t.data_mut().iter_mut().zip(&g) {
                            *a = *a + b;
                        }
                    }
                    None => *acc = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        // Accumulates a contribution produced by `f` into the gradient slot of `v`.
        fn acc<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize, f: impl FnOnce(&mut [T])) {
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
            f(slot);
        }
        let len = |v: Var| nodes[v.0].value.len();

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if wants(v) {
                        acc(grads, v, len(v), |s| add_into(s, g));
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(grads, *a, len(*a), |s| add_into(s, g));
                }
                if wants(*b) {
                    acc(grads, *b, len(*b), |s| {
                        for (o, &gv) in s.iter_mut().zip(g) {
                            *o = *o - gv;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if wants(*a) {
                    acc(grads, *a, va.len(), |s| {
                        for ((o, &gv), &y) in s.iter_mut().zip(g).zip(vb) {
                            *o = *o + gv * y;
                        }
                    });
                }
                if wants(*b) {
                    acc(grads, *b, vb.len(), |s| {
                        for ((o, &gv), &x) in s.iter_mut().zip(g).zip(va) {
                            *o = *o + gv * x;
                        }
                    });
                }
            }
            Op::Scale(a, k) => {
                if wants(*a) {
                    acc(grads, *a, len(*a), |s| {
                        for (o, &gv) in s.iter_mut().zip(g) {
                            *o = *o + gv * *k;
                        }
                    });
                }
            }
            Op::AddRow(x, b) => {
                if wants(*x) {
                    acc(grads, *x, len(*x), |s| add_into(s, g));
                }
                if wants(*b) {
                    let e = len(*b);
                    acc(grads, *b, e, |s| {
                        for row in g.chunks_exact(e) {
                            add_into(s, row);
                        }
                    });
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if wants(*a) {
                    // dA = dC · Bᵀ
                    acc(grads, *a, n * k, |s| matmul_bt_kernel(g, vb, s, n, m, k));
                }
                if wants(*b) {
                    // dB = Aᵀ · dC
                    acc(grads, *b, k * m, |s| matmul_at_kernel(va, g, s, n, k, m));
                }
            }
            Op::MatMulBt(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (n, k, m) = (sa[0], sa[1], sb[0]);
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if wants(*a) {
                    // dA = dC · B
                    acc(grads, *a, n * k, |s| matmul_kernel(g, vb, s, n, m, k));
                }
                if wants(*b) {
                    // dB = dCᵀ · A
                    acc(grads, *b, m * k, |s| matmul_at_kernel(g, va, s, n, m, k));
                }
            }
            Op::Gather(x, index) => {
                if wants(*x) {
                    acc(grads, *x, len(*x), |s| {
                        for (&i, &gv) in index.iter().zip(g) {
                            s[i] = s[i] + gv;
                        }
                    });
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = len(p);
                    if wants(p) {
                        acc(grads, p, n, |s| add_into(s, &g[offset..offset + n]));
                    }
                    offset += n;
                }
            }
            Op::ReplaceRows { x, token, rows } => {
                let d = len(*token);
                if wants(*x) {
                    acc(grads, *x, len(*x), |s| {
                        for ((srow, grow), &masked) in
                            s.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(rows.iter())
                        {
                            if !masked {
                                add_into(srow, grow);
                            }
                        }
                    });
                }
                if wants(*token) {
                    acc(grads, *token, d, |s| {
                        for (grow, &masked) in g.chunks_exact(d).zip(rows.iter()) {
                            if masked {
                                add_into(s, grow);
                            }
                        }
                    });
                }
            }
            Op::Softmax(x) => {
                if wants(*x) {
                    let y = node.value.data();
                    let d = *node.value.shape().last().expect("nonempty shape");
                    acc(grads, *x, y.len(), |s| {
                        for ((srow, yrow), grow) in
                            s.chunks_exact_mut(d).zip(y.chunks_exact(d)).zip(g.chunks_exact(d))
                        {
                            let dot: T = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                            for ((o, &yv), &gv) in srow.iter_mut().zip(yrow).zip(grow) {
                                *o = *o + yv * (gv - dot);
                            }
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = len(*gain);
                let gv = nodes[gain.0].value.data();
                if wants(*x) {
                    let dn = T::from_f64(d as f64);
                    acc(grads, *x, xhat.len(), |s| {
                        for (r, ((srow, hrow), grow)) in s
                            .chunks_exact_mut(d)
                            .zip(xhat.chunks_exact(d))
                            .zip(g.chunks_exact(d))
                            .enumerate()
                        {
                            let mut sum_dh = T::zero();
                            let mut sum_dh_h = T::zero();
                            for j in 0..d {
                                let dh = grow[j] * gv[j];
                                sum_dh = sum_dh + dh;
                                sum_dh_h = sum_dh_h + dh * hrow[j];
                            }
                            let rs = rstd[r];
                            for j in 0..d {
                                let dh = grow[j] * gv[j];
                                srow[j] = srow[j] + rs * (dh - sum_dh / dn - hrow[j] * sum_dh_h / dn);
                            }
                        }
                    });
                }
                if wants(*gain) {
                    acc(grads, *gain, d, |s| {
                        for (hrow, grow) in xhat.chunks_exact(d).zip(g.chunks_exact(d)) {
                            for j in 0..d {
                                s[j] = s[j] + grow[j] * hrow[j];
                            }
                        }
                    });
                }
                if wants(*bias) {
                    acc(grads, *bias, d, |s| {
                        for grow in g.chunks_exact(d) {
                            add_into(s, grow);
                        }
                    });
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let xv = nodes[x.0].value.data();
                    let c = T::from_f64(SQRT_2_OVER_PI);
                    let k = T::from_f64(GELU_COEF);
                    let three_k = T::from_f64(3.0 * GELU_COEF);
                    let half = T::from_f64(0.5);
                    acc(grads, *x, xv.len(), |s| {
                        for ((o, &gv), &v) in s.iter_mut().zip(g).zip(xv) {
                            let t = (c * (v + k * v * v * v)).tanh();
                            let dt = (T::one() - t * t) * c * (T::one() + three_k * v * v);
                            *o = *o + gv * (half * (T::one() + t) + half * v * dt);
                        }
                    });
                }
            }
            Op::Sigmoid(x) => {
                if wants(*x) {
                    let y = node.value.data();
                    acc(grads, *x, y.len(), |s| {
                        for ((o, &gv), &yv) in s.iter_mut().zip(g).zip(y) {
                            *o = *o + gv * yv * (T::one() - yv);
                        }
                    });
                }
            }
            Op::Clamp(x, lo, hi) => {
                if wants(*x) {
                    let xv = nodes[x.0].value.data();
                    acc(grads, *x, xv.len(), |s| {
                        for ((o, &gv), &v) in s.iter_mut().zip(g).zip(xv) {
                            if v >= *lo && v <= *hi {
                                *o = *o + gv;
                            }
                        }
                    });
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    acc(grads, *x, len(*x), |s| {
                        for o in s.iter_mut() {
                            *o = *o + g[0];
                        }
                    });
                }
            }
            Op::Mean(x) => {
                if wants(*x) {
                    let n = len(*x);
                    let share = g[0] / T::from_f64(n as f64);
                    acc(grads, *x, n, |s| {
                        for o in s.iter_mut() {
                            *o = *o + share;
                        }
                    });
                }
            }
            Op::SmoothL1 {
                pred,
                target,
                beta,
                mask,
                count,
            } => {
                let p = nodes[pred.0].value.data();
                let t = nodes[target.0].value.data();
                let scale = g[0] / T::from_f64(*count as f64);
                let dloss: Vec<T> = (0..p.len())
                    .map(|i| {
                        if mask.as_ref().is_some_and(|m| m[i] == T::zero()) {
                            return T::zero();
                        }
                        let d = p[i] - t[i];
                        let local = if d.abs() < *beta { d / *beta } else { d.signum() };
                        local * scale
                    })
                    .collect();
                if wants(*pred) {
                    acc(grads, *pred, p.len(), |s| add_into(s, &dloss));
                }
                if wants(*target) {
                    acc(grads, *target, t.len(), |s| {
                        for (o, &dv) in s.iter_mut().zip(&dloss) {
                            *o = *o - dv;
                        }
                    });
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}
