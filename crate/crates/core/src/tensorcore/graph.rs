//! Tape-style reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the arena index is already a
//! topological order and the backward pass is a single reverse sweep.

use std::collections::BTreeMap;

use super::tensor::{cast, matmul_at_into, matmul_bt_into, matmul_into, Real, Tensor};
use crate::error::{Error, Result};

/// Index of a trainable tensor in a parameter store.
pub type ParamId = usize;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Relu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
    },
    LpDistance {
        pred: Var,
        target: Tensor<T>,
        rows: Vec<bool>,
        p: T,
    },
    AbsSum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    grads: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn new() -> Self {
        Gradients {
            grads: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor<T>) {
        self.grads.insert(id, grad);
    }

    /// Adds `other` into `self`, entry by entry.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (&id, g) in &other.grads {
            match self.grads.get_mut(&id) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.grads.insert(id, g.clone());
                }
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a, b)));
    }
    Ok(())
}

fn require_2d(op: &'static str, s: &[usize]) -> Result<(usize, usize)> {
    if s.len() != 2 {
        return Err(Error::shape(op, format!("expected a matrix, got {:?}", s)));
    }
    Ok((s[0], s[1]))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A parameter leaf. Frozen parameters (`trainable == false`) behave as
    /// constants and get no gradient entry.
    pub fn param(&mut self, id: ParamId, value: &Tensor<T>, trainable: bool) -> Var {
        self.nodes.push(Node {
            value: value.clone(),
            op: Op::Leaf,
            needs_grad: trainable,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = require_2d("matmul", self.value(a).shape())?;
        let (k2, n) = require_2d("matmul", self.value(b).shape())?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    /// `a * b^T`, used for attention scores.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = require_2d("matmul_bt", self.value(a).shape())?;
        let (n, k2) = require_2d("matmul_bt", self.value(b).shape())?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_bt",
                format!("{:?} x {:?}^T", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_bt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul_bt", Tensor::new(vec![m, n], out)?, Op::MatMulBt(a, b), &[a, b])
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av.shape(), bv.shape())?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("mul", a, b, |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    fn row_broadcast(&mut self, name: &'static str, x: Var, r: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (xv, rv) = (self.value(x), self.value(r));
        let c = xv.cols();
        if rv.numel() != c || xv.shape().is_empty() {
            return Err(Error::shape(
                name,
                format!("{:?} with row vector {:?}", xv.shape(), rv.shape()),
            ));
        }
        let data = xv
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(rv.data()).map(|(&a, &b)| f(a, b)))
            .collect();
        Tensor::new(xv.shape().to_vec(), data)
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let v = self.row_broadcast("add_row", x, bias, |a, b| a + b)?;
        self.push("add_row", v, Op::AddRow(x, bias), &[x, bias])
    }

    pub fn mul_row(&mut self, x: Var, scale: Var) -> Result<Var> {
        let v = self.row_broadcast("mul_row", x, scale, |a, b| a * b)?;
        self.push("mul_row", v, Op::MulRow(x, scale), &[x, scale])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let v = self.value(x).map(|a| a * s);
        self.push("scale", v, Op::Scale(x, s), &[x])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("softmax", v, Op::Softmax(x), &[x])
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {:?}, gamma {:?}, beta {:?}",
                    xv.shape(),
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        let n = cast::<T>(c as f64);
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(xv.rows());
        for row in xv.data().chunks(c) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            xhat.extend(row.iter().map(|&v| (v - mean) * inv));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = xhat
            .chunks(c)
            .flat_map(|row| row.iter().enumerate().map(move |(j, &h)| h * g[j] + b[j]))
            .collect();
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(
            "layer_norm",
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (c, a) = (cast::<T>(GELU_C), cast::<T>(GELU_A));
        let half = cast::<T>(0.5);
        let v = self
            .value(x)
            .map(|u| half * u * (T::one() + (c * (u + a * u * u * u)).tanh()));
        self.push("gelu", v, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|u| u.max(T::zero()));
        self.push("relu", v, Op::Relu(x), &[x])
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, d) = require_2d("embedding", tv.shape())?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::shape(
                    "embedding",
                    format!("id {} out of range for table {:?}", id, tv.shape()),
                ));
            }
            data.extend_from_slice(tv.row(id));
        }
        let v = Tensor::new(vec![ids.len(), d], data)?;
        self.push(
            "embedding",
            v,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = require_2d("slice_rows", xv.shape())?;
        if start + len > r {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {}..{} of {:?}", start, start + len, xv.shape()),
            ));
        }
        let v = Tensor::new(vec![len, c], xv.data()[start * c..(start + len) * c].to_vec())?;
        self.push("slice_rows", v, Op::SliceRows { x, start }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = require_2d("slice_cols", xv.shape())?;
        if start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {}..{} of {:?}", start, start + len, xv.shape()),
            ));
        }
        let mut data = Vec::with_capacity(r * len);
        for row in xv.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let v = Tensor::new(vec![r, len], data)?;
        self.push("slice_cols", v, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        let c = require_2d("concat_rows", self.value(parts[0]).shape())?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            let (r, pc) = require_2d("concat_rows", pv.shape())?;
            if pc != c {
                return Err(Error::shape("concat_rows", format!("{} vs {} columns", c, pc)));
            }
            rows += r;
            data.extend_from_slice(pv.data());
        }
        let v = Tensor::new(vec![rows, c], data)?;
        self.push("concat_rows", v, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let r = require_2d("concat_cols", self.value(parts[0]).shape())?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = require_2d("concat_cols", self.value(p).shape())?;
            if pr != r {
                return Err(Error::shape("concat_cols", format!("{} vs {} rows", r, pr)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Tensor::new(vec![r, total], data)?;
        self.push("concat_cols", v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = require_2d("transpose", xv.shape())?;
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xv.data()[i * c + j];
            }
        }
        let v = Tensor::new(vec![c, r], data)?;
        self.push("transpose", v, Op::Transpose(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push("sum", v, Op::Sum(x), &[x])
    }

    /// Sum over selected rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        let (r, c) = require_2d("cross_entropy", lv.shape())?;
        if targets.len() != r || mask.len() != r {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} rows, {} targets, {} mask flags", r, targets.len(), mask.len()),
            ));
        }
        let mut probs = vec![T::zero(); r * c];
        let mut total = T::zero();
        for i in 0..r {
            if !mask[i] {
                continue;
            }
            if targets[i] >= c {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("target {} out of range for {} classes", targets[i], c),
                ));
            }
            let row = lv.row(i);
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let s: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + s.ln();
            total += lse - row[targets[i]];
            for (p, &v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        self.push(
            "cross_entropy",
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// `sum over selected rows of sum_j |pred - target|^p`.
    pub fn lp_distance_sum(&mut self, pred: Var, target: &Tensor<T>, rows: &[bool], p: T) -> Result<Var> {
        let pv = self.value(pred);
        same_shape("lp_distance", pv.shape(), target.shape())?;
        let c = pv.cols();
        if rows.len() != pv.rows() {
            return Err(Error::shape(
                "lp_distance",
                format!("{} row flags for {} rows", rows.len(), pv.rows()),
            ));
        }
        let mut total = T::zero();
        for (i, &sel) in rows.iter().enumerate() {
            if sel {
                for j in 0..c {
                    total += (pv.data()[i * c + j] - target.data()[i * c + j]).abs().powf(p);
                }
            }
        }
        self.push(
            "lp_distance",
            Tensor::scalar(total),
            Op::LpDistance {
                pred,
                target: target.clone(),
                rows: rows.to_vec(),
                p,
            },
            &[pred],
        )
    }

    pub fn abs_sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).abs_sum());
        self.push("abs_sum", v, Op::AbsSum(x), &[x])
    }

    /// Reverse sweep from a scalar loss. Only trainable parameter leaves
    /// appear in the result.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        let mut out = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Some(pid) = node.param {
                match out.get_mut(&pid) {
                    None => {
                        out.insert(pid, g);
                    }
                    Some(acc) => Tensor::add_assign(acc, &g),
                }
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![T::zero(); m * k];
                    matmul_bt_into(gd, bv.data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![T::zero(); k * n];
                    matmul_at_into(av.data(), gd, &mut db, m, k, n);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::MatMulBt(a, b) => {
                // out[m,n] = a[m,k] b[n,k]^T
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[0];
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![T::zero(); m * k];
                    matmul_into(gd, bv.data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![T::zero(); n * k];
                    matmul_at_into(gd, av.data(), &mut db, m, n, k);
                    self.accumulate(grads, *b, Tensor::new(vec![n, k], db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    let d = gd.iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d)?);
                }
                if self.nodes[b.0].needs_grad {
                    let d = gd.iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), d)?);
                }
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.nodes[bias.0].needs_grad {
                    let bv = self.value(*bias);
                    let c = bv.numel();
                    let mut db = vec![T::zero(); c];
                    for row in gd.chunks(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::MulRow(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let c = sv.numel();
                if self.nodes[x.0].needs_grad {
                    let d = gd
                        .chunks(c)
                        .flat_map(|row| row.iter().zip(sv.data()).map(|(&a, &b)| a * b))
                        .collect();
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
                }
                if self.nodes[s.0].needs_grad {
                    let mut ds = vec![T::zero(); c];
                    for (grow, xrow) in gd.chunks(c).zip(xv.data().chunks(c)) {
                        for j in 0..c {
                            ds[j] += grow[j] * xrow[j];
                        }
                    }
                    self.accumulate(grads, *s, Tensor::new(sv.shape().to_vec(), ds)?);
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut d = Vec::with_capacity(y.numel());
                for (yrow, grow) in y.data().chunks(c).zip(gd.chunks(c)) {
                    let dot: T = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    d.extend(yrow.iter().zip(grow).map(|(&a, &b)| a * (b - dot)));
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                let c = gv.numel();
                let n = cast::<T>(c as f64);
                if self.nodes[gamma.0].needs_grad || self.nodes[beta.0].needs_grad {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for (grow, hrow) in gd.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += grow[j] * hrow[j];
                            db[j] += grow[j];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::new(gv.shape().to_vec(), dg)?);
                    let bshape = self.value(*beta).shape().to_vec();
                    self.accumulate(grads, *beta, Tensor::new(bshape, db)?);
                }
                if self.nodes[x.0].needs_grad {
                    let mut dx = Vec::with_capacity(gd.len());
                    for ((grow, hrow), &inv) in gd.chunks(c).zip(xhat.chunks(c)).zip(inv_std) {
                        let dh: Vec<T> = grow.iter().zip(gv.data()).map(|(&a, &b)| a * b).collect();
                        let sum_dh: T = dh.iter().copied().sum();
                        let sum_dh_h: T = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum();
                        dx.extend(
                            dh.iter()
                                .zip(hrow)
                                .map(|(&d, &h)| inv / n * (n * d - sum_dh - h * sum_dh_h)),
                        );
                    }
                    let xshape = self.value(*x).shape().to_vec();
                    self.accumulate(grads, *x, Tensor::new(xshape, dx)?);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let (c, a) = (cast::<T>(GELU_C), cast::<T>(GELU_A));
                let half = cast::<T>(0.5);
                let three = cast::<T>(3.0);
                let d = xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&u, &gv)| {
                        let t = (c * (u + a * u * u * u)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * a * u * u);
                        gv * (half * (T::one() + t) + half * u * dt)
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&u, &gv)| if u > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.cols();
                let mut dt = Tensor::zeros(tv.shape());
                for (i, &id) in ids.iter().enumerate() {
                    for (o, &v) in dt.row_mut(id).iter_mut().zip(&gd[i * d..(i + 1) * d]) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                dx.data_mut()[start * c..start * c + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *x, dx);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (c, len) = (xv.cols(), g.cols());
                let mut dx = Tensor::zeros(xv.shape());
                for (i, grow) in gd.chunks(len).enumerate() {
                    dx.data_mut()[i * c + start..i * c + start + len].copy_from_slice(grow);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.numel();
                    let piece = Tensor::new(pv.shape().to_vec(), gd[offset..offset + n].to_vec())?;
                    offset += n;
                    self.accumulate(grads, p, piece);
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut start = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.cols();
                    let mut d = Vec::with_capacity(pv.numel());
                    for grow in gd.chunks(total) {
                        d.extend_from_slice(&grow[start..start + w]);
                    }
                    start += w;
                    self.accumulate(grads, p, Tensor::new(pv.shape().to_vec(), d)?);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = gd[i * c + j];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![c, r], d)?);
            }
            Op::Sum(x) => {
                let s = gd[0];
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, s));
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
            } => {
                let s = gd[0];
                let lv = self.value(*logits);
                let c = lv.cols();
                let mut d = probs.clone();
                for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                    if m {
                        d[i * c + t] -= T::one();
                    }
                }
                for v in d.iter_mut() {
                    *v *= s;
                }
                self.accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), d)?);
            }
            Op::LpDistance {
                pred,
                target,
                rows,
                p,
            } => {
                let s = gd[0];
                let pv = self.value(*pred);
                let c = pv.cols();
                let p = *p;
                let mut d = vec![T::zero(); pv.numel()];
                for (i, &sel) in rows.iter().enumerate() {
                    if !sel {
                        continue;
                    }
                    for j in 0..c {
                        let diff = pv.data()[i * c + j] - target.data()[i * c + j];
                        let mag = if p == T::one() {
                            T::one()
                        } else {
                            p * diff.abs().powf(p - T::one())
                        };
                        d[i * c + j] = s * mag * sign(diff);
                    }
                }
                self.accumulate(grads, *pred, Tensor::new(pv.shape().to_vec(), d)?);
            }
            Op::AbsSum(x) => {
                let s = gd[0];
                let xv = self.value(*x);
                self.accumulate(grads, *x, xv.map(|v| s * sign(v)));
            }
        }
        Ok(())
    }
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}
