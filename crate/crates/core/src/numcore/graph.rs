//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to the tape, so node indices are already a
//! topological order. [`Graph::backward`] walks the tape once in reverse,
//! summing gradient contributions into each parent before the parent itself is
//! visited. The tape is never mutated by backward, so gradients can be taken
//! repeatedly from the same forward pass.

use std::collections::HashMap;

use super::scalar::{gemm, MatRef};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
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
    MatMul { a: usize, b: usize, trans_b: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow { a: usize, row: usize },
    Scale(usize, T),
    Gelu(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, mean: Vec<T>, rstd: Vec<T> },
    CausalSoftmax(usize),
    LogSoftmax(usize),
    Gather { table: usize, ids: Vec<usize> },
    SliceCols { a: usize, start: usize },
    SliceRows { a: usize, start: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Pick { a: usize, idx: Vec<usize> },
    Sum(usize),
    MeanRows(usize),
    SumSq(usize),
    LogSigmoid(usize),
}

impl<T> Op<T> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow { .. } => "add_row",
            Op::Scale(..) => "scale",
            Op::Gelu(_) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CausalSoftmax(_) => "causal_softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Gather { .. } => "gather",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::Pick { .. } => "pick",
            Op::Sum(_) => "sum",
            Op::MeanRows(_) => "mean_rows",
            Op::SumSq(_) => "sum_sq",
            Op::LogSigmoid(_) => "log_sigmoid",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to every leaf that requires grad.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    by_leaf: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `leaf`; `None` when the root does not depend on it.
    pub fn get(&self, leaf: Var) -> Option<&Tensor<T>> {
        self.by_leaf.get(&leaf.0)
    }

    pub fn take(&mut self, leaf: Var) -> Option<Tensor<T>> {
        self.by_leaf.remove(&leaf.0)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Default, Clone)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa != sb {
            return Err(Error::contract(format!("{op}: shape {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    // ---- operations -------------------------------------------------------

    /// `a @ b` for `a: [m, k]`, `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (bk, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != bk {
            return Err(Error::contract(format!("matmul: inner dims {k} vs {bk} (trans_b={trans_b})")));
        }
        let mut out = vec![T::zero(); m * n];
        let bm = MatRef::new(self.data(b), br, bc);
        gemm(MatRef::new(self.data(a), m, k), if trans_b { bm.t() } else { bm }, &mut out, false);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul { a: a.0, b: b.0, trans_b }, rg))
    }

    fn zip(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// Adds `row: [c]` to every row of `a: [r, c]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.nodes[row.0].value.numel() != c {
            return Err(Error::contract(format!(
                "add_row: row has {} elements, matrix has {c} columns",
                self.nodes[row.0].value.numel()
            )));
        }
        let rv = self.data(row);
        let mut out = self.data(a).to_vec();
        for chunk in out.chunks_mut(c.max(1)) {
            for (x, &y) in chunk.iter_mut().zip(rv) {
                *x = *x + y;
            }
        }
        let shape = self.nodes[a.0].value.shape().to_vec();
        debug_assert_eq!(out.len(), r * c);
        let rg = self.rg(&[a.0, row.0]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow { a: a.0, row: row.0 }, rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64c(s);
        let out: Vec<T> = self.data(a).iter().map(|&x| x * s).collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let rg = self.rg(&[a.0]);
        self.push(Tensor::new(shape, out).expect("same numel"), Op::Scale(a.0, s), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<T> = self.data(a).iter().map(|&x| gelu_fwd(x)).collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let rg = self.rg(&[a.0]);
        self.push(Tensor::new(shape, out).expect("same numel"), Op::Gelu(a.0), rg)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.nodes[gamma.0].value.numel() != c || self.nodes[beta.0].value.numel() != c {
            return Err(Error::contract("layer_norm: affine params must match row width"));
        }
        let xs = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let eps = T::from_f64c(LN_EPS);
        let cf = T::from_usize(c).unwrap();
        let mut out = vec![T::zero(); r * c];
        let mut means = Vec::with_capacity(r);
        let mut rstds = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let shape = self.nodes[x.0].value.shape().to_vec();
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, mean: means, rstd: rstds },
            rg,
        ))
    }

    /// Softmax over each row of a square score matrix, with entries above the
    /// diagonal (future positions) masked to zero probability.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if r != c {
            return Err(Error::contract(format!("causal_softmax: expected square, got {r}x{c}")));
        }
        let xs = self.data(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xs[i * c..i * c + i + 1];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..=i {
                let e = (row[j] - max).exp();
                out[i * c + j] = e;
                total = total + e;
            }
            for j in 0..=i {
                out[i * c + j] = out[i * c + j] / total;
            }
        }
        let shape = self.nodes[a.0].value.shape().to_vec();
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::new(shape, out)?, Op::CausalSoftmax(a.0), rg))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let xs = self.data(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let shape = self.nodes[a.0].value.shape().to_vec();
        let rg = self.rg(&[a.0]);
        self.push(Tensor::new(shape, out).expect("same numel"), Op::LogSoftmax(a.0), rg)
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::contract(format!("gather: id {bad} out of range for {v} rows")));
        }
        let t = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table.0]);
        Ok(self.push(Tensor::matrix(ids.len(), d, out)?, Op::Gather { table: table.0, ids: ids.to_vec() }, rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + len > c {
            return Err(Error::contract(format!("slice_cols: {start}+{len} > {c}")));
        }
        let xs = self.data(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xs[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::matrix(r, len, out)?, Op::SliceCols { a: a.0, start }, rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + len > r {
            return Err(Error::contract(format!("slice_rows: {start}+{len} > {r}")));
        }
        let out = self.data(a)[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::matrix(len, c, out)?, Op::SliceRows { a: a.0, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map(|&p| self.dims(p).0).ok_or_else(|| Error::contract("concat_cols: no inputs"))?;
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        if parts.iter().any(|&p| self.dims(p).0 != r) {
            return Err(Error::contract("concat_cols: row counts differ"));
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::matrix(r, total, out)?, Op::ConcatCols(ids), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map(|&p| self.dims(p).1).ok_or_else(|| Error::contract("concat_rows: no inputs"))?;
        if parts.iter().any(|&p| self.dims(p).1 != c) {
            return Err(Error::contract("concat_rows: column counts differ"));
        }
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            out.extend_from_slice(self.data(p));
            rows += self.dims(p).0;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::matrix(rows, c, out)?, Op::ConcatRows(ids), rg))
    }

    /// `out[i] = a[i, idx[i]]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if idx.len() != r {
            return Err(Error::contract(format!("pick: {} indices for {r} rows", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::contract(format!("pick: column {bad} out of range {c}")));
        }
        let xs = self.data(a);
        let out: Vec<T> = idx.iter().enumerate().map(|(i, &j)| xs[i * c + j]).collect();
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::from_vec(out), Op::Pick { a: a.0, idx: idx.to_vec() }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum::<T>();
        let rg = self.rg(&[a.0]);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Column means of `a: [r, c]`, returned as `[c]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if r == 0 {
            return Err(Error::contract("mean_rows: no rows"));
        }
        let xs = self.data(a);
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            for j in 0..c {
                out[j] = out[j] + xs[i * c + j];
            }
        }
        let rf = T::from_usize(r).unwrap();
        out.iter_mut().for_each(|x| *x = *x / rf);
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::from_vec(out), Op::MeanRows(a.0), rg))
    }

    /// Sum of squared entries.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().map(|&x| x * x).sum::<T>();
        let rg = self.rg(&[a.0]);
        self.push(Tensor::scalar(s), Op::SumSq(a.0), rg)
    }

    /// Numerically stable `ln σ(x)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let out: Vec<T> = self.data(a).iter().map(|&x| log_sigmoid(x)).collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        let rg = self.rg(&[a.0]);
        self.push(Tensor::new(shape, out).expect("same numel"), Op::LogSigmoid(a.0), rg)
    }

    // ---- reverse pass -----------------------------------------------------

    /// Gradients of the scalar `root` with respect to all reachable leaves
    /// that require grad.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_node = self.nodes.get(root.0).ok_or_else(|| Error::contract("backward: root not on this graph"))?;
        if root_node.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward: root must be scalar, has shape {:?}",
                root_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![T::one()]);
        let mut by_leaf = HashMap::new();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric {
                    node: i,
                    detail: format!("non-finite gradient flowing into {} node", node.op.kind()),
                });
            }
            if !node.value.is_finite() {
                return Err(Error::Numeric {
                    node: i,
                    detail: format!("non-finite forward value in {} node", node.op.kind()),
                });
            }
            self.propagate(i, &g, &mut grads, &mut by_leaf);
        }
        Ok(Gradients { by_leaf })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>], by_leaf: &mut HashMap<usize, Tensor<T>>) {
        let node = &self.nodes[i];
        let wants = |p: usize| self.nodes[p].requires_grad;
        macro_rules! acc {
            ($p:expr) => {{
                let n = self.nodes[$p].value.numel();
                grads[$p].get_or_insert_with(|| vec![T::zero(); n])
            }};
        }
        match &node.op {
            Op::Leaf => {
                by_leaf.insert(i, Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("shape"));
            }
            &Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.nodes[a].value.dims2();
                let (br, bc) = self.nodes[b].value.dims2();
                let n = if trans_b { br } else { bc };
                let gm = MatRef::new(g, m, n);
                let am = MatRef::new(self.nodes[a].value.data(), m, k);
                let bm = MatRef::new(self.nodes[b].value.data(), br, bc);
                if wants(a) {
                    // dA = dC·Bᵀ, or dC·B when C = A·Bᵀ
                    let out = acc!(a);
                    gemm(gm, if trans_b { bm } else { bm.t() }, out, true);
                }
                if wants(b) {
                    let out = acc!(b);
                    if trans_b {
                        gemm(gm.t(), am, out, true); // dB = dCᵀ·A
                    } else {
                        gemm(am.t(), gm, out, true); // dB = Aᵀ·dC
                    }
                }
            }
            &Op::Add(a, b) => {
                for (p, sign) in [(a, T::one()), (b, T::one())] {
                    if wants(p) {
                        let out = acc!(p);
                        out.iter_mut().zip(g).for_each(|(o, &x)| *o = *o + sign * x);
                    }
                }
            }
            &Op::Sub(a, b) => {
                for (p, sign) in [(a, T::one()), (b, -T::one())] {
                    if wants(p) {
                        let out = acc!(p);
                        out.iter_mut().zip(g).for_each(|(o, &x)| *o = *o + sign * x);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let other = self.nodes[b].value.data();
                    let out = acc!(a);
                    for ((o, &x), &y) in out.iter_mut().zip(g).zip(other) {
                        *o = *o + x * y;
                    }
                }
                if wants(b) {
                    let other = self.nodes[a].value.data();
                    let out = acc!(b);
                    for ((o, &x), &y) in out.iter_mut().zip(g).zip(other) {
                        *o = *o + x * y;
                    }
                }
            }
            &Op::AddRow { a, row } => {
                if wants(a) {
                    let out = acc!(a);
                    out.iter_mut().zip(g).for_each(|(o, &x)| *o = *o + x);
                }
                if wants(row) {
                    let c = self.nodes[row].value.numel();
                    let out = acc!(row);
                    for chunk in g.chunks(c.max(1)) {
                        out.iter_mut().zip(chunk).for_each(|(o, &x)| *o = *o + x);
                    }
                }
            }
            &Op::Scale(a, s) => {
                if wants(a) {
                    let out = acc!(a);
                    out.iter_mut().zip(g).for_each(|(o, &x)| *o = *o + x * s);
                }
            }
            &Op::Gelu(a) => {
                if wants(a) {
                    let xs = self.nodes[a].value.data();
                    let out = acc!(a);
                    for ((o, &dy), &x) in out.iter_mut().zip(g).zip(xs) {
                        *o = *o + dy * gelu_grad(x);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (r, c) = self.nodes[x].value.dims2();
                let xs = self.nodes[x].value.data();
                let gs = self.nodes[gamma].value.data();
                let cf = T::from_usize(c).unwrap();
                if wants(gamma) {
                    let out = acc!(gamma);
                    for i in 0..r {
                        for j in 0..c {
                            let xhat = (xs[i * c + j] - mean[i]) * rstd[i];
                            out[j] = out[j] + g[i * c + j] * xhat;
                        }
                    }
                }
                if wants(beta) {
                    let out = acc!(beta);
                    for i in 0..r {
                        for j in 0..c {
                            out[j] = out[j] + g[i * c + j];
                        }
                    }
                }
                if wants(x) {
                    let out = acc!(x);
                    for i in 0..r {
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for j in 0..c {
                            let d = g[i * c + j] * gs[j];
                            let xhat = (xs[i * c + j] - mean[i]) * rstd[i];
                            sum_d = sum_d + d;
                            sum_dx = sum_dx + d * xhat;
                        }
                        let md = sum_d / cf;
                        let mdx = sum_dx / cf;
                        for j in 0..c {
                            let d = g[i * c + j] * gs[j];
                            let xhat = (xs[i * c + j] - mean[i]) * rstd[i];
                            out[i * c + j] = out[i * c + j] + rstd[i] * (d - md - xhat * mdx);
                        }
                    }
                }
            }
            &Op::CausalSoftmax(a) => {
                if wants(a) {
                    let (r, c) = node.value.dims2();
                    let ys = node.value.data();
                    let out = acc!(a);
                    for i in 0..r {
                        let dot = (0..=i).map(|j| ys[i * c + j] * g[i * c + j]).sum::<T>();
                        for j in 0..=i {
                            out[i * c + j] = out[i * c + j] + ys[i * c + j] * (g[i * c + j] - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmax(a) => {
                if wants(a) {
                    let (r, c) = node.value.dims2();
                    let ys = node.value.data();
                    let out = acc!(a);
                    for i in 0..r {
                        let gsum = g[i * c..(i + 1) * c].iter().copied().sum::<T>();
                        for j in 0..c {
                            let p = ys[i * c + j].exp();
                            out[i * c + j] = out[i * c + j] + g[i * c + j] - p * gsum;
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let table = *table;
                if wants(table) {
                    let d = self.nodes[table].value.dims2().1;
                    let out = acc!(table);
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            out[id * d + j] = out[id * d + j] + g[r * d + j];
                        }
                    }
                }
            }
            &Op::SliceCols { a, start } => {
                if wants(a) {
                    let (r, len) = node.value.dims2();
                    let c = self.nodes[a].value.dims2().1;
                    let out = acc!(a);
                    for i in 0..r {
                        for j in 0..len {
                            out[i * c + start + j] = out[i * c + start + j] + g[i * len + j];
                        }
                    }
                }
            }
            &Op::SliceRows { a, start } => {
                if wants(a) {
                    let c = self.nodes[a].value.dims2().1;
                    let out = acc!(a);
                    for (o, &x) in out[start * c..start * c + g.len()].iter_mut().zip(g) {
                        *o = *o + x;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.dims2();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p].value.dims2().1;
                    if wants(p) {
                        let out = acc!(p);
                        for i in 0..r {
                            for j in 0..w {
                                out[i * w + j] = out[i * w + j] + g[i * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p].value.numel();
                    if wants(p) {
                        let out = acc!(p);
                        for (o, &x) in out.iter_mut().zip(&g[offset..offset + n]) {
                            *o = *o + x;
                        }
                    }
                    offset += n;
                }
            }
            Op::Pick { a, idx } => {
                let a = *a;
                if wants(a) {
                    let c = self.nodes[a].value.dims2().1;
                    let out = acc!(a);
                    for (i, &j) in idx.iter().enumerate() {
                        out[i * c + j] = out[i * c + j] + g[i];
                    }
                }
            }
            &Op::Sum(a) => {
                if wants(a) {
                    let out = acc!(a);
                    out.iter_mut().for_each(|o| *o = *o + g[0]);
                }
            }
            &Op::MeanRows(a) => {
                if wants(a) {
                    let (r, c) = self.nodes[a].value.dims2();
                    let rf = T::from_usize(r).unwrap();
                    let out = acc!(a);
                    for i in 0..r {
                        for j in 0..c {
                            out[i * c + j] = out[i * c + j] + g[j] / rf;
                        }
                    }
                }
            }
            &Op::SumSq(a) => {
                if wants(a) {
                    let xs = self.nodes[a].value.data();
                    let two = T::from_f64c(2.0);
                    let out = acc!(a);
                    for (o, &x) in out.iter_mut().zip(xs) {
                        *o = *o + two * x * g[0];
                    }
                }
            }
            &Op::LogSigmoid(a) => {
                if wants(a) {
                    let xs = self.nodes[a].value.data();
                    let out = acc!(a);
                    for ((o, &dy), &x) in out.iter_mut().zip(g).zip(xs) {
                        // d/dx ln σ(x) = σ(-x)
                        *o = *o + dy * sigmoid(-x);
                    }
                }
            }
        }
    }
}

fn gelu_consts<T: Scalar>() -> (T, T) {
    (T::from_f64c((2.0 / std::f64::consts::PI).sqrt()), T::from_f64c(0.044715))
}

pub(crate) fn gelu_fwd<T: Scalar>(x: T) -> T {
    let (k, a) = gelu_consts::<T>();
    let half = T::from_f64c(0.5);
    half * x * (T::one() + (k * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let (k, a) = gelu_consts::<T>();
    let half = T::from_f64c(0.5);
    let three = T::from_f64c(3.0);
    let t = (k * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + three * a * x * x)
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn log_sigmoid<T: Scalar>(x: T) -> T {
    x.min(T::zero()) - (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_gradient_six_at_three() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let c = g.constant(Tensor::scalar(5.0));
        let zero = g.scale(x, 0.0);
        let y = g.add(zero, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 0.0);
    }

    #[test]
    fn shared_consumer_sums_paths() {
        // x·x through one node and x² through sum_sq agree.
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(-1.7));
        let a = g.mul(x, x).unwrap();
        let b = g.sum_sq(x);
        let ga = g.backward(a).unwrap().get(x).unwrap().item();
        let gb = g.backward(b).unwrap().get(x).unwrap().item();
        assert_eq!(ga, gb);
        assert!((ga + 3.4).abs() < 1e-12);
    }

    #[test]
    fn backward_is_rerunnable() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let y = g.sum_sq(x);
        let first = g.backward(y).unwrap().get(x).unwrap().clone();
        let second = g.backward(y).unwrap().get(x).unwrap().clone();
        assert_eq!(first, second);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn nan_reports_node_index() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(f64::NAN));
        let y = g.scale(x, 2.0);
        let z = g.sum(y);
        match g.backward(z) {
            Err(Error::Numeric { node, .. }) => assert!(node <= z.index()),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(4.0));
        let y = g.mul(x, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().item(), 4.0);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(-1000.0f64) + 1000.0).abs() < 1e-9);
        assert!(log_sigmoid(1000.0f64).abs() < 1e-12);
        assert!((log_sigmoid(0.0f64) + std::f64::consts::LN_2).abs() < 1e-15);
    }
}
