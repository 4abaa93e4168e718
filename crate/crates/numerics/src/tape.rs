//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward computation. Handles
//! ([`Var`]) are plain indices into the tape, so they are `Copy` and cheap to
//! pass around. [`Tape::backward`] walks the record in reverse and returns a
//! [`Gradients`] table holding the gradient of every node that influences the
//! loss, plus a zero gradient for every bound parameter that does not.
//!
//! The op set is exactly what the model needs: matrix products, elementwise
//! arithmetic and activations, row softmax with an optional causal mask,
//! concatenation and slicing, row gathers, column reductions
//! (mean/max/min/std), RMS normalization and a fused DistMult message-passing
//! kernel for sparse graphs.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{NumericsError, Result};
use crate::params::ParamId;
use crate::real::Real;
use crate::tensor::{gemm_into, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Directed typed edges for [`Tape::message_pass`]: the message along edge
/// `e` is `states[src[e]] ⊙ feats[kind[e]]`, summed into row `dst[e]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EdgeIndex {
    pub src: Vec<usize>,
    pub kind: Vec<usize>,
    pub dst: Vec<usize>,
}

impl EdgeIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, src: usize, kind: usize, dst: usize) {
        self.src.push(src);
        self.kind.push(kind);
        self.dst.push(dst);
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Copy without the edges whose position is flagged in `drop`.
    pub fn without(&self, drop: &[usize]) -> Self {
        let mut out = Self::new();
        for e in 0..self.len() {
            if !drop.contains(&e) {
                out.push(self.src[e], self.kind[e], self.dst[e]);
            }
        }
        out
    }
}

/// Column visibility for [`Tape::softmax_rows`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mask {
    /// The first `prefix` columns are visible to every row; column
    /// `prefix + j` is visible to row `i` only when `j <= i`.
    Causal { prefix: usize },
}

impl Mask {
    fn visible(self, row: usize, col: usize) -> bool {
        match self {
            Mask::Causal { prefix } => col < prefix || col - prefix <= row,
        }
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Silu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { a: Var, start: usize },
    Reshape(Var),
    GatherRows { a: Var, idx: Rc<[usize]> },
    MessagePass { states: Var, feats: Var, edges: Arc<EdgeIndex> },
    MeanRows(Var),
    ArgRows { a: Var, arg: Vec<usize> },
    StdRows(Var),
    SumAll(Var),
    MeanAll(Var),
    RmsNorm { a: Var, eps: T },
}

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward computation.
pub struct Tape<T: Real = f64> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.item()
    }

    /// A constant: no gradient flows into it.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free input whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A trainable parameter leaf; always present in [`Gradients::params`].
    pub fn param(&self, id: ParamId, value: Tensor<T>) -> Var {
        self.push(value, Op::Param(id), true)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, true)
    }

    pub fn matmul_t(&self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let out = self.value(a).matmul_t(ta, &self.value(b), tb)?;
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, self.rg(&[a, b])))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(NumericsError::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(&self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), self.rg(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(&self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), self.rg(&[a, b])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(&self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), self.rg(&[a, b])))
    }

    fn row_broadcast(&self, a: Var, row: Var, what: &str) -> Result<(Rc<Tensor<T>>, Rc<Tensor<T>>)> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(NumericsError::Shape(format!(
                "{what}: row {:?} against {:?}",
                vr.shape(),
                va.shape()
            )));
        }
        Ok((va, vr))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = self.row_broadcast(a, row, "add_row")?;
        let mut out = (*va).clone();
        for i in 0..out.rows() {
            for (x, &r) in out.row_mut(i).iter_mut().zip(vr.data()) {
                *x = *x + r;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row), self.rg(&[a, row])))
    }

    /// Multiplies every row of `a` elementwise by a `1 × n` row.
    pub fn mul_row(&self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = self.row_broadcast(a, row, "mul_row")?;
        let mut out = (*va).clone();
        for i in 0..out.rows() {
            for (x, &r) in out.row_mut(i).iter_mut().zip(vr.data()) {
                *x = *x * r;
            }
        }
        Ok(self.push(out, Op::MulRow(a, row), self.rg(&[a, row])))
    }

    pub fn scale(&self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), self.rg(&[a]))
    }

    pub fn relu(&self, a: Var) -> Var {
        // written so that NaN passes through instead of clamping to zero
        let out = self.value(a).map(|x| if x <= T::zero() { T::zero() } else { x });
        self.push(out, Op::Relu(a), self.rg(&[a]))
    }

    pub fn silu(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a), self.rg(&[a]))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), self.rg(&[a]))
    }

    /// `log σ(x)`, evaluated without forming `σ(x)`.
    pub fn log_sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).map(log_sigmoid);
        self.push(out, Op::LogSigmoid(a), self.rg(&[a]))
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        self.push(out, Op::Exp(a), self.rg(&[a]))
    }

    pub fn log(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.ln());
        self.push(out, Op::Log(a), self.rg(&[a]))
    }

    /// Row-wise softmax; masked entries get probability exactly zero.
    pub fn softmax_rows(&self, a: Var, mask: Option<Mask>) -> Var {
        let va = self.value(a);
        let mut out = Tensor::zeros(va.rows(), va.cols());
        for i in 0..va.rows() {
            let row = va.row(i);
            let visible = |j: usize| mask.is_none_or(|m| m.visible(i, j));
            let mut max = T::neg_infinity();
            for (j, &x) in row.iter().enumerate() {
                if visible(j) && x > max {
                    max = x;
                }
            }
            if max == T::neg_infinity() {
                continue;
            }
            let dst = out.row_mut(i);
            let mut total = T::zero();
            for (j, &x) in row.iter().enumerate() {
                if visible(j) {
                    let e = (x - max).exp();
                    dst[j] = e;
                    total = total + e;
                }
            }
            for d in dst.iter_mut() {
                *d = *d / total;
            }
        }
        self.push(out, Op::Softmax(a), self.rg(&[a]))
    }

    pub fn log_softmax_rows(&self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = Tensor::zeros(va.rows(), va.cols());
        for i in 0..va.rows() {
            let row = va.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            for (d, &x) in out.row_mut(i).iter_mut().zip(row) {
                *d = x - lse;
            }
        }
        self.push(out, Op::LogSoftmax(a), self.rg(&[a]))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let rows = values.first().map_or(0, |v| v.rows());
        if values.iter().any(|v| v.rows() != rows) {
            return Err(NumericsError::Shape("concat_cols: row counts differ".into()));
        }
        let cols: usize = values.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(i));
            }
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), self.rg(parts)))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let cols = values.first().map_or(0, |v| v.cols());
        if values.iter().any(|v| v.cols() != cols && !v.is_empty()) {
            return Err(NumericsError::Shape("concat_rows: column counts differ".into()));
        }
        let rows: usize = values.iter().map(|v| v.rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for v in &values {
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), self.rg(parts)))
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if start + len > va.rows() {
            return Err(NumericsError::Shape(format!(
                "slice_rows {start}..{} of {} rows",
                start + len,
                va.rows()
            )));
        }
        let c = va.cols();
        let out = Tensor::from_vec(len, c, va.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(out, Op::SliceRows { a, start }, self.rg(&[a])))
    }

    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = (*self.value(a)).clone().reshape(rows, cols)?;
        Ok(self.push(out, Op::Reshape(a), self.rg(&[a])))
    }

    /// Stacks `a[idx[0]], a[idx[1]], ...`; indices may repeat.
    pub fn gather_rows(&self, a: Var, idx: impl Into<Rc<[usize]>>) -> Result<Var> {
        let idx: Rc<[usize]> = idx.into();
        let va = self.value(a);
        let c = va.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            if i >= va.rows() {
                return Err(NumericsError::Shape(format!(
                    "gather_rows index {i} out of {} rows",
                    va.rows()
                )));
            }
            data.extend_from_slice(va.row(i));
        }
        let out = Tensor::from_vec(idx.len(), c, data)?;
        Ok(self.push(out, Op::GatherRows { a, idx }, self.rg(&[a])))
    }

    /// Sum-aggregated DistMult messages: `out[dst] += states[src] ⊙ feats[kind]`.
    pub fn message_pass(
        &self,
        states: Var,
        feats: Var,
        edges: Arc<EdgeIndex>,
        out_rows: usize,
    ) -> Result<Var> {
        let (vs, vf) = (self.value(states), self.value(feats));
        if vs.cols() != vf.cols() {
            return Err(NumericsError::Shape(format!(
                "message_pass: states {:?} vs edge features {:?}",
                vs.shape(),
                vf.shape()
            )));
        }
        let d = vs.cols();
        let mut out = Tensor::zeros(out_rows, d);
        for e in 0..edges.len() {
            let (s, k, t) = (edges.src[e], edges.kind[e], edges.dst[e]);
            if s >= vs.rows() || k >= vf.rows() || t >= out_rows {
                return Err(NumericsError::Shape(format!("message_pass: edge {e} out of range")));
            }
            let (src, feat) = (vs.row(s), vf.row(k));
            for ((o, &x), &f) in out.row_mut(t).iter_mut().zip(src).zip(feat) {
                *o = *o + x * f;
            }
        }
        Ok(self.push(
            out,
            Op::MessagePass {
                states,
                feats,
                edges,
            },
            self.rg(&[states, feats]),
        ))
    }

    fn nonempty(&self, a: Var) -> Result<Rc<Tensor<T>>> {
        let va = self.value(a);
        if va.rows() == 0 {
            return Err(NumericsError::EmptyReduction);
        }
        Ok(va)
    }

    /// Column means, `L × d → 1 × d`.
    pub fn mean_rows(&self, a: Var) -> Result<Var> {
        let va = self.nonempty(a)?;
        let n = T::of(va.rows() as f64);
        let out = Tensor::row_vector(
            (0..va.cols())
                .map(|j| (0..va.rows()).map(|i| va.get(i, j)).sum::<T>() / n)
                .collect(),
        );
        Ok(self.push(out, Op::MeanRows(a), self.rg(&[a])))
    }

    fn arg_rows(&self, a: Var, better: impl Fn(T, T) -> bool) -> Result<Var> {
        let va = self.nonempty(a)?;
        let mut arg = vec![0usize; va.cols()];
        for (j, best) in arg.iter_mut().enumerate() {
            for i in 1..va.rows() {
                if better(va.get(i, j), va.get(*best, j)) {
                    *best = i;
                }
            }
        }
        let out = Tensor::row_vector(arg.iter().enumerate().map(|(j, &i)| va.get(i, j)).collect());
        Ok(self.push(out, Op::ArgRows { a, arg }, self.rg(&[a])))
    }

    /// Column maxima; the gradient goes to the first maximal row.
    pub fn max_rows(&self, a: Var) -> Result<Var> {
        self.arg_rows(a, |x, best| x > best)
    }

    /// Column minima; the gradient goes to the first minimal row.
    pub fn min_rows(&self, a: Var) -> Result<Var> {
        self.arg_rows(a, |x, best| x < best)
    }

    /// Column population standard deviation (divides by `L`). A single row
    /// yields zeros, and the gradient is defined as zero wherever the
    /// deviation is zero.
    pub fn std_rows(&self, a: Var) -> Result<Var> {
        let va = self.nonempty(a)?;
        let out = Tensor::row_vector(column_std(&va));
        Ok(self.push(out, Op::StdRows(a), self.rg(&[a])))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a), self.rg(&[a]))
    }

    pub fn mean_all(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(NumericsError::EmptyReduction);
        }
        let out = Tensor::scalar(va.sum() / T::of(va.len() as f64));
        Ok(self.push(out, Op::MeanAll(a), self.rg(&[a])))
    }

    /// Per-row `x / sqrt(mean(x²) + eps)`.
    pub fn rms_norm(&self, a: Var, eps: f64) -> Var {
        let eps = T::of(eps);
        let va = self.value(a);
        let mut out = (*va).clone();
        for i in 0..out.rows() {
            let r = rms_inv(va.row(i), eps);
            for x in out.row_mut(i) {
                *x = *x * r;
            }
        }
        self.push(out, Op::RmsNorm { a, eps }, self.rg(&[a]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let [rows, cols] = nodes[loss.0].value.shape();
        if rows != 1 || cols != 1 {
            return Err(NumericsError::NotScalar { rows, cols });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &node.op, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut params = BTreeMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if let Op::Param(pid) = node.op {
                let g = grads[id]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(node.value.rows(), node.value.cols()));
                match params.entry(pid) {
                    std::collections::btree_map::Entry::Vacant(e) => {
                        e.insert(g);
                    }
                    std::collections::btree_map::Entry::Occupied(mut e) => {
                        e.get_mut().add_assign(&g);
                    }
                }
            }
        }
        Ok(Gradients { grads, params })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    params: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to any recorded node, if it
    /// influences the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor<T>> {
        self.params
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn log_sigmoid<T: Real>(x: T) -> T {
    x.min(T::zero()) - (T::one() + (-x.abs()).exp()).ln()
}

fn rms_inv<T: Real>(row: &[T], eps: T) -> T {
    let n = T::of(row.len().max(1) as f64);
    let ms = row.iter().map(|&x| x * x).sum::<T>() / n;
    T::one() / (ms + eps).sqrt()
}

pub(crate) fn column_std<T: Real>(v: &Tensor<T>) -> Vec<T> {
    let n = T::of(v.rows() as f64);
    (0..v.cols())
        .map(|j| {
            if v.rows() == 1 {
                return T::zero();
            }
            let mean = (0..v.rows()).map(|i| v.get(i, j)).sum::<T>() / n;
            let var = (0..v.rows())
                .map(|i| {
                    let c = v.get(i, j) - mean;
                    c * c
                })
                .sum::<T>()
                / n;
            var.sqrt()
        })
        .collect()
}

fn slot<'a, T: Real>(
    grads: &'a mut [Option<Tensor<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> Option<&'a mut Tensor<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(node.value.rows(), node.value.cols())))
}

fn accumulate<T: Real>(
    grads: &mut [Option<Tensor<T>>],
    nodes: &[Node<T>],
    v: Var,
    f: impl FnOnce(&mut Tensor<T>),
) {
    if let Some(g) = slot(grads, nodes, v) {
        f(g);
    }
}

fn elementwise<T: Real>(
    grads: &mut [Option<Tensor<T>>],
    nodes: &[Node<T>],
    a: Var,
    g: &Tensor<T>,
    d: impl Fn(T, T) -> T,
) {
    let x = Rc::clone(&nodes[a.0].value);
    accumulate(grads, nodes, a, |ga| {
        for ((acc, &gi), &xi) in ga.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
            *acc = *acc + gi * d(xi, gi);
        }
    });
}

fn backprop<T: Real>(
    nodes: &[Node<T>],
    id: usize,
    op: &Op<T>,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let out = Rc::clone(&nodes[id].value);
    match op {
        Op::Leaf | Op::Param(_) => {}
        Op::MatMul { a, b, ta, tb } => {
            let (va, vb) = (Rc::clone(&nodes[a.0].value), Rc::clone(&nodes[b.0].value));
            let one = T::one();
            accumulate(grads, nodes, *a, |ga| match (ta, tb) {
                (false, false) => gemm_into(g, false, &vb, true, one, one, ga),
                (false, true) => gemm_into(g, false, &vb, false, one, one, ga),
                (true, false) => gemm_into(&vb, false, g, true, one, one, ga),
                (true, true) => gemm_into(&vb, true, g, true, one, one, ga),
            });
            accumulate(grads, nodes, *b, |gb| match (ta, tb) {
                (false, false) => gemm_into(&va, true, g, false, one, one, gb),
                (false, true) => gemm_into(g, true, &va, false, one, one, gb),
                (true, false) => gemm_into(&va, false, g, false, one, one, gb),
                (true, true) => gemm_into(g, true, &va, true, one, one, gb),
            });
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, |ga| ga.add_assign(g));
            accumulate(grads, nodes, *b, |gb| gb.add_assign(g));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, |ga| ga.add_assign(g));
            accumulate(grads, nodes, *b, |gb| {
                for (acc, &gi) in gb.data_mut().iter_mut().zip(g.data()) {
                    *acc = *acc - gi;
                }
            });
        }
        Op::Mul(a, b) => {
            let (va, vb) = (Rc::clone(&nodes[a.0].value), Rc::clone(&nodes[b.0].value));
            accumulate(grads, nodes, *a, |ga| {
                for ((acc, &gi), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                    *acc = *acc + gi * y;
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for ((acc, &gi), &x) in gb.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                    *acc = *acc + gi * x;
                }
            });
        }
        Op::AddRow(a, row) => {
            accumulate(grads, nodes, *a, |ga| ga.add_assign(g));
            accumulate(grads, nodes, *row, |gr| {
                for i in 0..g.rows() {
                    for (acc, &gi) in gr.data_mut().iter_mut().zip(g.row(i)) {
                        *acc = *acc + gi;
                    }
                }
            });
        }
        Op::MulRow(a, row) => {
            let (va, vr) = (Rc::clone(&nodes[a.0].value), Rc::clone(&nodes[row.0].value));
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..g.rows() {
                    for ((acc, &gi), &r) in ga.row_mut(i).iter_mut().zip(g.row(i)).zip(vr.data()) {
                        *acc = *acc + gi * r;
                    }
                }
            });
            accumulate(grads, nodes, *row, |gr| {
                for i in 0..g.rows() {
                    for ((acc, &gi), &x) in gr.data_mut().iter_mut().zip(g.row(i)).zip(va.row(i)) {
                        *acc = *acc + gi * x;
                    }
                }
            });
        }
        Op::Scale(a, s) => {
            let s = *s;
            accumulate(grads, nodes, *a, |ga| {
                for (acc, &gi) in ga.data_mut().iter_mut().zip(g.data()) {
                    *acc = *acc + gi * s;
                }
            });
        }
        Op::Relu(a) => elementwise(grads, nodes, *a, g, |x, _| {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }),
        Op::Silu(a) => elementwise(grads, nodes, *a, g, |x, _| {
            let s = sigmoid(x);
            s * (T::one() + x * (T::one() - s))
        }),
        Op::Sigmoid(a) => {
            accumulate(grads, nodes, *a, |ga| {
                for ((acc, &gi), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    *acc = *acc + gi * y * (T::one() - y);
                }
            });
        }
        Op::LogSigmoid(a) => elementwise(grads, nodes, *a, g, |x, _| sigmoid(-x)),
        Op::Exp(a) => {
            accumulate(grads, nodes, *a, |ga| {
                for ((acc, &gi), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    *acc = *acc + gi * y;
                }
            });
        }
        Op::Log(a) => elementwise(grads, nodes, *a, g, |x, _| T::one() / x),
        Op::Softmax(a) => {
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..g.rows() {
                    let (p, gi) = (out.row(i), g.row(i));
                    let dot: T = p.iter().zip(gi).map(|(&p, &g)| p * g).sum();
                    for ((acc, &pj), &gj) in ga.row_mut(i).iter_mut().zip(p).zip(gi) {
                        *acc = *acc + pj * (gj - dot);
                    }
                }
            });
        }
        Op::LogSoftmax(a) => {
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..g.rows() {
                    let (lp, gi) = (out.row(i), g.row(i));
                    let total: T = gi.iter().copied().sum();
                    for ((acc, &l), &gj) in ga.row_mut(i).iter_mut().zip(lp).zip(gi) {
                        *acc = *acc + gj - l.exp() * total;
                    }
                }
            });
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for &p in parts {
                let c = nodes[p.0].value.cols();
                accumulate(grads, nodes, p, |gp| {
                    for i in 0..g.rows() {
                        for (acc, &gi) in gp.row_mut(i).iter_mut().zip(&g.row(i)[offset..offset + c]) {
                            *acc = *acc + gi;
                        }
                    }
                });
                offset += c;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p.0].value.len();
                accumulate(grads, nodes, p, |gp| {
                    for (acc, &gi) in gp.data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                        *acc = *acc + gi;
                    }
                });
                offset += n;
            }
        }
        Op::SliceRows { a, start } => {
            let start = *start;
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..g.rows() {
                    for (acc, &gi) in ga.row_mut(start + i).iter_mut().zip(g.row(i)) {
                        *acc = *acc + gi;
                    }
                }
            });
        }
        Op::Reshape(a) => {
            accumulate(grads, nodes, *a, |ga| {
                for (acc, &gi) in ga.data_mut().iter_mut().zip(g.data()) {
                    *acc = *acc + gi;
                }
            });
        }
        Op::GatherRows { a, idx } => {
            accumulate(grads, nodes, *a, |ga| {
                for (k, &i) in idx.iter().enumerate() {
                    for (acc, &gi) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *acc = *acc + gi;
                    }
                }
            });
        }
        Op::MessagePass {
            states,
            feats,
            edges,
        } => {
            let (vs, vf) = (Rc::clone(&nodes[states.0].value), Rc::clone(&nodes[feats.0].value));
            accumulate(grads, nodes, *states, |gs| {
                for e in 0..edges.len() {
                    let (s, k, t) = (edges.src[e], edges.kind[e], edges.dst[e]);
                    for ((acc, &gt), &f) in gs.row_mut(s).iter_mut().zip(g.row(t)).zip(vf.row(k)) {
                        *acc = *acc + gt * f;
                    }
                }
            });
            accumulate(grads, nodes, *feats, |gf| {
                for e in 0..edges.len() {
                    let (s, k, t) = (edges.src[e], edges.kind[e], edges.dst[e]);
                    for ((acc, &gt), &x) in gf.row_mut(k).iter_mut().zip(g.row(t)).zip(vs.row(s)) {
                        *acc = *acc + gt * x;
                    }
                }
            });
        }
        Op::MeanRows(a) => {
            let rows = nodes[a.0].value.rows();
            let inv = T::one() / T::of(rows as f64);
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..rows {
                    for (acc, &gj) in ga.row_mut(i).iter_mut().zip(g.data()) {
                        *acc = *acc + gj * inv;
                    }
                }
            });
        }
        Op::ArgRows { a, arg } => {
            accumulate(grads, nodes, *a, |ga| {
                let cols = ga.cols();
                let data = ga.data_mut();
                for (j, &i) in arg.iter().enumerate() {
                    data[i * cols + j] = data[i * cols + j] + g.data()[j];
                }
            });
        }
        Op::StdRows(a) => {
            let va = Rc::clone(&nodes[a.0].value);
            let rows = va.rows();
            let n = T::of(rows as f64);
            accumulate(grads, nodes, *a, |ga| {
                for j in 0..va.cols() {
                    let sd = out.data()[j];
                    if rows == 1 || sd == T::zero() {
                        continue;
                    }
                    let mean = (0..rows).map(|i| va.get(i, j)).sum::<T>() / n;
                    let coef = g.data()[j] / (n * sd);
                    for i in 0..rows {
                        let cur = ga.get(i, j);
                        ga.set(i, j, cur + coef * (va.get(i, j) - mean));
                    }
                }
            });
        }
        Op::SumAll(a) => {
            let gi = g.item();
            accumulate(grads, nodes, *a, |ga| {
                for acc in ga.data_mut() {
                    *acc = *acc + gi;
                }
            });
        }
        Op::MeanAll(a) => {
            let n = T::of(nodes[a.0].value.len() as f64);
            let gi = g.item() / n;
            accumulate(grads, nodes, *a, |ga| {
                for acc in ga.data_mut() {
                    *acc = *acc + gi;
                }
            });
        }
        Op::RmsNorm { a, eps } => {
            let va = Rc::clone(&nodes[a.0].value);
            let eps = *eps;
            let n = T::of(va.cols().max(1) as f64);
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..va.rows() {
                    let x = va.row(i);
                    let r = rms_inv(x, eps);
                    let gx: T = g.row(i).iter().zip(x).map(|(&g, &x)| g * x).sum();
                    let k = r * r * r * gx / n;
                    for ((acc, &gi), &xi) in ga.row_mut(i).iter_mut().zip(g.row(i)).zip(x) {
                        *acc = *acc + r * gi - k * xi;
                    }
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn linear_map_gradient_is_outer_product_structure() {
        // loss = sum(W·x): dW[i][j] = x[j]
        let tape = Tape::<f64>::new();
        let w = tape.param(ParamId(0), t(2, 3, &[1., 2., 3., 4., 5., 6.]));
        let x = tape.constant(t(3, 1, &[0.5, -1.0, 2.0]));
        let y = tape.matmul(w, x).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        let gw = &grads.params()[&ParamId(0)];
        assert_eq!(gw, &t(2, 3, &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]));
        assert!(grads.wrt(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::<f64>::new();
        let x = tape.input(t(1, 2, &[1.0, 2.0]));
        assert!(matches!(
            tape.backward(x),
            Err(NumericsError::NotScalar { rows: 1, cols: 2 })
        ));
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let tape = Tape::<f64>::new();
        let _p = tape.param(ParamId(7), t(1, 2, &[1.0, 2.0]));
        let x = tape.input(t(1, 1, &[3.0]));
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.params()[&ParamId(7)], Tensor::zeros(1, 2));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_respect_causal_mask() {
        let tape = Tape::<f64>::new();
        let x = tape.input(Tensor::from_fn(4, 6, |i, j| (i as f64 * 0.7 - j as f64 * 0.3).sin()));
        let p = tape.value(tape.softmax_rows(x, Some(Mask::Causal { prefix: 2 })));
        for i in 0..4 {
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            for j in 0..6 {
                if j >= 2 && j - 2 > i {
                    assert_eq!(p.get(i, j), 0.0);
                } else {
                    assert!(p.get(i, j) > 0.0);
                }
            }
        }
    }

    #[test]
    fn max_and_min_route_gradient_to_first_tied_row() {
        let tape = Tape::<f64>::new();
        let x = tape.input(t(3, 2, &[1.0, 5.0, 3.0, 5.0, 3.0, -1.0]));
        let mx = tape.max_rows(x).unwrap();
        let mn = tape.min_rows(x).unwrap();
        let both = tape.concat_cols(&[mx, mn]).unwrap();
        let loss = tape.sum_all(both);
        let g = tape.backward(loss).unwrap();
        // max col0 -> row1 (first 3.0), max col1 -> row0 (first 5.0),
        // min col0 -> row0, min col1 -> row2.
        assert_eq!(g.wrt(x).unwrap(), &t(3, 2, &[1.0, 1.0, 1.0, 0.0, 0.0, 1.0]));
    }

    #[test]
    fn std_of_single_row_is_zero_with_zero_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.input(t(1, 3, &[1.0, -2.0, 4.0]));
        let s = tape.std_rows(x).unwrap();
        assert_eq!(*tape.value(s), Tensor::zeros(1, 3));
        let loss = tape.sum_all(s);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &Tensor::zeros(1, 3));
    }

    #[test]
    fn std_of_symmetric_pair_is_absolute_value() {
        let tape = Tape::<f64>::new();
        let v = [0.3, -1.5, 2.0, 0.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let x = tape.input(Tensor::from_rows(&[v.to_vec(), neg]).unwrap());
        let s = tape.value(tape.std_rows(x).unwrap());
        for (a, b) in s.data().iter().zip(v) {
            assert!((a - b.abs()).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_reduction_is_an_error() {
        let tape = Tape::<f64>::new();
        let x = tape.input(Tensor::zeros(0, 3));
        assert!(matches!(tape.std_rows(x), Err(NumericsError::EmptyReduction)));
        assert!(tape.mean_rows(x).is_err());
    }

    #[test]
    fn message_pass_sums_distmult_products() {
        let tape = Tape::<f64>::new();
        let states = tape.input(t(3, 2, &[1., 2., 3., 4., 5., 6.]));
        let feats = tape.input(t(2, 2, &[10., 1., -1., 0.5]));
        let mut edges = EdgeIndex::new();
        edges.push(0, 0, 2);
        edges.push(1, 1, 2);
        edges.push(2, 0, 0);
        let out = tape.message_pass(states, feats, Arc::new(edges), 3).unwrap();
        assert_eq!(*tape.value(out), t(3, 2, &[50., 6., 0., 0., 10. - 3., 2. + 2.]));
    }
}
