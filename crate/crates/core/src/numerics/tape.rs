//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Each
//! recorded node only ever refers to nodes created before it, so walking the
//! node list backwards is a valid topological order and visits every node
//! exactly once. Leaves may borrow their data (model parameters stay in their
//! store during the pass) or own it (inputs, constants).

use std::borrow::Cow;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    AddRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Relu(Var),
    Softmax {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    MaskedSoftmax {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Entropy(Var),
    MeanPool {
        x: Var,
        mask: Vec<bool>,
        count: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Transpose(..) => "transpose",
            Op::Relu(..) => "relu",
            Op::Softmax { .. } => "softmax",
            Op::MaskedSoftmax { .. } => "masked_softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Entropy(..) => "entropy",
            Op::MeanPool { .. } => "mean_pool",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Reshape(..) => "reshape",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MatMul(a, b)
            | Op::MatMulNt(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Transpose(x)
            | Op::Relu(x)
            | Op::Entropy(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x) => vec![*x],
            Op::Softmax { x, .. }
            | Op::MaskedSoftmax { x }
            | Op::MeanPool { x, .. }
            | Op::SliceCols { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Gather { table, .. } => vec![*table],
            Op::ConcatCols(parts) => parts.clone(),
        }
    }
}

struct Node<'p> {
    shape: Vec<usize>,
    value: Cow<'p, [f64]>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Computation tape recording primitive applications for one forward pass.
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    fully_masked_rows: usize,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fully_masked_rows: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of attention query rows that had no attendable key. Those rows
    /// produce all-zero weights instead of NaN.
    pub fn fully_masked_rows(&self) -> usize {
        self.fully_masked_rows
    }

    /// Adds an owned leaf; its gradient is tracked if the tensor asks for it.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        self.push_leaf(shape, Cow::Owned(tensor.into_data()), requires_grad)
    }

    /// Adds an owned leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let shape = tensor.shape().to_vec();
        self.push_leaf(shape, Cow::Owned(tensor.into_data()), false)
    }

    /// Adds a leaf that borrows `tensor` for the life of the tape.
    pub fn leaf_ref(&mut self, tensor: &'p Tensor, requires_grad: bool) -> Var {
        self.push_leaf(
            tensor.shape().to_vec(),
            Cow::Borrowed(tensor.data()),
            requires_grad,
        )
    }

    /// A gradient-free leaf holding the current value of `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let node = &self.nodes[x.0];
        let shape = node.shape.clone();
        let value = node.value.clone();
        self.push_leaf(shape, value, false)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Cow<'p, [f64]>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            grad: requires_grad.then(|| vec![0.0; value.len()]),
            shape,
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, x: Var) -> &[f64] {
        &self.nodes[x.0].value
    }

    pub fn shape(&self, x: Var) -> &[usize] {
        &self.nodes[x.0].shape
    }

    /// Value of a one-element node.
    pub fn scalar(&self, x: Var) -> f64 {
        let v = self.value(x);
        debug_assert_eq!(v.len(), 1);
        v[0]
    }

    pub fn tensor(&self, x: Var) -> Tensor {
        Tensor::new(self.shape(x).to_vec(), self.value(x).to_vec())
            .expect("tape values are finite and well shaped")
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, x: Var) -> Option<&[f64]> {
        self.nodes[x.0].grad.as_deref()
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.nodes[x.0].requires_grad
    }

    pub fn clear_grads(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn dims2(&self, x: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(x) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension(format!("{what} expects a matrix, got shape {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(self.shape(a).to_vec(), value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        self.push(self.shape(a).to_vec(), value, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.push(self.shape(a).to_vec(), value, Op::Mul(a, b))
    }

    /// `x[r×c] + bias[c]`, broadcasting the bias over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.dims2(x, "add_row")?;
        if self.shape(bias) != [c] {
            return Err(Error::Dimension(format!(
                "add_row: bias {:?} does not match {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.value(bias);
        let value = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv))
            .collect();
        self.push(self.shape(x).to_vec(), value, Op::AddRow(x, bias))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let value = self.value(x).iter().map(|v| v * factor).collect();
        self.push(self.shape(x).to_vec(), value, Op::Scale(x, factor))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: inner dimensions differ for {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let value = kernels::matmul(self.value(a), self.value(b), m, k, n);
        self.push(vec![m, n], value, Op::MatMul(a, b))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_nt: inner dimensions differ for {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let value = kernels::matmul_nt(self.value(a), self.value(b), m, k, n);
        self.push(vec![m, n], value, Op::MatMulNt(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let value = kernels::transpose(self.value(x), r, c);
        self.push(vec![c, r], value, Op::Transpose(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).iter().map(|v| v.max(0.0)).collect();
        self.push(self.shape(x).to_vec(), value, Op::Relu(x))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "softmax axis {axis} invalid for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut value = self.value(x).to_vec();
        let mut slice = vec![0.0; axis_len];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * axis_len + j) * inner + i;
                for (j, s) in slice.iter_mut().enumerate() {
                    *s = value[at(j)];
                }
                kernels::softmax_in_place(&mut slice);
                for (j, s) in slice.iter().enumerate() {
                    value[at(j)] = *s;
                }
            }
        }
        self.push(
            shape,
            value,
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            },
        )
    }

    /// Row softmax of a matrix restricted to entries where `allowed` is true.
    /// Disallowed entries get exactly zero weight; a row with no allowed
    /// entry becomes all zeros and is counted in
    /// [`Tape::fully_masked_rows`].
    pub fn masked_softmax(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        let (r, c) = self.dims2(x, "masked_softmax")?;
        if allowed.len() != r * c {
            return Err(Error::Dimension(format!(
                "mask of {} entries for a {r}×{c} matrix",
                allowed.len()
            )));
        }
        let xs = self.value(x);
        let mut value = vec![0.0; r * c];
        let mut empty = 0;
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let keep = &allowed[i * c..(i + 1) * c];
            let max = row
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                empty += 1;
                continue;
            }
            let out = &mut value[i * c..(i + 1) * c];
            let mut total = 0.0;
            for j in 0..c {
                if keep[j] {
                    out[j] = (row[j] - max).exp();
                    total += out[j];
                }
            }
            out.iter_mut().for_each(|v| *v /= total);
        }
        self.fully_masked_rows += empty;
        self.push(vec![r, c], value, Op::MaskedSoftmax { x })
    }

    /// Mean cross-entropy of row-wise logits against target indices, computed
    /// through log-sum-exp. Rows whose target is `None` are skipped.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let (r, k) = match shape.as_slice() {
            [k] => (1, *k),
            [r, k] => (*r, *k),
            s => {
                return Err(Error::Dimension(format!(
                    "cross_entropy expects a vector or matrix, got {s:?}"
                )))
            }
        };
        if targets.len() != r {
            return Err(Error::Dimension(format!(
                "{} targets for {r} logit rows",
                targets.len()
            )));
        }
        if let Some(&index) = targets.iter().flatten().find(|&&t| t >= k) {
            return Err(Error::IndexOutOfRange { index, len: k });
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::Contract("cross_entropy with no targets".into()));
        }
        let xs = self.value(logits);
        let mut probs = vec![0.0; r * k];
        let mut total = 0.0;
        for (i, target) in targets.iter().enumerate() {
            let row = &xs[i * k..(i + 1) * k];
            let lse = kernels::log_sum_exp(row);
            for (p, v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
            if let Some(t) = target {
                total += lse - row[*t];
            }
        }
        self.push(
            vec![1],
            vec![total / count as f64],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        )
    }

    /// Shannon entropy `−Σ p ln p` of a probability vector, with `0·ln 0 = 0`.
    pub fn entropy(&mut self, p: Var) -> Result<Var> {
        let values = self.value(p);
        if self.shape(p).len() != 1 {
            return Err(Error::Dimension(format!(
                "entropy expects a vector, got {:?}",
                self.shape(p)
            )));
        }
        let total: f64 = values.iter().sum();
        if values.iter().any(|&v| v < 0.0) || (total - 1.0).abs() > 1e-4 {
            return Err(Error::Domain(format!(
                "entropy input is not a distribution (sum {total})"
            )));
        }
        let h = -values
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|v| v * v.ln())
            .sum::<f64>();
        self.push(vec![1], vec![h], Op::Entropy(p))
    }

    /// Mean over the rows of `x[n×d]` whose mask entry is true.
    pub fn mean_pool(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (n, d) = self.dims2(x, "mean_pool")?;
        if mask.len() != n {
            return Err(Error::Dimension(format!("mask of {} for {n} rows", mask.len())));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyPool);
        }
        let xs = self.value(x);
        let mut value = vec![0.0; d];
        for (row, _) in xs.chunks(d).zip(mask).filter(|(_, &m)| m) {
            for (acc, v) in value.iter_mut().zip(row) {
                *acc += v;
            }
        }
        value.iter_mut().for_each(|v| *v /= count as f64);
        self.push(
            vec![d],
            value,
            Op::MeanPool {
                x,
                mask: mask.to_vec(),
                count,
            },
        )
    }

    /// Per-row layer normalization followed by the affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::Dimension("layer_norm on rank-0 tensor".into()))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm: gain {:?} / bias {:?} do not match width {d}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut value = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                value[r * d + j] = g[j] * h + b[j];
            }
        }
        self.push(
            shape,
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Rows of `table[v×d]` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "gather")?;
        if let Some(&index) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::IndexOutOfRange { index, len: v });
        }
        if ids.is_empty() {
            return Err(Error::Dimension("gather with no ids".into()));
        }
        let t = self.value(table);
        let value = ids
            .iter()
            .flat_map(|&i| t[i * d..(i + 1) * d].iter().copied())
            .collect();
        self.push(
            vec![ids.len(), d],
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::Dimension(format!(
                "columns {start}..{} out of range for width {c}",
                start + len
            )));
        }
        let xs = self.value(x);
        let value = (0..r)
            .flat_map(|i| xs[i * c + start..i * c + start + len].iter().copied())
            .collect();
        self.push(vec![r, len], value, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let (r, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(Error::Dimension(format!("concat rows {pr} vs {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        self.push(vec![r, total], value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![m], Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let value = self.value(x).to_vec();
        self.push(shape, value, Op::Reshape(x))
    }

    /// Propagates `d loss / d node` back to every leaf that requires a
    /// gradient, adding into the leaf gradient slots.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                if let Some(slot) = self.nodes[i].grad.as_mut() {
                    for (s, v) in slot.iter_mut().zip(&g) {
                        *s += v;
                    }
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut send = |var: Var, contribution: Vec<f64>| {
            if !self.nodes[var.0].requires_grad {
                return;
            }
            match adj[var.0].as_mut() {
                Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                None => adj[var.0] = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                send(*a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                send(*b, g.iter().zip(av).map(|(g, a)| g * a).collect());
            }
            Op::AddRow(x, bias) => {
                let c = self.shape(*bias)[0];
                let mut db = vec![0.0; c];
                for row in g.chunks(c) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                send(*x, g.to_vec());
                send(*bias, db);
            }
            Op::Scale(x, f) => send(*x, g.iter().map(|v| v * f).collect()),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.nodes[a.0].requires_grad {
                    send(*a, kernels::matmul_nt(g, self.value(*b), m, n, k));
                }
                if self.nodes[b.0].requires_grad {
                    send(*b, kernels::matmul_tn(self.value(*a), g, m, k, n));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if self.nodes[a.0].requires_grad {
                    send(*a, kernels::matmul(g, self.value(*b), m, n, k));
                }
                if self.nodes[b.0].requires_grad {
                    send(*b, kernels::matmul_tn(g, self.value(*a), m, n, k));
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                send(*x, kernels::transpose(g, c, r));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                send(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            } => {
                let y = &node.value;
                let mut dx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for q in 0..*inner {
                        let at = |j: usize| (o * axis_len + j) * inner + q;
                        let dot: f64 = (0..*axis_len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..*axis_len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                send(*x, dx);
            }
            Op::MaskedSoftmax { x } => {
                let y = &node.value;
                let c = node.shape[1];
                let mut dx = vec![0.0; y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(*x, dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let k = probs.len() / targets.len();
                let scale = g[0] / *count as f64;
                let mut dx = vec![0.0; probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = t else { continue };
                    for j in 0..k {
                        dx[r * k + j] = scale * probs[r * k + j];
                    }
                    dx[r * k + t] -= scale;
                }
                send(*logits, dx);
            }
            Op::Entropy(p) => {
                let pv = self.value(*p);
                send(
                    *p,
                    pv.iter()
                        .map(|&v| if v > 0.0 { -g[0] * (v.ln() + 1.0) } else { 0.0 })
                        .collect(),
                );
            }
            Op::MeanPool { x, mask, count } => {
                let d = node.shape[0];
                let mut dx = vec![0.0; mask.len() * d];
                for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    for j in 0..d {
                        dx[r * d + j] = g[j] / *count as f64;
                    }
                }
                send(*x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let d = gv.len();
                let mut dx = vec![0.0; xhat.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for (r, inv) in inv_std.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                        let dh = gr[j] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        dx[r * d + j] =
                            inv / d as f64 * (d as f64 * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                send(*x, dx);
                send(*gain, dgain);
                send(*bias, dbias);
            }
            Op::Gather { table, ids } => {
                let (v, d) = (self.shape(*table)[0], self.shape(*table)[1]);
                let mut dt = vec![0.0; v * d];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
                send(*table, dt);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let len = node.shape[1];
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                send(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let r = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    let mut dp = Vec::with_capacity(r * w);
                    for i in 0..r {
                        dp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    offset += w;
                    send(p, dp);
                }
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                send(*x, vec![g[0] / n as f64; n]);
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).with_grad());
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.75).with_grad());
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.5]);
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0).with_grad());
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[8.0]);
        tape.clear_grads();
        assert_eq!(tape.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn disconnected_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0).with_grad());
        let unused = tape.leaf(t(vec![3], vec![1.0, 2.0, 3.0]).with_grad());
        let y = tape.scale(x, 3.0).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![2], vec![1.0, 2.0]).with_grad());
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn fully_masked_row_yields_zeros() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.masked_softmax(x, &[true, true, false, false]).unwrap();
        assert_eq!(&tape.value(y)[2..], &[0.0, 0.0]);
        assert_eq!(tape.fully_masked_rows(), 1);
    }

    #[test]
    fn entropy_rejects_non_distribution() {
        let mut tape = Tape::new();
        let p = tape.constant(t(vec![2], vec![0.7, 0.7]));
        assert!(matches!(tape.entropy(p), Err(Error::Domain(_))));
    }

    #[test]
    fn mean_pool_all_masked_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![2, 1], vec![1.0, 2.0]));
        assert!(matches!(tape.mean_pool(x, &[false, false]), Err(Error::EmptyPool)));
    }

    #[test]
    fn cross_entropy_index_out_of_range() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![3], vec![0.0; 3]));
        assert!(matches!(
            tape.cross_entropy(x, &[Some(3)]),
            Err(Error::IndexOutOfRange { index: 3, len: 3 })
        ));
    }

    #[test]
    fn softmax_on_bad_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![3], vec![0.0; 3]));
        assert!(matches!(tape.softmax(x, 1), Err(Error::Dimension(_))));
    }

    fn eval(build: impl FnOnce(&mut Tape<'_>) -> Var) -> Vec<f64> {
        let mut tape = Tape::new();
        let out = build(&mut tape);
        tape.value(out).to_vec()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        t(shape, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
    }

    #[test]
    fn matmul_identity_and_zero() {
        let out = eval(|tp| {
            let i = tp.leaf(t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
            let x = tp.leaf(t(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]));
            tp.matmul(i, x).unwrap()
        });
        assert_eq!(out, [3.0, 4.0, 5.0, 6.0]);
        let out = eval(|tp| {
            let a = tp.leaf(t(vec![1, 2], vec![1.0, 2.0]));
            let z = tp.leaf(t(vec![2, 1], vec![0.0, 0.0]));
            tp.matmul(a, z).unwrap()
        });
        assert_eq!(out, [0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_tensor(&mut rng, vec![3, 4]);
        let b = random_tensor(&mut rng, vec![4, 2]);
        let mut oracle = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..4 {
                    oracle[i * 2 + j] += a.get(&[i, k]) * b.get(&[k, j]);
                }
            }
        }
        let out = eval(|tp| {
            let a = tp.leaf(a.clone());
            let b = tp.leaf(b.clone());
            tp.matmul(a, b).unwrap()
        });
        assert!(close(&out, &oracle, 1e-12));
    }

    #[test]
    fn softmax_examples() {
        let sm = |v: Vec<f64>| {
            eval(|tp| {
                let x = tp.leaf(Tensor::vector(v).unwrap());
                tp.softmax(x, 0).unwrap()
            })
        };
        assert_eq!(sm(vec![0.0; 4]), [0.25; 4]);
        let big = sm(vec![1000.0, 0.0]);
        assert!((big[0] - 1.0).abs() < 1e-12 && big[1] >= 0.0 && big[1] < 1e-300);
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        let oracle: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp() / z).collect();
        assert!(close(&sm(vec![1.0, 2.0, 3.0]), &oracle, 1e-12));
    }

    #[test]
    fn mean_pool_examples() {
        let pool = |mask: &[bool]| {
            eval(|tp| {
                let x = tp.leaf(t(vec![2, 2], vec![1.0, 3.0, 5.0, 7.0]));
                tp.mean_pool(x, mask).unwrap()
            })
        };
        assert_eq!(pool(&[true, true]), [3.0, 5.0]);
        assert_eq!(pool(&[true, false]), [1.0, 3.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&mut rng, vec![5, 8]);
        let mask = [true, false, true, true, false];
        let mut oracle = vec![0.0; 8];
        for (r, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
            for c in 0..8 {
                oracle[c] += x.get(&[r, c]) / 3.0;
            }
        }
        let out = eval(|tp| {
            let x = tp.leaf(x.clone());
            tp.mean_pool(x, &mask).unwrap()
        });
        assert!(close(&out, &oracle, 1e-12));
    }

    #[test]
    fn layer_norm_examples() {
        let ln = |row: Vec<f64>, eps: f64| {
            let d = row.len();
            eval(|tp| {
                let x = tp.leaf(t(vec![1, d], row));
                let g = tp.leaf(Tensor::vector(vec![1.0; d]).unwrap());
                let b = tp.leaf(Tensor::vector(vec![0.0; d]).unwrap());
                tp.layer_norm(x, g, b, eps).unwrap()
            })
        };
        assert_eq!(ln(vec![2.5; 4], 1e-6), [0.0; 4]);
        assert!(close(&ln(vec![1.0, -1.0], 1e-15), &[1.0, -1.0], 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let row: Vec<f64> = (0..16).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let out = ln(row, 1e-6);
        let mean = out.iter().sum::<f64>() / 16.0;
        let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-4, "{mean} {var}");
    }

    fn ce(logits: Vec<f64>, target: usize) -> f64 {
        eval(|tp| {
            let x = tp.leaf(Tensor::vector(logits).unwrap());
            tp.cross_entropy(x, &[Some(target)]).unwrap()
        })[0]
    }

    fn entropy_of(p: Vec<f64>) -> f64 {
        eval(|tp| {
            let x = tp.leaf(Tensor::vector(p).unwrap());
            tp.entropy(x).unwrap()
        })[0]
    }

    #[test]
    fn cross_entropy_examples() {
        assert!(ce(vec![50.0, 0.0, 0.0, 0.0], 0) < 1e-20);
        assert!((ce(vec![0.0; 32], 7) - 32f64.ln()).abs() < 1e-12);
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        assert!((ce(vec![1.0, 2.0, 3.0], 1) - (z.ln() - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy_of(vec![0.0, 1.0, 0.0]), 0.0);
        assert!((entropy_of(vec![1.0 / 32.0; 32]) - 32f64.ln()).abs() < 1e-12);
        assert!((entropy_of(vec![0.5, 0.25, 0.25]) - 1.5 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn composite_mlp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = vec![
            random_tensor(&mut rng, vec![3, 4]),
            random_tensor(&mut rng, vec![4, 5]),
            random_tensor(&mut rng, vec![5]),
            random_tensor(&mut rng, vec![5, 3]),
        ];
        let err = crate::numerics::gradcheck::check_op(
            &inputs,
            |tp, v| {
                let h = tp.matmul(v[0], v[1])?;
                let h = tp.add_row(h, v[2])?;
                let h = tp.relu(h)?;
                let logits = tp.matmul(h, v[3])?;
                tp.cross_entropy(logits, &[Some(0), Some(2), Some(1)])
            },
            1e-5,
            9,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_ignores_shifts(
            xs in proptest::collection::vec(-30.0f64..30.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let sm = |v: Vec<f64>| eval(|tp| {
                let x = tp.leaf(Tensor::vector(v).unwrap());
                tp.softmax(x, 0).unwrap()
            });
            let p = sm(xs.clone());
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let q = sm(xs.iter().map(|x| x + shift).collect());
            prop_assert!(close(&p, &q, 1e-9));
        }

        #[test]
        fn entropy_within_bounds(ws in proptest::collection::vec(0.0f64..1.0, 2..16)) {
            let total: f64 = ws.iter().sum();
            prop_assume!(total > 1e-6);
            let k = ws.len() as f64;
            let h = entropy_of(ws.iter().map(|w| w / total).collect());
            prop_assert!(h >= 0.0 && h <= k.ln() + 1e-12);
        }

        #[test]
        fn cross_entropy_is_non_negative(
            xs in proptest::collection::vec(-20.0f64..20.0, 2..10),
            target in 0usize..10,
        ) {
            prop_assume!(target < xs.len());
            prop_assert!(ce(xs, target) >= 0.0);
        }
    }
}
