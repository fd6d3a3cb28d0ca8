//! Wengert-style tape: each op appends a node holding its forward value;
//! [`Tape::backward`] replays the list in reverse.

use super::kernels::{gelu, gelu_grad, gemm_nt, gemm_nt_into, transpose};
use super::{check_finite, Tensor};
use crate::error::{bail, Result};

/// Handle to a node recorded on a [`Tape`]. Only valid for the tape that
/// produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, inp: usize, out: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: f32 },
    Sum { a: Var },
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, cols: usize, xhat: Vec<f32>, rstd: Vec<f64> },
    Gelu { a: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f32> },
    BatchMatMul { a: Var, b: Var, groups: usize, m: usize, k: usize, n: usize, trans_b: bool },
    SplitHeads { qkv: Var, part: usize, batch: usize, seq: usize, heads: usize },
    MergeHeads { x: Var, batch: usize, seq: usize, heads: usize },
    Tokens { patches: Var, cls: Var, pos: Var, batch: usize, seq: usize, dim: usize },
    SelectRows { x: Var, stride: usize, offset: usize, cols: usize },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    requires_grad: bool,
    op: Op,
}

/// A single forward pass. Dropping the tape frees every intermediate.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    loss_f64: Vec<(usize, f64)>,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f32]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` (if any) into `tensor`'s gradient buffer.
    pub fn accumulate_into(&self, var: Var, tensor: &mut Tensor) -> Result<()> {
        match self.get(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
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

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// The loss recorded by [`Tape::cross_entropy`] before rounding to `f32`.
    pub fn loss_f64(&self, v: Var) -> Option<f64> {
        self.loss_f64.iter().find(|(i, _)| *i == v.0).map(|(_, l)| *l)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, requires_grad: bool, op: Op) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        check_finite(&value, op_name(&op))?;
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a copy of `t`; gradients flow to it when `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Records a constant input that never receives gradient.
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f32>) -> Result<Var> {
        if numel(&shape) != value.len() {
            bail!(Dimension, "constant of shape {shape:?} given {} values", value.len());
        }
        self.push(shape, value, false, Op::Leaf)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Result<Var> {
        let n = numel(&shape);
        self.push(shape, vec![0.0; n], false, Op::Leaf)
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => bail!(Dimension, "{what} expects a matrix, got shape {s:?}"),
        }
    }

    /// `a [m x k] * b [k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            bail!(Dimension, "matmul inner dimensions differ: {m}x{k} * {k2}x{n}");
        }
        let bt = transpose(self.value(b), k, n);
        let value = gemm_nt(self.value(a), m, k, &bt, n);
        let rg = self.rg(&[a, b]);
        self.push(vec![m, n], value, rg, Op::MatMul { a, b, m, k, n })
    }

    /// `x [rows x in] * w^T + b` with `w [out x in]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (rows, inp) = self.dims2(x, "linear input")?;
        let (out, inp2) = self.dims2(w, "linear weight")?;
        if inp != inp2 {
            bail!(Dimension, "linear expects {inp2} input features, got {inp}");
        }
        let mut value = gemm_nt(self.value(x), rows, inp, self.value(w), out);
        if let Some(b) = b {
            if self.shape(b) != [out] {
                bail!(Dimension, "linear bias shape {:?}, expected [{out}]", self.shape(b));
            }
            let bias = self.value(b);
            for row in value.chunks_exact_mut(out) {
                row.iter_mut().zip(bias).for_each(|(y, b)| *y += b);
            }
        }
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.rg(&[b]));
        self.push(vec![rows, out], value, rg, Op::Linear { x, w, b, rows, inp, out })
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            bail!(Dimension, "{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        self.push(self.shape(a).to_vec(), value, rg, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        self.push(self.shape(a).to_vec(), value, rg, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let value = self.value(a).iter().map(|x| x * s).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), value, rg, Op::Scale { a, s })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.value(a).iter().map(|&x| x as f64).sum();
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![total as f32], rg, Op::Sum { a })
    }

    /// Softmax along `axis`, stabilized by subtracting the running max.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            bail!(Dimension, "softmax axis {axis} out of range for shape {shape:?}");
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a);
        let mut value = vec![0.0f32; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let max = (0..len).map(|j| x[base + j * inner]).fold(f32::NEG_INFINITY, f32::max);
                let mut denom = 0.0f64;
                for j in 0..len {
                    denom += ((x[base + j * inner] - max) as f64).exp();
                }
                for j in 0..len {
                    value[base + j * inner] = (((x[base + j * inner] - max) as f64).exp() / denom) as f32;
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(shape, value, rg, Op::Softmax { a, outer, len, inner })
    }

    /// Normalizes each row of a matrix to zero mean / unit variance, then
    /// applies `gain` and `bias` (both `[cols]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "layer_norm")?;
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            bail!(Dimension, "layer_norm affine parameters must have shape [{cols}]");
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0f32; xs.len()];
        let mut rstd = vec![0.0f64; rows];
        let mut value = vec![0.0f32; xs.len()];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] as f64 - mean) * rs;
                xhat[r * cols + c] = h as f32;
                value[r * cols + c] = (h * g[c] as f64 + b[c] as f64) as f32;
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        self.push(vec![rows, cols], value, rg, Op::LayerNorm { x, gain, bias, cols, xhat, rstd })
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).iter().map(|&x| gelu(x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), value, rg, Op::Gelu { a })
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, classes) = self.dims2(logits, "cross_entropy")?;
        if labels.len() != rows {
            bail!(Input, "{} labels for {rows} rows of logits", labels.len());
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            bail!(Input, "label {bad} out of range for {classes} classes");
        }
        let (total, probs) = nll_with_probs(self.value(logits), classes, labels);
        let loss = total / rows as f64;
        let rg = self.rg(&[logits]);
        let var = self.push(
            vec![1],
            vec![loss as f32],
            rg,
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
        )?;
        self.loss_f64.push((var.0, loss));
        Ok(var)
    }

    /// Batched product over a leading group axis: `a [g x m x k]` times
    /// `b [g x k x n]`, or `b [g x n x k]` transposed when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ([ga, m, k], [gb, b1, b2]) = (sa.as_slice(), sb.as_slice()) else {
            bail!(Dimension, "batch_matmul expects rank-3 operands, got {sa:?} and {sb:?}");
        };
        let (kb, n) = if trans_b { (*b2, *b1) } else { (*b1, *b2) };
        if ga != gb || *k != kb {
            bail!(Dimension, "batch_matmul shapes {sa:?} and {sb:?} incompatible");
        }
        let (g, m, k) = (*ga, *m, *k);
        let mut value = vec![0.0f32; g * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for gi in 0..g {
            let ag = &av[gi * m * k..(gi + 1) * m * k];
            let bg = &bv[gi * k * n..(gi + 1) * k * n];
            let out = &mut value[gi * m * n..(gi + 1) * m * n];
            if trans_b {
                gemm_nt_into(ag, m, k, bg, n, out);
            } else {
                gemm_nt_into(ag, m, k, &transpose(bg, k, n), n, out);
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(vec![g, m, n], value, rg, Op::BatchMatMul { a, b, groups: g, m, k, n, trans_b })
    }

    /// Slices part `part` (0 = q, 1 = k, 2 = v) of a fused `[batch*seq x 3*dim]`
    /// projection into per-head blocks `[batch*heads x seq x dim/heads]`.
    pub fn split_heads(&mut self, qkv: Var, part: usize, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (rows, width) = self.dims2(qkv, "split_heads")?;
        if rows != batch * seq || width % (3 * heads) != 0 || part > 2 {
            bail!(Dimension, "split_heads: cannot split [{rows} x {width}] into {batch}x{seq} with {heads} heads");
        }
        let dim = width / 3;
        let dh = dim / heads;
        let src = self.value(qkv);
        let mut value = vec![0.0f32; batch * heads * seq * dh];
        for b in 0..batch {
            for t in 0..seq {
                let row = &src[(b * seq + t) * width + part * dim..][..dim];
                for h in 0..heads {
                    let dst = ((b * heads + h) * seq + t) * dh;
                    value[dst..dst + dh].copy_from_slice(&row[h * dh..(h + 1) * dh]);
                }
            }
        }
        let rg = self.rg(&[qkv]);
        self.push(vec![batch * heads, seq, dh], value, rg, Op::SplitHeads { qkv, part, batch, seq, heads })
    }

    /// Inverse layout of [`Tape::split_heads`] for one part: `[batch*heads x seq x dh]`
    /// back to `[batch*seq x heads*dh]`.
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [g, s, dh] = shape.as_slice() else {
            bail!(Dimension, "merge_heads expects rank 3, got {shape:?}");
        };
        if *g != batch * heads || *s != seq {
            bail!(Dimension, "merge_heads: shape {shape:?} does not match {batch}x{heads} heads, seq {seq}");
        }
        let dh = *dh;
        let dim = heads * dh;
        let src = self.value(x);
        let mut value = vec![0.0f32; batch * seq * dim];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..seq {
                    let from = ((b * heads + h) * seq + t) * dh;
                    let to = (b * seq + t) * dim + h * dh;
                    value[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(vec![batch * seq, dim], value, rg, Op::MergeHeads { x, batch, seq, heads })
    }

    /// Builds the token sequence `[cls; patches] + pos` for each image:
    /// `patches [batch*(seq-1) x dim]`, `cls [dim]`, `pos [seq x dim]`.
    pub fn tokens(&mut self, patches: Var, cls: Var, pos: Var, batch: usize) -> Result<Var> {
        let (prow, dim) = self.dims2(patches, "tokens")?;
        let (seq, pdim) = self.dims2(pos, "tokens position table")?;
        if pdim != dim || self.shape(cls) != [dim] || prow != batch * (seq - 1) {
            bail!(Dimension, "tokens: inconsistent patch/cls/position shapes");
        }
        let (pv, cv, posv) = (self.value(patches), self.value(cls), self.value(pos));
        let mut value = vec![0.0f32; batch * seq * dim];
        for b in 0..batch {
            for t in 0..seq {
                let dst = &mut value[(b * seq + t) * dim..][..dim];
                let src = if t == 0 { cv } else { &pv[(b * (seq - 1) + t - 1) * dim..][..dim] };
                let p = &posv[t * dim..][..dim];
                for c in 0..dim {
                    dst[c] = src[c] + p[c];
                }
            }
        }
        let rg = self.rg(&[patches, cls, pos]);
        self.push(vec![batch * seq, dim], value, rg, Op::Tokens { patches, cls, pos, batch, seq, dim })
    }

    /// Gathers rows `offset, offset + stride, ...` of a matrix.
    pub fn select_rows(&mut self, x: Var, stride: usize, offset: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "select_rows")?;
        if stride == 0 || offset >= stride || rows % stride != 0 {
            bail!(Dimension, "select_rows: stride {stride} offset {offset} invalid for {rows} rows");
        }
        let n = rows / stride;
        let src = self.value(x);
        let mut value = Vec::with_capacity(n * cols);
        for i in 0..n {
            value.extend_from_slice(&src[(i * stride + offset) * cols..][..cols]);
        }
        let rg = self.rg(&[x]);
        self.push(vec![n, cols], value, rg, Op::SelectRows { x, stride, offset, cols })
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape; returns the
    /// gradient of every leaf that requires one.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if numel(self.shape(loss)) != 1 {
            bail!(Usage, "backward needs a scalar loss, got shape {:?}", self.shape(loss));
        }
        let Tape { nodes, .. } = self;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            backprop_node(&nodes, node, &dy, &mut grads)?;
        }
        // Keep leaf gradients only.
        for (g, node) in grads.iter_mut().zip(&nodes) {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                *g = None;
            } else if let Some(g) = g {
                check_finite(g, "gradient")?;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Per-row negative log-likelihood sum (f64) and softmax probabilities.
pub(crate) fn nll_with_probs(logits: &[f32], classes: usize, labels: &[usize]) -> (f64, Vec<f32>) {
    let mut total = 0.0f64;
    let mut probs = vec![0.0f32; logits.len()];
    for (r, (row, &label)) in logits.chunks_exact(classes).zip(labels).enumerate() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let denom: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        let log_denom = denom.ln();
        total += log_denom - (row[label] as f64 - max);
        for c in 0..classes {
            probs[r * classes + c] = ((row[c] as f64 - max).exp() / denom) as f32;
        }
    }
    (total, probs)
}

/// Per-row negative log-likelihood, accumulated in `f64`.
pub(crate) fn nll_rows(logits: &[f32], classes: usize, labels: &[usize]) -> Vec<f64> {
    logits
        .chunks_exact(classes)
        .zip(labels)
        .map(|(row, &label)| {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let denom: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            denom.ln() - (row[label] as f64 - max)
        })
        .collect()
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Linear { .. } => "linear",
        Op::Add { .. } => "add",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::Sum { .. } => "sum",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Gelu { .. } => "gelu",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::BatchMatMul { .. } => "batch_matmul",
        Op::SplitHeads { .. } => "split_heads",
        Op::MergeHeads { .. } => "merge_heads",
        Op::Tokens { .. } => "tokens",
        Op::SelectRows { .. } => "select_rows",
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f32>>], v: Var, delta: Vec<f32>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(g, d)| *g += d),
        slot @ None => *slot = Some(delta),
    }
}

fn wants(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn backprop_node(nodes: &[Node], node: &Node, dy: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
    let val = |v: Var| nodes[v.0].value.as_slice();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            if wants(nodes, a) {
                // da = dy * b^T
                accumulate(nodes, grads, a, gemm_nt(dy, m, n, val(b), k));
            }
            if wants(nodes, b) {
                // db = a^T * dy
                let at = transpose(val(a), m, k);
                let dyt = transpose(dy, m, n);
                accumulate(nodes, grads, b, gemm_nt(&at, k, m, &dyt, n));
            }
        }
        &Op::Linear { x, w, b, rows, inp, out } => {
            if wants(nodes, x) {
                let wt = transpose(val(w), out, inp);
                accumulate(nodes, grads, x, gemm_nt(dy, rows, out, &wt, inp));
            }
            let dyt = (wants(nodes, w) || b.is_some_and(|b| wants(nodes, b))).then(|| transpose(dy, rows, out));
            if wants(nodes, w) {
                let xt = transpose(val(x), rows, inp);
                let dyt = dyt.as_ref().expect("transposed upstream gradient");
                accumulate(nodes, grads, w, gemm_nt(dyt, out, rows, &xt, inp));
            }
            if let Some(b) = b.filter(|&b| wants(nodes, b)) {
                let dyt = dyt.as_ref().expect("transposed upstream gradient");
                let db = dyt.chunks_exact(rows).map(|r| r.iter().map(|&v| v as f64).sum::<f64>() as f32).collect();
                accumulate(nodes, grads, b, db);
            }
        }
        &Op::Add { a, b } => {
            accumulate(nodes, grads, a, dy.to_vec());
            accumulate(nodes, grads, b, dy.to_vec());
        }
        &Op::Mul { a, b } => {
            if wants(nodes, a) {
                accumulate(nodes, grads, a, dy.iter().zip(val(b)).map(|(g, y)| g * y).collect());
            }
            if wants(nodes, b) {
                accumulate(nodes, grads, b, dy.iter().zip(val(a)).map(|(g, x)| g * x).collect());
            }
        }
        &Op::Scale { a, s } => accumulate(nodes, grads, a, dy.iter().map(|g| g * s).collect()),
        &Op::Sum { a } => {
            let n = nodes[a.0].value.len();
            accumulate(nodes, grads, a, vec![dy[0]; n]);
        }
        &Op::Softmax { a, outer, len, inner } => {
            let y = &node.value;
            let mut dx = vec![0.0f32; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let s: f64 = (0..len).map(|j| y[base + j * inner] as f64 * dy[base + j * inner] as f64).sum();
                    for j in 0..len {
                        let p = base + j * inner;
                        dx[p] = (y[p] as f64 * (dy[p] as f64 - s)) as f32;
                    }
                }
            }
            accumulate(nodes, grads, a, dx);
        }
        Op::LayerNorm { x, gain, bias, cols, xhat, rstd } => {
            let (x, gain, bias, cols) = (*x, *gain, *bias, *cols);
            let g = val(gain);
            let rows = rstd.len();
            if wants(nodes, x) {
                let mut dx = vec![0.0f32; dy.len()];
                for r in 0..rows {
                    let dyr = &dy[r * cols..(r + 1) * cols];
                    let hr = &xhat[r * cols..(r + 1) * cols];
                    let mut mean_d = 0.0f64;
                    let mut mean_dh = 0.0f64;
                    for c in 0..cols {
                        let d = dyr[c] as f64 * g[c] as f64;
                        mean_d += d;
                        mean_dh += d * hr[c] as f64;
                    }
                    mean_d /= cols as f64;
                    mean_dh /= cols as f64;
                    for c in 0..cols {
                        let d = dyr[c] as f64 * g[c] as f64;
                        dx[r * cols + c] = (rstd[r] * (d - mean_d - hr[c] as f64 * mean_dh)) as f32;
                    }
                }
                accumulate(nodes, grads, x, dx);
            }
            if wants(nodes, gain) || wants(nodes, bias) {
                let mut dg = vec![0.0f64; cols];
                let mut db = vec![0.0f64; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let d = dy[r * cols + c] as f64;
                        dg[c] += d * xhat[r * cols + c] as f64;
                        db[c] += d;
                    }
                }
                accumulate(nodes, grads, gain, dg.into_iter().map(|v| v as f32).collect());
                accumulate(nodes, grads, bias, db.into_iter().map(|v| v as f32).collect());
            }
        }
        &Op::Gelu { a } => {
            accumulate(nodes, grads, a, dy.iter().zip(val(a)).map(|(g, &x)| g * gelu_grad(x)).collect());
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let rows = labels.len();
            let classes = probs.len() / rows;
            let scale = dy[0] as f64 / rows as f64;
            let mut d = vec![0.0f32; probs.len()];
            for (r, &label) in labels.iter().enumerate() {
                for c in 0..classes {
                    let onehot = if c == label { 1.0 } else { 0.0 };
                    d[r * classes + c] = ((probs[r * classes + c] as f64 - onehot) * scale) as f32;
                }
            }
            accumulate(nodes, grads, *logits, d);
        }
        &Op::BatchMatMul { a, b, groups, m, k, n, trans_b } => {
            let (av, bv) = (val(a), val(b));
            if wants(nodes, a) {
                let mut da = vec![0.0f32; groups * m * k];
                for g in 0..groups {
                    let dyg = &dy[g * m * n..(g + 1) * m * n];
                    let bg = &bv[g * k * n..(g + 1) * k * n];
                    let out = &mut da[g * m * k..(g + 1) * m * k];
                    if trans_b {
                        // b is [n x k]: da = dy * b
                        gemm_nt_into(dyg, m, n, &transpose(bg, n, k), k, out);
                    } else {
                        // b is [k x n]: da = dy * b^T
                        gemm_nt_into(dyg, m, n, bg, k, out);
                    }
                }
                accumulate(nodes, grads, a, da);
            }
            if wants(nodes, b) {
                let mut db = vec![0.0f32; groups * k * n];
                for g in 0..groups {
                    let dyg = &dy[g * m * n..(g + 1) * m * n];
                    let ag = &av[g * m * k..(g + 1) * m * k];
                    let out = &mut db[g * k * n..(g + 1) * k * n];
                    let at = transpose(ag, m, k);
                    let dyt = transpose(dyg, m, n);
                    if trans_b {
                        // db [n x k] = dy^T * a
                        gemm_nt_into(&dyt, n, m, &at, k, out);
                    } else {
                        // db [k x n] = a^T * dy
                        gemm_nt_into(&at, k, m, &dyt, n, out);
                    }
                }
                accumulate(nodes, grads, b, db);
            }
        }
        &Op::SplitHeads { qkv, part, batch, seq, heads } => {
            let width = nodes[qkv.0].shape[1];
            let dim = width / 3;
            let dh = dim / heads;
            let mut d = vec![0.0f32; nodes[qkv.0].value.len()];
            for b in 0..batch {
                for t in 0..seq {
                    let row = &mut d[(b * seq + t) * width + part * dim..][..dim];
                    for h in 0..heads {
                        let src = ((b * heads + h) * seq + t) * dh;
                        row[h * dh..(h + 1) * dh].copy_from_slice(&dy[src..src + dh]);
                    }
                }
            }
            accumulate(nodes, grads, qkv, d);
        }
        &Op::MergeHeads { x, batch, seq, heads } => {
            let dh = nodes[x.0].shape[2];
            let dim = heads * dh;
            let mut d = vec![0.0f32; dy.len()];
            for b in 0..batch {
                for h in 0..heads {
                    for t in 0..seq {
                        let to = ((b * heads + h) * seq + t) * dh;
                        let from = (b * seq + t) * dim + h * dh;
                        d[to..to + dh].copy_from_slice(&dy[from..from + dh]);
                    }
                }
            }
            accumulate(nodes, grads, x, d);
        }
        &Op::Tokens { patches, cls, pos, batch, seq, dim } => {
            if wants(nodes, patches) {
                let mut d = Vec::with_capacity(batch * (seq - 1) * dim);
                for b in 0..batch {
                    d.extend_from_slice(&dy[(b * seq + 1) * dim..(b + 1) * seq * dim]);
                }
                accumulate(nodes, grads, patches, d);
            }
            if wants(nodes, cls) {
                let mut d = vec![0.0f64; dim];
                for b in 0..batch {
                    for c in 0..dim {
                        d[c] += dy[b * seq * dim + c] as f64;
                    }
                }
                accumulate(nodes, grads, cls, d.into_iter().map(|v| v as f32).collect());
            }
            if wants(nodes, pos) {
                let mut d = vec![0.0f64; seq * dim];
                for b in 0..batch {
                    for (acc, &g) in d.iter_mut().zip(&dy[b * seq * dim..(b + 1) * seq * dim]) {
                        *acc += g as f64;
                    }
                }
                accumulate(nodes, grads, pos, d.into_iter().map(|v| v as f32).collect());
            }
        }
        &Op::SelectRows { x, stride, offset, cols } => {
            let mut d = vec![0.0f32; nodes[x.0].value.len()];
            for (i, row) in dy.chunks_exact(cols).enumerate() {
                d[(i * stride + offset) * cols..][..cols].copy_from_slice(row);
            }
            accumulate(nodes, grads, x, d);
        }
    }
    Ok(())
}
