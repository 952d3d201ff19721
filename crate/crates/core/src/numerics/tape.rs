//! Reverse-mode gradient tape.
//!
//! Operations are appended in execution order; [`Tape::backward`] walks the
//! records in reverse and produces a fresh [`Gradients`] per call, so a leaf
//! receives its gradient exactly once per backward pass.

use std::rc::Rc;

use crate::error::{Error, Result};

use super::ops;
use super::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    ChannelBias(Var, Var),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceRows { src: Var, start: usize },
    GatherRows { src: Var, rows: Vec<usize> },
    OverwriteRows { base: Var, src: Var, rows: Vec<usize> },
    ScatterAddRows { base: Var, src: Var, groups: Vec<Vec<usize>> },
    MaskMean { src: Var, groups: Vec<Vec<usize>> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f32> },
    ConvTranspose { x: Var, kernel: Var, stride: usize },
    Depthwise { x: Var, kernel: Var },
    Bilinear(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, count: usize },
    Bce { logits: Var, target: Rc<Tensor> },
    Dice { logits: Var, target: Rc<Tensor> },
    Mse { a: Var, target: Rc<Tensor> },
    Sum(Var),
}

struct Node {
    value: Tensor,
    /// Double-precision copy of a scalar result, kept by loss reductions
    /// and by scalar add/scale so finite differences are not limited by
    /// `f32` rounding of the loss.
    wide: Option<f64>,
    requires_grad: bool,
    op: Op,
}

/// Records a computation for later differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients from one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn sum_into(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        debug_assert!(value.is_finite(), "non-finite forward value");
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            wide: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            wide: None,
            requires_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            wide: None,
            requires_grad: false,
            op: Op::Constant,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// First element widened to `f64`, or the double-precision value when
    /// the producing op kept one.
    pub fn scalar_f64(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        n.wide.unwrap_or_else(|| n.value.item() as f64)
    }

    fn push_wide(&mut self, value: Tensor, wide: f64, op: Op, inputs: &[Var]) -> Var {
        let v = self.push(value, op, inputs);
        self.nodes[v.0].wide = Some(wide);
        v
    }

    fn is_scalar(&self, v: Var) -> bool {
        self.nodes[v.0].value.numel() == 1
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = ops::transpose(self.value(a))?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        if self.is_scalar(a) && self.is_scalar(b) {
            let wide = self.scalar_f64(a) + self.scalar_f64(b);
            return Ok(self.push_wide(out, wide, Op::Add(a, b), &[a, b]));
        }
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let out = ops::scale(self.value(a), s);
        if self.is_scalar(a) {
            let wide = self.scalar_f64(a) * s as f64;
            return self.push_wide(out, wide, Op::Scale(a, s), &[a]);
        }
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = ops::add_channel_bias(self.value(x), self.value(bias))?;
        Ok(self.push(out, Op::ChannelBias(x, bias), &[x, bias]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = ops::sigmoid(self.value(a));
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = ops::gelu(self.value(a));
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let out = ops::softmax(self.value(a));
        self.push(out, Op::Softmax(a), &[a])
    }

    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (out, inv_rms) = ops::rmsnorm(self.value(x), self.value(gain))?;
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, &[x, gain]))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = ops::embedding(self.value(table), ids)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Stacks 2-D inputs with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(&p) => self.value(p).last_dim(),
            None => return Err(Error::shape("concat_rows", "nothing to concatenate")),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.last_dim() != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("part {:?} does not have {cols} columns", t.shape()),
                ));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_parts(vec![rows, cols], data);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(src);
        let (rows, cols) = (t.shape()[0], t.last_dim());
        if t.rank() != 2 || start > end || end > rows {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{end} of {:?}", t.shape()),
            ));
        }
        let out = Tensor::from_parts(vec![end - start, cols], t.data()[start * cols..end * cols].to_vec());
        Ok(self.push(out, Op::SliceRows { src, start }, &[src]))
    }

    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(src);
        if t.rank() != 2 {
            return Err(Error::shape("gather_rows", format!("rank-2 input expected, got {:?}", t.shape())));
        }
        let out = ops::embedding(t, rows)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                src,
                rows: rows.to_vec(),
            },
            &[src],
        ))
    }

    /// Copy of `base` with `base[rows[i]]` replaced by `src[i]`.
    pub fn overwrite_rows(&mut self, base: Var, src: Var, rows: &[usize]) -> Result<Var> {
        let (b, s) = (self.value(base), self.value(src));
        if b.rank() != 2 || s.rank() != 2 || b.last_dim() != s.last_dim() || s.shape()[0] != rows.len() {
            return Err(Error::shape(
                "overwrite_rows",
                format!("base {:?}, src {:?}, {} rows", b.shape(), s.shape(), rows.len()),
            ));
        }
        let c = b.last_dim();
        let mut data = b.data().to_vec();
        for (i, &r) in rows.iter().enumerate() {
            if r >= b.shape()[0] {
                return Err(Error::shape("overwrite_rows", format!("row {r} out of range")));
            }
            data[r * c..(r + 1) * c].copy_from_slice(s.row(i));
        }
        let out = Tensor::from_parts(b.shape().to_vec(), data);
        Ok(self.push(
            out,
            Op::OverwriteRows {
                base,
                src,
                rows: rows.to_vec(),
            },
            &[base, src],
        ))
    }

    /// `out[p] = base[p] + Σ_g src[g]` over the groups `g` listing `p`,
    /// added in group order.
    pub fn scatter_add_rows(&mut self, base: Var, src: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let (b, s) = (self.value(base), self.value(src));
        if b.rank() != 2 || s.rank() != 2 || b.last_dim() != s.last_dim() || s.shape()[0] != groups.len() {
            return Err(Error::shape(
                "scatter_add_rows",
                format!("base {:?}, src {:?}, {} groups", b.shape(), s.shape(), groups.len()),
            ));
        }
        let c = b.last_dim();
        let mut data = b.data().to_vec();
        for (g, rows) in groups.iter().enumerate() {
            let add = s.row(g);
            for &r in rows {
                if r >= b.shape()[0] {
                    return Err(Error::shape("scatter_add_rows", format!("row {r} out of range")));
                }
                data[r * c..(r + 1) * c].iter_mut().zip(add).for_each(|(o, a)| *o += a);
            }
        }
        let out = Tensor::from_parts(b.shape().to_vec(), data);
        Ok(self.push(
            out,
            Op::ScatterAddRows {
                base,
                src,
                groups: groups.to_vec(),
            },
            &[base, src],
        ))
    }

    /// `out[g] = mean of src rows listed in groups[g]`; groups must be non-empty.
    pub fn mask_mean(&mut self, src: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let s = self.value(src);
        if s.rank() != 2 {
            return Err(Error::shape("mask_mean", format!("rank-2 input expected, got {:?}", s.shape())));
        }
        let c = s.last_dim();
        let mut data = vec![0f32; groups.len() * c];
        for (g, rows) in groups.iter().enumerate() {
            if rows.is_empty() {
                return Err(Error::data(format!("pooling group {g} is empty")));
            }
            let mut acc = vec![0f64; c];
            for &r in rows {
                if r >= s.shape()[0] {
                    return Err(Error::shape("mask_mean", format!("row {r} out of range")));
                }
                acc.iter_mut().zip(s.row(r)).for_each(|(a, &v)| *a += v as f64);
            }
            let n = rows.len() as f64;
            data[g * c..(g + 1) * c]
                .iter_mut()
                .zip(acc)
                .for_each(|(o, a)| *o = (a / n) as f32);
        }
        let out = Tensor::from_parts(vec![groups.len(), c], data);
        Ok(self.push(
            out,
            Op::MaskMean {
                src,
                groups: groups.to_vec(),
            },
            &[src],
        ))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, allowed: &[bool], heads: usize) -> Result<Var> {
        let (out, probs) = ops::attention(self.value(q), self.value(k), self.value(v), allowed, heads)?;
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }, &[q, k, v]))
    }

    pub fn conv_transpose2d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let out = ops::conv_transpose2d(self.value(x), self.value(kernel), stride)?;
        Ok(self.push(out, Op::ConvTranspose { x, kernel, stride }, &[x, kernel]))
    }

    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let out = ops::depthwise_conv2d(self.value(x), self.value(kernel))?;
        Ok(self.push(out, Op::Depthwise { x, kernel }, &[x, kernel]))
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = ops::bilinear_resize(self.value(x), out_h, out_w)?;
        Ok(self.push(out, Op::Bilinear(x), &[x]))
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (loss, count) = ops::cross_entropy_parts(self.value(logits), targets, mask)?;
        Ok(self.push_wide(
            Tensor::scalar(loss as f32),
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            &[logits],
        ))
    }

    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let loss = ops::bce_wide(self.value(logits), target)?;
        Ok(self.push_wide(
            Tensor::scalar(loss as f32),
            loss,
            Op::Bce {
                logits,
                target: Rc::new(target.clone()),
            },
            &[logits],
        ))
    }

    pub fn dice_loss(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let loss = ops::dice_wide(self.value(logits), target)?;
        Ok(self.push_wide(
            Tensor::scalar(loss as f32),
            loss,
            Op::Dice {
                logits,
                target: Rc::new(target.clone()),
            },
            &[logits],
        ))
    }

    pub fn mse(&mut self, a: Var, target: &Tensor) -> Result<Var> {
        let loss = ops::mse_wide(self.value(a), target)?;
        Ok(self.push_wide(
            Tensor::scalar(loss as f32),
            loss,
            Op::Mse {
                a,
                target: Rc::new(target.clone()),
            },
            &[a],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = if self.is_scalar(a) {
            self.scalar_f64(a)
        } else {
            self.value(a).data().iter().map(|&v| v as f64).sum()
        };
        self.push_wide(Tensor::scalar(s as f32), s, Op::Sum(a), &[a])
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let keep_leaf = matches!(self.nodes[idx].op, Op::Leaf);
            self.propagate(idx, &g, &mut grads);
            if keep_leaf {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn send(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if self.nodes[v.0].requires_grad {
            sum_into(&mut grads[v.0], g);
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.send(grads, *a, ops::matmul_nt(g, self.value(*b)));
                }
                if self.wants(*b) {
                    self.send(grads, *b, ops::matmul_tn(self.value(*a), g));
                }
            }
            Op::Transpose(a) => {
                let t = ops::transpose(g).expect("rank-2 gradient");
                self.send(grads, *a, t);
            }
            Op::Reshape(a) => {
                let t = g.reshape(self.value(*a).shape()).expect("same element count");
                self.send(grads, *a, t);
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.send(grads, *a, ops::mul(g, self.value(*b)).expect("same shape"));
                }
                if self.wants(*b) {
                    self.send(grads, *b, ops::mul(g, self.value(*a)).expect("same shape"));
                }
            }
            Op::Scale(a, s) => self.send(grads, *a, ops::scale(g, *s)),
            Op::ChannelBias(x, b) => {
                self.send(grads, *x, g.clone());
                if self.wants(*b) {
                    let c = self.value(*b).numel();
                    let plane = g.numel() / c;
                    let db = (0..c)
                        .map(|ch| {
                            g.data()[ch * plane..(ch + 1) * plane]
                                .iter()
                                .map(|&v| v as f64)
                                .sum::<f64>() as f32
                        })
                        .collect();
                    self.send(grads, *b, Tensor::from_parts(vec![c], db));
                }
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let d = g.data().iter().zip(y.data()).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect();
                self.send(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| (gv as f64 * ops::gelu_grad_scalar(xv)) as f32)
                    .collect();
                self.send(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let (rows, cols) = y.rows_cols();
                let mut d = vec![0f32; y.numel()];
                for r in 0..rows {
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let s = ops::dot(yr, gr);
                    for j in 0..cols {
                        d[r * cols + j] = (yr[j] as f64 * (gr[j] as f64 - s)) as f32;
                    }
                }
                self.send(grads, *a, Tensor::from_parts(y.shape().to_vec(), d));
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let (rows, cols) = xv.rows_cols();
                let mut dx = vec![0f32; xv.numel()];
                let mut dg = vec![0f64; cols];
                for r in 0..rows {
                    let ir = inv_rms[r];
                    let xr = &xv.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let mut s = 0f64;
                    for j in 0..cols {
                        s += gv.data()[j] as f64 * gr[j] as f64 * xr[j] as f64;
                        dg[j] += gr[j] as f64 * xr[j] as f64 * ir;
                    }
                    let coef = ir * ir * ir * s / cols as f64;
                    for j in 0..cols {
                        let gdy = gv.data()[j] as f64 * gr[j] as f64;
                        dx[r * cols + j] = (ir * gdy - xr[j] as f64 * coef) as f32;
                    }
                }
                if self.wants(*x) {
                    self.send(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
                if self.wants(*gain) {
                    self.send(
                        grads,
                        *gain,
                        Tensor::from_parts(vec![cols], dg.into_iter().map(|v| v as f32).collect()),
                    );
                }
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let c = tv.last_dim();
                let mut d = vec![0f32; tv.numel()];
                for (t, &id) in ids.iter().enumerate() {
                    d[id * c..(id + 1) * c]
                        .iter_mut()
                        .zip(g.row(t))
                        .for_each(|(o, v)| *o += v);
                }
                self.send(grads, *table, Tensor::from_parts(tv.shape().to_vec(), d));
            }
            Op::ConcatRows(parts) => {
                let c = g.last_dim();
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).shape()[0];
                    if self.wants(p) {
                        let slice = g.data()[start * c..(start + rows) * c].to_vec();
                        self.send(grads, p, Tensor::from_parts(vec![rows, c], slice));
                    }
                    start += rows;
                }
            }
            Op::SliceRows { src, start } => {
                let sv = self.value(*src);
                let c = sv.last_dim();
                let mut d = vec![0f32; sv.numel()];
                d[start * c..start * c + g.numel()].copy_from_slice(g.data());
                self.send(grads, *src, Tensor::from_parts(sv.shape().to_vec(), d));
            }
            Op::GatherRows { src, rows } => {
                let sv = self.value(*src);
                let c = sv.last_dim();
                let mut d = vec![0f32; sv.numel()];
                for (i, &r) in rows.iter().enumerate() {
                    d[r * c..(r + 1) * c]
                        .iter_mut()
                        .zip(g.row(i))
                        .for_each(|(o, v)| *o += v);
                }
                self.send(grads, *src, Tensor::from_parts(sv.shape().to_vec(), d));
            }
            Op::OverwriteRows { base, src, rows } => {
                let c = g.last_dim();
                if self.wants(*base) {
                    let mut d = g.data().to_vec();
                    for &r in rows {
                        d[r * c..(r + 1) * c].iter_mut().for_each(|v| *v = 0.0);
                    }
                    self.send(grads, *base, Tensor::from_parts(g.shape().to_vec(), d));
                }
                if self.wants(*src) {
                    let mut d = Vec::with_capacity(rows.len() * c);
                    for &r in rows {
                        d.extend_from_slice(g.row(r));
                    }
                    self.send(grads, *src, Tensor::from_parts(vec![rows.len(), c], d));
                }
            }
            Op::ScatterAddRows { base, src, groups } => {
                self.send(grads, *base, g.clone());
                if self.wants(*src) {
                    let c = g.last_dim();
                    let mut d = vec![0f32; groups.len() * c];
                    for (gi, rows) in groups.iter().enumerate() {
                        let mut acc = vec![0f64; c];
                        for &r in rows {
                            acc.iter_mut().zip(g.row(r)).for_each(|(a, &v)| *a += v as f64);
                        }
                        d[gi * c..(gi + 1) * c]
                            .iter_mut()
                            .zip(acc)
                            .for_each(|(o, a)| *o = a as f32);
                    }
                    self.send(grads, *src, Tensor::from_parts(vec![groups.len(), c], d));
                }
            }
            Op::MaskMean { src, groups } => {
                let sv = self.value(*src);
                let c = sv.last_dim();
                let mut d = vec![0f32; sv.numel()];
                for (gi, rows) in groups.iter().enumerate() {
                    let w = 1.0 / rows.len() as f32;
                    for &r in rows {
                        d[r * c..(r + 1) * c]
                            .iter_mut()
                            .zip(g.row(gi))
                            .for_each(|(o, v)| *o += v * w);
                    }
                }
                self.send(grads, *src, Tensor::from_parts(sv.shape().to_vec(), d));
            }
            Op::Attention { q, k, v, heads, probs } => {
                let ag = ops::attention_backward(self.value(*q), self.value(*k), self.value(*v), probs, *heads, g);
                self.send(grads, *q, ag.dq);
                self.send(grads, *k, ag.dk);
                self.send(grads, *v, ag.dv);
            }
            Op::ConvTranspose { x, kernel, stride } => {
                let (dx, dk) = ops::conv_transpose2d_backward(self.value(*x), self.value(*kernel), *stride, g);
                self.send(grads, *x, dx);
                self.send(grads, *kernel, dk);
            }
            Op::Depthwise { x, kernel } => {
                let (dx, dk) = ops::depthwise_conv2d_backward(self.value(*x), self.value(*kernel), g);
                self.send(grads, *x, dx);
                self.send(grads, *kernel, dk);
            }
            Op::Bilinear(x) => {
                let d = ops::bilinear_resize_backward(self.value(*x).shape(), g);
                self.send(grads, *x, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                count,
            } => {
                let lv = self.value(*logits);
                let mut d = vec![0f32; lv.numel()];
                if *count > 0 {
                    let up = g.item() as f64 / *count as f64;
                    let cols = lv.last_dim();
                    for r in 0..lv.shape()[0] {
                        if !mask[r] {
                            continue;
                        }
                        let row = lv.row(r);
                        let lse = ops::log_sum_exp(row);
                        for j in 0..cols {
                            let mut p = (row[j] as f64 - lse).exp();
                            if j == targets[r] {
                                p -= 1.0;
                            }
                            d[r * cols + j] = (p * up) as f32;
                        }
                    }
                }
                self.send(grads, *logits, Tensor::from_parts(lv.shape().to_vec(), d));
            }
            Op::Bce { logits, target } => {
                let lv = self.value(*logits);
                let up = g.item() as f64 / lv.numel().max(1) as f64;
                let d = lv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&z, &t)| ((ops::sigmoid_scalar(z) as f64 - t as f64) * up) as f32)
                    .collect();
                self.send(grads, *logits, Tensor::from_parts(lv.shape().to_vec(), d));
            }
            Op::Dice { logits, target } => {
                let lv = self.value(*logits);
                let k = lv.shape().first().copied().unwrap_or(0);
                let mut d = vec![0f32; lv.numel()];
                if k > 0 && lv.numel() > 0 {
                    let plane = lv.numel() / k;
                    let up = g.item() as f64 / k as f64;
                    for m in 0..k {
                        let zs = &lv.data()[m * plane..(m + 1) * plane];
                        let ts = &target.data()[m * plane..(m + 1) * plane];
                        let (inter, sp, sg) = ops::dice_sums(zs, ts);
                        let num = 2.0 * inter + ops::DICE_SMOOTH;
                        let den = sp + sg + ops::DICE_SMOOTH;
                        for i in 0..plane {
                            let p = ops::sigmoid_scalar(zs[i]) as f64;
                            let dp = -(2.0 * ts[i] as f64 * den - num) / (den * den);
                            d[m * plane + i] = (dp * p * (1.0 - p) * up) as f32;
                        }
                    }
                }
                self.send(grads, *logits, Tensor::from_parts(lv.shape().to_vec(), d));
            }
            Op::Mse { a, target } => {
                let av = self.value(*a);
                let up = 2.0 * g.item() as f64 / av.numel().max(1) as f64;
                let d = av
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&x, &t)| ((x as f64 - t as f64) * up) as f32)
                    .collect();
                self.send(grads, *a, Tensor::from_parts(av.shape().to_vec(), d));
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                self.send(grads, *a, Tensor::full(av.shape().to_vec(), g.item()));
            }
        }
    }
}
