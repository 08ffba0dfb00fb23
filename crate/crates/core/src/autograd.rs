//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves created with
//! [`Tape::param`] carry a slot number; [`Tape::backward`] accumulates their
//! gradients into a [`GradStore`] indexed by that slot. Vectors are stored as
//! `1 × n` matrices and scalars as `1 × 1`.

use std::sync::Arc;

use ndarray::{s, Array2, Axis};
use statrs::function::erf::erf;

use crate::attention::{multi_head_backward, multi_head_forward, sum_rows, AttentionSaved, MaskSpec, Segment};
use crate::config::{Activation, NormKind};
use crate::error::Result;
use crate::rope::RopeTable;

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Per-slot gradient accumulator.
#[derive(Debug, Clone)]
pub struct GradStore {
    grads: Vec<Option<Mat>>,
}

impl GradStore {
    pub fn new(slots: usize) -> Self {
        GradStore {
            grads: vec![None; slots],
        }
    }

    pub fn get(&self, slot: usize) -> Option<&Mat> {
        self.grads[slot].as_ref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    fn add(&mut self, slot: usize, g: &Mat) {
        match &mut self.grads[slot] {
            Some(acc) => *acc += g,
            none => *none = Some(g.clone()),
        }
    }

    /// Dense gradients, zero-filled for slots that received none.
    pub fn into_dense(self, shapes: impl Iterator<Item = (usize, usize)>) -> Vec<Mat> {
        self.grads
            .into_iter()
            .zip(shapes)
            .map(|(g, shape)| g.unwrap_or_else(|| Mat::zeros(shape)))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SpanTarget {
    /// Candidate rows `start..start+len` of the logits matrix.
    pub start: usize,
    pub len: usize,
    /// Gold start and end rows, absolute.
    pub gold_start: usize,
    pub gold_end: usize,
}

enum Op {
    Leaf { slot: Option<usize> },
    Linear { x: Var, w: Var },
    Add(Var, Var),
    AddRow { x: Var, b: Var },
    Mul(Var, Var),
    Scale(Var, f64),
    Act { x: Var, kind: Activation },
    Norm { x: Var, scale: Var, offset: Option<Var>, kind: NormKind, xhat: Mat, inv: Vec<f64> },
    Embed { table: Var, ids: Vec<u32> },
    GatherRows { x: Var, rows: Vec<usize> },
    SliceCols { x: Var, start: usize },
    Rope { x: Var, table: Arc<RopeTable>, positions: Arc<[usize]> },
    Attention { q: Var, k: Var, v: Var, n_heads: usize, segments: Arc<[Segment]>, spec: MaskSpec, saved: AttentionSaved },
    /// Scalar losses store their input gradients at forward time.
    ScalarLoss { inputs: Vec<(Var, Mat)> },
    MeanPool { x: Var, segments: Vec<(usize, usize)> },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn activate(x: f64, kind: Activation) -> f64 {
    match kind {
        Activation::Gelu => gelu(x),
        Activation::Silu => x * sigmoid(x),
    }
}

fn activate_grad(x: f64, kind: Activation) -> f64 {
    match kind {
        Activation::Gelu => gelu_grad(x),
        Activation::Silu => {
            let s = sigmoid(x);
            s + x * s * (1.0 - s)
        }
    }
}

/// Row-wise log-sum-exp and softmax.
pub fn log_softmax_rows(logits: &Mat) -> (Vec<f64>, Mat) {
    let mut probs = logits.clone();
    let mut lse = Vec::with_capacity(logits.nrows());
    for mut row in probs.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - m).exp());
        let z = row.sum();
        row.mapv_inplace(|x| x / z);
        lse.push(m + z.ln());
    }
    (lse, probs)
}

impl Tape {
    pub fn new(grad_enabled: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf { slot: None }, false)
    }

    /// A trainable leaf whose gradient lands in `slot`.
    pub fn param(&mut self, value: &Mat, slot: usize) -> Var {
        self.push(value.clone(), Op::Leaf { slot: Some(slot) }, true)
    }

    /// `x · wᵀ` with `w` stored as `out × in`.
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let y = self.value(x).dot(&self.value(w).t());
        let ng = self.needs(x) || self.needs(w);
        self.push(y, Op::Linear { x, w }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(y, Op::Add(a, b), ng)
    }

    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let y = self.value(x) + self.value(b);
        let ng = self.needs(x) || self.needs(b);
        self.push(y, Op::AddRow { x, b }, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(y, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let y = self.value(a) * s;
        let ng = self.needs(a);
        self.push(y, Op::Scale(a, s), ng)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let y = self.value(x).mapv(|v| activate(v, kind));
        let ng = self.needs(x);
        self.push(y, Op::Act { x, kind }, ng)
    }

    pub fn norm(&mut self, x: Var, scale: Var, offset: Option<Var>, kind: NormKind, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            match kind {
                NormKind::LayerNorm => {
                    let mean = row.sum() / n;
                    row.mapv_inplace(|v| v - mean);
                    let var = row.iter().map(|v| v * v).sum::<f64>() / n;
                    let r = 1.0 / (var + eps).sqrt();
                    row.mapv_inplace(|v| v * r);
                    inv.push(r);
                }
                NormKind::RmsNorm => {
                    let ms = row.iter().map(|v| v * v).sum::<f64>() / n;
                    let r = 1.0 / (ms + eps).sqrt();
                    row.mapv_inplace(|v| v * r);
                    inv.push(r);
                }
            }
        }
        let mut y = &xhat * self.value(scale);
        if let Some(o) = offset {
            y += self.value(o);
        }
        let ng = self.needs(x) || self.needs(scale) || offset.is_some_and(|o| self.needs(o));
        self.push(y, Op::Norm { x, scale, offset, kind, xhat, inv }, ng)
    }

    pub fn embed(&mut self, table: Var, ids: &[u32]) -> Var {
        let t = self.value(table);
        let mut y = Mat::zeros((ids.len(), t.ncols()));
        for (mut row, &id) in y.rows_mut().into_iter().zip(ids) {
            row.assign(&t.row(id as usize));
        }
        let ng = self.needs(table);
        self.push(y, Op::Embed { table, ids: ids.to_vec() }, ng)
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let xv = self.value(x);
        let y = xv.select(Axis(0), rows);
        let ng = self.needs(x);
        self.push(y, Op::GatherRows { x, rows: rows.to_vec() }, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let y = self.value(x).slice(s![.., start..start + len]).to_owned();
        let ng = self.needs(x);
        self.push(y, Op::SliceCols { x, start }, ng)
    }

    pub fn rope(&mut self, x: Var, table: Arc<RopeTable>, positions: Arc<[usize]>) -> Result<Var> {
        let mut y = self.value(x).clone();
        table.rotate_heads(y.view_mut(), &positions, false)?;
        let ng = self.needs(x);
        Ok(self.push(y, Op::Rope { x, table, positions }, ng))
    }

    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        segments: Arc<[Segment]>,
        spec: MaskSpec,
    ) -> Result<Var> {
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        let keep = ng && self.grad_enabled;
        let (y, saved) = multi_head_forward(self.value(q), self.value(k), self.value(v), n_heads, &segments, spec, keep)?;
        Ok(self.push(y, Op::Attention { q, k, v, n_heads, segments, spec, saved }, ng))
    }

    /// `weight · Σ_i −log softmax(logits_i)[target_i]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], weight: f64) -> Var {
        let lv = self.value(logits);
        let (lse, mut probs) = log_softmax_rows(lv);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            loss += lse[i] - lv[[i, t as usize]];
            probs[[i, t as usize]] -= 1.0;
        }
        probs *= weight;
        self.scalar_loss(loss * weight, vec![(logits, probs)])
    }

    /// Span extraction loss over a `rows × 2` (start, end) logit matrix:
    /// `weight · Σ_examples (CE_start + CE_end) / 2`, each softmax running over
    /// the example's candidate rows.
    pub fn span_cross_entropy(&mut self, logits: Var, targets: &[SpanTarget], weight: f64) -> Var {
        let lv = self.value(logits);
        let mut grad = Mat::zeros(lv.dim());
        let mut loss = 0.0;
        for t in targets {
            for (col, gold) in [(0, t.gold_start), (1, t.gold_end)] {
                let slice = lv.slice(s![t.start..t.start + t.len, col]);
                let m = slice.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let z: f64 = slice.iter().map(|&x| (x - m).exp()).sum();
                loss += 0.5 * (m + z.ln() - lv[[gold, col]]);
                for r in 0..t.len {
                    let p = ((lv[[t.start + r, col]] - m).exp()) / z;
                    grad[[t.start + r, col]] += 0.5 * weight * p;
                }
                grad[[gold, col]] -= 0.5 * weight;
            }
        }
        self.scalar_loss(loss * weight, vec![(logits, grad)])
    }

    /// Records a scalar computed outside the tape together with its gradient
    /// with respect to each input.
    pub fn scalar_loss(&mut self, value: f64, inputs: Vec<(Var, Mat)>) -> Var {
        let ng = inputs.iter().any(|(v, _)| self.needs(*v));
        self.push(Mat::from_elem((1, 1), value), Op::ScalarLoss { inputs }, ng)
    }

    /// Mean of rows `start..start+count` for each `(start, count)`.
    pub fn mean_pool(&mut self, x: Var, segments: &[(usize, usize)]) -> Var {
        let xv = self.value(x);
        let mut y = Mat::zeros((segments.len(), xv.ncols()));
        for (mut out, &(start, count)) in y.rows_mut().into_iter().zip(segments) {
            let block = xv.slice(s![start..start + count, ..]);
            out.assign(&(block.sum_axis(Axis(0)) / count as f64));
        }
        let ng = self.needs(x);
        self.push(y, Op::MeanPool { x, segments: segments.to_vec() }, ng)
    }

    /// Accumulates `d loss / d leaf` into `grads` for every slotted leaf.
    pub fn backward(&self, loss: Var, grads: &mut GradStore) {
        let mut g: Vec<Option<Mat>> = (0..=loss.0).map(|_| None).collect();
        g[loss.0] = Some(Mat::ones(self.nodes[loss.0].value.dim()));
        for i in (0..=loss.0).rev() {
            let Some(dy) = g[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let send = |v: Var, d: Mat, g: &mut Vec<Option<Mat>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut g[v.0] {
                    Some(acc) => *acc += &d,
                    none => *none = Some(d),
                }
            };
            match &node.op {
                Op::Leaf { slot } => {
                    if let Some(s) = slot {
                        grads.add(*s, &dy);
                    }
                }
                Op::Linear { x, w } => {
                    if self.needs(*x) {
                        send(*x, dy.dot(self.value(*w)), &mut g);
                    }
                    if self.needs(*w) {
                        send(*w, dy.t().dot(self.value(*x)), &mut g);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, dy.clone(), &mut g);
                    send(*b, dy, &mut g);
                }
                Op::AddRow { x, b } => {
                    send(*b, sum_rows(&dy), &mut g);
                    send(*x, dy, &mut g);
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        send(*a, &dy * self.value(*b), &mut g);
                    }
                    if self.needs(*b) {
                        send(*b, &dy * self.value(*a), &mut g);
                    }
                }
                Op::Scale(a, s) => send(*a, dy * *s, &mut g),
                Op::Act { x, kind } => {
                    let mut d = dy;
                    d.zip_mut_with(self.value(*x), |d, &xv| *d *= activate_grad(xv, *kind));
                    send(*x, d, &mut g);
                }
                Op::Norm { x, scale, offset, kind, xhat, inv } => {
                    if let Some(o) = offset {
                        send(*o, sum_rows(&dy), &mut g);
                    }
                    if self.needs(*scale) {
                        send(*scale, sum_rows(&(&dy * xhat)), &mut g);
                    }
                    if self.needs(*x) {
                        let dxhat = &dy * self.value(*scale);
                        let n = dxhat.ncols() as f64;
                        let mut dx = Mat::zeros(dxhat.dim());
                        for (r, (mut out, (dh, xh))) in dx
                            .rows_mut()
                            .into_iter()
                            .zip(dxhat.rows().into_iter().zip(xhat.rows()))
                            .enumerate()
                        {
                            let proj = dh.dot(&xh) / n;
                            match kind {
                                NormKind::LayerNorm => {
                                    let mean = dh.sum() / n;
                                    for ((o, &a), &b) in out.iter_mut().zip(dh).zip(xh) {
                                        *o = inv[r] * (a - mean - b * proj);
                                    }
                                }
                                NormKind::RmsNorm => {
                                    for ((o, &a), &b) in out.iter_mut().zip(dh).zip(xh) {
                                        *o = inv[r] * (a - b * proj);
                                    }
                                }
                            }
                        }
                        send(*x, dx, &mut g);
                    }
                }
                Op::Embed { table, ids } => {
                    let mut dt = Mat::zeros(self.value(*table).dim());
                    for (row, &id) in dy.rows().into_iter().zip(ids) {
                        dt.row_mut(id as usize).scaled_add(1.0, &row);
                    }
                    send(*table, dt, &mut g);
                }
                Op::GatherRows { x, rows } => {
                    let mut dx = Mat::zeros(self.value(*x).dim());
                    for (row, &r) in dy.rows().into_iter().zip(rows) {
                        dx.row_mut(r).scaled_add(1.0, &row);
                    }
                    send(*x, dx, &mut g);
                }
                Op::SliceCols { x, start } => {
                    let mut dx = Mat::zeros(self.value(*x).dim());
                    dx.slice_mut(s![.., *start..*start + dy.ncols()]).assign(&dy);
                    send(*x, dx, &mut g);
                }
                Op::Rope { x, table, positions } => {
                    let mut d = dy;
                    table
                        .rotate_heads(d.view_mut(), positions, true)
                        .expect("positions validated in forward");
                    send(*x, d, &mut g);
                }
                Op::Attention { q, k, v, n_heads, segments, spec, saved } => {
                    let (dq, dk, dv) = multi_head_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        *n_heads,
                        segments,
                        *spec,
                        saved,
                        &dy,
                    );
                    send(*q, dq, &mut g);
                    send(*k, dk, &mut g);
                    send(*v, dv, &mut g);
                }
                Op::ScalarLoss { inputs } => {
                    let up = dy[[0, 0]];
                    for (v, d) in inputs {
                        send(*v, d * up, &mut g);
                    }
                }
                Op::MeanPool { x, segments } => {
                    let mut dx = Mat::zeros(self.value(*x).dim());
                    for (row, &(start, count)) in dy.rows().into_iter().zip(segments) {
                        let share = row.to_owned() / count as f64;
                        for r in start..start + count {
                            dx.row_mut(r).assign(&share);
                        }
                    }
                    send(*x, dx, &mut g);
                }
            }
        }
    }
}
