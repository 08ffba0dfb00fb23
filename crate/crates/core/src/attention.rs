//! Masked softmax attention over packed (unpadded) or padded batches.
//!
//! A batch is a flat run of rows split into [`Segment`]s. Attention never
//! crosses a segment boundary, and inside a segment only keys below `valid`
//! participate, which is how padding is excluded. Queries are processed in
//! row blocks so the key range of a block can be narrowed to what the mask
//! allows.

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::tokenizer::TokenId;

const QUERY_BLOCK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSpec {
    GlobalBidirectional,
    /// Total span; each token sees `±window/2`.
    SlidingWindow { window: usize },
    Causal,
}

impl MaskSpec {
    pub fn sliding(window: usize) -> Result<MaskSpec> {
        if window == 0 || window % 2 != 0 {
            return Err(Error::Argument(format!("window {window} must be even and positive")));
        }
        Ok(MaskSpec::SlidingWindow { window })
    }
}

/// Whether query `i` may attend to key `j` (both positions in one sequence).
pub fn allowed(i: usize, j: usize, spec: MaskSpec) -> bool {
    match spec {
        MaskSpec::GlobalBidirectional => true,
        MaskSpec::SlidingWindow { window } => i.abs_diff(j) <= window / 2,
        MaskSpec::Causal => j <= i,
    }
}

/// A contiguous run of rows forming one sequence. Rows `start..start+len`
/// are queries; rows `start..start+valid` are the keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub valid: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBatch {
    pub tokens: Vec<TokenId>,
    pub boundaries: Vec<usize>,
    pub max_member_len: usize,
}

impl PackedBatch {
    pub fn n_members(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn member(&self, i: usize) -> &[TokenId] {
        &self.tokens[self.boundaries[i]..self.boundaries[i + 1]]
    }

    pub fn segments(&self) -> Vec<Segment> {
        self.boundaries
            .windows(2)
            .map(|w| Segment {
                start: w[0],
                len: w[1] - w[0],
                valid: w[1] - w[0],
            })
            .collect()
    }

    pub fn validate(&self, pad: Option<TokenId>) -> Result<()> {
        let b = &self.boundaries;
        if b.first() != Some(&0) || b.last() != Some(&self.tokens.len()) || b.len() < 2 {
            return Err(Error::Argument("boundaries must run from 0 to token count".into()));
        }
        if b.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Argument("boundaries must be strictly increasing".into()));
        }
        if let Some(pad) = pad {
            if self.tokens.contains(&pad) {
                return Err(Error::Argument("packed batch contains PAD".into()));
            }
        }
        Ok(())
    }
}

pub fn pack<S: AsRef<[TokenId]>>(sequences: &[S]) -> Result<PackedBatch> {
    if sequences.is_empty() {
        return Err(Error::Argument("cannot pack an empty batch".into()));
    }
    let mut tokens = Vec::new();
    let mut boundaries = vec![0];
    let mut max_member_len = 0;
    for (i, s) in sequences.iter().enumerate() {
        let s = s.as_ref();
        if s.is_empty() {
            return Err(Error::Argument(format!("member {i} is empty")));
        }
        tokens.extend_from_slice(s);
        boundaries.push(tokens.len());
        max_member_len = max_member_len.max(s.len());
    }
    Ok(PackedBatch {
        tokens,
        boundaries,
        max_member_len,
    })
}

pub fn unpack(batch: &PackedBatch) -> Vec<Vec<TokenId>> {
    (0..batch.n_members()).map(|i| batch.member(i).to_vec()).collect()
}

/// Segments covering `n` rows as one sequence, or the given boundaries.
pub fn segments_from_boundaries(n: usize, boundaries: Option<&[usize]>) -> Result<Vec<Segment>> {
    match boundaries {
        None => Ok(vec![Segment { start: 0, len: n, valid: n }]),
        Some(b) => {
            if b.first() != Some(&0) || b.last() != Some(&n) || b.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Argument(format!(
                    "boundaries {b:?} invalid for {n} positions"
                )));
            }
            Ok(b.windows(2)
                .map(|w| Segment { start: w[0], len: w[1] - w[0], valid: w[1] - w[0] })
                .collect())
        }
    }
}

fn key_range(q0: usize, q1: usize, valid: usize, spec: MaskSpec) -> (usize, usize) {
    let (lo, hi) = match spec {
        MaskSpec::GlobalBidirectional => (0, valid),
        MaskSpec::SlidingWindow { window } => {
            let r = window / 2;
            (q0.saturating_sub(r), (q1 - 1 + r + 1).min(valid))
        }
        MaskSpec::Causal => (0, q1.min(valid)),
    };
    (lo, hi.max(lo))
}

/// Softmax probabilities kept for the backward pass, one block per
/// (segment, head, query block) in iteration order.
#[derive(Debug, Clone, Default)]
pub struct AttentionSaved {
    probs: Vec<Array2<f64>>,
}

fn check_shapes(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, n_heads: usize, segments: &[Segment]) -> Result<()> {
    if q.dim() != k.dim() || q.dim() != v.dim() {
        return Err(Error::Argument(format!(
            "q/k/v shapes differ: {:?} {:?} {:?}",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    if n_heads == 0 || q.ncols() % n_heads != 0 {
        return Err(Error::Argument(format!("width {} not divisible into {n_heads} heads", q.ncols())));
    }
    let mut end = 0;
    for s in segments {
        if s.start != end || s.valid > s.len || s.len == 0 {
            return Err(Error::Argument(format!("bad segment {s:?}")));
        }
        end = s.start + s.len;
    }
    if end != q.nrows() {
        return Err(Error::Argument(format!(
            "segments cover {end} rows but inputs have {}",
            q.nrows()
        )));
    }
    Ok(())
}

fn block_probs(
    qb: ArrayView2<'_, f64>,
    kr: ArrayView2<'_, f64>,
    q0: usize,
    k0: usize,
    spec: MaskSpec,
    scale: f64,
) -> Array2<f64> {
    let mut scores = qb.dot(&kr.t());
    for (r, mut row) in scores.rows_mut().into_iter().enumerate() {
        let i = q0 + r;
        let mut max = f64::NEG_INFINITY;
        for (c, x) in row.iter_mut().enumerate() {
            if allowed(i, k0 + c, spec) {
                *x *= scale;
                max = max.max(*x);
            } else {
                *x = f64::NEG_INFINITY;
            }
        }
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        row.mapv_inplace(|x| x / sum);
    }
    scores
}

/// Multi-head attention. Head `h` occupies columns `h·d..(h+1)·d`.
pub fn multi_head_forward(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    n_heads: usize,
    segments: &[Segment],
    spec: MaskSpec,
    keep: bool,
) -> Result<(Array2<f64>, AttentionSaved)> {
    check_shapes(q, k, v, n_heads, segments)?;
    let d = q.ncols() / n_heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Array2::zeros(q.dim());
    let mut saved = AttentionSaved::default();
    for seg in segments {
        for h in 0..n_heads {
            let cols = h * d..(h + 1) * d;
            let mut q0 = 0;
            while q0 < seg.len {
                let q1 = (q0 + QUERY_BLOCK).min(seg.len);
                let (k0, k1) = key_range(q0, q1, seg.valid, spec);
                let rows = seg.start + q0..seg.start + q1;
                let krows = seg.start + k0..seg.start + k1;
                let p = block_probs(
                    q.slice(s![rows.clone(), cols.clone()]),
                    k.slice(s![krows.clone(), cols.clone()]),
                    q0,
                    k0,
                    spec,
                    scale,
                );
                let o = p.dot(&v.slice(s![krows, cols.clone()]));
                out.slice_mut(s![rows, cols.clone()]).assign(&o);
                if keep {
                    saved.probs.push(p);
                }
                q0 = q1;
            }
        }
    }
    Ok((out, saved))
}

/// Gradients of [`multi_head_forward`] with respect to q, k and v.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_backward(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    n_heads: usize,
    segments: &[Segment],
    spec: MaskSpec,
    saved: &AttentionSaved,
    dout: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let d = q.ncols() / n_heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = Array2::zeros(q.dim());
    let mut dk = Array2::zeros(k.dim());
    let mut dv = Array2::zeros(v.dim());
    let mut blocks = saved.probs.iter();
    for seg in segments {
        for h in 0..n_heads {
            let cols = h * d..(h + 1) * d;
            let mut q0 = 0;
            while q0 < seg.len {
                let q1 = (q0 + QUERY_BLOCK).min(seg.len);
                let (k0, k1) = key_range(q0, q1, seg.valid, spec);
                let rows = seg.start + q0..seg.start + q1;
                let krows = seg.start + k0..seg.start + k1;
                let p = blocks.next().expect("attention probabilities were not kept");
                let dob = dout.slice(s![rows.clone(), cols.clone()]);
                let vr = v.slice(s![krows.clone(), cols.clone()]);
                let mut ds = dob.dot(&vr.t());
                for (mut dsr, pr) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let dot: f64 = dsr.iter().zip(pr.iter()).map(|(a, b)| a * b).sum();
                    for (x, &pv) in dsr.iter_mut().zip(pr.iter()) {
                        *x = pv * (*x - dot) * scale;
                    }
                }
                let kr = k.slice(s![krows.clone(), cols.clone()]);
                let qb = q.slice(s![rows.clone(), cols.clone()]);
                let dqb = ds.dot(&kr);
                dq.slice_mut(s![rows, cols.clone()]).scaled_add(1.0, &dqb);
                let dkr = ds.t().dot(&qb);
                dk.slice_mut(s![krows.clone(), cols.clone()]).scaled_add(1.0, &dkr);
                let dvr = p.t().dot(&dob);
                dv.slice_mut(s![krows, cols.clone()]).scaled_add(1.0, &dvr);
                q0 = q1;
            }
        }
    }
    (dq, dk, dv)
}

/// Single-head attention over per-position vectors, optionally split into
/// packed member sequences by `boundaries`.
pub fn attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    spec: MaskSpec,
    boundaries: Option<&[usize]>,
) -> Result<Array2<f64>> {
    let segments = segments_from_boundaries(q.nrows(), boundaries)?;
    Ok(multi_head_forward(q, k, v, 1, &segments, spec, false)?.0)
}

/// Dense reference: one score matrix for the whole batch, with cross-segment
/// pairs masked out. Used to check the blocked kernel.
pub fn attention_dense_reference(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    spec: MaskSpec,
    boundaries: Option<&[usize]>,
) -> Result<Array2<f64>> {
    let n = q.nrows();
    let segments = segments_from_boundaries(n, boundaries)?;
    let mut owner = vec![0usize; n];
    let mut local = vec![0usize; n];
    for (si, s) in segments.iter().enumerate() {
        for r in 0..s.len {
            owner[s.start + r] = si;
            local[s.start + r] = r;
        }
    }
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let scores = q.dot(&k.t());
    let mut out = Array2::zeros(v.dim());
    for i in 0..n {
        let ok: Vec<usize> = (0..n)
            .filter(|&j| owner[i] == owner[j] && allowed(local[i], local[j], spec))
            .collect();
        let m = ok.iter().map(|&j| scores[[i, j]] * scale).fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = ok.iter().map(|&j| (scores[[i, j]] * scale - m).exp()).collect();
        let z: f64 = w.iter().sum();
        for (&j, wj) in ok.iter().zip(&w) {
            let row = v.row(j).to_owned() * (wj / z);
            out.row_mut(i).scaled_add(1.0, &row);
        }
    }
    Ok(out)
}

pub(crate) fn sum_rows(m: &Array2<f64>) -> Array2<f64> {
    m.sum_axis(Axis(0)).insert_axis(Axis(0))
}
