//! Masking, masked-token losses and the contrastive embedding loss.

use ndarray::Axis;
use rand::Rng;

use crate::autograd::{log_softmax_rows, Mat};
use crate::config::MaskPolicy;
use crate::error::{Error, Result};
use crate::tokenizer::{SpecialIds, TokenId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedBatch {
    pub corrupted: Vec<TokenId>,
    /// Original id at masked positions, `None` elsewhere.
    pub labels: Vec<Option<TokenId>>,
    pub mask_positions: Vec<usize>,
}

/// Masks each non-special position independently with probability `rate`.
///
/// Under `bert_80_10_10` a masked position becomes MASK, a random regular id
/// or stays unchanged with probabilities 0.8/0.1/0.1. Random replacements are
/// drawn from `0..vocab_size` excluding specials.
pub fn mlm_mask<R: Rng + ?Sized>(
    ids: &[TokenId],
    rate: f64,
    policy: MaskPolicy,
    specials: &SpecialIds,
    vocab_size: usize,
    rng: &mut R,
) -> Result<MaskedBatch> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Argument(format!("mask rate {rate} outside [0, 1)")));
    }
    let mut corrupted = ids.to_vec();
    let mut labels = vec![None; ids.len()];
    let mut mask_positions = Vec::new();
    for (i, &id) in ids.iter().enumerate() {
        if specials.contains(id) || rng.random::<f64>() >= rate {
            continue;
        }
        mask_positions.push(i);
        labels[i] = Some(id);
        corrupted[i] = match policy {
            MaskPolicy::AllMask => specials.mask,
            MaskPolicy::Bert801010 => {
                let u: f64 = rng.random();
                if u < 0.8 {
                    specials.mask
                } else if u < 0.9 {
                    loop {
                        let r = rng.random_range(0..vocab_size as TokenId);
                        if !specials.contains(r) {
                            break r;
                        }
                    }
                } else {
                    id
                }
            }
        };
    }
    Ok(MaskedBatch {
        corrupted,
        labels,
        mask_positions,
    })
}

/// Mean cross-entropy over labelled rows of `logits`.
pub fn mlm_loss(logits: &Mat, labels: &[Option<TokenId>]) -> Result<f64> {
    if logits.nrows() != labels.len() {
        return Err(Error::Argument(format!(
            "{} logit rows for {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
    if rows.is_empty() {
        return Err(Error::Argument("no masked positions".into()));
    }
    let sel = logits.select(Axis(0), &rows);
    let (lse, _) = log_softmax_rows(&sel);
    let total: f64 = rows
        .iter()
        .enumerate()
        .map(|(r, &i)| lse[r] - sel[[r, labels[i].unwrap() as usize]])
        .sum();
    Ok(total / rows.len() as f64)
}

/// Shifts each masked position `i` to prediction position `i − 1`; masks at
/// position 0 have no predecessor and are dropped.
pub fn mntp_targets(ids: &[TokenId], mask_positions: &[usize]) -> (Vec<usize>, Vec<TokenId>) {
    mask_positions
        .iter()
        .filter(|&&i| i > 0)
        .map(|&i| (i - 1, ids[i]))
        .unzip()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfoNceOptions {
    pub temperature: f64,
    /// Score each query against the other queries' positives as well.
    pub in_batch: bool,
}

impl Default for InfoNceOptions {
    fn default() -> Self {
        InfoNceOptions {
            temperature: 0.05,
            in_batch: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InfoNceGrad {
    pub loss: f64,
    pub d_queries: Mat,
    pub d_positives: Mat,
    pub d_negatives: Mat,
}

fn unit_rows(m: &Mat, what: &str) -> Result<(Mat, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.nrows());
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Argument(format!("{what} vector with zero or non-finite norm")));
        }
        row /= n;
        norms.push(n);
    }
    Ok((out, norms))
}

/// Back through `x ↦ x/|x|` for every row.
fn unit_backward(unit: &Mat, norms: &[f64], d_unit: &Mat) -> Mat {
    let mut d = d_unit.clone();
    for ((mut dr, ur), &n) in d.rows_mut().into_iter().zip(unit.rows()).zip(norms) {
        let proj = dr.dot(&ur);
        dr.scaled_add(-proj, &ur);
        dr /= n;
    }
    d
}

/// InfoNCE over cosine similarities and its gradients.
///
/// Query `i` is scored against its positive, every explicit negative and,
/// with `in_batch`, the other queries' positives. The loss is averaged over
/// queries.
pub fn info_nce_with_grad(queries: &Mat, positives: &Mat, negatives: &Mat, opts: InfoNceOptions) -> Result<InfoNceGrad> {
    let b = queries.nrows();
    if b < 2 {
        return Err(Error::Argument(format!("InfoNCE needs a batch of at least 2, got {b}")));
    }
    if !(opts.temperature > 0.0) {
        return Err(Error::Argument(format!("temperature {} must be positive", opts.temperature)));
    }
    if positives.nrows() != b
        || positives.ncols() != queries.ncols()
        || (negatives.nrows() > 0 && negatives.ncols() != queries.ncols())
    {
        return Err(Error::Argument("InfoNCE shape mismatch".into()));
    }
    let (qu, qn) = unit_rows(queries, "query")?;
    let (pu, pn) = unit_rows(positives, "positive")?;
    let (nu, nn) = unit_rows(negatives, "negative")?;
    let n_neg = negatives.nrows();
    let tau = opts.temperature;

    let mut d_qu = Mat::zeros(qu.dim());
    let mut d_pu = Mat::zeros(pu.dim());
    let mut d_nu = Mat::zeros(nu.dim());
    let mut loss = 0.0;
    for i in 0..b {
        let q = qu.row(i);
        // candidate list: positives (own only, or all), then negatives
        let pos_range: Vec<usize> = if opts.in_batch { (0..b).collect() } else { vec![i] };
        let mut scores: Vec<f64> = pos_range.iter().map(|&j| q.dot(&pu.row(j)) / tau).collect();
        scores.extend((0..n_neg).map(|j| q.dot(&nu.row(j)) / tau));
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
        let own = pos_range.iter().position(|&j| j == i).unwrap();
        loss += m + z.ln() - scores[own];
        for (c, s) in scores.iter().enumerate() {
            let mut g = (s - m).exp() / z;
            if c == own {
                g -= 1.0;
            }
            let g = g / (tau * b as f64);
            let (cand, d_cand) = if c < pos_range.len() {
                (pu.row(pos_range[c]), d_pu.row_mut(pos_range[c]))
            } else {
                (nu.row(c - pos_range.len()), d_nu.row_mut(c - pos_range.len()))
            };
            let mut d_cand = d_cand;
            d_cand.scaled_add(g, &q);
            d_qu.row_mut(i).scaled_add(g, &cand);
        }
    }
    Ok(InfoNceGrad {
        loss: loss / b as f64,
        d_queries: unit_backward(&qu, &qn, &d_qu),
        d_positives: unit_backward(&pu, &pn, &d_pu),
        d_negatives: unit_backward(&nu, &nn, &d_nu),
    })
}

pub fn info_nce(queries: &Mat, positives: &Mat, negatives: &Mat, opts: InfoNceOptions) -> Result<f64> {
    Ok(info_nce_with_grad(queries, positives, negatives, opts)?.loss)
}
