//! Inference throughput: random-token datasets run through the encoder as
//! padded batches and as packed batches, timed over repetitions.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::error::{Error, Result};
use crate::model::{Batch, ForwardOptions, Model};
use crate::tokenizer::TokenId;

pub const DEFAULT_DOCS: usize = 8_192;
pub const DEFAULT_REPS: usize = 10;

/// How the second number of `normal:mean,x` is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpreadReading {
    StdDev,
    Variance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthDist {
    Fixed { len: usize },
    Normal { mean: f64, spread: f64, reading: SpreadReading },
}

impl LengthDist {
    pub fn std_dev(&self) -> f64 {
        match *self {
            LengthDist::Fixed { .. } => 0.0,
            LengthDist::Normal { spread, reading: SpreadReading::StdDev, .. } => spread,
            LengthDist::Normal { spread, reading: SpreadReading::Variance, .. } => spread.sqrt(),
        }
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self, LengthDist::Fixed { .. })
    }
}

impl fmt::Display for LengthDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LengthDist::Fixed { len } => write!(f, "fixed:{len}"),
            LengthDist::Normal { mean, spread, reading } => {
                let tag = match reading {
                    SpreadReading::StdDev => "std",
                    SpreadReading::Variance => "var",
                };
                write!(f, "normal:{mean},{spread}:{tag}")
            }
        }
    }
}

impl FromStr for LengthDist {
    type Err = Error;

    /// `fixed:N`, `normal:MEAN,SPREAD` (spread read as a standard deviation)
    /// or `normal:MEAN,SPREAD:var`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Argument(format!("bad length spec `{s}` (try fixed:512 or normal:4096,1024)"));
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "fixed" => Ok(LengthDist::Fixed {
                len: rest.parse().map_err(|_| bad())?,
            }),
            "normal" => {
                let (nums, tag) = rest.split_once(':').unwrap_or((rest, "std"));
                let (m, sp) = nums.split_once(',').ok_or_else(bad)?;
                let reading = match tag {
                    "std" => SpreadReading::StdDev,
                    "var" => SpreadReading::Variance,
                    _ => return Err(bad()),
                };
                Ok(LengthDist::Normal {
                    mean: m.parse().map_err(|_| bad())?,
                    spread: sp.parse().map_err(|_| bad())?,
                    reading,
                })
            }
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub lengths: LengthDist,
    pub n_docs: usize,
    pub seed: u64,
}

/// `n_docs` documents of uniformly random ids from `ids`; normal lengths are
/// rounded and clamped to `1..=max_len`.
pub fn gen_synthetic(spec: &SyntheticSpec, ids: &[TokenId], max_len: usize) -> Result<Vec<Vec<TokenId>>> {
    if ids.is_empty() {
        return Err(Error::Argument("no token ids to sample from".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lengths: Vec<usize> = match spec.lengths {
        LengthDist::Fixed { len } => {
            if len == 0 || len > max_len {
                return Err(Error::Argument(format!("length {len} outside 1..={max_len}")));
            }
            vec![len; spec.n_docs]
        }
        LengthDist::Normal { mean, .. } => {
            let sd = spec.lengths.std_dev();
            if !(mean >= 1.0) || mean > max_len as f64 || !(sd >= 0.0) {
                return Err(Error::Argument(format!("normal({mean}, {sd}) unusable with max length {max_len}")));
            }
            let n = Normal::new(mean, sd).map_err(|e| Error::Argument(e.to_string()))?;
            (0..spec.n_docs)
                .map(|_| (n.sample(&mut rng).round().max(1.0) as usize).min(max_len))
                .collect()
        }
    };
    Ok(lengths
        .into_iter()
        .map(|len| (0..len).map(|_| ids[rng.random_range(0..ids.len())]).collect())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecPath {
    Padded,
    Packed,
}

impl fmt::Display for ExecPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExecPath::Padded => "padded",
            ExecPath::Packed => "packed",
        })
    }
}

/// Consecutive groups of `batch_size` documents, in dataset order.
pub fn batches(docs: &[Vec<TokenId>], batch_size: usize) -> impl Iterator<Item = &[Vec<TokenId>]> {
    docs.chunks(batch_size.max(1))
}

/// Rows the model processes: padded batches are `members × longest`.
pub fn positions(docs: &[Vec<TokenId>], batch_size: usize, path: ExecPath) -> u64 {
    batches(docs, batch_size)
        .map(|b| match path {
            ExecPath::Packed => b.iter().map(|d| d.len() as u64).sum::<u64>(),
            ExecPath::Padded => b.len() as u64 * b.iter().map(Vec::len).max().unwrap_or(0) as u64,
        })
        .sum()
}

/// Mean and sample standard deviation (`n − 1`); the deviation is 0 below two samples.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let ss = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
    (mean, (ss / (n - 1.0)).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub model: String,
    pub n_params: usize,
    pub spec: SyntheticSpec,
    pub path: ExecPath,
    pub batch_size: usize,
    pub reps: usize,
    /// Sum of document lengths.
    pub tokens: u64,
    /// Rows processed, padding included.
    pub positions: u64,
    /// Per-repetition timings; empty for a dry run.
    pub seconds_per_million_tokens: Vec<f64>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub notes: Vec<String>,
}

impl ThroughputReport {
    pub fn summary(&self) -> String {
        match (self.mean, self.std) {
            (Some(m), Some(s)) => format!("{m:.3} ± {s:.3}"),
            _ => "-".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MeasureOptions {
    pub batch_size: usize,
    pub reps: usize,
    /// Skip the model entirely and report counts only.
    pub dry_run: bool,
    /// Rough per-batch activation budget in bytes; larger batches are halved.
    pub memory_limit: Option<u64>,
    pub pad_id: TokenId,
}

impl Default for MeasureOptions {
    fn default() -> Self {
        MeasureOptions {
            batch_size: 8,
            reps: DEFAULT_REPS,
            dry_run: false,
            memory_limit: None,
            pad_id: 0,
        }
    }
}

/// Activation bytes for one padded batch: hidden states and FFN
/// activations per row plus one attention score matrix per member and head.
pub fn estimate_batch_bytes(model: &Model, docs: &[Vec<TokenId>], batch_size: usize) -> u64 {
    let c = model.cfg();
    batches(docs, batch_size)
        .map(|b| {
            let w = b.iter().map(Vec::len).max().unwrap_or(0) as u64;
            let rows = b.len() as u64 * w;
            8 * (rows * (4 * c.hidden + 2 * c.intermediate) as u64 + b.len() as u64 * c.n_heads as u64 * w * w)
        })
        .max()
        .unwrap_or(0)
}

fn build(batch: &[Vec<TokenId>], path: ExecPath, pad: TokenId) -> Result<Batch> {
    match path {
        ExecPath::Packed => Batch::from_sequences(batch),
        ExecPath::Padded => Batch::padded(batch, pad),
    }
}

/// Padded and packed outputs on the same members must agree on real rows.
pub fn correctness_gate(model: &Model, probe: &[Vec<TokenId>], pad: TokenId) -> Result<f64> {
    let packed = model.forward(&build(probe, ExecPath::Packed, pad)?, &ForwardOptions::eval())?.hidden;
    let pb = build(probe, ExecPath::Padded, pad)?;
    let padded = model.forward(&pb, &ForwardOptions::eval())?.hidden;
    let rows = pb.valid_rows();
    let mut diff = 0.0f64;
    for (i, &r) in rows.iter().enumerate() {
        for (a, b) in packed.row(i).iter().zip(padded.row(r)) {
            diff = diff.max((a - b).abs());
        }
    }
    if diff > 1e-5 {
        return Err(Error::Numeric(format!("padded and packed outputs differ by {diff:e}")));
    }
    Ok(diff)
}

/// Times full passes over `docs`; one warm-up pass is discarded.
pub fn measure(
    model: &Model,
    model_id: &str,
    spec: &SyntheticSpec,
    docs: &[Vec<TokenId>],
    path: ExecPath,
    opts: &MeasureOptions,
) -> Result<ThroughputReport> {
    let mut notes = Vec::new();
    if let LengthDist::Normal { reading, .. } = spec.lengths {
        notes.push(format!("spread read as {}", if reading == SpreadReading::StdDev { "std dev" } else { "variance" }));
    }
    let mut batch_size = opts.batch_size.max(1);
    if let Some(limit) = opts.memory_limit {
        while batch_size > 1 && estimate_batch_bytes(model, docs, batch_size) > limit {
            batch_size /= 2;
        }
        if batch_size != opts.batch_size {
            warn!(from = opts.batch_size, to = batch_size, "batch reduced to fit the memory limit");
            notes.push(format!("batch reduced from {} to {batch_size} for memory", opts.batch_size));
        }
    }
    let tokens: u64 = docs.iter().map(|d| d.len() as u64).sum();
    let mut report = ThroughputReport {
        model: model_id.to_string(),
        n_params: model.params.n_params(),
        spec: *spec,
        path,
        batch_size,
        reps: opts.reps,
        tokens,
        positions: positions(docs, batch_size, path),
        seconds_per_million_tokens: Vec::new(),
        mean: None,
        std: None,
        notes,
    };
    if opts.dry_run {
        return Ok(report);
    }
    let probe: Vec<Vec<TokenId>> = docs.iter().take(4).map(|d| d[..d.len().min(128)].to_vec()).collect();
    if !probe.is_empty() {
        correctness_gate(model, &probe, opts.pad_id)?;
    }
    let run = || -> Result<f64> {
        let t0 = Instant::now();
        for b in batches(docs, batch_size) {
            let out = model.forward(&build(b, path, opts.pad_id)?, &ForwardOptions::eval())?;
            std::hint::black_box(&out.hidden);
        }
        Ok(t0.elapsed().as_secs_f64())
    };
    run()?;
    for rep in 0..opts.reps {
        let secs = run()?;
        let v = secs * 1e6 / tokens as f64;
        info!(%path, rep, secs_per_mtok = v, "bench repetition");
        report.seconds_per_million_tokens.push(v);
    }
    let (m, s) = mean_std(&report.seconds_per_million_tokens);
    report.mean = Some(m);
    report.std = Some(s);
    Ok(report)
}

/// Rows: model and parameter count; columns: short/long × fixed/variable.
pub fn render_table(reports: &[ThroughputReport]) -> String {
    let mut models: Vec<(&str, usize)> = Vec::new();
    for r in reports {
        if !models.iter().any(|m| m.0 == r.model) {
            models.push((&r.model, r.n_params));
        }
    }
    let mut lines = vec![format!(
        "{:<20} {:>10} {:>7} {:>18} {:>18} {:>18} {:>18}",
        "model", "params", "path", "short fixed", "short variable", "long fixed", "long variable"
    )];
    for (name, n) in models {
        for path in [ExecPath::Padded, ExecPath::Packed] {
            let cell = |long: bool, fixed: bool| {
                reports
                    .iter()
                    .find(|r| {
                        let len = match r.spec.lengths {
                            LengthDist::Fixed { len } => len as f64,
                            LengthDist::Normal { mean, .. } => mean,
                        };
                        r.model == name && r.path == path && r.spec.lengths.is_fixed() == fixed && (len > 1024.0) == long
                    })
                    .map_or("-".to_string(), ThroughputReport::summary)
            };
            if reports.iter().any(|r| r.model == name && r.path == path) {
                lines.push(format!(
                    "{name:<20} {n:>10} {path:>7} {:>18} {:>18} {:>18} {:>18}",
                    cell(false, true),
                    cell(false, false),
                    cell(true, true),
                    cell(true, false)
                ));
            }
        }
    }
    lines.join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ArchConfig, PresetName};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn ids() -> Vec<TokenId> {
        (5..128).collect()
    }

    #[test]
    fn spec_parsing() {
        assert_eq!("fixed:512".parse::<LengthDist>().unwrap(), LengthDist::Fixed { len: 512 });
        let n: LengthDist = "normal:256,64:var".parse().unwrap();
        assert_eq!(n.std_dev(), 8.0);
        assert_eq!("normal:256,64".parse::<LengthDist>().unwrap().std_dev(), 64.0);
        assert!("uniform:3".parse::<LengthDist>().is_err());
        for s in ["fixed:512", "normal:4096,1024:std", "normal:256,64:var"] {
            assert_eq!(s.parse::<LengthDist>().unwrap().to_string(), s);
        }
    }

    #[test]
    fn fixed_generation() {
        let spec = SyntheticSpec { lengths: LengthDist::Fixed { len: 512 }, n_docs: DEFAULT_DOCS, seed: 1 };
        let d = gen_synthetic(&spec, &ids(), 8_192).unwrap();
        assert_eq!(d.len(), 8_192);
        assert!(d.iter().all(|x| x.len() == 512));
        let one = SyntheticSpec { lengths: LengthDist::Fixed { len: 1 }, n_docs: 1, seed: 1 };
        assert_eq!(gen_synthetic(&one, &ids(), 10).unwrap()[0].len(), 1);
        let long = SyntheticSpec { lengths: LengthDist::Fixed { len: 9_000 }, n_docs: 1, seed: 1 };
        assert!(matches!(gen_synthetic(&long, &ids(), 8_192), Err(Error::Argument(_))));
        assert_eq!(gen_synthetic(&spec, &ids(), 8_192).unwrap(), d);
    }

    #[test]
    fn normal_mean() {
        let spec = SyntheticSpec {
            lengths: LengthDist::Normal { mean: 256.0, spread: 8.0, reading: SpreadReading::StdDev },
            n_docs: 10_000,
            seed: 3,
        };
        let d = gen_synthetic(&spec, &ids(), 8_192).unwrap();
        let mean = d.iter().map(|x| x.len() as f64).sum::<f64>() / d.len() as f64;
        assert!((mean - 256.0).abs() <= 1.0, "{mean}");
    }

    #[test]
    fn std_two_pass_oracle() {
        let xs = [2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0];
        let (m, s) = mean_std(&xs);
        assert_eq!(m, 5.0);
        // Σ(x−5)² = 32, /7
        assert!((s - (32.0f64 / 7.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
    }

    #[test]
    fn dry_run_counts() {
        let m = Model::init(&ArchConfig::preset(PresetName::TinyTest), 0).unwrap();
        let spec = SyntheticSpec { lengths: LengthDist::Fixed { len: 64 }, n_docs: 10, seed: 0 };
        let d = gen_synthetic(&spec, &ids(), 512).unwrap();
        let opts = MeasureOptions { dry_run: true, batch_size: 4, ..Default::default() };
        let r = measure(&m, "tiny", &spec, &d, ExecPath::Padded, &opts).unwrap();
        assert_eq!((r.tokens, r.positions), (640, 640));
        assert!(r.mean.is_none());
    }

    #[test]
    fn memory_limit_halves_batch() {
        let m = Model::init(&ArchConfig::preset(PresetName::TinyTest), 0).unwrap();
        let spec = SyntheticSpec { lengths: LengthDist::Fixed { len: 64 }, n_docs: 16, seed: 0 };
        let d = gen_synthetic(&spec, &ids(), 512).unwrap();
        let limit = estimate_batch_bytes(&m, &d, 2);
        let opts = MeasureOptions { dry_run: true, batch_size: 16, memory_limit: Some(limit), ..Default::default() };
        let r = measure(&m, "tiny", &spec, &d, ExecPath::Packed, &opts).unwrap();
        assert_eq!(r.batch_size, 2);
        assert!(r.notes.iter().any(|n| n.contains("memory")));
    }

    proptest! {
        #[test]
        fn padded_positions_dominate(lens in proptest::collection::vec(1usize..50, 1..30), bs in 1usize..8) {
            let docs: Vec<Vec<TokenId>> = lens.iter().map(|&n| vec![5; n]).collect();
            let pad = positions(&docs, bs, ExecPath::Padded);
            let pk = positions(&docs, bs, ExecPath::Packed);
            prop_assert!(pad >= pk);
            let equal_in_batches = docs.chunks(bs).all(|b| b.iter().all(|d| d.len() == b[0].len()));
            prop_assert_eq!(pad == pk, equal_in_batches);
        }
    }
}
