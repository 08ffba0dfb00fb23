//! Question-answering needle-in-a-haystack: hide the paragraph holding the
//! answer among distractors, then score extracted spans by exact match in
//! three length buckets.

use std::collections::HashSet;
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tokenizer::{Piece, TokenId, Vocab};
use crate::trainer::{predict_spans, SpanExample};

pub const BUCKET_EDGES: [usize; 2] = [1_024, 4_096];
pub const BUCKET_NAMES: [&str; 3] = ["<1024", "1024-4095", "4096-8192"];
pub const MAX_ANSWER_TOKENS: usize = 30;

/// An extractive QA record. `answer_start` is a character offset into `context`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    #[serde(default)]
    pub id: String,
    pub question: String,
    pub context: String,
    pub answer: String,
    pub answer_start: usize,
    #[serde(default, alias = "title")]
    pub article: Option<String>,
}

impl QAPair {
    /// Byte offset of the answer in `context`, after checking it is there.
    pub fn answer_byte_start(&self) -> Result<usize> {
        let b = self
            .context
            .char_indices()
            .nth(self.answer_start)
            .map(|(b, _)| b)
            .ok_or_else(|| Error::Data(format!("pair `{}`: answer_start past the context", self.id)))?;
        if self.answer.is_empty() || !self.context[b..].starts_with(&self.answer) {
            return Err(Error::Data(format!("pair `{}`: answer not found at answer_start", self.id)));
        }
        Ok(b)
    }
}

/// A candidate distractor paragraph with its cached token count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Distractor {
    pub text: String,
    pub article: Option<String>,
    pub tokens: usize,
}

impl Distractor {
    pub fn new(text: impl Into<String>, article: Option<String>, vocab: &Vocab) -> Distractor {
        let text = text.into();
        let tokens = vocab.count_tokens(&text);
        Distractor { text, article, tokens }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HaystackExample {
    pub id: String,
    pub question: String,
    pub paragraphs: Vec<String>,
    pub needle_index: usize,
    pub answer: String,
    /// Byte offset of the answer inside the needle paragraph.
    pub answer_start: usize,
    /// Inclusive gold span in document token coordinates.
    pub gold_start: usize,
    pub gold_end: usize,
    /// Model input length: `[CLS] question [SEP] document [SEP]`.
    pub total_tokens: usize,
}

/// One document token with the paragraph and byte range it came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DocToken {
    pub id: TokenId,
    pub paragraph: usize,
    pub start: usize,
    pub end: usize,
}

impl HaystackExample {
    pub fn doc_tokens(&self, vocab: &Vocab) -> Vec<DocToken> {
        let mut out = Vec::new();
        for (i, p) in self.paragraphs.iter().enumerate() {
            out.extend(vocab.encode_with_offsets(p).into_iter().map(|Piece { id, start, end }| DocToken {
                id,
                paragraph: i,
                start,
                end,
            }));
        }
        out
    }

    /// Source text under document tokens `s..=e`; spans crossing paragraphs
    /// join the pieces with a blank line.
    pub fn span_text(&self, doc: &[DocToken], s: usize, e: usize) -> Option<String> {
        if s > e || e >= doc.len() {
            return None;
        }
        let mut parts = Vec::new();
        let mut i = s;
        while i <= e {
            let para = doc[i].paragraph;
            let mut j = i;
            while j < e && doc[j + 1].paragraph == para {
                j += 1;
            }
            parts.push(&self.paragraphs[para][doc[i].start..doc[j].end]);
            i = j + 1;
        }
        Some(parts.join("\n\n"))
    }

    pub fn bucket(&self) -> usize {
        bucket_of(self.total_tokens)
    }

    /// Span-extraction input, truncating the document to fit `max_len`.
    /// Returns the example and the number of document tokens kept.
    pub fn span_input(&self, vocab: &Vocab, max_len: usize) -> Result<(SpanExample, usize)> {
        let sp = vocab.special();
        let q = vocab.encode(&self.question, false);
        let doc = self.doc_tokens(vocab);
        let fixed = q.len() + 3;
        if fixed >= max_len {
            return Err(Error::Length { len: fixed + 1, max: max_len });
        }
        let kept = doc.len().min(max_len - fixed);
        let mut tokens = Vec::with_capacity(fixed + kept);
        tokens.push(sp.cls);
        tokens.extend(&q);
        tokens.push(sp.sep);
        let off = tokens.len();
        tokens.extend(doc[..kept].iter().map(|t| t.id));
        tokens.push(sp.sep);
        let gold = if self.gold_end < kept {
            (off + self.gold_start, off + self.gold_end)
        } else {
            (off, off)
        };
        Ok((
            SpanExample {
                tokens,
                candidates: off..off + kept.max(1),
                gold,
            },
            kept,
        ))
    }
}

pub fn bucket_of(total_tokens: usize) -> usize {
    BUCKET_EDGES.iter().take_while(|&&e| total_tokens >= e).count()
}

/// How many distractors to aim for before the token cap applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistractorCount {
    /// Drawn uniformly from `0..=n`.
    UpTo(usize),
    Exactly(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub max_distractors: usize,
    pub token_cap: usize,
}

impl SplitSpec {
    pub const TRAIN: SplitSpec = SplitSpec {
        max_distractors: 3,
        token_cap: 1_024,
    };
    pub const TEST: SplitSpec = SplitSpec {
        max_distractors: 20,
        token_cap: 8_192,
    };

    pub fn by_name(name: &str) -> Result<SplitSpec> {
        match name {
            "train" => Ok(Self::TRAIN),
            "test" => Ok(Self::TEST),
            _ => Err(Error::Argument(format!("unknown split `{name}` (expected train or test)"))),
        }
    }
}

/// Builds one haystack, or `None` when the needle alone exceeds `token_cap`.
///
/// Distractors are drawn without replacement; any containing the answer
/// (case-sensitive substring), sharing the needle's article, or equal to the
/// needle is skipped. Sampling stops at the target count or at the first
/// paragraph that would break the cap.
pub fn build_haystack(
    pair: &QAPair,
    pool: &[Distractor],
    count: DistractorCount,
    token_cap: usize,
    vocab: &Vocab,
    rng: &mut impl Rng,
) -> Result<Option<HaystackExample>> {
    let a0 = pair.answer_byte_start()?;
    let a1 = a0 + pair.answer.len();
    let needle_pieces = vocab.encode_with_offsets(&pair.context);
    let inside: Vec<usize> = (0..needle_pieces.len())
        .filter(|&i| needle_pieces[i].start < a1 && needle_pieces[i].end > a0)
        .collect();
    let (Some(&g0), Some(&g1)) = (inside.first(), inside.last()) else {
        return Err(Error::Data(format!("pair `{}`: answer covers no token", pair.id)));
    };
    if needle_pieces[g0].start != a0 || needle_pieces[g1].end != a1 {
        return Err(Error::Data(format!("pair `{}`: answer does not align with token boundaries", pair.id)));
    }
    let mut total = 3 + vocab.count_tokens(&pair.question) + needle_pieces.len();
    if total > token_cap {
        return Ok(None);
    }
    let target = match count {
        DistractorCount::UpTo(n) => rng.random_range(0..=n),
        DistractorCount::Exactly(n) => n,
    };
    let mut chosen: Vec<&Distractor> = Vec::new();
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    for i in 0..idx.len() {
        if chosen.len() >= target {
            break;
        }
        let j = rng.random_range(i..idx.len());
        idx.swap(i, j);
        let d = &pool[idx[i]];
        if d.text.contains(&pair.answer)
            || d.text == pair.context
            || (d.article.is_some() && d.article == pair.article)
        {
            continue;
        }
        if total + d.tokens > token_cap {
            break;
        }
        total += d.tokens;
        chosen.push(d);
    }
    let mut order: Vec<usize> = (0..=chosen.len()).collect();
    order.shuffle(rng);
    let needle_index = order.iter().position(|&k| k == 0).expect("needle is in the order");
    let paragraphs: Vec<String> = order
        .iter()
        .map(|&k| if k == 0 { pair.context.clone() } else { chosen[k - 1].text.clone() })
        .collect();
    let before: usize = order[..needle_index].iter().map(|&k| chosen[k - 1].tokens).sum();
    Ok(Some(HaystackExample {
        id: pair.id.clone(),
        question: pair.question.clone(),
        paragraphs,
        needle_index,
        answer: pair.answer.clone(),
        answer_start: a0,
        gold_start: before + g0,
        gold_end: before + g1,
        total_tokens: total,
    }))
}

/// The default pool: every distinct needle paragraph, tagged with its article.
pub fn needle_pool(pairs: &[QAPair], vocab: &Vocab) -> Vec<Distractor> {
    let mut seen = HashSet::new();
    pairs
        .iter()
        .filter(|p| seen.insert(p.context.as_str()))
        .map(|p| Distractor::new(p.context.clone(), p.article.clone(), vocab))
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct NiahBuild {
    pub examples: Vec<HaystackExample>,
    /// `(pair id, reason)` for every pair left out.
    pub skipped: Vec<(String, String)>,
}

/// One example per usable pair, each from its own derived seed.
pub fn build_dataset(
    pairs: &[QAPair],
    pool: Option<&[Distractor]>,
    split: SplitSpec,
    vocab: &Vocab,
    seed: u64,
) -> Result<NiahBuild> {
    let default_pool;
    let pool = match pool {
        Some(p) => p,
        None => {
            default_pool = needle_pool(pairs, vocab);
            &default_pool
        }
    };
    let mut out = NiahBuild::default();
    for (i, pair) in pairs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, i as u64]));
        match build_haystack(pair, pool, DistractorCount::UpTo(split.max_distractors), split.token_cap, vocab, &mut rng) {
            Ok(Some(ex)) => out.examples.push(ex),
            Ok(None) => {
                warn!(id = %pair.id, "needle exceeds the token cap; skipped");
                out.skipped.push((pair.id.clone(), "needle exceeds token cap".into()));
            }
            Err(Error::Data(msg)) => {
                warn!(id = %pair.id, %msg, "pair skipped");
                out.skipped.push((pair.id.clone(), msg));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Span-extraction training examples; those whose answer would be cut off
/// by truncation to `max_len` are left out.
pub fn training_examples(examples: &[HaystackExample], vocab: &Vocab, max_len: usize) -> Result<Vec<SpanExample>> {
    let mut out = Vec::new();
    for ex in examples {
        let (s, kept) = ex.span_input(vocab, max_len)?;
        if ex.gold_end < kept {
            out.push(s);
        }
    }
    Ok(out)
}

/// Predicted document-token spans, with inputs truncated to the model's
/// maximum length.
pub fn predict(model: &Model, examples: &[HaystackExample], vocab: &Vocab) -> Result<Vec<Option<(usize, usize)>>> {
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        let (s, _) = ex.span_input(vocab, model.cfg().max_seq_len)?;
        let off = s.candidates.start;
        let (a, b) = predict_spans(model, std::slice::from_ref(&s), MAX_ANSWER_TOKENS)?[0];
        out.push(Some((a - off, b - off)));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketScore {
    pub correct: usize,
    pub total: usize,
}

impl BucketScore {
    /// Exact match; `None` for an empty bucket.
    pub fn em(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NiahReport {
    pub overall: BucketScore,
    pub buckets: [BucketScore; 3],
    /// Examples without a prediction (scored wrong).
    pub missing: Vec<String>,
}

impl fmt::Display for NiahReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let em = |b: &BucketScore| b.em().map_or("-".to_string(), |v| format!("{v:.3}"));
        writeln!(f, "{:<12} {:>6} {:>8}", "bucket", "n", "EM")?;
        for (name, b) in BUCKET_NAMES.iter().zip(&self.buckets) {
            writeln!(f, "{name:<12} {:>6} {:>8}", b.total, em(b))?;
        }
        write!(f, "{:<12} {:>6} {:>8}", "overall", self.overall.total, em(&self.overall))?;
        if !self.missing.is_empty() {
            write!(f, "\nmissing predictions: {}", self.missing.len())?;
        }
        Ok(())
    }
}

/// Exact match of the predicted span's source text against the answer.
pub fn evaluate(examples: &[HaystackExample], predictions: &[Option<(usize, usize)>], vocab: &Vocab) -> NiahReport {
    let mut r = NiahReport::default();
    for (i, ex) in examples.iter().enumerate() {
        let b = ex.bucket();
        r.overall.total += 1;
        r.buckets[b].total += 1;
        let Some(&Some((s, e))) = predictions.get(i) else {
            r.missing.push(ex.id.clone());
            continue;
        };
        let doc = ex.doc_tokens(vocab);
        if ex.span_text(&doc, s, e).as_deref() == Some(ex.answer.as_str()) {
            r.overall.correct += 1;
            r.buckets[b].correct += 1;
        }
    }
    r
}

pub fn read_pairs(path: &Path) -> Result<Vec<QAPair>> {
    read_jsonl(path)
}

pub fn read_examples(path: &Path) -> Result<Vec<HaystackExample>> {
    read_jsonl(path)
}

pub fn write_examples(path: &Path, examples: &[HaystackExample]) -> Result<()> {
    write_jsonl(path, examples)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it).map_err(|e| Error::Data(e.to_string()))?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// A small synthetic QA world: filler words `w00…w79`, answers `zq00…zq31`,
/// and needles that state the answer right after the word `needle`.
pub mod toy {
    use super::*;

    pub const QUESTION: &str = "what follows needle ?";

    pub fn words() -> Vec<String> {
        let mut w: Vec<String> = (0..80).map(|i| format!("w{i:02}")).collect();
        w.extend((0..32).map(|i| format!("zq{i:02}")));
        w.extend(["needle", "what", "follows", "?"].map(String::from));
        w
    }

    pub fn vocab() -> Vocab {
        Vocab::synthetic(&words()).expect("toy vocabulary is valid")
    }

    fn filler(rng: &mut impl Rng, n: usize) -> Vec<String> {
        (0..n).map(|_| format!("w{:02}", rng.random_range(0..80))).collect()
    }

    /// `n` pairs whose needle paragraphs hold `len` words.
    pub fn pairs(n: usize, len: std::ops::Range<usize>, seed: u64) -> Vec<QAPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let words = rng.random_range(len.clone());
                let mut w = filler(&mut rng, words.max(3) - 2);
                let at = rng.random_range(0..=w.len());
                let answer = format!("zq{:02}", rng.random_range(0..32));
                let mut before = w[..at].join(" ");
                if at > 0 {
                    before.push(' ');
                }
                let answer_start = before.chars().count() + "needle ".len();
                w.insert(at, answer.clone());
                w.insert(at, "needle".into());
                let context = w.join(" ");
                QAPair {
                    id: format!("toy-{i}"),
                    question: QUESTION.into(),
                    context,
                    answer,
                    answer_start,
                    article: None,
                }
            })
            .collect()
    }

    /// Filler-only distractor paragraphs.
    pub fn pool(n: usize, len: std::ops::Range<usize>, seed: u64, vocab: &Vocab) -> Vec<Distractor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let k = rng.random_range(len.clone());
                Distractor::new(filler(&mut rng, k).join(" "), None, vocab)
            })
            .collect()
    }
}
