//! Corpus preparation: paragraph dedup, quality filtering, long-document
//! splitting and composition stats.

use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tracing::info;
use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::tokenizer::{word_count, TokenId, Vocab};

pub const DEFAULT_RATIO_THRESHOLD: f64 = 2.5;

/// Bit-array set membership with `k` independently seeded hashes.
#[derive(Debug, Clone)]
pub struct BloomFilter {
    bits: Vec<u64>,
    m: u64,
    seeds: Vec<u64>,
    inserted: u64,
}

impl BloomFilter {
    pub fn new(m_bits: u64, k: usize, seed: u64) -> Result<BloomFilter> {
        if m_bits == 0 || k == 0 {
            return Err(Error::Argument(format!("bloom filter needs m > 0 and k > 0, got m={m_bits} k={k}")));
        }
        Ok(BloomFilter {
            bits: vec![0; m_bits.div_ceil(64) as usize],
            m: m_bits,
            seeds: (0..k as u64).map(|i| derive_seed(&[seed, i])).collect(),
            inserted: 0,
        })
    }

    /// Sized for `expected` items at false-positive rate `fp_rate`:
    /// `m = −n·ln p / ln²2`, `k = (m/n)·ln 2`.
    pub fn with_rate(expected: u64, fp_rate: f64, seed: u64) -> Result<BloomFilter> {
        if !(fp_rate > 0.0 && fp_rate < 1.0) {
            return Err(Error::Argument(format!("false-positive rate must lie in (0, 1), got {fp_rate}")));
        }
        let n = expected.max(1) as f64;
        let ln2 = std::f64::consts::LN_2;
        let m = (-n * fp_rate.ln() / (ln2 * ln2)).ceil().max(64.0);
        let k = ((m / n) * ln2).round().max(1.0);
        Self::new(m as u64, k as usize, seed)
    }

    pub fn m(&self) -> u64 {
        self.m
    }

    pub fn k(&self) -> usize {
        self.seeds.len()
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    fn positions<'a>(&'a self, item: &'a [u8]) -> impl Iterator<Item = u64> + 'a {
        self.seeds.iter().map(move |&s| xxh3_64_with_seed(item, s) % self.m)
    }

    pub fn contains(&self, item: &[u8]) -> bool {
        self.positions(item).all(|p| self.bits[(p / 64) as usize] >> (p % 64) & 1 == 1)
    }

    /// Inserts `item`; returns whether it was (possibly) present before.
    pub fn insert(&mut self, item: &[u8]) -> bool {
        let pos: Vec<u64> = self.positions(item).collect();
        let mut present = true;
        for p in pos {
            let (w, b) = ((p / 64) as usize, p % 64);
            present &= self.bits[w] >> b & 1 == 1;
            self.bits[w] |= 1 << b;
        }
        self.inserted += 1;
        present
    }

    /// `(1 − e^(−k·n/m))^k` at the current fill.
    pub fn expected_fp_rate(&self) -> f64 {
        let k = self.k() as f64;
        (1.0 - (-k * self.inserted as f64 / self.m as f64).exp()).powf(k)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupStats {
    pub seen: u64,
    pub kept: u64,
    pub dropped: u64,
}

impl fmt::Display for DedupStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seen {}", self.seen)?;
        writeln!(f, "kept {}", self.kept)?;
        write!(f, "dropped {}", self.dropped)
    }
}

/// Keeps the first occurrence of every paragraph. A Bloom false positive
/// can also drop a rare unseen paragraph; exact duplicates are never kept.
pub fn dedup<S: AsRef<[u8]>>(paragraphs: impl IntoIterator<Item = S>, filter: &mut BloomFilter) -> (Vec<S>, DedupStats) {
    let mut stats = DedupStats::default();
    let mut out = Vec::new();
    for p in paragraphs {
        stats.seen += 1;
        if filter.insert(p.as_ref()) {
            stats.dropped += 1;
        } else {
            stats.kept += 1;
            out.push(p);
        }
    }
    (out, stats)
}

/// Paragraphs of `doc`: maximal runs of non-blank lines, trimmed.
pub fn paragraphs(doc: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur: Vec<&str> = Vec::new();
    for line in doc.lines() {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                out.push(cur.join("\n"));
                cur.clear();
            }
        } else {
            cur.push(line.trim_end());
        }
    }
    if !cur.is_empty() {
        out.push(cur.join("\n"));
    }
    out
}

/// Dedups paragraphs across documents; documents left empty disappear.
pub fn dedup_documents(docs: &[String], filter: &mut BloomFilter) -> (Vec<String>, DedupStats) {
    let mut total = DedupStats::default();
    let mut out = Vec::new();
    for d in docs {
        let (kept, s) = dedup(paragraphs(d), filter);
        total.seen += s.seen;
        total.kept += s.kept;
        total.dropped += s.dropped;
        if !kept.is_empty() {
            out.push(kept.join("\n\n"));
        }
    }
    (out, total)
}

/// Keep iff tokens per whitespace word ≤ `threshold`; no words → drop.
pub fn ratio_filter(doc: &str, vocab: &Vocab, threshold: f64) -> Result<bool> {
    if !(threshold > 0.0) {
        return Err(Error::Argument(format!("ratio threshold must be positive, got {threshold}")));
    }
    let words = word_count(doc);
    if words == 0 {
        return Ok(false);
    }
    Ok(vocab.count_tokens(doc) as f64 / words as f64 <= threshold)
}

/// Cuts `ids` into consecutive pieces of `target_len` (the last may be shorter).
pub fn split_ids(ids: &[TokenId], target_len: usize) -> Result<Vec<Vec<TokenId>>> {
    if target_len == 0 {
        return Err(Error::Argument("target length must be positive".into()));
    }
    Ok(ids.chunks(target_len).map(<[TokenId]>::to_vec).collect())
}

pub fn split_long(doc: &str, vocab: &Vocab, target_len: usize) -> Result<Vec<Vec<TokenId>>> {
    split_ids(&vocab.encode(doc, false), target_len)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositionReport {
    pub tokens: u64,
    pub sequences: u64,
    /// Lower-middle element for even counts; 0 for an empty dataset.
    pub median_length: u64,
}

impl fmt::Display for CompositionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "tokens {}", self.tokens)?;
        writeln!(f, "sequences {}", self.sequences)?;
        write!(f, "median_length {}", self.median_length)
    }
}

pub fn compose_report<S: AsRef<[TokenId]>>(seqs: &[S]) -> CompositionReport {
    let mut lens: Vec<u64> = seqs.iter().map(|s| s.as_ref().len() as u64).collect();
    let median_length = if lens.is_empty() {
        0
    } else {
        let mid = (lens.len() - 1) / 2;
        *lens.select_nth_unstable(mid).1
    };
    CompositionReport {
        tokens: lens.iter().sum(),
        sequences: lens.len() as u64,
        median_length,
    }
}

#[derive(Deserialize)]
struct DocLine {
    text: String,
}

/// One document per line: a JSON object with a `text` field (which may hold
/// blank-line paragraph breaks), or a plain line taken as a one-paragraph
/// document. Empty lines are skipped.
pub fn read_documents(path: &Path) -> Result<Vec<String>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if t.starts_with('{') {
            let d: DocLine = serde_json::from_str(t)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
            docs.push(d.text);
        } else {
            docs.push(t.to_string());
        }
    }
    info!(path = %path.display(), docs = docs.len(), "read documents");
    Ok(docs)
}

pub fn write_documents(path: &Path, docs: &[String]) -> Result<()> {
    let mut out = String::new();
    for d in docs {
        out.push_str(&serde_json::json!({ "text": d }).to_string());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
