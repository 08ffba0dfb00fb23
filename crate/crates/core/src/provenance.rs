//! Append-only record of which sequences each optimizer step consumed.
//!
//! On disk every record is a little-endian `u32` byte length followed by
//! `step u64, token_count u64, n u32, n × sequence id u64, rng digest u64`.
//! The running digest chains SHA-256 over the encoded records so a checkpoint
//! can pin a log prefix with 32 bytes.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProvenanceRecord {
    pub step: u64,
    /// Cumulative tokens consumed after this step.
    pub token_count: u64,
    pub sequence_ids: Vec<u64>,
    pub rng_digest: u64,
}

impl ProvenanceRecord {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(28 + 8 * self.sequence_ids.len());
        b.extend(self.step.to_le_bytes());
        b.extend(self.token_count.to_le_bytes());
        b.extend((self.sequence_ids.len() as u32).to_le_bytes());
        for id in &self.sequence_ids {
            b.extend(id.to_le_bytes());
        }
        b.extend(self.rng_digest.to_le_bytes());
        b
    }

    fn decode(b: &[u8]) -> Result<ProvenanceRecord> {
        let bad = || Error::Data("malformed provenance record".into());
        let u64_at = |o: usize| -> Result<u64> {
            Ok(u64::from_le_bytes(b.get(o..o + 8).ok_or_else(bad)?.try_into().unwrap()))
        };
        let n = u32::from_le_bytes(b.get(16..20).ok_or_else(bad)?.try_into().unwrap()) as usize;
        if b.len() != 28 + 8 * n {
            return Err(bad());
        }
        Ok(ProvenanceRecord {
            step: u64_at(0)?,
            token_count: u64_at(8)?,
            sequence_ids: (0..n).map(|i| u64_at(20 + 8 * i)).collect::<Result<_>>()?,
            rng_digest: u64_at(20 + 8 * n)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ProvenanceLog {
    records: Vec<ProvenanceRecord>,
    digest: [u8; 32],
}

impl ProvenanceLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, r: ProvenanceRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.token_count < last.token_count {
                return Err(Error::Data("provenance token count went backwards".into()));
            }
        }
        self.digest = chain(&self.digest, &r);
        self.records.push(r);
        Ok(())
    }

    pub fn records(&self) -> &[ProvenanceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn digest(&self) -> [u8; 32] {
        self.digest
    }

    /// Keeps the first `n` records.
    pub fn truncate(&mut self, n: usize) {
        let kept = self.records[..n.min(self.records.len())].to_vec();
        *self = ProvenanceLog::new();
        for r in kept {
            self.push(r).expect("prefix of a valid log");
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for r in &self.records {
            let e = r.encode();
            out.extend((e.len() as u32).to_le_bytes());
            out.extend(e);
        }
        out
    }

    pub fn from_bytes(mut b: &[u8]) -> Result<ProvenanceLog> {
        let mut log = ProvenanceLog::new();
        while !b.is_empty() {
            if b.len() < 4 {
                return Err(Error::Data("truncated provenance log".into()));
            }
            let n = u32::from_le_bytes(b[..4].try_into().unwrap()) as usize;
            let body = b.get(4..4 + n).ok_or_else(|| Error::Data("truncated provenance log".into()))?;
            log.push(ProvenanceRecord::decode(body)?)?;
            b = &b[4 + n..];
        }
        Ok(log)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ProvenanceLog> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn chain(prev: &[u8; 32], r: &ProvenanceRecord) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(prev);
    h.update(r.encode());
    h.finalize().into()
}

pub fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn from_hex(s: &str) -> Result<Vec<u8>> {
    if s.len() % 2 != 0 || !s.is_ascii() {
        return Err(Error::Data(format!("bad hex string `{s}`")));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|_| Error::Data(format!("bad hex string `{s}`"))))
        .collect()
}
