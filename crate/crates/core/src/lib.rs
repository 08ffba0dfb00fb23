//! Encoder pre-training, context extension, decoder-to-encoder conversion and
//! long-context evaluation at desk scale.

pub mod adapter;
pub mod attention;
pub mod autograd;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod extension;
pub mod kvfile;
pub mod llm2vec;
pub mod model;
pub mod niah;
pub mod objectives;
pub mod optim;
pub mod provenance;
pub mod rope;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};

/// Stable 64-bit seed derived from a list of integers.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let bytes: Vec<u8> = parts.iter().flat_map(|p| p.to_le_bytes()).collect();
    xxhash_rust::xxh3::xxh3_64(&bytes)
}
