//! Long-context adaptation: raise the global RoPE theta and maximum length,
//! then keep training on longer data.

use crate::checkpoint::PhaseTag;
use crate::config::ArchConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelParams};
use crate::tokenizer::SpecialIds;
use crate::trainer::{train_mlm, SeqDataset, TrainOptions, TrainOutcome};
use crate::config::TrainPhaseConfig;

pub const EXTENDED_THETA: f64 = 160_000.0;
pub const EXTENDED_MAX_LEN: usize = 8_192;

/// Config after extension. Local-layer theta and every other field stay put.
pub fn extend_config(cfg: &ArchConfig, new_theta: f64, new_max_len: usize) -> Result<ArchConfig> {
    if new_max_len < cfg.max_seq_len {
        return Err(Error::Argument(format!(
            "cannot shrink max_seq_len from {} to {new_max_len}",
            cfg.max_seq_len
        )));
    }
    if !(new_theta > 1.0) || !new_theta.is_finite() {
        return Err(Error::Argument(format!("rope theta must exceed 1, got {new_theta}")));
    }
    let mut out = cfg.clone();
    out.rope_theta_global = new_theta;
    out.max_seq_len = new_max_len;
    out.ensure_valid()?;
    Ok(out)
}

/// Same tensors under the extended config; no weight is touched.
pub fn extend(params: &ModelParams, new_theta: f64, new_max_len: usize) -> Result<ModelParams> {
    let cfg = extend_config(params.cfg(), new_theta, new_max_len)?;
    let mut out = params.clone();
    out.set_cfg(cfg)?;
    Ok(out)
}

/// Runs one extension phase (`ext1` or `ext2`) as continued MLM training.
/// The schedule comes from `phase`; the phase presets use a constant rate
/// for ext1 and 1−√ decay for ext2.
pub fn run_phase(
    model: &mut Model,
    tag: PhaseTag,
    data: &SeqDataset,
    specials: SpecialIds,
    phase: &TrainPhaseConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if !matches!(tag, PhaseTag::Ext1 | PhaseTag::Ext2) {
        return Err(Error::Argument(format!("`{tag}` is not an extension phase")));
    }
    if let Some(i) = data.sequences().iter().position(|s| s.len() > EXTENDED_MAX_LEN) {
        return Err(Error::Data(format!("sequence {i} exceeds {EXTENDED_MAX_LEN} tokens")));
    }
    train_mlm(model, data, specials, phase, tag, opts)
}
