//! Turning a causal decoder into a bidirectional encoder: swap the attention
//! mask, train one MNTP adapter per data phase, merge adapters into weights.

use std::path::Path;

use tracing::{info, warn};

use crate::adapter::{apply, AdapterSet, AdapterSpec};
use crate::checkpoint::{Checkpoint, PhaseTag};
use crate::config::{ArchConfig, AttentionMode, TrainPhaseConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ProjTarget};
use crate::provenance::ProvenanceLog;
use crate::tokenizer::SpecialIds;
use crate::trainer::{
    masked_eval_loss, run_loop, LoopState, MaskedLmTask, MetricLine, SeqDataset, StopReason, TrainOptions, Trainee,
};

/// Switches a causal config to full attention. Returns the new config and
/// whether anything changed; an already bidirectional config is returned
/// as is with a logged notice.
pub fn enable_bidirectional(cfg: &ArchConfig) -> (ArchConfig, bool) {
    set_mode(cfg, AttentionMode::Bidirectional)
}

pub fn enable_causal(cfg: &ArchConfig) -> (ArchConfig, bool) {
    set_mode(cfg, AttentionMode::Causal)
}

fn set_mode(cfg: &ArchConfig, mode: AttentionMode) -> (ArchConfig, bool) {
    if cfg.attention_mode == mode {
        warn!(mode = %mode, "attention mode already set; nothing to do");
        return (cfg.clone(), false);
    }
    let mut out = cfg.clone();
    out.attention_mode = mode;
    (out, true)
}

#[derive(Debug, Clone)]
pub struct MntpOutcome {
    pub adapter: AdapterSet,
    pub log: ProvenanceLog,
    pub metrics: Vec<MetricLine>,
    pub stop: StopReason,
}

/// Masked next-token prediction on `data` with the base frozen; only the
/// adapter's tensors train. Predictions come from the base output head.
#[allow(clippy::too_many_arguments)]
pub fn train_mntp_adapter(
    model: &Model,
    data: &SeqDataset,
    specials: SpecialIds,
    phase: &TrainPhaseConfig,
    spec: AdapterSpec,
    targets: &[ProjTarget],
    phase_name: &str,
    opts: &TrainOptions,
) -> Result<MntpOutcome> {
    if model.cfg().attention_mode != AttentionMode::Bidirectional {
        return Err(Error::Argument("MNTP needs a bidirectional model; enable it first".into()));
    }
    let mut adapter = AdapterSet::new(model.cfg(), spec, targets, phase_name, phase.seed)?;
    let task = MaskedLmTask::new(data, specials, model.cfg().vocab_size, phase, model.cfg().max_seq_len, true)?;
    let mut trainee = Trainee::Adapter {
        base: model,
        adapter: &mut adapter,
    };
    let mut state = LoopState {
        step: 0,
        tokens: 0,
        log: ProvenanceLog::new(),
        opt: crate::optim::OptState::new(
            trainee.tensors().iter().map(|t| t.dim()),
            vec![true; trainee.tensors().len()],
            crate::optim::AdamHyper::from_phase(phase),
        ),
    };
    let out_dir = opts.out_dir.clone();
    let mut emit = |t: &Trainee, s: &LoopState| -> Result<()> {
        if let (Some(dir), Trainee::Adapter { adapter, .. }) = (&out_dir, t) {
            adapter.save(&dir.join(format!("adapter-{phase_name}-step-{:08}.safetensors", s.step)))?;
        }
        Ok(())
    };
    let report = run_loop(&mut trainee, &task, phase, &mut state, opts, &mut emit)?;
    if let Some(dir) = &opts.out_dir {
        state.log.save(&dir.join("provenance.bin"))?;
        let p = dir.join("metrics.txt");
        let text: String = report.metrics.iter().map(|m| format!("{m}\n")).collect();
        std::fs::write(&p, format!("# step tokens loss lr\n{text}")).map_err(|e| Error::io(&p, e))?;
    }
    info!(phase = phase_name, steps = state.step, "MNTP adapter trained");
    Ok(MntpOutcome {
        adapter,
        log: state.log,
        metrics: report.metrics,
        stop: report.stop,
    })
}

/// Mean MNTP loss over `data` with masks drawn from `seed`.
pub fn mntp_eval_loss(
    model: &Model,
    adapters: &[&AdapterSet],
    data: &SeqDataset,
    specials: SpecialIds,
    phase: &TrainPhaseConfig,
    seed: u64,
) -> Result<f64> {
    let task = MaskedLmTask::new(data, specials, model.cfg().vocab_size, phase, model.cfg().max_seq_len, true)?;
    masked_eval_loss(model, adapters, &task, seed, 16)
}

/// Merges adapters into a checkpoint's weights and records the absorbed
/// phases. Optimizer state and provenance are dropped: the result starts a
/// new lineage.
pub fn merge_into(ck: &Checkpoint, adapters: &[&AdapterSet]) -> Result<Checkpoint> {
    let mut out = Checkpoint::fresh(apply(&ck.params, adapters)?);
    out.phase_tag = PhaseTag::Mntp;
    out.absorbed = ck.absorbed.clone();
    out.absorbed.extend(adapters.iter().map(|a| a.phase.clone()));
    out.notes = ck.notes.clone();
    Ok(out)
}

pub fn load_adapters(paths: &[impl AsRef<Path>]) -> Result<Vec<AdapterSet>> {
    paths.iter().map(|p| AdapterSet::load(p.as_ref())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PresetName;
    use crate::model::{Batch, ForwardOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn decoder() -> Model {
        Model::init(&ArchConfig::preset(PresetName::TinyDecoderTest), 11).unwrap()
    }

    /// Max change of outputs at positions `< cut` after perturbing positions `≥ cut`.
    fn prefix_change(m: &Model, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<u32> = (0..24).map(|_| rng.random_range(5..128)).collect();
        let mut b = a.clone();
        for t in &mut b[12..] {
            *t = rng.random_range(5..128);
        }
        let ha = m.forward(&Batch::from_sequences(&[a]).unwrap(), &ForwardOptions::eval()).unwrap().hidden;
        let hb = m.forward(&Batch::from_sequences(&[b]).unwrap(), &ForwardOptions::eval()).unwrap().hidden;
        let d = &ha.slice(ndarray::s![..12, ..]) - &hb.slice(ndarray::s![..12, ..]);
        d.mapv(f64::abs).fold(0.0f64, |x, &y| x.max(y))
    }

    #[test]
    fn mask_swap_witnesses() {
        let m = decoder();
        assert_eq!(prefix_change(&m, 1), 0.0);
        let (cfg, changed) = enable_bidirectional(m.cfg());
        assert!(changed);
        let mut bi = m.params.clone();
        bi.set_cfg(cfg.clone()).unwrap();
        assert_eq!(bi.digests(), m.params.digests());
        assert!(prefix_change(&Model::new(bi), 1) > 1e-6);
        let (again, changed) = enable_bidirectional(&cfg);
        assert!(!changed);
        assert_eq!(again, cfg);
        let (back, _) = enable_causal(&cfg);
        assert_eq!(&back, m.cfg());
    }

    #[test]
    fn mntp_requires_bidirectional() {
        let m = decoder();
        let d = SeqDataset::new(vec![vec![2, 9, 10, 11, 3]; 4]).unwrap();
        let specials = SpecialIds { pad: 0, unk: 1, cls: 2, sep: 3, mask: 4 };
        let r = train_mntp_adapter(
            &m,
            &d,
            specials,
            &TrainPhaseConfig::default(),
            AdapterSpec::default(),
            &ProjTarget::ALL,
            "ext1",
            &TrainOptions::default(),
        );
        assert!(matches!(r, Err(Error::Argument(_))));
    }
}
