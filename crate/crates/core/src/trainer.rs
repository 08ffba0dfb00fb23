//! Training loops: MLM, MNTP, span extraction and contrastive embedding.
//!
//! Every loop shares one skeleton. Each epoch visits the items in a seeded
//! permutation, full batches are split into microbatches whose gradients
//! accumulate before one optimizer step, and every step is appended to a
//! [`ProvenanceLog`]. All randomness is derived from `(seed, step, item)`, so
//! a run can be resumed from any checkpoint and reproduce an uninterrupted
//! run bit for bit.

use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use tracing::{debug, info};

use crate::adapter::AdapterSet;
use crate::autograd::{GradStore, Mat, SpanTarget, Tape, Var};
use crate::checkpoint::{Checkpoint, Dtype, PhaseTag};
use crate::config::{MaskPolicy, TrainPhaseConfig};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::model::{pool_mean, Batch, BoundModel, ForwardOptions, Model};
use crate::objectives::{info_nce_with_grad, mlm_mask, mntp_targets, InfoNceOptions};
use crate::optim::{lr_at, AdamHyper, OptState};
use crate::provenance::{to_hex, ProvenanceLog, ProvenanceRecord};
use crate::tokenizer::{SpecialIds, TokenId};

/// Token sequences addressed by index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqDataset {
    seqs: Vec<Vec<TokenId>>,
}

impl SeqDataset {
    pub fn new(seqs: Vec<Vec<TokenId>>) -> Result<SeqDataset> {
        if let Some(i) = seqs.iter().position(Vec::is_empty) {
            return Err(Error::Data(format!("sequence {i} is empty")));
        }
        Ok(SeqDataset { seqs })
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    pub fn get(&self, i: usize) -> &[TokenId] {
        &self.seqs[i]
    }

    pub fn sequences(&self) -> &[Vec<TokenId>] {
        &self.seqs
    }

    pub fn total_tokens(&self) -> u64 {
        self.seqs.iter().map(|s| s.len() as u64).sum()
    }

    /// SHA-256 over the ordered sequences, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.seqs.len() as u64).to_le_bytes());
        for s in &self.seqs {
            h.update((s.len() as u64).to_le_bytes());
            for id in s {
                h.update(id.to_le_bytes());
            }
        }
        to_hex(&h.finalize())
    }

    /// Length-prefixed little-endian records: `u32 n`, then `n × u32` ids.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for s in &self.seqs {
            out.extend((s.len() as u32).to_le_bytes());
            for id in s {
                out.extend(id.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<SeqDataset> {
        if b.len() % 4 != 0 {
            return Err(Error::Data("sequence file length is not a multiple of 4".into()));
        }
        let words: Vec<u32> = b.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        let mut seqs = Vec::new();
        let mut i = 0;
        while i < words.len() {
            let n = words[i] as usize;
            let body = words
                .get(i + 1..i + 1 + n)
                .ok_or_else(|| Error::Data("truncated sequence file".into()))?;
            seqs.push(body.to_vec());
            i += 1 + n;
        }
        SeqDataset::new(seqs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<SeqDataset> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// The tensors an optimizer updates.
pub enum Trainee<'a> {
    Full(&'a mut Model),
    /// Base weights frozen; only the adapter's tensors train.
    Adapter {
        base: &'a Model,
        adapter: &'a mut AdapterSet,
    },
}

impl Trainee<'_> {
    pub fn model(&self) -> &Model {
        match self {
            Trainee::Full(m) => m,
            Trainee::Adapter { base, .. } => base,
        }
    }

    fn bind(&self, tape: &mut Tape) -> BoundModel {
        match self {
            Trainee::Full(m) => m.bind(tape, true),
            Trainee::Adapter { base, adapter } => {
                let mut bm = base.bind(tape, false);
                bm.adapters.push(adapter.bind(tape, true, 0));
                bm
            }
        }
    }

    pub fn tensors(&self) -> &[Mat] {
        match self {
            Trainee::Full(m) => m.params.tensors(),
            Trainee::Adapter { adapter, .. } => adapter.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> &mut [Mat] {
        match self {
            Trainee::Full(m) => m.params.tensors_mut(),
            Trainee::Adapter { adapter, .. } => adapter.tensors_mut(),
        }
    }

    fn decays(&self) -> Vec<bool> {
        match self {
            Trainee::Full(m) => (0..m.params.tensors().len()).map(|i| m.params.decays(i)).collect(),
            Trainee::Adapter { adapter, .. } => vec![true; adapter.tensors().len()],
        }
    }

    fn new_opt(&self, phase: &TrainPhaseConfig) -> OptState {
        OptState::new(
            self.tensors().iter().map(|t| t.dim()),
            self.decays(),
            AdamHyper::from_phase(phase),
        )
    }
}

/// One training objective over an indexed dataset.
pub trait Task {
    /// Per-step data shared by all microbatches of a batch.
    type Prep;

    fn n_items(&self) -> usize;
    fn item_tokens(&self, i: usize) -> usize;
    fn fingerprint(&self) -> String;
    /// Prepares a full batch and returns the loss normalizer (the loss is a
    /// sum over the batch divided by it).
    fn prepare(&self, items: &[usize], seed: u64) -> Result<(Self::Prep, f64)>;
    /// Loss of `items[range]` scaled by `weight`, recorded on `tape`.
    #[allow(clippy::too_many_arguments)]
    fn loss(
        &self,
        model: &Model,
        tape: &mut Tape,
        bm: &BoundModel,
        items: &[usize],
        range: Range<usize>,
        prep: &Self::Prep,
        weight: f64,
        fwd: &ForwardOptions,
    ) -> Result<Var>;
    /// Whether the loss is a sum over items, so microbatches can split a batch.
    fn splittable(&self) -> bool {
        true
    }
}

/// Deterministic batch order: seeded permutation per epoch, partial final
/// batches dropped.
struct BatchPlan {
    item_tokens: Vec<u64>,
    seed: u64,
    batch_size: usize,
    microbatch: usize,
    batch_warmup_tokens: u64,
    epochs: usize,
    epoch: usize,
    order: Vec<usize>,
    pos: usize,
    tokens: u64,
    dropped: usize,
}

impl BatchPlan {
    fn new<T: Task>(task: &T, phase: &TrainPhaseConfig) -> Result<BatchPlan> {
        let n = task.n_items();
        if n == 0 {
            return Err(Error::Argument("training set is empty".into()));
        }
        if phase.batch_size > n {
            return Err(Error::Argument(format!(
                "batch of {} exceeds the {n} training items",
                phase.batch_size
            )));
        }
        let mut plan = BatchPlan {
            item_tokens: (0..n).map(|i| task.item_tokens(i) as u64).collect(),
            seed: phase.seed,
            batch_size: phase.batch_size,
            microbatch: phase.microbatch.max(1),
            batch_warmup_tokens: phase.batch_warmup_tokens,
            epochs: phase.epochs,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
            tokens: 0,
            dropped: 0,
        };
        plan.order = plan.permutation(0);
        Ok(plan)
    }

    fn permutation(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.item_tokens.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, 0xE90C, epoch as u64]));
        order.shuffle(&mut rng);
        order
    }

    /// Linear ramp from one microbatch to the full batch over the warmup tokens.
    fn current_batch_size(&self) -> usize {
        if self.batch_warmup_tokens == 0 || self.tokens >= self.batch_warmup_tokens {
            return self.batch_size;
        }
        let b = (self.batch_size as f64 * self.tokens as f64 / self.batch_warmup_tokens as f64) as usize;
        (b - b % self.microbatch).clamp(self.microbatch.min(self.batch_size), self.batch_size)
    }

    fn next(&mut self) -> Option<Vec<usize>> {
        while self.epoch < self.epochs {
            let bs = self.current_batch_size();
            if self.pos + bs <= self.order.len() {
                let items = self.order[self.pos..self.pos + bs].to_vec();
                self.pos += bs;
                self.tokens += items.iter().map(|&i| self.item_tokens[i]).sum::<u64>();
                return Some(items);
            }
            let left = self.order.len() - self.pos;
            if left > 0 {
                info!(epoch = self.epoch, dropped = left, "dropping final partial batch");
                self.dropped += left;
            }
            self.epoch += 1;
            self.order = self.permutation(self.epoch);
            self.pos = 0;
        }
        None
    }
}

fn step_seed(phase: &TrainPhaseConfig, step: u64) -> u64 {
    derive_seed(&[phase.seed, step])
}

/// Rebuilds the provenance of the first `steps` steps without training.
pub fn replay_provenance<T: Task>(task: &T, phase: &TrainPhaseConfig, steps: u64) -> Result<ProvenanceLog> {
    let mut plan = BatchPlan::new(task, phase)?;
    let mut log = ProvenanceLog::new();
    for step in 1..=steps {
        let items = plan
            .next()
            .ok_or_else(|| Error::Resume(format!("dataset ends before step {step}")))?;
        log.push(ProvenanceRecord {
            step,
            token_count: plan.tokens,
            sequence_ids: items.iter().map(|&i| i as u64).collect(),
            rng_digest: step_seed(phase, step),
        })?;
    }
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricLine {
    pub step: u64,
    pub tokens: u64,
    pub loss: f64,
    pub lr: f64,
}

impl fmt::Display for MetricLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {:.6} {:.6e}", self.step, self.tokens, self.loss, self.lr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Budget,
    Exhausted,
    Interrupted,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Stop once this many total steps have run, as if interrupted.
    pub stop_after_steps: Option<u64>,
    /// Write checkpoints, `provenance.bin` and `metrics.txt` here.
    pub out_dir: Option<PathBuf>,
    /// Store checkpoints as 32-bit values (default 64-bit, which keeps
    /// resume bit-exact).
    pub f32_checkpoints: bool,
}

/// Mutable run state carried between steps.
#[derive(Debug, Clone)]
pub struct LoopState {
    pub step: u64,
    pub tokens: u64,
    pub log: ProvenanceLog,
    pub opt: OptState,
}

#[derive(Debug, Clone)]
pub struct LoopReport {
    pub metrics: Vec<MetricLine>,
    pub dropped_partial: usize,
    pub stop: StopReason,
}

/// Runs optimizer steps until the token budget, the data or the step limit
/// runs out. `emit` sees the state at step 0 (fresh runs only), at every
/// checkpoint interval and at the end.
pub fn run_loop<T: Task>(
    trainee: &mut Trainee,
    task: &T,
    phase: &TrainPhaseConfig,
    state: &mut LoopState,
    opts: &TrainOptions,
    emit: &mut dyn FnMut(&Trainee, &LoopState) -> Result<()>,
) -> Result<LoopReport> {
    phase.ensure_valid()?;
    let mut plan = BatchPlan::new(task, phase)?;
    for _ in 0..state.step {
        plan.next();
    }
    let shapes: Vec<_> = trainee.tensors().iter().map(|t| t.dim()).collect();
    let mut metrics = Vec::new();
    let mut last_emit = None;
    if state.step == 0 {
        emit(trainee, state)?;
        last_emit = Some(0);
    }
    let stop = loop {
        if state.tokens >= phase.token_budget {
            break StopReason::Budget;
        }
        if opts.stop_after_steps.is_some_and(|n| state.step >= n) {
            break StopReason::Interrupted;
        }
        let Some(items) = plan.next() else {
            break StopReason::Exhausted;
        };
        let step = state.step + 1;
        let seed = step_seed(phase, step);
        let lr = lr_at(state.tokens, phase);
        let (prep, norm) = task.prepare(&items, seed)?;
        let weight = 1.0 / norm;
        let mut grads = GradStore::new(shapes.len());
        let mut loss_total = 0.0;
        let chunk = if task.splittable() { phase.microbatch.max(1) } else { items.len() };
        let fwd = ForwardOptions::train(phase.attn_dropout, seed);
        for start in (0..items.len()).step_by(chunk) {
            let range = start..(start + chunk).min(items.len());
            let mut tape = Tape::new(true);
            let bm = trainee.bind(&mut tape);
            let loss = task.loss(trainee.model(), &mut tape, &bm, &items, range, &prep, weight, &fwd)?;
            loss_total += tape.scalar(loss);
            tape.backward(loss, &mut grads);
        }
        if !loss_total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {step}")));
        }
        let dense = grads.into_dense(shapes.iter().copied());
        state.opt.step(trainee.tensors_mut(), &dense, lr)?;
        let before = state.tokens;
        state.step = step;
        state.tokens = plan.tokens;
        state.log.push(ProvenanceRecord {
            step,
            token_count: state.tokens,
            sequence_ids: items.iter().map(|&i| i as u64).collect(),
            rng_digest: seed,
        })?;
        let line = MetricLine {
            step,
            tokens: state.tokens,
            loss: loss_total,
            lr,
        };
        debug!(%line, "step");
        metrics.push(line);
        let every = phase.checkpoint_every_tokens;
        if every > 0 && before / every != state.tokens / every {
            emit(trainee, state)?;
            last_emit = Some(step);
        }
    };
    if last_emit != Some(state.step) {
        emit(trainee, state)?;
    }
    info!(steps = state.step, tokens = state.tokens, ?stop, "training stopped");
    Ok(LoopReport {
        metrics,
        dropped_partial: plan.dropped,
        stop,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Emitted checkpoints in order; the last one is the final state.
    pub checkpoints: Vec<Checkpoint>,
    pub log: ProvenanceLog,
    pub metrics: Vec<MetricLine>,
    pub dropped_partial: usize,
    pub stop: StopReason,
}

impl TrainOutcome {
    pub fn final_checkpoint(&self) -> &Checkpoint {
        self.checkpoints.last().expect("at least one checkpoint is always emitted")
    }
}

fn write_run_files(dir: &Path, log: &ProvenanceLog, metrics: &[MetricLine]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    log.save(&dir.join("provenance.bin"))?;
    let mut text = String::from("# step tokens loss lr\n");
    for m in metrics {
        text.push_str(&format!("{m}\n"));
    }
    let p = dir.join("metrics.txt");
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

pub fn checkpoint_file_name(step: u64) -> String {
    format!("step-{step:08}.safetensors")
}

/// Trains every model tensor on `task`, starting fresh or from `resume_from`.
pub fn train_full<T: Task>(
    model: &mut Model,
    task: &T,
    phase: &TrainPhaseConfig,
    tag: PhaseTag,
    resume_from: Option<&Checkpoint>,
    notes: &[(&str, String)],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let fingerprint = task.fingerprint();
    let absorbed = resume_from.map(|c| c.absorbed.clone()).unwrap_or_default();
    let mut trainee = Trainee::Full(model);
    let mut state = match resume_from {
        None => LoopState {
            step: 0,
            tokens: 0,
            log: ProvenanceLog::new(),
            opt: trainee.new_opt(phase),
        },
        Some(ck) => {
            if ck.dataset_fingerprint.as_deref() != Some(fingerprint.as_str()) {
                return Err(Error::Resume("dataset fingerprint differs from the checkpoint".into()));
            }
            let log = replay_provenance(task, phase, ck.step)?;
            if log.digest() != ck.provenance_digest || log.len() as u64 != ck.provenance_records {
                return Err(Error::Resume("replayed data order does not match the checkpoint".into()));
            }
            if log.records().last().map_or(0, |r| r.token_count) != ck.tokens {
                return Err(Error::Resume("replayed token count does not match the checkpoint".into()));
            }
            LoopState {
                step: ck.step,
                tokens: ck.tokens,
                log,
                opt: ck
                    .opt
                    .clone()
                    .ok_or_else(|| Error::Resume("checkpoint carries no optimizer state".into()))?,
            }
        }
    };
    let mut checkpoints = Vec::new();
    let out_dir = opts.out_dir.clone();
    let dtype = if opts.f32_checkpoints { Dtype::F32 } else { Dtype::F64 };
    let mut emit = |t: &Trainee, s: &LoopState| -> Result<()> {
        let ck = Checkpoint {
            params: t.model().params.clone(),
            opt: Some(s.opt.clone()),
            phase: Some(phase.clone()),
            phase_tag: tag,
            step: s.step,
            tokens: s.tokens,
            provenance_records: s.log.len() as u64,
            provenance_digest: s.log.digest(),
            dataset_fingerprint: Some(fingerprint.clone()),
            absorbed: absorbed.clone(),
            notes: notes.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        };
        if let Some(dir) = &out_dir {
            ck.save(&dir.join(checkpoint_file_name(s.step)), dtype)?;
        }
        checkpoints.push(ck);
        Ok(())
    };
    let report = run_loop(&mut trainee, task, phase, &mut state, opts, &mut emit)?;
    if let Some(dir) = &opts.out_dir {
        write_run_files(dir, &state.log, &report.metrics)?;
    }
    Ok(TrainOutcome {
        checkpoints,
        log: state.log,
        metrics: report.metrics,
        dropped_partial: report.dropped_partial,
        stop: report.stop,
    })
}

/// Masked-token prediction. With `shift`, each masked token is predicted
/// from the position before it (MNTP).
pub struct MaskedLmTask<'a> {
    pub data: &'a SeqDataset,
    pub specials: SpecialIds,
    pub vocab_size: usize,
    pub rate: f64,
    pub policy: MaskPolicy,
    pub shift: bool,
}

/// Corrupted ids plus `(prediction row, label)` pairs for one sequence.
pub struct MaskedItem {
    pub corrupted: Vec<TokenId>,
    pub targets: Vec<(usize, TokenId)>,
}

impl<'a> MaskedLmTask<'a> {
    pub fn new(data: &'a SeqDataset, specials: SpecialIds, vocab_size: usize, phase: &TrainPhaseConfig, max_len: usize, shift: bool) -> Result<Self> {
        let limit = max_len.min(phase.max_seq_len);
        if let Some(i) = data.sequences().iter().position(|s| s.len() > limit) {
            return Err(Error::Data(format!(
                "sequence {i} has {} tokens, over the limit of {limit}",
                data.get(i).len()
            )));
        }
        if let Some(&bad) = data.sequences().iter().flatten().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::Data(format!("token id {bad} outside vocabulary of {vocab_size}")));
        }
        Ok(MaskedLmTask {
            data,
            specials,
            vocab_size,
            rate: phase.mask_rate,
            policy: phase.mask_policy,
            shift,
        })
    }

    /// Masks one sequence with the stream derived from `(seed, item)`.
    pub fn mask_item(&self, item: usize, seed: u64) -> Result<MaskedItem> {
        let ids = self.data.get(item);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, item as u64]));
        let m = mlm_mask(ids, self.rate, self.policy, &self.specials, self.vocab_size, &mut rng)?;
        let targets = if self.shift {
            let (rows, labels) = mntp_targets(ids, &m.mask_positions);
            rows.into_iter().zip(labels).collect()
        } else {
            m.mask_positions.iter().map(|&i| (i, ids[i])).collect()
        };
        Ok(MaskedItem {
            corrupted: m.corrupted,
            targets,
        })
    }

    /// Guarantees one target when random masking produced none in a batch:
    /// the first maskable position of the first item is masked.
    fn force_target(&self, item: usize, prep: &mut MaskedItem) -> bool {
        let ids = self.data.get(item);
        let lo = usize::from(self.shift);
        match (lo..ids.len()).find(|&i| !self.specials.contains(ids[i])) {
            Some(p) => {
                prep.corrupted[p] = self.specials.mask;
                prep.targets.push((p - lo, ids[p]));
                true
            }
            None => false,
        }
    }

    fn batch_for(&self, items: &[usize], prep: &[MaskedItem]) -> Result<(Batch, Vec<usize>, Vec<TokenId>)> {
        let seqs: Vec<&[TokenId]> = prep.iter().map(|p| p.corrupted.as_slice()).collect();
        let batch = Batch::from_sequences(&seqs)?.with_keys(items.iter().map(|&i| i as u64).collect());
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (seg, p) in batch.segments.iter().zip(prep) {
            for &(r, l) in &p.targets {
                rows.push(seg.start + r);
                labels.push(l);
            }
        }
        Ok((batch, rows, labels))
    }
}

impl Task for MaskedLmTask<'_> {
    type Prep = Vec<MaskedItem>;

    fn n_items(&self) -> usize {
        self.data.len()
    }

    fn item_tokens(&self, i: usize) -> usize {
        self.data.get(i).len()
    }

    fn fingerprint(&self) -> String {
        self.data.fingerprint()
    }

    fn prepare(&self, items: &[usize], seed: u64) -> Result<(Self::Prep, f64)> {
        let mut prep = items.iter().map(|&i| self.mask_item(i, seed)).collect::<Result<Vec<_>>>()?;
        let mut n: usize = prep.iter().map(|p| p.targets.len()).sum();
        if n == 0 {
            let forced = items.iter().zip(prep.iter_mut()).any(|(&i, p)| self.force_target(i, p));
            if !forced {
                return Err(Error::Data("batch has no maskable positions".into()));
            }
            n = 1;
        }
        Ok((prep, n as f64))
    }

    fn loss(
        &self,
        model: &Model,
        tape: &mut Tape,
        bm: &BoundModel,
        items: &[usize],
        range: Range<usize>,
        prep: &Self::Prep,
        weight: f64,
        fwd: &ForwardOptions,
    ) -> Result<Var> {
        let (batch, rows, labels) = self.batch_for(&items[range.clone()], &prep[range])?;
        let h = model.encode_on_tape(tape, bm, &batch, fwd, None)?;
        let logits = model.mlm_logits_on_tape(tape, bm, h, &rows);
        Ok(tape.cross_entropy(logits, &labels, weight))
    }
}

/// Mean masked-prediction loss over the whole dataset with masks drawn from
/// `seed`, evaluated without dropout. Adapters, if any, run unmerged.
pub fn masked_eval_loss(model: &Model, adapters: &[&AdapterSet], task: &MaskedLmTask, seed: u64, chunk: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    let items: Vec<usize> = (0..task.data.len()).collect();
    for part in items.chunks(chunk.max(1)) {
        let prep = part.iter().map(|&i| task.mask_item(i, seed)).collect::<Result<Vec<_>>>()?;
        let (batch, rows, labels) = task.batch_for(part, &prep)?;
        if rows.is_empty() {
            continue;
        }
        let mut tape = Tape::new(false);
        let mut bm = model.bind(&mut tape, false);
        for a in adapters {
            bm.adapters.push(a.bind(&mut tape, false, 0));
        }
        let h = model.encode_on_tape(&mut tape, &bm, &batch, &ForwardOptions::eval(), None)?;
        let logits = model.mlm_logits_on_tape(&mut tape, &bm, h, &rows);
        let loss = tape.cross_entropy(logits, &labels, 1.0);
        total += tape.scalar(loss);
        count += rows.len();
    }
    if count == 0 {
        return Err(Error::Data("no masked positions in evaluation set".into()));
    }
    Ok(total / count as f64)
}

/// MLM pre-training or continued training. A phase RoPE override replaces
/// the global-layer theta before the first step.
pub fn train_mlm(
    model: &mut Model,
    data: &SeqDataset,
    specials: SpecialIds,
    phase: &TrainPhaseConfig,
    tag: PhaseTag,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if let Some(theta) = phase.rope_theta_override {
        let mut cfg = model.cfg().clone();
        cfg.rope_theta_global = theta;
        model.params.set_cfg(cfg)?;
    }
    let task = MaskedLmTask::new(data, specials, model.cfg().vocab_size, phase, model.cfg().max_seq_len, false)?;
    train_full(model, &task, phase, tag, None, &[], opts)
}

/// Continues an MLM run from `ck`; refuses if the dataset or the replayed
/// data order disagrees with the checkpoint.
pub fn resume_mlm(ck: &Checkpoint, data: &SeqDataset, specials: SpecialIds, opts: &TrainOptions) -> Result<(Model, TrainOutcome)> {
    let phase = ck
        .phase
        .clone()
        .ok_or_else(|| Error::Resume("checkpoint carries no phase configuration".into()))?;
    let mut model = Model::new(ck.params.clone());
    let task = MaskedLmTask::new(data, specials, model.cfg().vocab_size, &phase, model.cfg().max_seq_len, false)?;
    let out = train_full(&mut model, &task, &phase, ck.phase_tag, Some(ck), &[], opts)?;
    Ok((model, out))
}

/// A tokenized extractive-QA example: the answer lies within `candidates`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanExample {
    pub tokens: Vec<TokenId>,
    pub candidates: Range<usize>,
    pub gold: (usize, usize),
}

pub struct SpanTask<'a> {
    pub examples: &'a [SpanExample],
}

impl<'a> SpanTask<'a> {
    pub fn new(examples: &'a [SpanExample], max_len: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Argument("span training set is empty".into()));
        }
        for (i, e) in examples.iter().enumerate() {
            let c = &e.candidates;
            if e.tokens.len() > max_len
                || c.start >= c.end
                || c.end > e.tokens.len()
                || !(c.start <= e.gold.0 && e.gold.0 <= e.gold.1 && e.gold.1 < c.end)
            {
                return Err(Error::Data(format!("span example {i} has its gold span outside the token range")));
            }
        }
        Ok(SpanTask { examples })
    }
}

impl Task for SpanTask<'_> {
    type Prep = ();

    fn n_items(&self) -> usize {
        self.examples.len()
    }

    fn item_tokens(&self, i: usize) -> usize {
        self.examples[i].tokens.len()
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for e in self.examples {
            h.update((e.tokens.len() as u64).to_le_bytes());
            e.tokens.iter().for_each(|t| h.update(t.to_le_bytes()));
            for v in [e.candidates.start, e.candidates.end, e.gold.0, e.gold.1] {
                h.update((v as u64).to_le_bytes());
            }
        }
        to_hex(&h.finalize())
    }

    fn prepare(&self, items: &[usize], _seed: u64) -> Result<((), f64)> {
        Ok(((), items.len() as f64))
    }

    fn loss(
        &self,
        model: &Model,
        tape: &mut Tape,
        bm: &BoundModel,
        items: &[usize],
        range: Range<usize>,
        _prep: &(),
        weight: f64,
        fwd: &ForwardOptions,
    ) -> Result<Var> {
        let part = &items[range];
        let seqs: Vec<&[TokenId]> = part.iter().map(|&i| self.examples[i].tokens.as_slice()).collect();
        let batch = Batch::from_sequences(&seqs)?.with_keys(part.iter().map(|&i| i as u64).collect());
        let h = model.encode_on_tape(tape, bm, &batch, fwd, None)?;
        let logits = model.span_logits_on_tape(tape, bm, h);
        let targets: Vec<SpanTarget> = batch
            .segments
            .iter()
            .zip(part)
            .map(|(seg, &i)| {
                let e = &self.examples[i];
                SpanTarget {
                    start: seg.start + e.candidates.start,
                    len: e.candidates.len(),
                    gold_start: seg.start + e.gold.0,
                    gold_end: seg.start + e.gold.1,
                }
            })
            .collect();
        Ok(tape.span_cross_entropy(logits, &targets, weight))
    }
}

/// Predicted `(start, end)` per example under the span rule.
pub fn predict_spans(model: &Model, examples: &[SpanExample], max_answer_len: usize) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::with_capacity(examples.len());
    for e in examples {
        let batch = Batch::from_sequences(&[e.tokens.as_slice()])?;
        let h = model.forward(&batch, &ForwardOptions::eval())?.hidden;
        let (s, t) = model.span_logits(&h);
        out.push(crate::model::best_span(&s, &t, e.candidates.clone(), max_answer_len).expect("non-empty candidates"));
    }
    Ok(out)
}

pub fn train_span_qa(model: &mut Model, examples: &[SpanExample], phase: &TrainPhaseConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    let task = SpanTask::new(examples, model.cfg().max_seq_len)?;
    train_full(model, &task, phase, PhaseTag::Finetune, None, &[], opts)
}

/// Query, one positive and its hard negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triplet {
    pub query: Vec<TokenId>,
    pub positive: Vec<TokenId>,
    pub negatives: Vec<Vec<TokenId>>,
}

pub struct EmbedTask<'a> {
    pub triplets: &'a [Triplet],
    pub opts: InfoNceOptions,
}

impl Task for EmbedTask<'_> {
    type Prep = ();

    fn n_items(&self) -> usize {
        self.triplets.len()
    }

    fn item_tokens(&self, i: usize) -> usize {
        let t = &self.triplets[i];
        t.query.len() + t.positive.len() + t.negatives.iter().map(Vec::len).sum::<usize>()
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in self.triplets {
            for s in std::iter::once(&t.query).chain([&t.positive]).chain(&t.negatives) {
                h.update((s.len() as u64).to_le_bytes());
                s.iter().for_each(|x| h.update(x.to_le_bytes()));
            }
            h.update(b"|");
        }
        to_hex(&h.finalize())
    }

    fn prepare(&self, _items: &[usize], _seed: u64) -> Result<((), f64)> {
        Ok(((), 1.0))
    }

    fn splittable(&self) -> bool {
        false
    }

    fn loss(
        &self,
        model: &Model,
        tape: &mut Tape,
        bm: &BoundModel,
        items: &[usize],
        range: Range<usize>,
        _prep: &(),
        weight: f64,
        fwd: &ForwardOptions,
    ) -> Result<Var> {
        let part = &items[range];
        let mut seqs: Vec<&[TokenId]> = Vec::new();
        let mut keys = Vec::new();
        let (mut q_rows, mut p_rows, mut n_rows) = (Vec::new(), Vec::new(), Vec::new());
        for &i in part {
            let t = &self.triplets[i];
            q_rows.push(seqs.len());
            seqs.push(&t.query);
            p_rows.push(seqs.len());
            seqs.push(&t.positive);
            for n in &t.negatives {
                n_rows.push(seqs.len());
                seqs.push(n);
            }
        }
        for (j, _) in seqs.iter().enumerate() {
            keys.push(derive_seed(&[part[0] as u64, j as u64]));
        }
        let batch = Batch::from_sequences(&seqs)?.with_keys(keys);
        let h = model.encode_on_tape(tape, bm, &batch, fwd, None)?;
        let spans: Vec<(usize, usize)> = batch.segments.iter().map(|s| (s.start, s.valid)).collect();
        let pooled = tape.mean_pool(h, &spans);
        let pv = tape.value(pooled);
        let (q, p, n) = (pv.select(Axis(0), &q_rows), pv.select(Axis(0), &p_rows), pv.select(Axis(0), &n_rows));
        let g = info_nce_with_grad(&q, &p, &n, self.opts)?;
        let mut grad = Mat::zeros(pv.dim());
        for (rows, d) in [(&q_rows, &g.d_queries), (&p_rows, &g.d_positives), (&n_rows, &g.d_negatives)] {
            for (k, &r) in rows.iter().enumerate() {
                grad.row_mut(r).assign(&d.row(k));
            }
        }
        grad *= weight;
        Ok(tape.scalar_loss(g.loss * weight, vec![(pooled, grad)]))
    }
}

/// Mean-pooled sentence vectors, one row per sequence.
pub fn embed_sequences(model: &Model, seqs: &[Vec<TokenId>]) -> Result<Mat> {
    let mut out = Mat::zeros((seqs.len(), model.cfg().hidden));
    for (i, s) in seqs.iter().enumerate() {
        let h = model.forward(&Batch::from_sequences(&[s.as_slice()])?, &ForwardOptions::eval())?.hidden;
        let rows: Vec<usize> = (0..s.len()).collect();
        out.row_mut(i).assign(&ndarray::Array1::from(pool_mean(&h, &rows)?));
    }
    Ok(out)
}

fn cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt())
}

/// Fraction of triplets whose positive outscores every negative by cosine.
pub fn ranking_accuracy(model: &Model, triplets: &[Triplet]) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::Argument("no triplets to rank".into()));
    }
    let mut hits = 0;
    for t in triplets {
        let mut seqs = vec![t.query.clone(), t.positive.clone()];
        seqs.extend(t.negatives.iter().cloned());
        let e = embed_sequences(model, &seqs)?;
        let pos = cosine(e.row(0), e.row(1));
        if (2..e.nrows()).all(|j| cosine(e.row(0), e.row(j)) < pos) {
            hits += 1;
        }
    }
    Ok(hits as f64 / triplets.len() as f64)
}

pub fn train_embedder(model: &mut Model, triplets: &[Triplet], phase: &TrainPhaseConfig, nce: InfoNceOptions, opts: &TrainOptions) -> Result<TrainOutcome> {
    if phase.batch_size < 2 {
        return Err(Error::Argument(format!("contrastive batch must be at least 2, got {}", phase.batch_size)));
    }
    let task = EmbedTask { triplets, opts: nce };
    train_full(model, &task, phase, PhaseTag::Finetune, None, &[], opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ArchConfig, PresetName};

    #[test]
    fn dataset_bytes_round_trip() {
        let d = SeqDataset::new(vec![vec![1, 2, 3], vec![70000], vec![5, 5]]).unwrap();
        assert_eq!(SeqDataset::from_bytes(&d.to_bytes()).unwrap(), d);
        assert!(SeqDataset::from_bytes(&d.to_bytes()[..10]).is_err());
        assert!(SeqDataset::new(vec![vec![]]).is_err());
    }

    #[test]
    fn plan_drops_partial_batches_and_covers_each_epoch() {
        let d = SeqDataset::new((0..10).map(|i| vec![5; i + 1]).collect()).unwrap();
        let phase = TrainPhaseConfig {
            batch_size: 3,
            microbatch: 1,
            epochs: 2,
            ..TrainPhaseConfig::default()
        };
        let task = MaskedLmTask::new(&d, SpecialIds { pad: 0, unk: 1, cls: 2, sep: 3, mask: 4 }, 64, &phase, 512, false).unwrap();
        let mut plan = BatchPlan::new(&task, &phase).unwrap();
        let mut seen = Vec::new();
        while let Some(b) = plan.next() {
            assert_eq!(b.len(), 3);
            seen.extend(b);
        }
        assert_eq!(seen.len(), 18);
        assert_eq!(plan.dropped, 2);
        let mut first: Vec<usize> = seen[..9].to_vec();
        first.sort();
        first.dedup();
        assert_eq!(first.len(), 9);
    }

    #[test]
    fn batch_warmup_ramps() {
        let d = SeqDataset::new((0..64).map(|_| vec![5; 10]).collect()).unwrap();
        let phase = TrainPhaseConfig {
            batch_size: 8,
            microbatch: 2,
            batch_warmup_tokens: 400,
            epochs: 10,
            ..TrainPhaseConfig::default()
        };
        let task = MaskedLmTask::new(&d, SpecialIds { pad: 0, unk: 1, cls: 2, sep: 3, mask: 4 }, 64, &phase, 512, false).unwrap();
        let mut plan = BatchPlan::new(&task, &phase).unwrap();
        let sizes: Vec<usize> = (0..40).map(|_| plan.next().unwrap().len()).collect();
        assert_eq!(sizes[0], 2);
        assert!(sizes.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*sizes.last().unwrap(), 8);
    }

    #[test]
    fn span_examples_validated() {
        let ok = SpanExample {
            tokens: vec![2, 7, 3, 9, 9, 3],
            candidates: 3..5,
            gold: (3, 4),
        };
        assert!(SpanTask::new(std::slice::from_ref(&ok), 512).is_ok());
        let bad = SpanExample { gold: (2, 4), ..ok.clone() };
        assert!(SpanTask::new(&[bad], 512).is_err());
        assert!(matches!(SpanTask::new(&[], 512), Err(Error::Argument(_))));
    }

    #[test]
    fn zero_budget_emits_only_initial() {
        let mut m = Model::init(&ArchConfig::preset(PresetName::TinyTest), 0).unwrap();
        let before = m.params.clone();
        let d = SeqDataset::new(vec![vec![2, 10, 11, 3]; 4]).unwrap();
        let phase = TrainPhaseConfig {
            token_budget: 0,
            batch_size: 2,
            microbatch: 1,
            ..TrainPhaseConfig::default()
        };
        let specials = SpecialIds { pad: 0, unk: 1, cls: 2, sep: 3, mask: 4 };
        let out = train_mlm(&mut m, &d, specials, &phase, PhaseTag::Pretrain, &TrainOptions::default()).unwrap();
        assert_eq!(out.checkpoints.len(), 1);
        assert_eq!(out.final_checkpoint().step, 0);
        assert_eq!(m.params, before);
    }
}
