//! The transformer stack and its output heads.
//!
//! Every linear map stores its weight as `out × in`. The feed-forward unit is
//! gated: the up-projection produces `2 × intermediate` columns split into
//! (gate, value), and `activation(gate) ⊙ value` is projected back down.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{s, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::attention::{MaskSpec, PackedBatch, Segment};
use crate::autograd::{Mat, Tape, Var};
use crate::config::{AttentionMode, BlockStyle, NormKind};
use crate::config::ArchConfig;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::rope::RopeCache;
use crate::tokenizer::TokenId;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Proj {
    pub w: usize,
    pub b: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormSlots {
    pub scale: usize,
    pub offset: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlots {
    pub attn_norm: NormSlots,
    pub q: Proj,
    pub k: Proj,
    pub v: Proj,
    pub o: Proj,
    pub ffn_norm: NormSlots,
    pub up: Proj,
    pub down: Proj,
}

/// Which projection of a layer an adapter attaches to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ProjTarget {
    Q,
    K,
    V,
    O,
    Up,
    Down,
}

impl ProjTarget {
    pub const ALL: [ProjTarget; 6] = [
        ProjTarget::Q,
        ProjTarget::K,
        ProjTarget::V,
        ProjTarget::O,
        ProjTarget::Up,
        ProjTarget::Down,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProjTarget::Q => "q",
            ProjTarget::K => "k",
            ProjTarget::V => "v",
            ProjTarget::O => "o",
            ProjTarget::Up => "up",
            ProjTarget::Down => "down",
        }
    }

    pub fn parse(s: &str) -> Result<ProjTarget> {
        ProjTarget::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown projection target `{s}`")))
    }
}

impl LayerSlots {
    pub fn proj(&self, t: ProjTarget) -> Proj {
        match t {
            ProjTarget::Q => self.q,
            ProjTarget::K => self.k,
            ProjTarget::V => self.v,
            ProjTarget::O => self.o,
            ProjTarget::Up => self.up,
            ProjTarget::Down => self.down,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slots {
    pub embed: usize,
    pub layers: Vec<LayerSlots>,
    pub final_norm: NormSlots,
    pub mlm_head: Option<usize>,
    pub mlm_bias: Option<usize>,
    pub span: Proj,
}

/// Named parameter tensors laid out for one [`ArchConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    cfg: ArchConfig,
    names: Vec<String>,
    tensors: Vec<Mat>,
    slots: Slots,
}

#[derive(Clone, Copy)]
enum InitKind {
    Normal(f64),
    Ones,
    Zeros,
}

struct Layout {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    inits: Vec<InitKind>,
}

impl Layout {
    fn add(&mut self, name: String, shape: (usize, usize), init: InitKind) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn proj(&mut self, cfg: &ArchConfig, name: &str, out: usize, inp: usize, std: f64) -> Proj {
        let w = self.add(format!("{name}.weight"), (out, inp), InitKind::Normal(std));
        let b = cfg
            .linear_bias
            .then(|| self.add(format!("{name}.bias"), (1, out), InitKind::Zeros));
        Proj { w, b }
    }

    fn norm(&mut self, cfg: &ArchConfig, name: &str) -> NormSlots {
        let scale = self.add(format!("{name}.scale"), (1, cfg.hidden), InitKind::Ones);
        let offset = (cfg.norm == NormKind::LayerNorm)
            .then(|| self.add(format!("{name}.offset"), (1, cfg.hidden), InitKind::Zeros));
        NormSlots { scale, offset }
    }
}

fn layout(cfg: &ArchConfig) -> (Layout, Slots) {
    let mut l = Layout {
        names: Vec::new(),
        shapes: Vec::new(),
        inits: Vec::new(),
    };
    let h = cfg.hidden;
    let out_std = INIT_STD / (2.0 * cfg.n_layers as f64).sqrt();
    let embed = l.add("embed.weight".into(), (cfg.vocab_size, h), InitKind::Normal(INIT_STD));
    let layers = (0..cfg.n_layers)
        .map(|i| {
            let p = format!("layers.{i}");
            LayerSlots {
                attn_norm: l.norm(cfg, &format!("{p}.attn_norm")),
                q: l.proj(cfg, &format!("{p}.attn.q"), h, h, INIT_STD),
                k: l.proj(cfg, &format!("{p}.attn.k"), h, h, INIT_STD),
                v: l.proj(cfg, &format!("{p}.attn.v"), h, h, INIT_STD),
                o: l.proj(cfg, &format!("{p}.attn.o"), h, h, out_std),
                ffn_norm: l.norm(cfg, &format!("{p}.ffn_norm")),
                up: l.proj(cfg, &format!("{p}.ffn.up"), 2 * cfg.intermediate, h, INIT_STD),
                down: l.proj(cfg, &format!("{p}.ffn.down"), h, cfg.intermediate, out_std),
            }
        })
        .collect();
    let final_norm = l.norm(cfg, "final_norm");
    let mlm_head = (!cfg.tie_mlm_head)
        .then(|| l.add("mlm_head.weight".into(), (cfg.vocab_size, h), InitKind::Normal(INIT_STD)));
    let mlm_bias = cfg
        .linear_bias
        .then(|| l.add("mlm_head.bias".into(), (1, cfg.vocab_size), InitKind::Zeros));
    let span = l.proj(cfg, "span_head", 2, h, INIT_STD);
    let slots = Slots {
        embed,
        layers,
        final_norm,
        mlm_head,
        mlm_bias,
        span,
    };
    (l, slots)
}

/// Parameter count of the layout for `cfg`, without allocating it.
pub fn param_count(cfg: &ArchConfig) -> usize {
    layout(cfg).0.shapes.iter().map(|(r, c)| r * c).sum()
}

impl ModelParams {
    /// Scaled-normal initialization; output projections use
    /// `std / sqrt(2 · n_layers)`, norms start at identity.
    pub fn init(cfg: &ArchConfig, seed: u64) -> Result<ModelParams> {
        cfg.ensure_valid()?;
        let (l, slots) = layout(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = l
            .shapes
            .iter()
            .zip(&l.inits)
            .map(|(&shape, &init)| match init {
                InitKind::Normal(std) => {
                    let n = Normal::new(0.0, std).expect("positive std");
                    Mat::from_shape_simple_fn(shape, || n.sample(&mut rng))
                }
                InitKind::Ones => Mat::ones(shape),
                InitKind::Zeros => Mat::zeros(shape),
            })
            .collect();
        Ok(ModelParams {
            cfg: cfg.clone(),
            names: l.names,
            tensors,
            slots,
        })
    }

    /// Rebuilds from named tensors; every expected name must be present with
    /// the expected shape.
    pub fn from_named(cfg: &ArchConfig, mut named: HashMap<String, Mat>) -> Result<ModelParams> {
        cfg.ensure_valid()?;
        let (l, slots) = layout(cfg);
        let mut tensors = Vec::with_capacity(l.names.len());
        for (name, &shape) in l.names.iter().zip(&l.shapes) {
            let t = named
                .remove(name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks tensor `{name}`")))?;
            if t.dim() != shape {
                return Err(Error::Data(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.dim()
                )));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("tensor `{name}` holds non-finite values")));
            }
            tensors.push(t);
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::Data(format!("unexpected tensor `{extra}`")));
        }
        Ok(ModelParams {
            cfg: cfg.clone(),
            names: l.names,
            tensors,
            slots,
        })
    }

    pub fn cfg(&self) -> &ArchConfig {
        &self.cfg
    }

    /// Replaces the config for changes that leave every tensor shape intact
    /// (attention mode, RoPE thetas, maximum length).
    pub fn set_cfg(&mut self, cfg: ArchConfig) -> Result<()> {
        let (l, _) = layout(&cfg);
        if l.names != self.names
            || l.shapes.iter().zip(&self.tensors).any(|(s, t)| *s != t.dim())
        {
            return Err(Error::Argument("new config changes the parameter layout".into()));
        }
        self.cfg = cfg;
        Ok(())
    }

    pub fn slots(&self) -> &Slots {
        &self.slots
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Mat] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Mat] {
        &mut self.tensors
    }

    pub fn tensor(&self, slot: usize) -> &Mat {
        &self.tensors[slot]
    }

    pub fn tensor_mut(&mut self, slot: usize) -> &mut Mat {
        &mut self.tensors[slot]
    }

    pub fn slot_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Whether a tensor is a matrix subject to weight decay (not a norm or bias).
    pub fn decays(&self, slot: usize) -> bool {
        self.names[slot].ends_with(".weight")
    }

    /// SHA-256 over one tensor's name, shape and little-endian values.
    pub fn tensor_digest(&self, slot: usize) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.names[slot].as_bytes());
        let t = &self.tensors[slot];
        h.update((t.nrows() as u64).to_le_bytes());
        h.update((t.ncols() as u64).to_le_bytes());
        for v in t.iter() {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }

    pub fn digests(&self) -> Vec<[u8; 32]> {
        (0..self.tensors.len()).map(|i| self.tensor_digest(i)).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Flattened rows of one forward pass, split into attention segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<TokenId>,
    pub segments: Vec<Segment>,
    pub positions: Vec<usize>,
    /// Per-segment key for dropout streams, so a member's dropout pattern
    /// does not depend on which other members share its batch.
    pub keys: Vec<u64>,
}

impl Batch {
    pub fn packed(p: &PackedBatch) -> Batch {
        let segments = p.segments();
        let positions = segments.iter().flat_map(|s| 0..s.len).collect();
        let keys = (0..segments.len() as u64).collect();
        Batch {
            tokens: p.tokens.clone(),
            segments,
            positions,
            keys,
        }
    }

    pub fn from_sequences<S: AsRef<[TokenId]>>(seqs: &[S]) -> Result<Batch> {
        Ok(Batch::packed(&crate::attention::pack(seqs)?))
    }

    /// Every member right-padded with `pad` to the longest member.
    pub fn padded<S: AsRef<[TokenId]>>(seqs: &[S], pad: TokenId) -> Result<Batch> {
        if seqs.is_empty() || seqs.iter().any(|s| s.as_ref().is_empty()) {
            return Err(Error::Argument("padded batch needs non-empty members".into()));
        }
        let width = seqs.iter().map(|s| s.as_ref().len()).max().unwrap();
        let mut tokens = Vec::with_capacity(width * seqs.len());
        let mut segments = Vec::with_capacity(seqs.len());
        for s in seqs {
            let s = s.as_ref();
            segments.push(Segment {
                start: tokens.len(),
                len: width,
                valid: s.len(),
            });
            tokens.extend_from_slice(s);
            tokens.extend(std::iter::repeat(pad).take(width - s.len()));
        }
        let positions = segments.iter().flat_map(|s| 0..s.len).collect();
        let keys = (0..segments.len() as u64).collect();
        Ok(Batch {
            tokens,
            segments,
            positions,
            keys,
        })
    }

    pub fn with_keys(mut self, keys: Vec<u64>) -> Batch {
        assert_eq!(keys.len(), self.segments.len());
        self.keys = keys;
        self
    }

    pub fn n_rows(&self) -> usize {
        self.tokens.len()
    }

    /// Rows holding real (non-padding) tokens, in order.
    pub fn valid_rows(&self) -> Vec<usize> {
        self.segments
            .iter()
            .flat_map(|s| s.start..s.start + s.valid)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Dropout applied to the attention output projection in train mode.
    pub dropout: f64,
    pub seed: u64,
    /// Keep per-layer hidden states in the output.
    pub debug: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        ForwardOptions {
            mode: Mode::Eval,
            dropout: 0.0,
            seed: 0,
            debug: false,
        }
    }

    pub fn train(dropout: f64, seed: u64) -> Self {
        ForwardOptions {
            mode: Mode::Train,
            dropout,
            seed,
            debug: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub hidden: Mat,
    pub layer_outputs: Option<Vec<Mat>>,
}

/// Low-rank delta bound on a tape: `y += scale · (x Aᵀ) Bᵀ` for each
/// registered (layer, projection).
#[derive(Debug, Clone)]
pub struct BoundAdapter {
    pub scale: f64,
    pub pairs: HashMap<(usize, ProjTarget), (Var, Var)>,
}

/// Parameter handles for one tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub params: Vec<Var>,
    pub adapters: Vec<BoundAdapter>,
}

/// Parameters plus the rotary tables they are evaluated with.
#[derive(Debug, Clone)]
pub struct Model {
    pub params: ModelParams,
    rope: Arc<RopeCache>,
}

impl Model {
    pub fn new(params: ModelParams) -> Model {
        let rope = Arc::new(RopeCache::new(params.cfg().head_dim));
        Model { params, rope }
    }

    pub fn init(cfg: &ArchConfig, seed: u64) -> Result<Model> {
        Ok(Model::new(ModelParams::init(cfg, seed)?))
    }

    pub fn cfg(&self) -> &ArchConfig {
        self.params.cfg()
    }

    pub fn mask_for_layer(&self, layer: usize) -> MaskSpec {
        let cfg = self.cfg();
        match cfg.attention_mode {
            AttentionMode::Causal => MaskSpec::Causal,
            AttentionMode::Bidirectional if cfg.is_global_layer(layer) => MaskSpec::GlobalBidirectional,
            AttentionMode::Bidirectional => MaskSpec::SlidingWindow {
                window: cfg.local_window,
            },
        }
    }

    /// Binds every tensor to `tape`; trainable tensors get slots equal to
    /// their parameter index.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let params = self
            .params
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| if trainable { tape.param(t, i) } else { tape.constant(t.clone()) })
            .collect();
        BoundModel {
            params,
            adapters: Vec::new(),
        }
    }

    pub fn check_batch(&self, batch: &Batch) -> Result<()> {
        let cfg = self.cfg();
        if let Some(&bad) = batch.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Argument(format!(
                "token id {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        if let Some(s) = batch.segments.iter().find(|s| s.len > cfg.max_seq_len) {
            return Err(Error::Length {
                len: s.len,
                max: cfg.max_seq_len,
            });
        }
        if batch.positions.len() != batch.tokens.len() {
            return Err(Error::Argument("positions and tokens differ in length".into()));
        }
        Ok(())
    }

    fn project(&self, tape: &mut Tape, bm: &BoundModel, layer: usize, target: ProjTarget, x: Var) -> Var {
        let p = self.params.slots().layers[layer].proj(target);
        let mut y = tape.linear(x, bm.params[p.w]);
        if let Some(b) = p.b {
            y = tape.add_row(y, bm.params[b]);
        }
        for ad in &bm.adapters {
            if let Some(&(a, b)) = ad.pairs.get(&(layer, target)) {
                let low = tape.linear(x, a);
                let delta = tape.linear(low, b);
                let delta = tape.scale(delta, ad.scale);
                y = tape.add(y, delta);
            }
        }
        y
    }

    fn norm(&self, tape: &mut Tape, bm: &BoundModel, slots: NormSlots, x: Var) -> Var {
        let cfg = self.cfg();
        tape.norm(
            x,
            bm.params[slots.scale],
            slots.offset.map(|o| bm.params[o]),
            cfg.norm,
            cfg.norm_eps,
        )
    }

    /// Runs the stack on `tape` and returns the final hidden states.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        bm: &BoundModel,
        batch: &Batch,
        opts: &ForwardOptions,
        mut layer_outputs: Option<&mut Vec<Mat>>,
    ) -> Result<Var> {
        self.check_batch(batch)?;
        let cfg = self.cfg().clone();
        let slots = self.params.slots().clone();
        let segments: Arc<[Segment]> = batch.segments.clone().into();
        let positions: Arc<[usize]> = batch.positions.clone().into();
        let max_pos = batch.positions.iter().copied().max().map_or(1, |p| p + 1);
        let mut h = tape.embed(bm.params[slots.embed], &batch.tokens);
        let h_dim = cfg.hidden;
        for (li, ls) in slots.layers.iter().enumerate() {
            let spec = self.mask_for_layer(li);
            let table = self.rope.get(cfg.layer_theta(li), max_pos)?;
            let attn_in = match cfg.block_style {
                BlockStyle::PreNorm => self.norm(tape, bm, ls.attn_norm, h),
                BlockStyle::PostNorm => h,
            };
            let q = self.project(tape, bm, li, ProjTarget::Q, attn_in);
            let k = self.project(tape, bm, li, ProjTarget::K, attn_in);
            let v = self.project(tape, bm, li, ProjTarget::V, attn_in);
            let q = tape.rope(q, table.clone(), positions.clone())?;
            let k = tape.rope(k, table, positions.clone())?;
            let a = tape.attention(q, k, v, cfg.n_heads, segments.clone(), spec)?;
            let mut a = self.project(tape, bm, li, ProjTarget::O, a);
            if opts.mode == Mode::Train && opts.dropout > 0.0 {
                let keep = 1.0 - opts.dropout;
                let mut mask = Mat::zeros((batch.n_rows(), h_dim));
                for (seg, &key) in batch.segments.iter().zip(&batch.keys) {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[opts.seed, li as u64, key]));
                    mask.slice_mut(s![seg.start..seg.start + seg.len, ..])
                        .mapv_inplace(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
                }
                let m = tape.constant(mask);
                a = tape.mul(a, m);
            }
            h = tape.add(h, a);
            if cfg.block_style == BlockStyle::PostNorm {
                h = self.norm(tape, bm, ls.attn_norm, h);
            }
            let ffn_in = match cfg.block_style {
                BlockStyle::PreNorm => self.norm(tape, bm, ls.ffn_norm, h),
                BlockStyle::PostNorm => h,
            };
            let up = self.project(tape, bm, li, ProjTarget::Up, ffn_in);
            let gate = tape.slice_cols(up, 0, cfg.intermediate);
            let value = tape.slice_cols(up, cfg.intermediate, cfg.intermediate);
            let gate = tape.activation(gate, cfg.activation);
            let inner = tape.mul(gate, value);
            let f = self.project(tape, bm, li, ProjTarget::Down, inner);
            h = tape.add(h, f);
            if cfg.block_style == BlockStyle::PostNorm {
                h = self.norm(tape, bm, ls.ffn_norm, h);
            }
            if let Some(outs) = layer_outputs.as_deref_mut() {
                outs.push(tape.value(h).clone());
            }
        }
        Ok(self.norm(tape, bm, slots.final_norm, h))
    }

    pub fn forward(&self, batch: &Batch, opts: &ForwardOptions) -> Result<ForwardOutput> {
        self.forward_bound(batch, opts, |_, _| Ok(()))
    }

    /// Forward pass with extra state bound to the tape first, e.g. runtime adapters.
    pub fn forward_bound(
        &self,
        batch: &Batch,
        opts: &ForwardOptions,
        extra: impl FnOnce(&mut Tape, &mut BoundModel) -> Result<()>,
    ) -> Result<ForwardOutput> {
        let mut tape = Tape::new(false);
        let mut bm = self.bind(&mut tape, false);
        extra(&mut tape, &mut bm)?;
        let mut layers = opts.debug.then(Vec::new);
        let h = self.encode_on_tape(&mut tape, &bm, batch, opts, layers.as_mut())?;
        Ok(ForwardOutput {
            hidden: tape.value(h).clone(),
            layer_outputs: layers,
        })
    }

    /// MLM logits for the selected rows of `hidden`.
    pub fn mlm_logits_on_tape(&self, tape: &mut Tape, bm: &BoundModel, hidden: Var, rows: &[usize]) -> Var {
        let slots = self.params.slots();
        let sel = tape.gather_rows(hidden, rows);
        let head = slots.mlm_head.unwrap_or(slots.embed);
        let mut logits = tape.linear(sel, bm.params[head]);
        if let Some(b) = slots.mlm_bias {
            logits = tape.add_row(logits, bm.params[b]);
        }
        logits
    }

    /// `positions × vocab` scores.
    pub fn mlm_logits(&self, hidden: &Mat) -> Mat {
        let slots = self.params.slots();
        let head = self.params.tensor(slots.mlm_head.unwrap_or(slots.embed));
        let mut logits = hidden.dot(&head.t());
        if let Some(b) = slots.mlm_bias {
            logits += self.params.tensor(b);
        }
        logits
    }

    pub fn span_logits_on_tape(&self, tape: &mut Tape, bm: &BoundModel, hidden: Var) -> Var {
        let p = self.params.slots().span;
        let y = tape.linear(hidden, bm.params[p.w]);
        match p.b {
            Some(b) => tape.add_row(y, bm.params[b]),
            None => y,
        }
    }

    /// Per-position (start, end) scores.
    pub fn span_logits(&self, hidden: &Mat) -> (Vec<f64>, Vec<f64>) {
        let p = self.params.slots().span;
        let mut y = hidden.dot(&self.params.tensor(p.w).t());
        if let Some(b) = p.b {
            y += self.params.tensor(b);
        }
        (y.column(0).to_vec(), y.column(1).to_vec())
    }
}

/// Arithmetic mean of the listed rows.
pub fn pool_mean(hidden: &Mat, valid_rows: &[usize]) -> Result<Vec<f64>> {
    if valid_rows.is_empty() {
        return Err(Error::Argument("mean pooling needs at least one valid position".into()));
    }
    let sel = hidden.select(Axis(0), valid_rows);
    Ok((sel.sum_axis(Axis(0)) / valid_rows.len() as f64).to_vec())
}

/// Best `(s, e)` inside `range` with `s ≤ e` and `e − s ≤ max_answer_len`,
/// maximizing `start[s] + end[e]`. Ties go to the earliest pair.
pub fn best_span(start: &[f64], end: &[f64], range: std::ops::Range<usize>, max_answer_len: usize) -> Option<(usize, usize)> {
    let mut best: Option<((usize, usize), f64)> = None;
    for s in range.clone() {
        let hi = (s + max_answer_len).min(range.end.saturating_sub(1));
        for e in s..=hi {
            let score = start[s] + end[e];
            if best.is_none_or(|(_, b)| score > b) {
                best = Some(((s, e), score));
            }
        }
    }
    best.map(|(p, _)| p)
}

/// Copies rows of `hidden` for one segment.
pub fn segment_rows(hidden: &Mat, seg: &Segment) -> Mat {
    hidden.slice(s![seg.start..seg.start + seg.valid, ..]).to_owned()
}
