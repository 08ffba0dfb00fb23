//! Architecture and training-phase hyperparameters, with presets for the
//! published model family and a consistency validator.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kvfile::KvMap;

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($name), " `{}`"), other
                    ))),
                }
            }
        }
    };
}

string_enum!(BlockStyle { PreNorm => "pre_norm", PostNorm => "post_norm" });
string_enum!(NormKind { LayerNorm => "layer_norm", RmsNorm => "rms_norm" });
string_enum!(Activation { Gelu => "gelu", Silu => "silu" });
string_enum!(AttentionMode { Bidirectional => "bidirectional", Causal => "causal" });
string_enum!(Schedule { Trapezoidal => "trapezoidal", OneSqrtDecay => "one_sqrt_decay", Constant => "constant" });
string_enum!(MaskPolicy { AllMask => "all_mask", Bert801010 => "bert_80_10_10" });

string_enum!(
    /// Named architecture presets.
    PresetName {
        ModernGbert134m => "moderngbert_134m",
        ModernGbert1b => "moderngbert_1b",
        Llammlein2vec120m => "llammlein2vec_120m",
        Llammlein2vec1b => "llammlein2vec_1b",
        Llammlein2vec7b => "llammlein2vec_7b",
        TinyTest => "tiny_test",
        TinyDecoderTest => "tiny_decoder_test",
    }
);

string_enum!(
    /// Named training-phase presets.
    PhasePresetName {
        Pretrain134m => "pretrain_134m",
        Pretrain1b => "pretrain_1b",
        Ext1_134m => "ext1_134m",
        Ext1_1b => "ext1_1b",
        Ext2_134m => "ext2_134m",
        Ext2_1b => "ext2_1b",
        TinyPretrain => "tiny_pretrain",
    }
);

#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub intermediate: usize,
    pub block_style: BlockStyle,
    pub norm: NormKind,
    pub norm_eps: f64,
    pub activation: Activation,
    /// 0 means every layer is global.
    pub global_every: usize,
    /// Total span in tokens of a local layer; 0 when there are no local layers.
    pub local_window: usize,
    pub rope_theta_global: f64,
    pub rope_theta_local: f64,
    pub max_seq_len: usize,
    pub attention_mode: AttentionMode,
    pub linear_bias: bool,
    pub tie_mlm_head: bool,
}

impl ArchConfig {
    pub fn preset(name: PresetName) -> ArchConfig {
        use PresetName::*;
        let moderngbert = ArchConfig {
            vocab_size: 31_168,
            n_layers: 22,
            hidden: 768,
            n_heads: 12,
            head_dim: 64,
            intermediate: 1_152,
            block_style: BlockStyle::PreNorm,
            norm: NormKind::LayerNorm,
            norm_eps: 1e-5,
            activation: Activation::Gelu,
            global_every: 3,
            local_window: 128,
            rope_theta_global: 160_000.0,
            rope_theta_local: 10_000.0,
            max_seq_len: 8_192,
            attention_mode: AttentionMode::Bidirectional,
            linear_bias: false,
            tie_mlm_head: true,
        };
        let llammlein = ArchConfig {
            vocab_size: 32_064,
            block_style: BlockStyle::PostNorm,
            norm: NormKind::RmsNorm,
            activation: Activation::Silu,
            global_every: 0,
            local_window: 0,
            rope_theta_local: 160_000.0,
            attention_mode: AttentionMode::Causal,
            ..moderngbert.clone()
        };
        match name {
            ModernGbert134m => moderngbert,
            ModernGbert1b => ArchConfig {
                n_layers: 28,
                hidden: 2_048,
                n_heads: 32,
                intermediate: 3_072,
                ..moderngbert
            },
            Llammlein2vec120m => ArchConfig {
                n_layers: 12,
                hidden: 768,
                n_heads: 12,
                intermediate: 2_048,
                ..llammlein
            },
            Llammlein2vec1b => ArchConfig {
                n_layers: 22,
                hidden: 2_048,
                n_heads: 32,
                intermediate: 5_632,
                ..llammlein
            },
            Llammlein2vec7b => ArchConfig {
                n_layers: 32,
                hidden: 4_096,
                n_heads: 32,
                head_dim: 128,
                intermediate: 11_008,
                ..llammlein
            },
            TinyTest => ArchConfig {
                vocab_size: 128,
                n_layers: 2,
                hidden: 64,
                n_heads: 1,
                head_dim: 64,
                intermediate: 96,
                local_window: 16,
                rope_theta_global: 10_000.0,
                max_seq_len: 512,
                ..moderngbert
            },
            TinyDecoderTest => ArchConfig {
                vocab_size: 128,
                n_layers: 2,
                hidden: 64,
                n_heads: 1,
                head_dim: 64,
                intermediate: 96,
                max_seq_len: 512,
                ..llammlein
            },
        }
    }

    pub fn preset_by_name(name: &str) -> Result<ArchConfig> {
        Ok(Self::preset(name.parse()?))
    }

    /// Layer `i` is global iff `i % global_every == 0`; with `global_every == 0`
    /// every layer is global.
    pub fn is_global_layer(&self, layer: usize) -> bool {
        self.global_every == 0 || layer % self.global_every == 0
    }

    pub fn layer_theta(&self, layer: usize) -> f64 {
        if self.is_global_layer(layer) {
            self.rope_theta_global
        } else {
            self.rope_theta_local
        }
    }

    /// Returns every violated invariant; empty when the config is consistent.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.hidden != self.n_heads * self.head_dim {
            v.push(format!(
                "hidden ≠ heads×head_dim ({} ≠ {}×{})",
                self.hidden, self.n_heads, self.head_dim
            ));
        }
        for (name, value) in [
            ("vocab_size", self.vocab_size),
            ("hidden", self.hidden),
            ("head_dim", self.head_dim),
        ] {
            if value == 0 || value % 64 != 0 {
                v.push(format!("{name} = {value} not multiple of 64"));
            }
        }
        if self.global_every > 0 && self.local_window == 0 {
            v.push("global_every > 0 requires local_window > 0".into());
        }
        if self.local_window % 2 != 0 {
            v.push(format!("local_window = {} must be even", self.local_window));
        }
        if self.n_layers == 0 {
            v.push("n_layers must be positive".into());
        }
        if self.intermediate == 0 {
            v.push("intermediate must be positive".into());
        }
        if self.max_seq_len == 0 {
            v.push("max_seq_len must be positive".into());
        }
        if !(self.norm_eps > 0.0) {
            v.push("norm_eps must be positive".into());
        }
        if !(self.rope_theta_global > 1.0) || !(self.rope_theta_local > 1.0) {
            v.push("rope thetas must exceed 1".into());
        }
        v
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("vocab_size", self.vocab_size);
        m.set("n_layers", self.n_layers);
        m.set("hidden", self.hidden);
        m.set("n_heads", self.n_heads);
        m.set("head_dim", self.head_dim);
        m.set("intermediate", self.intermediate);
        m.set("block_style", self.block_style);
        m.set("norm", self.norm);
        m.set("norm_eps", self.norm_eps);
        m.set("activation", self.activation);
        m.set("global_every", self.global_every);
        m.set("local_window", self.local_window);
        m.set("rope_theta_global", self.rope_theta_global);
        m.set("rope_theta_local", self.rope_theta_local);
        m.set("max_seq_len", self.max_seq_len);
        m.set("attention_mode", self.attention_mode);
        m.set("linear_bias", self.linear_bias);
        m.set("tie_mlm_head", self.tie_mlm_head);
        m
    }

    /// Reads a config from `kv`. A `preset` key supplies defaults that the
    /// remaining keys override; without it every field is required.
    pub fn from_kv(mut kv: KvMap) -> Result<ArchConfig> {
        let base = match kv.take_str("preset") {
            Some(p) => Some(Self::preset_by_name(&p)?),
            None => None,
        };
        macro_rules! field {
            ($key:ident) => {
                match (kv.take(stringify!($key))?, &base) {
                    (Some(v), _) => v,
                    (None, Some(b)) => b.$key.clone(),
                    (None, None) => {
                        return Err(Error::Config(format!(
                            "missing key `{}`",
                            stringify!($key)
                        )))
                    }
                }
            };
        }
        let cfg = ArchConfig {
            vocab_size: field!(vocab_size),
            n_layers: field!(n_layers),
            hidden: field!(hidden),
            n_heads: field!(n_heads),
            head_dim: field!(head_dim),
            intermediate: field!(intermediate),
            block_style: field!(block_style),
            norm: field!(norm),
            norm_eps: field!(norm_eps),
            activation: field!(activation),
            global_every: field!(global_every),
            local_window: field!(local_window),
            rope_theta_global: field!(rope_theta_global),
            rope_theta_local: field!(rope_theta_local),
            max_seq_len: field!(max_seq_len),
            attention_mode: field!(attention_mode),
            linear_bias: kv
                .take("linear_bias")?
                .unwrap_or(base.as_ref().map_or(false, |b| b.linear_bias)),
            tie_mlm_head: kv
                .take("tie_mlm_head")?
                .unwrap_or(base.as_ref().map_or(true, |b| b.tie_mlm_head)),
        };
        kv.finish()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.to_kv().to_text()
    }

    pub fn from_text(text: &str) -> Result<ArchConfig> {
        Self::from_kv(KvMap::parse(text)?)
    }

    pub fn load(path: &Path) -> Result<ArchConfig> {
        Self::from_kv(KvMap::load(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPhaseConfig {
    pub token_budget: u64,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    /// Sequences per forward/backward pass; gradients accumulate up to `batch_size`.
    pub microbatch: usize,
    pub peak_lr: f64,
    pub schedule: Schedule,
    pub warmup_tokens: u64,
    pub decay_tokens: u64,
    /// Batch-size ramp length in tokens; 0 disables the ramp.
    pub batch_warmup_tokens: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_updates: bool,
    pub mask_rate: f64,
    pub mask_policy: MaskPolicy,
    pub attn_dropout: f64,
    pub max_seq_len: usize,
    pub rope_theta_override: Option<f64>,
    pub epochs: usize,
    /// 0 emits only the initial and final checkpoints.
    pub checkpoint_every_tokens: u64,
    pub seed: u64,
}

impl Default for TrainPhaseConfig {
    fn default() -> Self {
        TrainPhaseConfig {
            token_budget: 0,
            batch_size: 8,
            microbatch: 8,
            peak_lr: 1e-3,
            schedule: Schedule::Constant,
            warmup_tokens: 0,
            decay_tokens: 0,
            batch_warmup_tokens: 0,
            weight_decay: 1e-5,
            beta1: 0.90,
            beta2: 0.98,
            eps: 1e-6,
            clip_updates: true,
            mask_rate: 0.30,
            mask_policy: MaskPolicy::AllMask,
            attn_dropout: 0.1,
            max_seq_len: 1_024,
            rope_theta_override: None,
            epochs: 1,
            checkpoint_every_tokens: 0,
            seed: 0,
        }
    }
}

impl TrainPhaseConfig {
    pub fn preset(name: PhasePresetName) -> TrainPhaseConfig {
        use PhasePresetName::*;
        let pretrain = TrainPhaseConfig {
            token_budget: 470_000_000_000,
            batch_size: 4_608,
            microbatch: 96,
            peak_lr: 8e-4,
            schedule: Schedule::Trapezoidal,
            warmup_tokens: 15_000_000_000,
            decay_tokens: 0,
            batch_warmup_tokens: 3_000_000_000,
            weight_decay: 1e-5,
            max_seq_len: 1_024,
            rope_theta_override: Some(10_000.0),
            ..Default::default()
        };
        let ext = TrainPhaseConfig {
            batch_size: 96,
            max_seq_len: 8_192,
            rope_theta_override: Some(160_000.0),
            warmup_tokens: 0,
            batch_warmup_tokens: 0,
            ..pretrain.clone()
        };
        match name {
            Pretrain134m => pretrain,
            Pretrain1b => TrainPhaseConfig {
                token_budget: 1_270_000_000_000,
                batch_size: 4_928,
                microbatch: 28,
                peak_lr: 5e-5,
                ..pretrain
            },
            Ext1_134m => TrainPhaseConfig {
                token_budget: 52_000_000_000,
                microbatch: 8,
                peak_lr: 3e-4,
                schedule: Schedule::Constant,
                weight_decay: 1e-5,
                ..ext
            },
            Ext1_1b => TrainPhaseConfig {
                token_budget: 90_000_000_000,
                microbatch: 3,
                peak_lr: 5e-5,
                schedule: Schedule::Constant,
                weight_decay: 1e-6,
                ..ext
            },
            Ext2_134m => TrainPhaseConfig {
                token_budget: 14_400_000_000,
                microbatch: 8,
                peak_lr: 3e-4,
                schedule: Schedule::OneSqrtDecay,
                decay_tokens: 12_800_000_000,
                weight_decay: 1e-5,
                ..ext
            },
            Ext2_1b => TrainPhaseConfig {
                token_budget: 14_400_000_000,
                microbatch: 3,
                peak_lr: 5e-6,
                schedule: Schedule::OneSqrtDecay,
                decay_tokens: 12_800_000_000,
                weight_decay: 1e-6,
                ..ext
            },
            TinyPretrain => TrainPhaseConfig {
                token_budget: 200_000,
                batch_size: 8,
                microbatch: 4,
                peak_lr: 3e-3,
                schedule: Schedule::Trapezoidal,
                warmup_tokens: 5_000,
                decay_tokens: 40_000,
                batch_warmup_tokens: 0,
                max_seq_len: 64,
                rope_theta_override: None,
                epochs: 1_000,
                ..pretrain
            },
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            v.push(format!("mask_rate {} not in (0,1)", self.mask_rate));
        }
        if self.schedule == Schedule::Trapezoidal
            && self.warmup_tokens + self.decay_tokens > self.token_budget
        {
            v.push("warmup_tokens + decay_tokens exceed token_budget".into());
        }
        if self.microbatch == 0 || self.batch_size == 0 {
            v.push("batch_size and microbatch must be positive".into());
        }
        if self.microbatch > self.batch_size {
            v.push("microbatch larger than batch_size".into());
        }
        if !(self.peak_lr >= 0.0) {
            v.push("peak_lr must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            v.push("betas must lie in [0,1)".into());
        }
        if !(self.eps > 0.0) {
            v.push("eps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.attn_dropout) {
            v.push("attn_dropout must lie in [0,1)".into());
        }
        if self.max_seq_len == 0 {
            v.push("max_seq_len must be positive".into());
        }
        v
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("token_budget", self.token_budget);
        m.set("batch_size", self.batch_size);
        m.set("microbatch", self.microbatch);
        m.set("peak_lr", self.peak_lr);
        m.set("schedule", self.schedule);
        m.set("warmup_tokens", self.warmup_tokens);
        m.set("decay_tokens", self.decay_tokens);
        m.set("batch_warmup_tokens", self.batch_warmup_tokens);
        m.set("weight_decay", self.weight_decay);
        m.set("beta1", self.beta1);
        m.set("beta2", self.beta2);
        m.set("eps", self.eps);
        m.set("clip_updates", self.clip_updates);
        m.set("mask_rate", self.mask_rate);
        m.set("mask_policy", self.mask_policy);
        m.set("attn_dropout", self.attn_dropout);
        m.set("max_seq_len", self.max_seq_len);
        if let Some(t) = self.rope_theta_override {
            m.set("rope_theta_override", t);
        }
        m.set("epochs", self.epochs);
        m.set("checkpoint_every_tokens", self.checkpoint_every_tokens);
        m.set("seed", self.seed);
        m
    }

    /// Like [`ArchConfig::from_kv`]: an optional `preset` key seeds defaults,
    /// otherwise [`TrainPhaseConfig::default`] does.
    pub fn from_kv(mut kv: KvMap) -> Result<TrainPhaseConfig> {
        let base = match kv.take_str("preset") {
            Some(p) => Self::preset(p.parse()?),
            None => Self::default(),
        };
        let cfg = TrainPhaseConfig {
            token_budget: kv.take_or("token_budget", base.token_budget)?,
            batch_size: kv.take_or("batch_size", base.batch_size)?,
            microbatch: kv.take_or("microbatch", base.microbatch)?,
            peak_lr: kv.take_or("peak_lr", base.peak_lr)?,
            schedule: kv.take_or("schedule", base.schedule)?,
            warmup_tokens: kv.take_or("warmup_tokens", base.warmup_tokens)?,
            decay_tokens: kv.take_or("decay_tokens", base.decay_tokens)?,
            batch_warmup_tokens: kv.take_or("batch_warmup_tokens", base.batch_warmup_tokens)?,
            weight_decay: kv.take_or("weight_decay", base.weight_decay)?,
            beta1: kv.take_or("beta1", base.beta1)?,
            beta2: kv.take_or("beta2", base.beta2)?,
            eps: kv.take_or("eps", base.eps)?,
            clip_updates: kv.take_or("clip_updates", base.clip_updates)?,
            mask_rate: kv.take_or("mask_rate", base.mask_rate)?,
            mask_policy: kv.take_or("mask_policy", base.mask_policy)?,
            attn_dropout: kv.take_or("attn_dropout", base.attn_dropout)?,
            max_seq_len: kv.take_or("max_seq_len", base.max_seq_len)?,
            rope_theta_override: match kv.take("rope_theta_override")? {
                Some(t) => Some(t),
                None => base.rope_theta_override,
            },
            epochs: kv.take_or("epochs", base.epochs)?,
            checkpoint_every_tokens: kv
                .take_or("checkpoint_every_tokens", base.checkpoint_every_tokens)?,
            seed: kv.take_or("seed", base.seed)?,
        };
        kv.finish()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.to_kv().to_text()
    }

    pub fn from_text(text: &str) -> Result<TrainPhaseConfig> {
        Self::from_kv(KvMap::parse(text)?)
    }
}
