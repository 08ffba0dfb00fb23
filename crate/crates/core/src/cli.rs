//! Command-line front end. Every stage of the pipeline is a subcommand that
//! reads an optional key-value config file and overriding flags.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::adapter::{AdapterSet, AdapterSpec};
use crate::bench::{self, ExecPath, LengthDist, MeasureOptions, SyntheticSpec};
use crate::checkpoint::{load_tensors, Checkpoint, Dtype, PhaseTag};
use crate::config::{ArchConfig, TrainPhaseConfig};
use crate::data::{self, BloomFilter, DEFAULT_RATIO_THRESHOLD};
use crate::error::Error;
use crate::extension::{self, EXTENDED_MAX_LEN, EXTENDED_THETA};
use crate::kvfile::KvMap;
use crate::llm2vec;
use crate::model::{Model, ModelParams, ProjTarget};
use crate::niah::{self, SplitSpec};
use crate::objectives::InfoNceOptions;
use crate::provenance::{to_hex, ProvenanceLog};
use crate::tokenizer::{SpecialIds, Vocab};
use crate::trainer::{self, SeqDataset, TrainOptions, Triplet};

#[derive(Parser, Debug)]
#[command(name = "encforge", version, about = "Encoder pre-training, context extension, decoder conversion and long-context evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Key-value config file (`arch.*`, `phase.*` and subcommand keys).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice; overrides `phase.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Config override, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Tokenize documents into a length-prefixed sequence file.
    Tokenize(TokenizeArgs),
    /// Drop repeated paragraphs with a Bloom filter.
    Dedup(DedupArgs),
    /// Keep documents whose token-to-word ratio is at most the threshold.
    Filter(FilterArgs),
    /// Tokenize and cut documents into sequences of at most the target length.
    SplitLong(SplitArgs),
    /// MLM pre-training (or resume from a checkpoint).
    Pretrain(PretrainArgs),
    /// Raise the global RoPE theta and maximum length; optionally train an extension phase.
    Extend(ExtendArgs),
    /// Train an MNTP adapter on a decoder made bidirectional.
    Mntp(MntpArgs),
    /// Merge adapters into a checkpoint's weights.
    MergeAdapters(MergeArgs),
    /// Contrastive embedding fine-tune on query/positive/negatives triplets.
    EmbedTrain(EmbedArgs),
    /// Build a needle-in-a-haystack QA dataset.
    NiahGen(NiahGenArgs),
    /// Exact-match evaluation of a span-QA model on haystack examples.
    NiahEval(NiahEvalArgs),
    /// Span-QA fine-tune on haystack examples.
    QaFinetune(QaArgs),
    /// Throughput of padded vs packed inference on synthetic data.
    Bench(BenchArgs),
    /// Print checkpoint, adapter or provenance metadata.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
pub struct TokenizeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Documents, one per line (plain text or JSON with a `text` field).
    #[arg(long)]
    pub input: PathBuf,
    /// Vocabulary file, one piece per line.
    #[arg(long)]
    pub vocab: PathBuf,
    /// Wrap each document in [CLS] … [SEP].
    #[arg(long)]
    pub specials: bool,
}

#[derive(Args, Debug)]
pub struct DedupArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub input: PathBuf,
    /// Expected number of distinct paragraphs (sizes the filter).
    #[arg(long, default_value_t = 1_000_000)]
    pub expected: u64,
    /// Target false-positive rate.
    #[arg(long, default_value_t = 0.01)]
    pub fp_rate: f64,
}

#[derive(Args, Debug)]
pub struct FilterArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long, default_value_t = DEFAULT_RATIO_THRESHOLD)]
    pub threshold: f64,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long, default_value_t = EXTENDED_MAX_LEN)]
    pub target: usize,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Length-prefixed sequence file.
    #[arg(long)]
    pub data: PathBuf,
    /// Architecture preset when the config names none.
    #[arg(long)]
    pub preset: Option<String>,
    /// Phase preset when the config names none.
    #[arg(long)]
    pub phase_preset: Option<String>,
    /// Vocabulary for special-token ids (default: the synthetic layout, ids 0–4).
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many total steps.
    #[arg(long)]
    pub stop_after: Option<u64>,
    /// Write 32-bit checkpoints.
    #[arg(long)]
    pub f32: bool,
}

#[derive(Args, Debug)]
pub struct ExtendArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = EXTENDED_THETA)]
    pub theta: f64,
    #[arg(long, default_value_t = EXTENDED_MAX_LEN)]
    pub max_len: usize,
    /// Train this extension phase (`ext1` or `ext2`) after extending.
    #[arg(long)]
    pub phase: Option<String>,
    /// Sequence file for the extension phase.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MntpArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Phase tag stored with the adapter, e.g. `ext1`.
    #[arg(long, default_value = "ext1")]
    pub phase_name: String,
    #[arg(long, default_value_t = 16)]
    pub rank: usize,
    #[arg(long, default_value_t = 32.0)]
    pub alpha: f64,
    /// Comma-separated projections among q,k,v,o,up,down.
    #[arg(long, default_value = "q,k,v,o,up,down")]
    pub targets: String,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MergeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Adapter files, merged in the given order.
    #[arg(long = "adapter", required = true)]
    pub adapters: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSON lines with `query`, `positive` and `negatives` text fields.
    #[arg(long)]
    pub triplets: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub temperature: f64,
}

#[derive(Args, Debug)]
pub struct NiahGenArgs {
    #[command(flatten)]
    pub common: Common,
    /// QA records as JSON lines (question, context, answer, answer_start).
    #[arg(long, required_unless_present = "toy")]
    pub pairs: Option<PathBuf>,
    #[arg(long, required_unless_present = "toy")]
    pub vocab: Option<PathBuf>,
    /// `train` (≤3 distractors, 1,024 tokens) or `test` (≤20, 8,192).
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Generate this many synthetic pairs with the built-in toy vocabulary.
    #[arg(long)]
    pub toy: Option<usize>,
}

#[derive(Args, Debug)]
pub struct NiahEvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub examples: PathBuf,
    /// Vocabulary file; the built-in toy vocabulary when absent.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct QaArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub examples: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    /// Length distributions, e.g. `fixed:512`, `normal:4096,1024`; repeatable.
    #[arg(long = "spec", required = true)]
    pub specs: Vec<String>,
    #[arg(long, default_value_t = bench::DEFAULT_DOCS)]
    pub n_docs: usize,
    #[arg(long, default_value_t = bench::DEFAULT_REPS)]
    pub reps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Read the normal spread as a variance instead of a standard deviation.
    #[arg(long)]
    pub variance: bool,
    /// Report token and position counts without running the model.
    #[arg(long)]
    pub dry_run: bool,
    /// Model checkpoint; an initialized preset otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "moderngbert_134m")]
    pub preset: String,
    /// Per-batch activation budget in MiB.
    #[arg(long)]
    pub memory_mib: Option<u64>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint, adapter or provenance file.
    pub path: PathBuf,
}

/// Parses `argv`, runs, and returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &anyhow::Error) -> i32 {
    e.chain()
        .find_map(|c| c.downcast_ref::<Error>())
        .map_or(2, Error::exit_code)
}

struct Settings {
    kv: KvMap,
    seed: Option<u64>,
}

impl Settings {
    fn load(c: &Common) -> anyhow::Result<Settings> {
        let mut kv = match &c.config {
            Some(p) => KvMap::load(p)?,
            None => KvMap::new(),
        };
        for s in &c.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Argument(format!("--set expects KEY=VALUE, got `{s}`")))?;
            kv.set(k.trim(), v.trim());
        }
        Ok(Settings { kv, seed: c.seed })
    }

    fn arch(&mut self, preset: Option<&str>) -> anyhow::Result<ArchConfig> {
        let mut a = self.kv.take_prefixed("arch.");
        if let (false, Some(p)) = (a.contains("preset"), preset) {
            a.set("preset", p);
        }
        if a.is_empty() {
            bail!(Error::Argument("no architecture given: use --preset or arch.* keys".into()));
        }
        Ok(ArchConfig::from_kv(a)?)
    }

    fn phase(&mut self, preset: Option<&str>) -> anyhow::Result<TrainPhaseConfig> {
        let mut p = self.kv.take_prefixed("phase.");
        if let (false, Some(name)) = (p.contains("preset"), preset) {
            p.set("preset", name);
        }
        let mut phase = TrainPhaseConfig::from_kv(p)?;
        if let Some(s) = self.seed {
            phase.seed = s;
        }
        phase.ensure_valid()?;
        Ok(phase)
    }

    fn finish(self) -> anyhow::Result<()> {
        Ok(self.kv.finish()?)
    }
}

fn out_dir(c: &Common) -> anyhow::Result<PathBuf> {
    let d = c.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    Ok(d)
}

fn specials(vocab: Option<&Path>) -> anyhow::Result<SpecialIds> {
    Ok(match vocab {
        Some(p) => Vocab::load(p)?.special(),
        None => SpecialIds {
            pad: 0,
            unk: 1,
            cls: 2,
            sep: 3,
            mask: 4,
        },
    })
}

fn vocab_or_toy(p: Option<&Path>) -> anyhow::Result<Vocab> {
    Ok(match p {
        Some(p) => Vocab::load(p)?,
        None => niah::toy::vocab(),
    })
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn train_opts(c: &Common, stop_after: Option<u64>, f32: bool) -> anyhow::Result<TrainOptions> {
    Ok(TrainOptions {
        stop_after_steps: stop_after,
        out_dir: Some(out_dir(c)?),
        f32_checkpoints: f32,
    })
}

fn report_outcome(out: &trainer::TrainOutcome) {
    let ck = out.final_checkpoint();
    println!(
        "steps {} tokens {} stop {:?} checkpoints {} dropped_partial {}",
        ck.step,
        ck.tokens,
        out.stop,
        out.checkpoints.len(),
        out.dropped_partial
    );
    if let Some(m) = out.metrics.last() {
        println!("final_loss {:.6}", m.loss);
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Tokenize(a) => {
            Settings::load(&a.common)?.finish()?;
            let vocab = Vocab::load(&a.vocab)?;
            let docs = data::read_documents(&a.input)?;
            let seqs = docs.iter().map(|d| vocab.encode(d, a.specials)).filter(|s| !s.is_empty()).collect();
            let ds = SeqDataset::new(seqs)?;
            let dir = out_dir(&a.common)?;
            ds.save(&dir.join("tokens.seq"))?;
            let report = data::compose_report(ds.sequences());
            write_text(&dir.join("composition.txt"), &format!("{report}\n"))?;
            println!("{report}");
        }
        Command::Dedup(a) => {
            Settings::load(&a.common)?.finish()?;
            let docs = data::read_documents(&a.input)?;
            let mut f = BloomFilter::with_rate(a.expected, a.fp_rate, a.common.seed.unwrap_or(0))?;
            let (kept, stats) = data::dedup_documents(&docs, &mut f);
            let dir = out_dir(&a.common)?;
            data::write_documents(&dir.join("dedup.jsonl"), &kept)?;
            let text = format!("{stats}\nbloom_m {}\nbloom_k {}\n", f.m(), f.k());
            write_text(&dir.join("dedup_stats.txt"), &text)?;
            print!("{text}");
        }
        Command::Filter(a) => {
            Settings::load(&a.common)?.finish()?;
            let vocab = Vocab::load(&a.vocab)?;
            let docs = data::read_documents(&a.input)?;
            let mut kept = Vec::new();
            for d in &docs {
                if data::ratio_filter(d, &vocab, a.threshold)? {
                    kept.push(d.clone());
                }
            }
            let dir = out_dir(&a.common)?;
            data::write_documents(&dir.join("filtered.jsonl"), &kept)?;
            let text = format!("threshold {}\nseen {}\nkept {}\ndropped {}\n", a.threshold, docs.len(), kept.len(), docs.len() - kept.len());
            write_text(&dir.join("filter_stats.txt"), &text)?;
            print!("{text}");
        }
        Command::SplitLong(a) => {
            Settings::load(&a.common)?.finish()?;
            let vocab = Vocab::load(&a.vocab)?;
            let mut seqs = Vec::new();
            for d in data::read_documents(&a.input)? {
                seqs.extend(data::split_long(&d, &vocab, a.target)?);
            }
            let ds = SeqDataset::new(seqs)?;
            let dir = out_dir(&a.common)?;
            ds.save(&dir.join("sequences.seq"))?;
            let report = data::compose_report(ds.sequences());
            write_text(&dir.join("composition.txt"), &format!("{report}\n"))?;
            println!("{report}");
        }
        Command::Pretrain(a) => {
            let mut s = Settings::load(&a.common)?;
            let data = SeqDataset::load(&a.data)?;
            let sp = specials(a.vocab.as_deref())?;
            let opts = train_opts(&a.common, a.stop_after, a.f32)?;
            let out = match &a.resume {
                Some(p) => {
                    s.finish()?;
                    let ck = Checkpoint::load(p)?;
                    trainer::resume_mlm(&ck, &data, sp, &opts)?.1
                }
                None => {
                    let arch = s.arch(a.preset.as_deref())?;
                    let phase = s.phase(a.phase_preset.as_deref())?;
                    s.finish()?;
                    let mut model = Model::init(&arch, phase.seed)?;
                    trainer::train_mlm(&mut model, &data, sp, &phase, PhaseTag::Pretrain, &opts)?
                }
            };
            report_outcome(&out);
        }
        Command::Extend(a) => {
            let mut s = Settings::load(&a.common)?;
            let ck = Checkpoint::load(&a.checkpoint)?;
            let params = extension::extend(&ck.params, a.theta, a.max_len)?;
            let dir = out_dir(&a.common)?;
            match (&a.phase, &a.data) {
                (Some(tag), Some(data)) => {
                    let tag: PhaseTag = tag.parse()?;
                    let phase = s.phase(None)?;
                    s.finish()?;
                    let data = SeqDataset::load(data)?;
                    let mut model = Model::new(params);
                    let opts = train_opts(&a.common, None, false)?;
                    let out = extension::run_phase(&mut model, tag, &data, specials(a.vocab.as_deref())?, &phase, &opts)?;
                    report_outcome(&out);
                }
                (None, None) => {
                    s.finish()?;
                    let mut e = Checkpoint::fresh(params);
                    e.absorbed = ck.absorbed.clone();
                    e.notes = ck.notes.clone();
                    e.notes.insert("extended_from".into(), ck.phase_tag.to_string());
                    let p = dir.join("extended.safetensors");
                    e.save(&p, Dtype::F64)?;
                    println!("rope_theta_global {}\nmax_seq_len {}\nwrote {}", a.theta, a.max_len, p.display());
                }
                _ => bail!(Error::Argument("--phase and --data go together".into())),
            }
        }
        Command::Mntp(a) => {
            let mut s = Settings::load(&a.common)?;
            let phase = s.phase(None)?;
            s.finish()?;
            let ck = Checkpoint::load(&a.checkpoint)?;
            let (cfg, changed) = llm2vec::enable_bidirectional(ck.arch());
            if changed {
                println!("attention switched to bidirectional");
            }
            let mut params = ck.params.clone();
            params.set_cfg(cfg)?;
            let model = Model::new(params);
            let targets = a.targets.split(',').map(|t| ProjTarget::parse(t.trim())).collect::<Result<Vec<_>, _>>()?;
            let data = SeqDataset::load(&a.data)?;
            let sp = specials(a.vocab.as_deref())?;
            let opts = train_opts(&a.common, None, false)?;
            let spec = AdapterSpec {
                rank: a.rank,
                alpha: a.alpha,
            };
            let out = llm2vec::train_mntp_adapter(&model, &data, sp, &phase, spec, &targets, &a.phase_name, &opts)?;
            let p = opts.out_dir.unwrap().join(format!("adapter-{}.safetensors", a.phase_name));
            out.adapter.save(&p)?;
            if let (Some(first), Some(last)) = (out.metrics.first(), out.metrics.last()) {
                println!("loss {:.6} -> {:.6}", first.loss, last.loss);
            }
            println!("wrote {}", p.display());
        }
        Command::MergeAdapters(a) => {
            Settings::load(&a.common)?.finish()?;
            let ck = Checkpoint::load(&a.checkpoint)?;
            let adapters = llm2vec::load_adapters(&a.adapters)?;
            let refs: Vec<&AdapterSet> = adapters.iter().collect();
            let merged = llm2vec::merge_into(&ck, &refs)?;
            let p = out_dir(&a.common)?.join("merged.safetensors");
            merged.save(&p, Dtype::F64)?;
            println!("absorbed {}\nwrote {}", merged.absorbed.join(","), p.display());
        }
        Command::EmbedTrain(a) => {
            let mut s = Settings::load(&a.common)?;
            let phase = s.phase(None)?;
            s.finish()?;
            let vocab = Vocab::load(&a.vocab)?;
            let triplets = read_triplets(&a.triplets, &vocab)?;
            let mut model = Model::new(Checkpoint::load(&a.checkpoint)?.params);
            let nce = InfoNceOptions {
                temperature: a.temperature,
                ..Default::default()
            };
            let out = trainer::train_embedder(&mut model, &triplets, &phase, nce, &train_opts(&a.common, None, false)?)?;
            report_outcome(&out);
            println!("ranking_accuracy {:.4}", trainer::ranking_accuracy(&model, &triplets)?);
        }
        Command::NiahGen(a) => {
            let seed = a.common.seed.unwrap_or(0);
            let mut s = Settings::load(&a.common)?;
            let split = SplitSpec {
                max_distractors: s.kv.take_or("niah.max_distractors", SplitSpec::by_name(&a.split)?.max_distractors)?,
                token_cap: s.kv.take_or("niah.token_cap", SplitSpec::by_name(&a.split)?.token_cap)?,
            };
            s.finish()?;
            let build = match a.toy {
                Some(n) => {
                    let vocab = niah::toy::vocab();
                    let pairs = niah::toy::pairs(n, 20..120, seed);
                    let pool = niah::toy::pool(n.max(40), 60..200, seed ^ 1, &vocab);
                    niah::build_dataset(&pairs, Some(&pool), split, &vocab, seed)?
                }
                None => {
                    let vocab = Vocab::load(a.vocab.as_deref().unwrap())?;
                    let pairs = niah::read_pairs(a.pairs.as_deref().unwrap())?;
                    niah::build_dataset(&pairs, None, split, &vocab, seed)?
                }
            };
            let p = out_dir(&a.common)?.join(format!("niah-{}.jsonl", a.split));
            niah::write_examples(&p, &build.examples)?;
            println!("examples {}\nskipped {}\nwrote {}", build.examples.len(), build.skipped.len(), p.display());
        }
        Command::NiahEval(a) => {
            Settings::load(&a.common)?.finish()?;
            let vocab = vocab_or_toy(a.vocab.as_deref())?;
            let model = Model::new(Checkpoint::load(&a.checkpoint)?.params);
            let examples = niah::read_examples(&a.examples)?;
            let preds = niah::predict(&model, &examples, &vocab)?;
            let report = niah::evaluate(&examples, &preds, &vocab);
            if let Some(dir) = &a.common.out {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                write_text(&dir.join("niah_report.json"), &serde_json::to_string(&report)?)?;
            }
            println!("{report}");
        }
        Command::QaFinetune(a) => {
            let mut s = Settings::load(&a.common)?;
            let phase = s.phase(None)?;
            s.finish()?;
            let vocab = vocab_or_toy(a.vocab.as_deref())?;
            let mut model = Model::new(Checkpoint::load(&a.checkpoint)?.params);
            let examples = niah::read_examples(&a.examples)?;
            let train = niah::training_examples(&examples, &vocab, model.cfg().max_seq_len)?;
            let out = trainer::train_span_qa(&mut model, &train, &phase, &train_opts(&a.common, None, false)?)?;
            report_outcome(&out);
        }
        Command::Bench(a) => run_bench(a)?,
        Command::Inspect(a) => {
            Settings::load(&a.common)?.finish()?;
            print!("{}", inspect(&a.path)?);
        }
    }
    Ok(())
}

fn run_bench(a: BenchArgs) -> anyhow::Result<()> {
    Settings::load(&a.common)?.finish()?;
    let mut n_params = None;
    let (model, id) = match &a.checkpoint {
        Some(p) => (Model::new(Checkpoint::load(p)?.params), p.display().to_string()),
        None if a.dry_run => {
            // counts only: skip allocating a full-size model
            let cfg = ArchConfig::preset_by_name(&a.preset)?;
            n_params = Some(crate::model::param_count(&cfg));
            let mut tiny = ArchConfig::preset_by_name("tiny_test")?;
            tiny.max_seq_len = cfg.max_seq_len;
            tiny.vocab_size = cfg.vocab_size;
            (Model::init(&tiny, 0)?, a.preset.clone())
        }
        None => (Model::init(&ArchConfig::preset_by_name(&a.preset)?, 0)?, a.preset.clone()),
    };
    let ids: Vec<u32> = (5..model.cfg().vocab_size as u32).collect();
    let opts = MeasureOptions {
        batch_size: a.batch_size,
        reps: a.reps,
        dry_run: a.dry_run,
        memory_limit: a.memory_mib.map(|m| m << 20),
        pad_id: 0,
    };
    let mut reports = Vec::new();
    for (i, spec) in a.specs.iter().enumerate() {
        let mut lengths: LengthDist = spec.parse()?;
        if let (true, LengthDist::Normal { reading, .. }) = (a.variance, &mut lengths) {
            *reading = bench::SpreadReading::Variance;
        }
        let spec = SyntheticSpec {
            lengths,
            n_docs: a.n_docs,
            seed: a.common.seed.unwrap_or(0).wrapping_add(i as u64),
        };
        let docs = bench::gen_synthetic(&spec, &ids, model.cfg().max_seq_len)?;
        for path in [ExecPath::Padded, ExecPath::Packed] {
            let mut r = bench::measure(&model, &id, &spec, &docs, path, &opts)?;
            if let Some(n) = n_params {
                r.n_params = n;
            }
            println!("{} {} tokens {} positions {} s/Mtok {}", r.spec.lengths, r.path, r.tokens, r.positions, r.summary());
            reports.push(r);
        }
    }
    let table = bench::render_table(&reports);
    println!("{table}");
    if let Some(dir) = &a.common.out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        niah::write_jsonl(&dir.join("bench.jsonl"), &reports)?;
        write_text(&dir.join("bench_table.txt"), &format!("{table}\n"))?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct TripletLine {
    query: String,
    positive: String,
    #[serde(default)]
    negatives: Vec<String>,
}

fn read_triplets(path: &Path, vocab: &Vocab) -> anyhow::Result<Vec<Triplet>> {
    let lines: Vec<TripletLine> = niah::read_jsonl(path)?;
    Ok(lines
        .into_iter()
        .map(|t| Triplet {
            query: vocab.encode(&t.query, true),
            positive: vocab.encode(&t.positive, true),
            negatives: t.negatives.iter().map(|n| vocab.encode(n, true)).collect(),
        })
        .collect())
}

/// Human-readable metadata of a checkpoint, adapter or provenance file.
pub fn inspect(path: &Path) -> anyhow::Result<String> {
    if path.extension().is_some_and(|e| e == "bin") {
        let log = ProvenanceLog::load(path)?;
        let last = log.records().last();
        return Ok(format!(
            "kind provenance\nrecords {}\ndigest {}\nlast_step {}\ntokens {}\n",
            log.len(),
            to_hex(&log.digest()),
            last.map_or(0, |r| r.step),
            last.map_or(0, |r| r.token_count)
        ));
    }
    let f = load_tensors(path).with_context(|| format!("reading {}", path.display()))?;
    let format = f.meta.iter().find(|(k, _)| *k == "format").map(|(_, v)| v.to_string());
    match format.as_deref() {
        Some("encforge-checkpoint-1") => {
            let ck = Checkpoint::load(path)?;
            let mut text = format!("kind checkpoint\nparams {}\n", ck.params.n_params());
            text.push_str(&ck.metadata().to_text());
            Ok(text)
        }
        Some("encforge-adapter-1") => {
            let a = AdapterSet::load(path)?;
            Ok(format!(
                "kind adapter\nphase {}\nrank {}\nalpha {}\ntargets {}\npairs {}\n",
                a.phase,
                a.rank,
                a.alpha,
                a.targets.iter().map(|t| t.as_str()).collect::<Vec<_>>().join(","),
                a.n_pairs()
            ))
        }
        _ => Err(anyhow!(Error::Data(format!("{}: unrecognized file", path.display())))),
    }
}

/// Fresh checkpoint for a preset, handy for tests and smoke runs.
pub fn fresh_checkpoint(preset: &str, seed: u64) -> anyhow::Result<Checkpoint> {
    Ok(Checkpoint::fresh(ModelParams::init(&ArchConfig::preset_by_name(preset)?, seed)?))
}
