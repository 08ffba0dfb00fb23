//! Tensor container for checkpoints and adapters.
//!
//! Files use the safetensors layout: named little-endian tensors plus a
//! string header. All of our metadata lives under a single header key as
//! sorted `key = value` text, which keeps the bytes deterministic.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype as StDtype, SafeTensors, View};

use crate::autograd::Mat;
use crate::config::{ArchConfig, TrainPhaseConfig};
use crate::error::{Error, Result};
use crate::kvfile::KvMap;
use crate::model::ModelParams;
use crate::optim::{AdamHyper, OptState};
use crate::provenance::{from_hex, to_hex};

const META_KEY: &str = "encforge";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

struct Buf {
    dtype: StDtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl View for &Buf {
    fn dtype(&self) -> StDtype {
        self.dtype
    }
    fn shape(&self) -> &[usize] {
        &self.shape
    }
    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.bytes)
    }
    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

fn encode(m: &Mat, dtype: Dtype) -> Buf {
    let mut bytes = Vec::with_capacity(m.len() * 8);
    match dtype {
        Dtype::F64 => m.iter().for_each(|v| bytes.extend(v.to_le_bytes())),
        Dtype::F32 => m.iter().for_each(|v| bytes.extend((*v as f32).to_le_bytes())),
    }
    Buf {
        dtype: match dtype {
            Dtype::F32 => StDtype::F32,
            Dtype::F64 => StDtype::F64,
        },
        shape: vec![m.nrows(), m.ncols()],
        bytes,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub tensors: BTreeMap<String, Mat>,
    pub meta: KvMap,
}

pub fn save_tensors<'a>(
    path: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Mat)>,
    meta: &KvMap,
    dtype: Dtype,
) -> Result<()> {
    let bufs: Vec<(String, Buf)> = tensors.into_iter().map(|(n, m)| (n.to_string(), encode(m, dtype))).collect();
    let header = Some(HashMap::from([(META_KEY.to_string(), meta.to_text())]));
    let bytes = safetensors::serialize(bufs.iter().map(|(n, b)| (n.as_str(), b)), &header)
        .map_err(|e| Error::Data(format!("serializing {}: {e}", path.display())))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_tensors(path: &Path) -> Result<TensorFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Data(format!("{}: {msg}", path.display()));
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let meta_text = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| bad("not an encforge tensor file".into()))?;
    let meta = KvMap::parse(meta_text)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        let shape = view.shape().to_vec();
        let [r, c] = shape[..] else {
            return Err(bad(format!("tensor `{name}` is not 2-D")));
        };
        let data = view.data();
        let values: Vec<f64> = match view.dtype() {
            StDtype::F64 => data.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect(),
            StDtype::F32 => data
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
            other => return Err(bad(format!("tensor `{name}` has unsupported dtype {other:?}"))),
        };
        let m = Mat::from_shape_vec((r, c), values).map_err(|e| bad(e.to_string()))?;
        tensors.insert(name, m);
    }
    Ok(TensorFile { tensors, meta })
}

/// Training stage that produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseTag {
    Init,
    Pretrain,
    Ext1,
    Ext2,
    Mntp,
    Finetune,
}

impl PhaseTag {
    pub const ALL: [PhaseTag; 6] = [
        PhaseTag::Init,
        PhaseTag::Pretrain,
        PhaseTag::Ext1,
        PhaseTag::Ext2,
        PhaseTag::Mntp,
        PhaseTag::Finetune,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PhaseTag::Init => "init",
            PhaseTag::Pretrain => "pretrain",
            PhaseTag::Ext1 => "ext1",
            PhaseTag::Ext2 => "ext2",
            PhaseTag::Mntp => "mntp",
            PhaseTag::Finetune => "finetune",
        }
    }
}

impl std::fmt::Display for PhaseTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PhaseTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PhaseTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown phase tag `{s}`")))
    }
}

/// Everything needed to continue a run, apart from the dataset itself.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub opt: Option<OptState>,
    pub phase: Option<TrainPhaseConfig>,
    pub phase_tag: PhaseTag,
    pub step: u64,
    pub tokens: u64,
    pub provenance_records: u64,
    pub provenance_digest: [u8; 32],
    pub dataset_fingerprint: Option<String>,
    /// Adapter phases merged into the weights, in order.
    pub absorbed: Vec<String>,
    pub notes: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn fresh(params: ModelParams) -> Checkpoint {
        Checkpoint {
            params,
            opt: None,
            phase: None,
            phase_tag: PhaseTag::Init,
            step: 0,
            tokens: 0,
            provenance_records: 0,
            provenance_digest: [0; 32],
            dataset_fingerprint: None,
            absorbed: Vec::new(),
            notes: BTreeMap::new(),
        }
    }

    pub fn arch(&self) -> &ArchConfig {
        self.params.cfg()
    }

    pub fn metadata(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("format", "encforge-checkpoint-1");
        for (k, v) in self.arch().to_kv().iter() {
            m.set(format!("arch.{k}"), v);
        }
        if let Some(p) = &self.phase {
            for (k, v) in p.to_kv().iter() {
                m.set(format!("phase.{k}"), v);
            }
        }
        m.set("phase_tag", self.phase_tag);
        m.set("step", self.step);
        m.set("tokens", self.tokens);
        m.set("provenance.records", self.provenance_records);
        m.set("provenance.digest", to_hex(&self.provenance_digest));
        if let Some(f) = &self.dataset_fingerprint {
            m.set("dataset.fingerprint", f);
        }
        m.set("absorbed", self.absorbed.join(","));
        if let Some(o) = &self.opt {
            m.set("opt.t", o.t);
            m.set("opt.beta1", o.hyper.beta1);
            m.set("opt.beta2", o.hyper.beta2);
            m.set("opt.eps", o.hyper.eps);
            m.set("opt.weight_decay", o.hyper.weight_decay);
            m.set("opt.clip", o.hyper.clip);
        }
        for (k, v) in &self.notes {
            m.set(format!("note.{k}"), v);
        }
        m
    }

    pub fn save(&self, path: &Path, dtype: Dtype) -> Result<()> {
        let p = &self.params;
        let mut tensors: Vec<(String, &Mat)> = p.names().iter().cloned().zip(p.tensors()).collect();
        if let Some(o) = &self.opt {
            for (i, name) in p.names().iter().enumerate() {
                tensors.push((format!("opt.m.{name}"), &o.m[i]));
                tensors.push((format!("opt.v.{name}"), &o.v[i]));
            }
        }
        save_tensors(path, tensors.iter().map(|(n, m)| (n.as_str(), *m)), &self.metadata(), dtype)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let TensorFile { mut tensors, mut meta } = load_tensors(path)?;
        let format: String = meta.require("format")?;
        if format != "encforge-checkpoint-1" {
            return Err(Error::Data(format!("{}: unsupported format `{format}`", path.display())));
        }
        let arch = ArchConfig::from_kv(meta.take_prefixed("arch."))?;
        let phase_kv = meta.take_prefixed("phase.");
        let phase = (!phase_kv.is_empty()).then(|| TrainPhaseConfig::from_kv(phase_kv)).transpose()?;
        let phase_tag = meta.require("phase_tag")?;
        let step = meta.require("step")?;
        let tokens = meta.require("tokens")?;
        let provenance_records = meta.require("provenance.records")?;
        let digest: String = meta.require("provenance.digest")?;
        let provenance_digest: [u8; 32] = from_hex(&digest)?
            .try_into()
            .map_err(|_| Error::Data("provenance digest must be 32 bytes".into()))?;
        let dataset_fingerprint = meta.take_str("dataset.fingerprint");
        let absorbed: String = meta.take_or("absorbed", String::new())?;
        let absorbed = absorbed.split(',').filter(|s| !s.is_empty()).map(String::from).collect();
        let opt_t: Option<u64> = meta.take("opt.t")?;
        let hyper = match opt_t {
            Some(_) => Some(AdamHyper {
                beta1: meta.require("opt.beta1")?,
                beta2: meta.require("opt.beta2")?,
                eps: meta.require("opt.eps")?,
                weight_decay: meta.require("opt.weight_decay")?,
                clip: meta.require("opt.clip")?,
            }),
            None => None,
        };
        let notes = meta
            .take_prefixed("note.")
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        meta.finish()?;

        let mut opt_m = HashMap::new();
        let mut opt_v = HashMap::new();
        let mut named = HashMap::new();
        while let Some((name, t)) = tensors.pop_first() {
            if let Some(rest) = name.strip_prefix("opt.m.") {
                opt_m.insert(rest.to_string(), t);
            } else if let Some(rest) = name.strip_prefix("opt.v.") {
                opt_v.insert(rest.to_string(), t);
            } else {
                named.insert(name, t);
            }
        }
        let params = ModelParams::from_named(&arch, named)?;
        let opt = match (opt_t, hyper) {
            (Some(t), Some(hyper)) => {
                let mut m = Vec::new();
                let mut v = Vec::new();
                for name in params.names() {
                    let missing = || Error::Data(format!("optimizer state lacks `{name}`"));
                    m.push(opt_m.remove(name).ok_or_else(missing)?);
                    v.push(opt_v.remove(name).ok_or_else(missing)?);
                }
                let decays = (0..params.names().len()).map(|i| params.decays(i)).collect();
                Some(OptState { m, v, t, hyper, decays })
            }
            _ => None,
        };
        Ok(Checkpoint {
            params,
            opt,
            phase,
            phase_tag,
            step,
            tokens,
            provenance_records,
            provenance_digest,
            dataset_fingerprint,
            absorbed,
            notes,
        })
    }
}
