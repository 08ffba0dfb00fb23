//! Low-rank adapters: `W + scale · B · A` with `A: r × in`, `B: out × r`.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Mat, Tape};
use crate::checkpoint::{load_tensors, save_tensors, Dtype};
use crate::config::ArchConfig;
use crate::error::{Error, Result};
use crate::kvfile::KvMap;
use crate::model::{BoundAdapter, ModelParams, ProjTarget};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterSpec {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        AdapterSpec { rank: 16, alpha: 32.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<ProjTarget>,
    /// Which training phase produced the adapter, e.g. `ext1`.
    pub phase: String,
    keys: Vec<(usize, ProjTarget)>,
    /// `[A₀, B₀, A₁, B₁, …]` in `keys` order.
    tensors: Vec<Mat>,
}

fn proj_shape(cfg: &ArchConfig, t: ProjTarget) -> (usize, usize) {
    match t {
        ProjTarget::Q | ProjTarget::K | ProjTarget::V | ProjTarget::O => (cfg.hidden, cfg.hidden),
        ProjTarget::Up => (2 * cfg.intermediate, cfg.hidden),
        ProjTarget::Down => (cfg.hidden, cfg.intermediate),
    }
}

impl AdapterSet {
    /// `A` drawn from `N(0, 1/in)`, `B` zero, so a fresh set is an identity.
    pub fn new(cfg: &ArchConfig, spec: AdapterSpec, targets: &[ProjTarget], phase: &str, seed: u64) -> Result<AdapterSet> {
        if spec.rank == 0 || !(spec.alpha > 0.0) {
            return Err(Error::Argument(format!("adapter rank {} / alpha {} must be positive", spec.rank, spec.alpha)));
        }
        if targets.is_empty() {
            return Err(Error::Argument("adapter needs at least one target".into()));
        }
        let mut targets = targets.to_vec();
        targets.sort();
        targets.dedup();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keys = Vec::new();
        let mut tensors = Vec::new();
        for layer in 0..cfg.n_layers {
            for &t in &targets {
                let (out, inp) = proj_shape(cfg, t);
                let n = Normal::new(0.0, 1.0 / (inp as f64).sqrt()).expect("positive std");
                keys.push((layer, t));
                tensors.push(Mat::from_shape_simple_fn((spec.rank, inp), || n.sample(&mut rng)));
                tensors.push(Mat::zeros((out, spec.rank)));
            }
        }
        Ok(AdapterSet {
            rank: spec.rank,
            alpha: spec.alpha,
            targets,
            phase: phase.to_string(),
            keys,
            tensors,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Number of adapted matrices (one A/B pair each).
    pub fn n_pairs(&self) -> usize {
        self.keys.len()
    }

    pub fn keys(&self) -> &[(usize, ProjTarget)] {
        &self.keys
    }

    pub fn tensors(&self) -> &[Mat] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Mat] {
        &mut self.tensors
    }

    pub fn a(&self, i: usize) -> &Mat {
        &self.tensors[2 * i]
    }

    pub fn b(&self, i: usize) -> &Mat {
        &self.tensors[2 * i + 1]
    }

    /// `scale · B · A` for pair `i`.
    pub fn delta(&self, i: usize) -> Mat {
        self.b(i).dot(self.a(i)) * self.scale()
    }

    /// Binds to `tape`; trainable tensors take slots `offset..offset+2n`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool, offset: usize) -> BoundAdapter {
        let mut pairs = HashMap::new();
        for (i, &key) in self.keys.iter().enumerate() {
            let (a, b) = if trainable {
                (tape.param(self.a(i), offset + 2 * i), tape.param(self.b(i), offset + 2 * i + 1))
            } else {
                (tape.constant(self.a(i).clone()), tape.constant(self.b(i).clone()))
            };
            pairs.insert(key, (a, b));
        }
        BoundAdapter {
            scale: self.scale(),
            pairs,
        }
    }

    fn check_fits(&self, cfg: &ArchConfig) -> Result<()> {
        for (i, &(layer, t)) in self.keys.iter().enumerate() {
            let (out, inp) = proj_shape(cfg, t);
            if layer >= cfg.n_layers || self.a(i).dim() != (self.rank, inp) || self.b(i).dim() != (out, self.rank) {
                return Err(Error::Argument(format!(
                    "adapter pair layers.{layer}.{} does not fit the model",
                    t.as_str()
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = KvMap::new();
        meta.set("format", "encforge-adapter-1");
        meta.set("rank", self.rank);
        meta.set("alpha", self.alpha);
        meta.set("phase", &self.phase);
        meta.set(
            "targets",
            self.targets.iter().map(|t| t.as_str()).collect::<Vec<_>>().join(","),
        );
        let names: Vec<String> = self
            .keys
            .iter()
            .flat_map(|(l, t)| {
                [
                    format!("layers.{l}.{}.lora_a", t.as_str()),
                    format!("layers.{l}.{}.lora_b", t.as_str()),
                ]
            })
            .collect();
        save_tensors(path, names.iter().map(String::as_str).zip(&self.tensors), &meta, Dtype::F64)
    }

    pub fn load(path: &Path) -> Result<AdapterSet> {
        let crate::checkpoint::TensorFile { mut tensors, mut meta } = load_tensors(path)?;
        let format: String = meta.require("format")?;
        if format != "encforge-adapter-1" {
            return Err(Error::Data(format!("{}: not an adapter file", path.display())));
        }
        let rank = meta.require("rank")?;
        let alpha = meta.require("alpha")?;
        let phase = meta.require("phase")?;
        let targets: String = meta.require("targets")?;
        meta.finish()?;
        let targets = targets.split(',').map(ProjTarget::parse).collect::<Result<Vec<_>>>()?;
        let mut keys = Vec::new();
        let mut pairs = Vec::new();
        let n_layers = tensors
            .keys()
            .filter_map(|k| k.strip_prefix("layers.")?.split('.').next()?.parse::<usize>().ok())
            .max()
            .map_or(0, |m| m + 1);
        for layer in 0..n_layers {
            for &t in &targets {
                let mut take = |part: &str| {
                    let name = format!("layers.{layer}.{}.{part}", t.as_str());
                    tensors
                        .remove(&name)
                        .ok_or_else(|| Error::Data(format!("adapter file lacks `{name}`")))
                };
                let a = take("lora_a")?;
                let b = take("lora_b")?;
                keys.push((layer, t));
                pairs.push(a);
                pairs.push(b);
            }
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Data(format!("unexpected adapter tensor `{extra}`")));
        }
        Ok(AdapterSet {
            rank,
            alpha,
            targets,
            phase,
            keys,
            tensors: pairs,
        })
    }
}

/// Adds every adapter's delta into the matching weights, in the given order.
pub fn apply(params: &ModelParams, adapters: &[&AdapterSet]) -> Result<ModelParams> {
    let mut out = params.clone();
    for ad in adapters {
        ad.check_fits(params.cfg())?;
    }
    for ad in adapters {
        for (i, &(layer, t)) in ad.keys.iter().enumerate() {
            let slot = params.slots().layers[layer].proj(t).w;
            *out.tensor_mut(slot) += &ad.delta(i);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PresetName;
    use crate::model::{Batch, ForwardOptions, Model};
    use rand::Rng;

    fn cfg() -> ArchConfig {
        ArchConfig::preset(PresetName::TinyDecoderTest)
    }

    fn randomized(seed: u64, phase: &str) -> AdapterSet {
        let mut a = AdapterSet::new(&cfg(), AdapterSpec::default(), &ProjTarget::ALL, phase, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for t in a.tensors_mut() {
            t.mapv_inplace(|_| rng.random_range(-0.05..0.05));
        }
        a
    }

    #[test]
    fn construction_counts_and_zero_b() {
        let a = AdapterSet::new(&cfg(), AdapterSpec::default(), &ProjTarget::ALL, "ext1", 0).unwrap();
        assert_eq!(a.n_pairs(), 6 * cfg().n_layers);
        assert!((0..a.n_pairs()).all(|i| a.b(i).iter().all(|&v| v == 0.0)));
        assert_eq!(a.scale(), 2.0);
    }

    #[test]
    fn zero_adapter_is_identity() {
        let m = Model::init(&cfg(), 1).unwrap();
        let a = AdapterSet::new(&cfg(), AdapterSpec::default(), &ProjTarget::ALL, "ext1", 0).unwrap();
        assert_eq!(apply(&m.params, &[&a]).unwrap(), m.params);
    }

    #[test]
    fn merge_order_and_linearity() {
        let m = Model::init(&cfg(), 1).unwrap();
        let (a1, a2) = (randomized(1, "ext1"), randomized(2, "ext2"));
        let seq = apply(&apply(&m.params, &[&a1]).unwrap(), &[&a2]).unwrap();
        let both = apply(&m.params, &[&a1, &a2]).unwrap();
        assert_eq!(seq, both);
        let one = apply(&m.params, &[&a1]).unwrap();
        let two = apply(&m.params, &[&a2]).unwrap();
        for i in 0..m.params.tensors().len() {
            let w = m.params.tensor(i);
            let lhs = both.tensor(i) - w;
            let rhs = &(one.tensor(i) - w) + &(two.tensor(i) - w);
            assert!(lhs.iter().zip(rhs.iter()).all(|(x, y)| (x - y).abs() <= 1e-15));
        }
    }

    #[test]
    fn merged_equals_runtime() {
        let m = Model::init(&cfg(), 1).unwrap();
        let a = randomized(3, "ext1");
        let batch = Batch::from_sequences(&[vec![7u32, 8, 9, 10, 11], vec![20u32, 21, 22]]).unwrap();
        let runtime = m
            .forward_bound(&batch, &ForwardOptions::eval(), |tape, bm| {
                bm.adapters.push(a.bind(tape, false, 0));
                Ok(())
            })
            .unwrap();
        let merged = Model::new(apply(&m.params, &[&a]).unwrap()).forward(&batch, &ForwardOptions::eval()).unwrap();
        let diff = (&runtime.hidden - &merged.hidden).mapv(f64::abs).fold(0.0f64, |x, &y| x.max(y));
        assert!(diff <= 1e-6, "{diff}");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = randomized(4, "ext2");
        let p = dir.path().join("a.safetensors");
        a.save(&p).unwrap();
        assert_eq!(AdapterSet::load(&p).unwrap(), a);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = randomized(5, "ext1");
        let mut other = cfg();
        other.intermediate = 128;
        let m = ModelParams::init(&other, 0).unwrap();
        assert!(matches!(apply(&m, &[&a]), Err(Error::Argument(_))));
    }
}
