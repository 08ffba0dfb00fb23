//! StableAdamW and the learning-rate schedules.

use crate::autograd::Mat;
use crate::config::{Schedule, TrainPhaseConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Per-tensor RMS clipping of the update.
    pub clip: bool,
}

impl AdamHyper {
    pub fn from_phase(p: &TrainPhaseConfig) -> Self {
        AdamHyper {
            beta1: p.beta1,
            beta2: p.beta2,
            eps: p.eps,
            weight_decay: p.weight_decay,
            clip: p.clip_updates,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub t: u64,
    pub hyper: AdamHyper,
    /// Whether weight decay applies to each tensor.
    pub decays: Vec<bool>,
}

impl OptState {
    pub fn new(shapes: impl IntoIterator<Item = (usize, usize)>, decays: Vec<bool>, hyper: AdamHyper) -> Self {
        let shapes: Vec<_> = shapes.into_iter().collect();
        assert_eq!(shapes.len(), decays.len());
        OptState {
            m: shapes.iter().map(|&s| Mat::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Mat::zeros(s)).collect(),
            t: 0,
            hyper,
            decays,
        }
    }

    /// One update of every tensor. Refuses (leaving all state untouched) when
    /// any gradient is non-finite.
    pub fn step(&mut self, params: &mut [Mat], grads: &[Mat], lr: f64) -> Result<()> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::Optimizer(format!("invalid learning rate {lr}")));
        }
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Optimizer(format!(
                "{} params / {} grads for {} optimizer slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.dim() != self.m[i].dim() || g.dim() != self.m[i].dim() {
                return Err(Error::Optimizer(format!("shape mismatch at tensor {i}")));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Optimizer(format!("non-finite gradient in tensor {i}")));
            }
        }
        let h = self.hyper;
        self.t += 1;
        let c1 = 1.0 - h.beta1.powi(self.t as i32);
        let c2 = 1.0 - h.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |m, &g| *m = h.beta1 * *m + (1.0 - h.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = h.beta2 * *v + (1.0 - h.beta2) * g * g);
            let mut u = Mat::zeros(p.dim());
            ndarray::Zip::from(&mut u)
                .and(&*m)
                .and(&*v)
                .for_each(|u, &m, &v| *u = (m / c1) / ((v / c2).sqrt() + h.eps));
            let scale = if h.clip {
                let rms = (u.iter().map(|x| x * x).sum::<f64>() / u.len().max(1) as f64).sqrt();
                1.0 / rms.max(1.0)
            } else {
                1.0
            };
            let wd = if self.decays[i] { h.weight_decay } else { 0.0 };
            p.zip_mut_with(&u, |p, &u| *p -= lr * scale * u + lr * wd * *p);
        }
        Ok(())
    }
}

/// Learning rate after `tokens_seen` tokens.
///
/// Linear warmup to the peak over `warmup_tokens`, then a plateau. The decaying
/// schedules end with `peak · (1 − √f)` over the final `decay_tokens` of the
/// budget, `f` being the elapsed fraction of the decay. `constant` never decays.
pub fn lr_at(tokens_seen: u64, phase: &TrainPhaseConfig) -> f64 {
    let peak = phase.peak_lr;
    if tokens_seen < phase.warmup_tokens {
        return peak * tokens_seen as f64 / phase.warmup_tokens as f64;
    }
    match phase.schedule {
        Schedule::Constant => peak,
        Schedule::Trapezoidal | Schedule::OneSqrtDecay => {
            if phase.decay_tokens == 0 {
                return peak;
            }
            let start = phase.token_budget.saturating_sub(phase.decay_tokens);
            if tokens_seen <= start {
                return peak;
            }
            let f = ((tokens_seen - start) as f64 / phase.decay_tokens as f64).min(1.0);
            (peak * (1.0 - f.sqrt())).max(0.0)
        }
    }
}
