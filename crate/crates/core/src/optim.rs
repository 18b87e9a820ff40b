//! Nadam with decoupled weight decay, linear warmup and Newbob decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub warmup_start_lr: f64,
    pub warmup_peak_lr: f64,
    pub warmup_epochs: f64,
    pub newbob_decay: f64,
    /// A dev score counts as an improvement only if it beats the best so far
    /// by more than this.
    pub newbob_threshold: f64,
    /// Decoupled decay applied to the transposed-convolution kernels only.
    pub weight_decay: f64,
    pub epochs: usize,
    pub frame_budget: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            warmup_start_lr: 0.0002,
            warmup_peak_lr: 0.018,
            warmup_epochs: 1.6,
            newbob_decay: 0.9,
            newbob_threshold: 1e-5,
            weight_decay: 0.01,
            epochs: 27,
            frame_budget: 10_000,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0 < self.newbob_decay && self.newbob_decay < 1.0) {
            return bad(format!("newbob_decay must lie in (0, 1), got {}", self.newbob_decay));
        }
        if !(0.0 <= self.warmup_start_lr && self.warmup_start_lr < self.warmup_peak_lr) {
            return bad(format!(
                "warmup needs 0 <= start < peak, got {} -> {}",
                self.warmup_start_lr, self.warmup_peak_lr
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(self.epsilon > 0.0) || !(self.warmup_epochs >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("epsilon must be positive; warmup_epochs and weight_decay non-negative".into());
        }
        if self.frame_budget == 0 {
            return bad("frame_budget must be positive".into());
        }
        Ok(())
    }
}

/// Newbob state: dev history and the number of decays applied so far.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Newbob {
    pub best: Option<f64>,
    pub decays: u32,
    pub history: Vec<f64>,
}

impl Newbob {
    /// Records one dev score; returns whether the rate was decayed. Decays
    /// only count once warmup is over.
    pub fn record(&mut self, score: f64, cfg: &OptimConfig, after_warmup: bool) -> bool {
        let improved = match self.best {
            None => true,
            Some(best) => score < best - cfg.newbob_threshold,
        };
        let decayed = !improved && after_warmup;
        if decayed {
            self.decays += 1;
        }
        if self.best.is_none_or(|b| score < b) {
            self.best = Some(score);
        }
        self.history.push(score);
        decayed
    }
}

pub fn warmup_steps(steps_per_epoch: u64, cfg: &OptimConfig) -> f64 {
    cfg.warmup_epochs * steps_per_epoch as f64
}

/// Linear warmup from start to peak, then peak scaled by one decay factor
/// per non-improving dev evaluation.
pub fn lr_at(step: u64, steps_per_epoch: u64, cfg: &OptimConfig, newbob: &Newbob) -> f64 {
    let warm = warmup_steps(steps_per_epoch, cfg);
    let s = step as f64;
    if s < warm {
        cfg.warmup_start_lr + (cfg.warmup_peak_lr - cfg.warmup_start_lr) * (s / warm)
    } else {
        cfg.warmup_peak_lr * cfg.newbob_decay.powi(newbob.decays as i32)
    }
}

/// Adam with Nesterov momentum.
///
/// With `m̂ = β1·m_t/(1-β1^(t+1)) + (1-β1)·g_t/(1-β1^t)` and
/// `v̂ = v_t/(1-β2^t)`, the update is `w -= lr·m̂/(√v̂ + ε)`. Weight decay is
/// decoupled: `w -= lr·λ·w` before the gradient step.
#[derive(Clone, Debug, PartialEq)]
pub struct Nadam<S> {
    pub step: u64,
    pub first: Vec<Vec<S>>,
    pub second: Vec<Vec<S>>,
}

impl<S: Scalar> Nadam<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        let zeros = |id: ParamId| vec![S::zero(); store.value(id).numel()];
        Self {
            step: 0,
            first: store.ids().map(zeros).collect(),
            second: store.ids().map(zeros).collect(),
        }
    }

    /// Applies one update from the gradients accumulated in `store`.
    pub fn update(&mut self, store: &mut ParamStore<S>, lr: f64, cfg: &OptimConfig, decayed: &[ParamId]) -> Result<()> {
        store.check_grads()?;
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c_m = S::of(b1 / (1.0 - b1.powi(t + 1)));
        let c_g = S::of((1.0 - b1) / (1.0 - b1.powi(t)));
        let c_v = S::of(1.0 / (1.0 - b2.powi(t)));
        let (b1s, b2s) = (S::of(b1), S::of(b2));
        let (one, eps, lr_s) = (S::one(), S::of(cfg.epsilon), S::of(lr));
        let decay = S::of(lr * cfg.weight_decay);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let grad = store.grad(id).to_vec();
            let apply_decay = cfg.weight_decay != 0.0 && decayed.contains(&id);
            let w = store.value_mut(id).data_mut();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for j in 0..w.len() {
                if apply_decay {
                    w[j] -= decay * w[j];
                }
                let g = grad[j];
                m[j] = b1s * m[j] + (one - b1s) * g;
                v[j] = b2s * v[j] + (one - b2s) * g * g;
                let m_hat = c_m * m[j] + c_g * g;
                let v_hat = c_v * v[j];
                w[j] -= lr_s * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ParamSink};

    #[test]
    fn schedule_endpoints() {
        let cfg = OptimConfig::default();
        let nb = Newbob::default();
        assert_eq!(lr_at(0, 10, &cfg, &nb), 0.0002);
        assert_eq!(lr_at(16, 10, &cfg, &nb), 0.018);
        assert!((lr_at(8, 10, &cfg, &nb) - 0.0091).abs() < 1e-15);
    }

    #[test]
    fn warmup_is_strictly_increasing() {
        let cfg = OptimConfig::default();
        let nb = Newbob::default();
        let lrs: Vec<f64> = (0..=160).map(|s| lr_at(s, 100, &cfg, &nb)).collect();
        assert!(lrs.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn newbob_decays_on_non_improvement_after_warmup() {
        let cfg = OptimConfig::default();
        let mut nb = Newbob::default();
        assert!(!nb.record(2.0, &cfg, false));
        // no improvement, but still warming up
        assert!(!nb.record(2.5, &cfg, false));
        assert!(!nb.record(1.5, &cfg, true));
        assert!(nb.record(1.5 - 0.5e-5, &cfg, true));
        assert_eq!(nb.decays, 1);
        assert_eq!(lr_at(100, 10, &cfg, &nb), 0.018 * 0.9);
        assert!((lr_at(100, 10, &cfg, &nb) - 0.0162).abs() < 1e-15);
        assert_eq!(nb.history.len(), 4);
    }

    #[test]
    fn zero_gradient_moves_only_decayed_params() {
        let mut store = ParamStore::<f64>::new(0);
        let a = store.declare("a", &[3], Init::Uniform(1.0)).unwrap();
        let b = store.declare("b", &[3], Init::Uniform(1.0)).unwrap();
        let (a0, b0) = (store.value(a).clone(), store.value(b).clone());
        let mut opt = Nadam::new(&store);
        let cfg = OptimConfig::default();
        opt.update(&mut store, 0.01, &cfg, &[b]).unwrap();
        assert_eq!(store.value(a), &a0);
        for (x, x0) in store.value(b).data().iter().zip(b0.data()) {
            assert_eq!(*x, x0 - 0.01 * 0.01 * x0);
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut store = ParamStore::<f64>::new(0);
        let a = store.declare("frontend.conv1.weight", &[2], Init::Zeros).unwrap();
        let mut g = crate::graph::Graph::new();
        let w = g.param(&store, a);
        let l = g.log(w);
        let s = g.sum(l);
        let grads = g.backward(s).unwrap();
        store.accumulate(&g, &grads);
        let mut opt = Nadam::new(&store);
        let err = opt.update(&mut store, 0.1, &OptimConfig::default(), &[]).unwrap_err();
        assert!(err.to_string().contains("frontend.conv1.weight"), "{err}");
    }
}
