//! Adaptive-moment optimiser with decoupled weight decay, linear warmup and
//! global-norm gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

/// Anything that owns named parameter tensors.
pub trait Module {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    fn zero_grads(&mut self) {
        for (_, t) in self.named_params_mut() {
            t.zero_grad();
        }
    }

    /// Pulls gradients out of `g` into every trainable parameter. Trainable
    /// parameters the loss did not reach get a zero gradient.
    fn collect_grads(&mut self, g: &Graph) {
        for (_, t) in self.named_params_mut() {
            if t.requires_grad() {
                g.accumulate_grad(t);
                t.ensure_grad();
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub warmup_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            warmup_steps: 5000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub first: Vec<f32>,
    pub second: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn from_state(config: AdamWConfig, step: u64, moments: BTreeMap<String, Moments>) -> Self {
        AdamW { config, step, moments }
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }

    /// Learning rate used for the `step`-th update (1-based): linear ramp over
    /// the warmup, constant afterwards.
    pub fn lr_at(&self, step: u64) -> f32 {
        let c = &self.config;
        if c.warmup_steps == 0 || step >= c.warmup_steps {
            c.lr
        } else {
            (c.lr as f64 * step as f64 / c.warmup_steps as f64) as f32
        }
    }

    /// Applies one update to every parameter with `requires_grad`.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor)]) -> Result<()> {
        if let Some((name, _)) = params.iter().find(|(_, t)| t.requires_grad() && t.grad().is_none()) {
            return Err(Error::MissingGrad(name.clone()));
        }
        self.step += 1;
        let lr = self.lr_at(self.step);
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        let bias1 = 1.0 - (beta1 as f64).powi(self.step as i32);
        let bias2 = 1.0 - (beta2 as f64).powi(self.step as i32);
        for (name, t) in params.iter_mut() {
            if !t.requires_grad() {
                continue;
            }
            let decay = if t.shape().len() >= 2 { weight_decay } else { 0.0 };
            let n = t.numel();
            let m = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                first: vec![0.0; n],
                second: vec![0.0; n],
            });
            let grad = t.grad().expect("checked above").to_vec();
            let data = t.data_mut();
            for i in 0..n {
                let g = grad[i];
                m.first[i] = beta1 * m.first[i] + (1.0 - beta1) * g;
                m.second[i] = beta2 * m.second[i] + (1.0 - beta2) * g * g;
                let mhat = m.first[i] as f64 / bias1;
                let vhat = m.second[i] as f64 / bias2;
                data[i] -= lr * decay * data[i];
                data[i] -= (lr as f64 * mhat / (vhat.sqrt() + eps as f64)) as f32;
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [(String, &mut Tensor)], max_norm: f32) -> f32 {
    let sq: f64 = params
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum();
    let norm = sq.sqrt() as f32;
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        for (_, t) in params.iter_mut() {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f32) -> Tensor {
        Tensor::new(vec![1, 1], vec![v]).unwrap()
    }

    #[test]
    fn warmup_is_linear() {
        let opt = AdamW::new(AdamWConfig {
            lr: 1e-3,
            warmup_steps: 5000,
            ..Default::default()
        });
        assert_eq!(opt.lr_at(2500), 5e-4);
        assert_eq!(opt.lr_at(5000), 1e-3);
        assert_eq!(opt.lr_at(9000), 1e-3);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut w = scalar(1.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        let err = opt.step(&mut [("w".into(), &mut w)]).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(ref n) if n == "w"));
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn zero_grad_moves_only_by_weight_decay() {
        let mut w = scalar(2.0);
        w.ensure_grad();
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.01,
            warmup_steps: 0,
            ..Default::default()
        });
        opt.step(&mut [("w".into(), &mut w)]).unwrap();
        assert_eq!(w.data()[0], 2.0 - 0.1 * 0.01 * 2.0);
    }

    #[test]
    fn frozen_params_are_untouched() {
        let mut w = scalar(2.0);
        w.set_requires_grad(false);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut [("w".into(), &mut w)]).unwrap();
        assert_eq!(w.data()[0], 2.0);
    }

    #[test]
    fn quadratic_bowl_shrinks_monotonically_after_warmup() {
        let mut w = scalar(1.0);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.01,
            warmup_steps: 20,
            weight_decay: 0.0,
            ..Default::default()
        });
        let mut trace = Vec::new();
        for _ in 0..200 {
            let mut g = Graph::new();
            let x = g.param(&w);
            let sq = g.mul(x, x).unwrap();
            let f = g.sum(sq);
            g.backward(f).unwrap();
            w.zero_grad();
            g.accumulate_grad(&mut w);
            opt.step(&mut [("w".into(), &mut w)]).unwrap();
            trace.push(w.data()[0].abs());
        }
        for pair in trace[20..].windows(2) {
            assert!(pair[1] < pair[0], "{pair:?}");
        }
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut a = scalar(0.0);
        let mut b = scalar(0.0);
        a.accumulate_grad(&[3.0]);
        b.accumulate_grad(&[4.0]);
        let mut ps = vec![("a".to_string(), &mut a), ("b".to_string(), &mut b)];
        let before = clip_grad_norm(&mut ps, 0.25);
        assert_eq!(before, 5.0);
        let after = clip_grad_norm(&mut ps, 0.25);
        assert!((after - 0.25).abs() < 1e-5);
    }
}
