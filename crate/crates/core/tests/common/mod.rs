//! Reference implementations written as plain loops, independent of the
//! graph code they check.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn cos64(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] as f64 * b[i] as f64;
        na += (a[i] as f64).powi(2);
        nb += (b[i] as f64).powi(2);
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// `-sum_i w_i max_j cos(x_i, c_j)`, rows of `dim` floats.
pub fn l_cos_oracle(reps: &[f32], anchors: &[f32], dim: usize, weights: &[f32]) -> f64 {
    let mut total = 0.0;
    for (i, w) in weights.iter().enumerate() {
        let x = &reps[i * dim..(i + 1) * dim];
        let mut best = f64::NEG_INFINITY;
        for c in anchors.chunks(dim) {
            best = best.max(cos64(x, c));
        }
        total -= *w as f64 * best;
    }
    total
}

/// Percentile bootstrap of the mean: same draws as the library, everything
/// else by hand.
pub fn bootstrap_oracle(scores: &[f64], resamples: usize, level: f64, seed: u64) -> (f64, f64) {
    let n = scores.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = Vec::new();
    for _ in 0..resamples {
        let mut s = 0.0;
        for _ in 0..n {
            s += scores[rng.random_range(0..n)];
        }
        means.push(s / n as f64);
    }
    // insertion sort keeps this free of library helpers
    for i in 1..means.len() {
        let mut j = i;
        while j > 0 && means[j - 1] > means[j] {
            means.swap(j - 1, j);
            j -= 1;
        }
    }
    let pick = |q: f64| {
        let h = (means.len() - 1) as f64 * q;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        means[lo] + (means[hi] - means[lo]) * (h - lo as f64)
    };
    let tail = (1.0 - level) / 2.0;
    (pick(tail), pick(1.0 - tail))
}

pub fn returns_to_go_oracle(rewards: &[f32]) -> Vec<f32> {
    (0..rewards.len()).map(|t| rewards[t..].iter().rev().sum()).collect()
}

/// Empirical byte entropy in bits, as `log2 n - (1/n) sum c log2 c`.
pub fn byte_entropy_oracle(text: &[u8]) -> f64 {
    let mut counts = std::collections::BTreeMap::new();
    for &b in text {
        *counts.entry(b).or_insert(0u64) += 1;
    }
    let n = text.len() as f64;
    let s: f64 = counts.values().map(|&c| c as f64 * (c as f64).log2()).sum();
    n.log2() - s / n
}

use textrl::lm::{lm_loss, tokenize};
use textrl::transformer::{Transformer, TransformerConfig};
use textrl::{AdamW, AdamWConfig, Graph, Module};

/// Trains a dropout-free tiny model on the single window `text` and returns
/// the loss after the last update.
pub fn overfit_bytes(text: &[u8], steps: usize, seed: u64) -> f32 {
    let cfg = TransformerConfig {
        dropout: 0.0,
        max_positions: text.len(),
        ..TransformerConfig::preset("tiny").unwrap()
    };
    let mut model = Transformer::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let mut opt = AdamW::new(AdamWConfig {
        lr: 3e-3,
        warmup_steps: 0,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    let windows = vec![tokenize(text)];
    let mut last = f32::INFINITY;
    for _ in 0..=steps {
        let mut g = Graph::new();
        let loss = lm_loss(&model, &mut g, &windows, None).unwrap();
        last = g.scalar(loss);
        if last < 0.01 {
            break;
        }
        g.backward(loss).unwrap();
        model.zero_grads();
        model.collect_grads(&g);
        opt.step(&mut model.named_params_mut()).unwrap();
    }
    last
}
