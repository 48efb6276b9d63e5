//! Return-conditioned rollouts, score normalisation, convergence, bootstrap
//! intervals, attention export and the finetuning / experiment runners.

mod attention;
mod experiment;
mod finetune;

pub use attention::{attention_export, write_attention, LayerMaps, EXPORT_TEMPERATURE};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentOutput, Recipe, Variant};
pub use finetune::{finetune, load_decision, FinetuneConfig, FinetuneOutcome, Init, StepLosses};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envlab::{episode_rng, Action, Env};
use crate::error::{Error, Result};
use crate::traj::{ActionSpace, BatchActions, DecisionModel, TrajectoryBatch};

/// One evaluation episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub total: f32,
    pub rewards: Vec<f32>,
    /// Conditioning return fed at each step, unscaled.
    pub rtg: Vec<f32>,
}

/// Plays one episode. The model sees the last `min(context, t + 1)` steps
/// with no padding; the return conditioning starts at `target_return` and is
/// decremented by each observed reward.
pub fn rollout<R: Rng + ?Sized>(
    model: &DecisionModel,
    env: &Env,
    target_return: f32,
    context: usize,
    rng: &mut R,
) -> Result<Rollout> {
    if !target_return.is_finite() {
        return Err(Error::Config("target return must be finite".into()));
    }
    let cfg = &model.config;
    if cfg.action_space != env.action_space() || cfg.state_dim != env.state_dim() {
        return Err(Error::Modality(format!(
            "model ({} states, {:?}) cannot act in {} ({} states, {:?})",
            cfg.state_dim,
            cfg.action_space,
            env.name(),
            env.state_dim(),
            env.action_space()
        )));
    }
    if context == 0 || context > cfg.context {
        return Err(Error::ContextLength {
            len: context,
            max: cfg.context,
        });
    }
    let sd = cfg.state_dim;
    let width = match cfg.action_space {
        ActionSpace::Continuous(d) => d,
        ActionSpace::Discrete(_) => 1,
    };
    let mut state = env.reset(rng);
    let mut states: Vec<f32> = Vec::new();
    let mut actions: Vec<f32> = Vec::new();
    let mut rtg: Vec<f32> = Vec::new();
    let mut rewards = Vec::new();
    let mut to_go = target_return;
    loop {
        let t = rewards.len();
        states.extend_from_slice(&state.obs);
        actions.extend(std::iter::repeat_n(0.0, width));
        rtg.push(to_go);
        let len = (t + 1).min(context);
        let first = t + 1 - len;
        let batch = TrajectoryBatch {
            batch: 1,
            context: len,
            returns: rtg[first..].iter().map(|r| r / cfg.rtg_scale).collect(),
            states: states[first * sd..].to_vec(),
            actions: match cfg.action_space {
                ActionSpace::Continuous(_) => BatchActions::Continuous(actions[first * width..].to_vec()),
                ActionSpace::Discrete(_) => BatchActions::Discrete(actions[first..].iter().map(|&a| a as usize).collect()),
            },
            timesteps: (first..=t).collect(),
            valid: vec![true; len],
        };
        let out = model.predict_last(&batch)?;
        let action = match cfg.action_space {
            ActionSpace::Continuous(_) => Action::Continuous(out),
            ActionSpace::Discrete(_) => {
                let mut best = 0;
                for (i, v) in out.iter().enumerate() {
                    if *v > out[best] {
                        best = i;
                    }
                }
                Action::Discrete(best)
            }
        };
        match &action {
            Action::Continuous(a) => actions[t * width..].copy_from_slice(a),
            Action::Discrete(a) => actions[t] = *a as f32,
        }
        let tr = env.step(&state, &action)?;
        rewards.push(tr.reward);
        to_go -= tr.reward;
        state = tr.next;
        if tr.done {
            break;
        }
    }
    Ok(Rollout {
        total: rewards.iter().sum(),
        rewards,
        rtg,
    })
}

/// Returns of `episodes` rollouts on the fixed episode streams of `seed`.
pub fn evaluate(
    model: &DecisionModel,
    env: &Env,
    target_return: f32,
    episodes: usize,
    seed: u64,
) -> Result<Vec<f32>> {
    (0..episodes)
        .map(|i| Ok(rollout(model, env, target_return, model.config.context, &mut episode_rng(seed, i as u64))?.total))
        .collect()
}

/// `100 · (score - random) / (expert - random)`.
pub fn normalized_score(score: f64, random: f64, expert: f64) -> Result<f64> {
    if !(expert - random).is_normal() {
        return Err(Error::Degenerate(format!("expert score {expert} equals random score {random}")));
    }
    Ok(100.0 * (score - random) / (expert - random))
}

/// Index of the first point within 2 of the curve's best value.
pub fn convergence_index(curve: &[f64]) -> Result<usize> {
    let best = curve
        .iter()
        .copied()
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
        .ok_or_else(|| Error::Degenerate("empty evaluation curve".into()))?;
    Ok(curve.iter().position(|&v| v >= best - 2.0).expect("best is in the curve"))
}

/// Step of the first evaluation within 2 normalised points of the best.
pub fn convergence_step(curve: &[(u64, f64)]) -> Result<u64> {
    let scores: Vec<f64> = curve.iter().map(|p| p.1).collect();
    Ok(curve[convergence_index(&scores)?].0)
}

/// Quantile of sorted data with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap interval of the mean of per-seed scores.
///
/// Each resample draws `scores.len()` indices with
/// `rng.random_range(0..n)` from a ChaCha8 generator seeded with `seed`.
pub fn bootstrap_ci(scores: &[f64], n_resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if scores.is_empty() || n_resamples == 0 {
        return Err(Error::Degenerate("bootstrap needs scores and resamples".into()));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::Config(format!("confidence level {level}")));
    }
    if scores.len() == 1 {
        log::warn!("bootstrap over a single score gives a degenerate interval");
        return Ok((scores[0], scores[0]));
    }
    let n = scores.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..n_resamples)
        .map(|_| (0..n).map(|_| scores[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(|a, b| a.total_cmp(b));
    let tail = (1.0 - level) / 2.0;
    Ok((quantile(&means, tail), quantile(&means, 1.0 - tail)))
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    quantile(&v, 0.5)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub returns: Vec<f32>,
    pub normalized_mean: f64,
    pub normalized_std: f64,
}

impl EvalPoint {
    pub fn new(step: u64, returns: Vec<f32>, random: f64, expert: f64) -> Result<Self> {
        let normalized: Vec<f64> = returns
            .iter()
            .map(|&r| normalized_score(r as f64, random, expert))
            .collect::<Result<_>>()?;
        let (normalized_mean, normalized_std) = mean_std(&normalized);
        Ok(EvalPoint {
            step,
            returns,
            normalized_mean,
            normalized_std,
        })
    }
}

/// Evaluation curve of one finetuning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub seed: u64,
    pub random_score: f64,
    pub expert_score: f64,
    pub evals: Vec<EvalPoint>,
    pub convergence_step: u64,
    pub best_normalized: f64,
}

impl EvalReport {
    pub fn new(variant: &str, seed: u64, random_score: f64, expert_score: f64, evals: Vec<EvalPoint>) -> Result<Self> {
        let curve: Vec<(u64, f64)> = evals.iter().map(|e| (e.step, e.normalized_mean)).collect();
        let convergence_step = convergence_step(&curve)?;
        let best_normalized = curve.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
        Ok(EvalReport {
            variant: variant.to_string(),
            seed,
            random_score,
            expert_score,
            evals,
            convergence_step,
            best_normalized,
        })
    }

    pub fn final_normalized(&self) -> f64 {
        self.evals.last().map_or(f64::NAN, |e| e.normalized_mean)
    }
}
