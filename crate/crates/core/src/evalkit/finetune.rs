use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aux::{combined_loss, l_cos_pooled, EmbeddingAnchors, LossConfig};
use crate::checkpoint::Checkpoint;
use crate::envlab::{Dataset, Env};
use crate::error::{Error, Result};
use crate::lm::{lm_loss, sample_windows, Corpus, BYTE_VOCAB};
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig, Module};
use crate::tensor::Graph;
use crate::traj::{sample_batch, DecisionConfig, DecisionModel, LossPositions};
use crate::transformer::{Transformer, TransformerConfig};

use super::{evaluate, EvalPoint, EvalReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    Pretrained,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub init: Init,
    /// Size preset for random initialisation without a reference model.
    pub size: String,
    pub context: usize,
    pub batch: usize,
    pub steps: u64,
    pub optimizer: AdamWConfig,
    pub dropout: f32,
    pub clip_norm: f32,
    pub loss: LossConfig,
    /// Tokens per language co-training window.
    pub cotrain_window: usize,
    /// Divisor for returns-to-go; the environment default when absent.
    pub rtg_scale: Option<f32>,
    /// Conditioning return for evaluation; the dataset's expert score when absent.
    pub target_return: Option<f32>,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub freeze: bool,
    pub random_positions: bool,
    pub loss_positions: LossPositions,
}

impl Default for FinetuneConfig {
    /// Published Gym settings: context 20, dropout 0.2, lr 1e-4 with 5000
    /// warmup steps, batch 64.
    fn default() -> Self {
        FinetuneConfig {
            init: Init::Pretrained,
            size: "600k".into(),
            context: 20,
            batch: 64,
            steps: 20_000,
            optimizer: AdamWConfig::default(),
            dropout: 0.2,
            clip_norm: 0.25,
            loss: LossConfig::default(),
            cotrain_window: 64,
            rtg_scale: None,
            target_return: None,
            eval_every: 500,
            eval_episodes: 10,
            freeze: false,
            random_positions: false,
            loss_positions: LossPositions::State,
        }
    }
}

impl FinetuneConfig {
    /// Single-core scale used by the experiment recipes: short context, small
    /// batches, and schedules shrunk to a 1200-step run.
    pub fn desk() -> Self {
        FinetuneConfig {
            context: 5,
            batch: 16,
            steps: 1200,
            optimizer: AdamWConfig {
                lr: 3e-4,
                warmup_steps: 100,
                ..Default::default()
            },
            loss: LossConfig {
                decay_end_step: 600,
                cotrain_batch: 2,
                ..Default::default()
            },
            cotrain_window: 32,
            eval_every: 100,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch == 0 || self.steps == 0 || self.eval_every == 0 || self.eval_episodes == 0 {
            return Err(Error::Config("batch, steps, eval_every and eval_episodes must be positive".into()));
        }
        Ok(())
    }
}

/// Loss components of one optimisation step (`None` when the term was off).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f32,
    pub mse: f32,
    pub l_cos: Option<f32>,
    pub l_lm: Option<f32>,
}

pub struct FinetuneOutcome {
    pub model: DecisionModel,
    pub report: EvalReport,
    pub losses: Vec<StepLosses>,
}

impl FinetuneOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        let config = serde_json::json!({
            "transformer": self.model.transformer.config,
            "decision": self.model.config,
        });
        Checkpoint::capture("decision", config, self.report.evals.last().map_or(0, |e| e.step), &self.model)
    }

    /// `step,train_loss,normalized_mean,normalized_std`, one row per evaluation.
    pub fn write_metrics(&self, path: &Path) -> Result<()> {
        let mut out = String::from("step,train_loss,normalized_mean,normalized_std\n");
        for e in &self.report.evals {
            let loss = self.losses[(e.step - 1) as usize].total;
            out.push_str(&format!("{},{},{},{}\n", e.step, loss, e.normalized_mean, e.normalized_std));
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Rebuilds a decision model from a `decision` checkpoint.
pub fn load_decision(ck: &Checkpoint) -> Result<DecisionModel> {
    let bad = |detail: String| Error::Format {
        what: "checkpoint",
        detail,
    };
    if ck.kind != "decision" {
        return Err(bad(format!("expected a `decision` checkpoint, found `{}`", ck.kind)));
    }
    let tcfg: TransformerConfig =
        serde_json::from_value(ck.config["transformer"].clone()).map_err(|e| bad(e.to_string()))?;
    let dcfg: DecisionConfig = serde_json::from_value(ck.config["decision"].clone()).map_err(|e| bad(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = DecisionModel::new(dcfg, Transformer::new(tcfg, &mut rng)?, &mut rng)?;
    ck.restore_into(&mut model)?;
    Ok(model)
}

/// Evaluation episodes depend only on the run seed, so every variant of a
/// seed is scored on the same starts.
pub(crate) fn eval_seed(seed: u64) -> u64 {
    seed ^ 0xe7a1_0000
}

/// Trains a decision model on `data` and evaluates it in `env` every
/// `eval_every` steps and after the last step.
///
/// `reference` is the pretrained language model; with random init it only
/// fixes the architecture. `corpus` is needed when language co-training is on.
pub fn finetune(
    config: &FinetuneConfig,
    data: &Dataset,
    env: &Env,
    reference: Option<&Transformer>,
    corpus: Option<&Corpus>,
    seed: u64,
    variant: &str,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    if data.manifest.env != env.name() {
        return Err(Error::Modality(format!("{} data for the {} environment", data.manifest.env, env.name())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transformer = match (config.init, reference) {
        (Init::Pretrained, Some(t)) => t.clone(),
        (Init::Pretrained, None) => {
            return Err(Error::Config("pretrained initialisation needs a language-model checkpoint".into()))
        }
        (Init::Random, Some(t)) => Transformer::new(t.config.clone(), &mut rng)?,
        (Init::Random, None) => Transformer::new(TransformerConfig::preset(&config.size)?, &mut rng)?,
    };
    transformer.config.dropout = config.dropout;
    let dcfg = DecisionConfig {
        state_dim: env.state_dim(),
        action_space: env.action_space(),
        context: config.context,
        rtg_scale: config.rtg_scale.unwrap_or_else(|| env.default_rtg_scale()),
        max_timestep: env.horizon(),
        loss_positions: config.loss_positions,
    };
    let mut model = DecisionModel::from_pretrained(dcfg, transformer, config.random_positions, &mut rng)?;
    model.set_frozen(config.freeze);

    let lc = &config.loss;
    let vocab_rows = BYTE_VOCAB.min(model.transformer.config.vocab_size);
    let mut anchors = if lc.lambda1 > 0.0 {
        Some(EmbeddingAnchors::from_table(&model.transformer.token_embedding, vocab_rows, lc.clusters, seed)?)
    } else {
        None
    };
    if lc.lambda2 > 0.0 && corpus.is_none() {
        return Err(Error::Config("language co-training needs a corpus".into()));
    }
    let target = config.target_return.unwrap_or(data.manifest.expert_score as f32);
    let (random, expert) = (data.manifest.random_score, data.manifest.expert_score);

    let mut opt = AdamW::new(config.optimizer.clone());
    let mut losses = Vec::with_capacity(config.steps as usize);
    let mut evals = Vec::new();
    for step in 1..=config.steps {
        if let (Some(every), Some(_)) = (lc.recluster_every, anchors.as_ref()) {
            if step > 1 && (step - 1) % every == 0 {
                anchors = Some(EmbeddingAnchors::from_table(
                    &model.transformer.token_embedding,
                    vocab_rows,
                    lc.clusters,
                    seed,
                )?);
            }
        }
        // weights of this update; the decay counts completed steps
        let (l1, l2) = lc.weights_at(step - 1);
        let batch = sample_batch(&data.episodes, config.batch, &model.config, &mut rng)?;
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &batch, false, Some(&mut rng))?;
        let mse = model.action_loss(&mut g, &fwd, &batch)?;
        let align = match anchors.as_ref().filter(|_| l1 > 0.0) {
            Some(a) => {
                let w = 1.0 / batch.batch as f32;
                let weights: Vec<f32> = batch.token_mask().iter().map(|&v| if v { w } else { 0.0 }).collect();
                Some(l_cos_pooled(&mut g, fwd.embedded, a, &weights, lc.pooling)?)
            }
            None => None,
        };
        let lm = match corpus.filter(|_| l2 > 0.0) {
            Some(c) => {
                let windows = sample_windows(c.train(), config.cotrain_window, lc.cotrain_batch, &mut rng)?;
                Some(lm_loss(&model.transformer, &mut g, &windows, Some(&mut rng))?)
            }
            None => None,
        };
        let total = combined_loss(&mut g, mse, align, lm, step - 1, lc)?;
        let record = StepLosses {
            total: g.scalar(total),
            mse: g.scalar(mse),
            l_cos: align.map(|v| g.scalar(v)),
            l_lm: lm.map(|v| g.scalar(v)),
        };
        if !record.total.is_finite() {
            return Err(Error::NonFinite("finetuning loss"));
        }
        g.backward(total)?;
        model.zero_grads();
        model.collect_grads(&g);
        drop(g);
        let mut params = model.named_params_mut();
        clip_grad_norm(&mut params, config.clip_norm);
        opt.step(&mut params)?;
        losses.push(record);
        if step % config.eval_every == 0 || step == config.steps {
            let returns = evaluate(&model, env, target, config.eval_episodes, eval_seed(seed))?;
            let point = EvalPoint::new(step, returns, random, expert)?;
            log::info!("{variant} seed {seed} step {step}: normalized {:.1}", point.normalized_mean);
            evals.push(point);
        }
    }
    model.zero_grads();
    let report = EvalReport::new(variant, seed, random, expert, evals)?;
    Ok(FinetuneOutcome { model, report, losses })
}
