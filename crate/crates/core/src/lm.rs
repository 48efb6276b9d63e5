//! Byte-level language-model pretraining on a text corpus.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig, Module};
use crate::tensor::{Graph, Var};
use crate::transformer::{sequential_positions, SeqLayout, Transformer, TransformerConfig};

/// Byte ids occupy `0..256`; the LM head predicts only these.
pub const BYTE_VOCAB: usize = 256;
/// Padding id, one past the byte range.
pub const PAD_ID: usize = 256;

static BUNDLED: &[u8] = include_bytes!("../data/corpus.txt");

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    /// Byte offset of the first token in its source.
    pub offset: usize,
}

pub fn tokenize(bytes: &[u8]) -> TokenSequence {
    TokenSequence {
        tokens: bytes.iter().map(|&b| b as usize).collect(),
        offset: 0,
    }
}

pub fn detokenize(tokens: &[usize]) -> Result<Vec<u8>> {
    tokens
        .iter()
        .map(|&t| {
            u8::try_from(t).map_err(|_| Error::Vocabulary {
                id: t,
                vocab: BYTE_VOCAB,
            })
        })
        .collect()
}

/// Raw text split into a training head and a validation tail.
#[derive(Clone, Debug)]
pub struct Corpus {
    bytes: Vec<u8>,
    train_end: usize,
}

impl Corpus {
    pub fn new(bytes: Vec<u8>, valid_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&valid_fraction) {
            return Err(Error::Config(format!("validation fraction {valid_fraction}")));
        }
        let valid = ((bytes.len() as f64 * valid_fraction).round() as usize).max(2);
        if bytes.len() < valid + 2 {
            return Err(Error::Degenerate(format!("corpus of {} bytes is too small to split", bytes.len())));
        }
        let train_end = bytes.len() - valid;
        Ok(Corpus { bytes, train_end })
    }

    /// Public-domain English text shipped with the crate, 5% held out.
    pub fn bundled() -> Self {
        Corpus::new(BUNDLED.to_vec(), 0.05).expect("bundled corpus is large")
    }

    pub fn from_path(path: &Path, valid_fraction: f64) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Corpus::new(bytes, valid_fraction)
    }

    pub fn train(&self) -> &[u8] {
        &self.bytes[..self.train_end]
    }

    pub fn valid(&self) -> &[u8] {
        &self.bytes[self.train_end..]
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

/// `batch` random windows of `len` tokens taken from `text`. Every window lies
/// entirely inside `text`.
pub fn sample_windows<R: Rng + ?Sized>(text: &[u8], len: usize, batch: usize, rng: &mut R) -> Result<Vec<TokenSequence>> {
    if text.len() < len {
        return Err(Error::Degenerate(format!("{} bytes cannot hold a window of {len}", text.len())));
    }
    Ok((0..batch)
        .map(|_| {
            let start = rng.random_range(0..=text.len() - len);
            TokenSequence {
                tokens: text[start..start + len].iter().map(|&b| b as usize).collect(),
                offset: start,
            }
        })
        .collect())
}

/// Mean next-token cross-entropy (nats) over a batch of equal-length windows:
/// position `i` predicts token `i + 1`.
pub fn lm_loss(model: &Transformer, g: &mut Graph, windows: &[TokenSequence], rng: crate::transformer::TrainRng<'_>) -> Result<Var> {
    let n = windows.first().map_or(0, |w| w.tokens.len());
    if n < 2 {
        return Err(Error::Contract(format!("language window of {n} tokens; need at least 2")));
    }
    if windows.iter().any(|w| w.tokens.len() != n) {
        return Err(Error::Contract("language windows differ in length".into()));
    }
    let mut inputs = Vec::with_capacity(windows.len() * (n - 1));
    let mut targets = Vec::with_capacity(windows.len() * (n - 1));
    for w in windows {
        inputs.extend_from_slice(&w.tokens[..n - 1]);
        targets.extend_from_slice(&w.tokens[1..]);
    }
    let layout = SeqLayout {
        batch: windows.len(),
        seq: n - 1,
    };
    let x = model.embed_tokens(g, &inputs)?;
    let (h, _) = model.forward(g, x, layout, &sequential_positions(layout), None, false, rng)?;
    let logits = model.lm_logits(g, h, BYTE_VOCAB)?;
    g.cross_entropy(logits, &targets, None)
}

/// Bits per byte on `text`, scored in consecutive windows of `window` tokens
/// that overlap by one so every byte after the first is predicted once.
/// At most `max_windows` windows are used.
pub fn bits_per_byte(model: &Transformer, text: &[u8], window: usize, max_windows: usize) -> Result<f64> {
    if window < 2 || text.len() < window {
        return Err(Error::Degenerate(format!("{} bytes for windows of {window}", text.len())));
    }
    let starts: Vec<usize> = (0..)
        .map(|i| i * (window - 1))
        .take_while(|s| s + window <= text.len())
        .take(max_windows.max(1))
        .collect();
    let mut total = 0.0f64;
    for chunk in starts.chunks(16) {
        let windows: Vec<TokenSequence> = chunk
            .iter()
            .map(|&s| TokenSequence {
                tokens: text[s..s + window].iter().map(|&b| b as usize).collect(),
                offset: s,
            })
            .collect();
        let mut g = Graph::new();
        let loss = lm_loss(model, &mut g, &windows, None)?;
        total += g.scalar(loss) as f64 * chunk.len() as f64;
    }
    Ok(total / starts.len() as f64 / std::f64::consts::LN_2)
}

/// Shannon entropy in bits of the byte histogram of `text`.
pub fn unigram_entropy_bits(text: &[u8]) -> f64 {
    let mut counts = [0usize; 256];
    for &b in text {
        counts[b as usize] += 1;
    }
    let n = text.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub model: TransformerConfig,
    pub optimizer: AdamWConfig,
    pub steps: u64,
    /// Windows per step; tokens per step is `batch · window`.
    pub batch: usize,
    pub window: usize,
    pub eval_every: u64,
    pub eval_windows: usize,
    pub clip_norm: f32,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PretrainConfig {
    /// Fits the single-core desk budget: 2048 tokens per step for 1500 steps.
    pub fn desk() -> Self {
        PretrainConfig {
            model: TransformerConfig {
                dropout: 0.1,
                ..Default::default()
            },
            optimizer: AdamWConfig {
                lr: 3e-4,
                warmup_steps: 150,
                ..Default::default()
            },
            steps: 1500,
            batch: 32,
            window: 64,
            eval_every: 250,
            eval_windows: 256,
            clip_norm: 0.25,
            seed: 0,
        }
    }

    /// Published large-scale settings: 65536-token batches, 10000 warmup steps,
    /// 80000 steps. Needs real hardware.
    pub fn paper() -> Self {
        PretrainConfig {
            optimizer: AdamWConfig {
                lr: 3e-4,
                warmup_steps: 10_000,
                ..Default::default()
            },
            steps: 80_000,
            batch: 1024,
            window: 64,
            eval_every: 5000,
            eval_windows: 1024,
            ..Self::desk()
        }
    }

    /// Seconds-long run for tests and demos.
    pub fn smoke() -> Self {
        PretrainConfig {
            model: TransformerConfig {
                dropout: 0.0,
                ..TransformerConfig::preset("tiny").expect("known preset")
            },
            optimizer: AdamWConfig {
                lr: 1e-3,
                warmup_steps: 10,
                ..Default::default()
            },
            steps: 40,
            batch: 8,
            window: 32,
            eval_every: 20,
            eval_windows: 16,
            ..Self::desk()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            "smoke" => Ok(Self::smoke()),
            other => Err(Error::Config(format!("unknown pretraining profile `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmMetric {
    pub step: u64,
    pub train_loss: f32,
    pub val_bpb: f64,
}

pub struct PretrainOutcome {
    pub model: Transformer,
    pub optimizer: AdamW,
    pub metrics: Vec<LmMetric>,
    pub rng: ChaCha8Rng,
    /// Training loss of every step.
    pub losses: Vec<f32>,
}

impl PretrainOutcome {
    pub fn checkpoint(&self, config: &PretrainConfig) -> Checkpoint {
        let mut ck = Checkpoint::capture(
            "lm",
            serde_json::to_value(&config.model).expect("config serialises"),
            self.optimizer.step_count(),
            &self.model,
        );
        ck.optimizer = Some(self.optimizer.clone());
        ck.rng = Some(self.rng.clone());
        ck
    }
}

/// Rebuilds a language model from an `lm` checkpoint.
pub fn load_lm(ck: &Checkpoint) -> Result<Transformer> {
    if ck.kind != "lm" {
        return Err(Error::Format {
            what: "checkpoint",
            detail: format!("expected an `lm` checkpoint, found `{}`", ck.kind),
        });
    }
    let config: TransformerConfig = serde_json::from_value(ck.config.clone()).map_err(|e| Error::Format {
        what: "checkpoint config",
        detail: e.to_string(),
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Transformer::new(config, &mut rng)?;
    ck.restore_into(&mut model)?;
    Ok(model)
}

pub fn write_metrics_csv(path: &Path, metrics: &[LmMetric]) -> Result<()> {
    let mut out = String::from("step,train_loss,val_bpb\n");
    for m in metrics {
        out.push_str(&format!("{},{},{}\n", m.step, m.train_loss, m.val_bpb));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Output locations of a pretraining run.
#[derive(Clone, Debug)]
pub struct PretrainPaths {
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
}

impl PretrainPaths {
    pub fn under(dir: &Path) -> Self {
        PretrainPaths {
            metrics: dir.join("lm_metrics.csv"),
            checkpoint: dir.join("lm.ckpt"),
        }
    }
}

/// Trains a fresh model on the training split. Validation bits-per-byte is
/// measured every `eval_every` steps and after the last step.
pub fn pretrain(config: &PretrainConfig, corpus: &Corpus, paths: Option<&PretrainPaths>) -> Result<PretrainOutcome> {
    if config.steps == 0 || config.batch == 0 {
        return Err(Error::Config("steps and batch must be positive".into()));
    }
    if config.window > config.model.max_positions + 1 {
        return Err(Error::ContextLength {
            len: config.window - 1,
            max: config.model.max_positions,
        });
    }
    if corpus.train().len() < config.window {
        return Err(Error::Degenerate("training split shorter than one window".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Transformer::new(config.model.clone(), &mut rng)?;
    let mut opt = AdamW::new(config.optimizer.clone());
    let mut metrics = Vec::new();
    let mut losses = Vec::with_capacity(config.steps as usize);
    for step in 1..=config.steps {
        let windows = sample_windows(corpus.train(), config.window, config.batch, &mut rng)?;
        let mut g = Graph::new();
        let loss = lm_loss(&model, &mut g, &windows, Some(&mut rng))?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite("language-model loss"));
        }
        g.backward(loss)?;
        model.zero_grads();
        model.collect_grads(&g);
        drop(g);
        let mut params = model.named_params_mut();
        clip_grad_norm(&mut params, config.clip_norm);
        opt.step(&mut params)?;
        losses.push(value);
        if step % config.eval_every.max(1) == 0 || step == config.steps {
            let bpb = bits_per_byte(&model, corpus.valid(), config.window, config.eval_windows)?;
            log::info!("lm step {step}: loss {value:.4}, val bpb {bpb:.4}");
            metrics.push(LmMetric {
                step,
                train_loss: value,
                val_bpb: bpb,
            });
        }
    }
    model.zero_grads();
    let outcome = PretrainOutcome {
        model,
        optimizer: opt,
        metrics,
        rng,
        losses,
    };
    if let Some(p) = paths {
        write_metrics_csv(&p.metrics, &outcome.metrics)?;
        outcome.checkpoint(config).save(&p.checkpoint)?;
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_is_identity_on_bytes() {
        assert_eq!(tokenize(b"abc").tokens, vec![97, 98, 99]);
        assert!(tokenize(b"").tokens.is_empty());
        assert_eq!(detokenize(&[104, 105]).unwrap(), b"hi");
        assert!(matches!(detokenize(&[PAD_ID]), Err(Error::Vocabulary { .. })));
    }

    #[test]
    fn split_is_disjoint_and_ordered() {
        let c = Corpus::new((0..100u8).collect(), 0.1).unwrap();
        assert_eq!(c.train().len() + c.valid().len(), 100);
        assert_eq!(c.valid()[0], 90);
        assert!(Corpus::new(vec![1, 2, 3], 0.5).is_err());
    }

    #[test]
    fn windows_stay_in_text() {
        let text: Vec<u8> = (0..50).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for w in sample_windows(&text, 10, 100, &mut rng).unwrap() {
            assert!(w.offset + 10 <= 50);
            assert_eq!(w.tokens[0], w.offset);
        }
    }

    #[test]
    fn short_window_is_rejected() {
        let model = Transformer::new(TransformerConfig::preset("tiny").unwrap(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut g = Graph::new();
        let w = vec![tokenize(b"a")];
        assert!(matches!(lm_loss(&model, &mut g, &w, None), Err(Error::Contract(_))));
    }

    #[test]
    fn entropy_of_uniform_and_constant_text() {
        let all: Vec<u8> = (0..=255).collect();
        assert!((unigram_entropy_bits(&all) - 8.0).abs() < 1e-12);
        assert_eq!(unigram_entropy_bits(b"aaaa"), 0.0);
    }
}
