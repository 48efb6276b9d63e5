//! GPT-style causal transformer with pre-layernorm blocks, learned absolute
//! positions and an output head tied to the token embedding table.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::Module;
use crate::tensor::graph::AttnLayout;
use crate::tensor::{Graph, Tensor, Var};

pub const LAYERNORM_EPS: f32 = 1e-5;
const INIT_STD: f32 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    /// Linear feedforward; only useful for tests.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub dropout: f32,
    pub activation: Activation,
}

impl Default for TransformerConfig {
    /// 128-dim, single head, three layers over a byte vocabulary plus padding.
    fn default() -> Self {
        TransformerConfig {
            model_dim: 128,
            num_heads: 1,
            num_layers: 3,
            max_positions: 192,
            vocab_size: 257,
            dropout: 0.2,
            activation: Activation::Relu,
        }
    }
}

impl TransformerConfig {
    /// Named model sizes. `600k` is the default shape; the larger three follow
    /// the usual dim/head/layer triples for roughly 3M, 18M and 84M parameters.
    /// `tiny` and `small` are desk-scale sizes used by the experiment runners.
    pub fn preset(name: &str) -> Result<Self> {
        let (model_dim, num_heads, num_layers) = match name {
            "tiny" => (32, 1, 2),
            "small" => (64, 2, 2),
            "600k" => (128, 1, 3),
            "3m" => (256, 4, 4),
            "18m" => (512, 8, 6),
            "84m" => (768, 12, 12),
            other => return Err(Error::Config(format!("unknown size preset `{other}`"))),
        };
        Ok(TransformerConfig {
            model_dim,
            num_heads,
            num_layers,
            ..Default::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.max_positions == 0 || self.vocab_size == 0 {
            return Err(Error::Config("max_positions and vocab_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Closed-form parameter count: `(V + P)·n + L·(12n² + 13n) + 2n`.
    ///
    /// Per block: four `n×n` attention projections with biases (`4n² + 4n`),
    /// a `n→4n→n` feedforward (`8n² + 5n`) and two layernorms (`4n`). The final
    /// layernorm adds `2n`; the output head is tied and adds nothing.
    pub fn expected_param_count(&self) -> usize {
        let n = self.model_dim;
        (self.vocab_size + self.max_positions) * n + self.num_layers * (12 * n * n + 13 * n) + 2 * n
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Block {
    fn new<R: Rng + ?Sized>(n: usize, num_layers: usize, rng: &mut R) -> Self {
        let resid_std = INIT_STD / (2.0 * num_layers as f32).sqrt();
        Block {
            ln1_gain: Tensor::full(&[n], 1.0),
            ln1_bias: Tensor::zeros(&[n]),
            wq: Tensor::randn(&[n, n], INIT_STD, rng),
            bq: Tensor::zeros(&[n]),
            wk: Tensor::randn(&[n, n], INIT_STD, rng),
            bk: Tensor::zeros(&[n]),
            wv: Tensor::randn(&[n, n], INIT_STD, rng),
            bv: Tensor::zeros(&[n]),
            wo: Tensor::randn(&[n, n], resid_std, rng),
            bo: Tensor::zeros(&[n]),
            ln2_gain: Tensor::full(&[n], 1.0),
            ln2_bias: Tensor::zeros(&[n]),
            w1: Tensor::randn(&[n, 4 * n], INIT_STD, rng),
            b1: Tensor::zeros(&[4 * n]),
            w2: Tensor::randn(&[4 * n, n], resid_std, rng),
            b2: Tensor::zeros(&[n]),
        }
    }

    fn named(&self, i: usize) -> Vec<(String, &Tensor)> {
        vec![
            (format!("h.{i}.ln1.gain"), &self.ln1_gain),
            (format!("h.{i}.ln1.bias"), &self.ln1_bias),
            (format!("h.{i}.attn.wq"), &self.wq),
            (format!("h.{i}.attn.bq"), &self.bq),
            (format!("h.{i}.attn.wk"), &self.wk),
            (format!("h.{i}.attn.bk"), &self.bk),
            (format!("h.{i}.attn.wv"), &self.wv),
            (format!("h.{i}.attn.bv"), &self.bv),
            (format!("h.{i}.attn.wo"), &self.wo),
            (format!("h.{i}.attn.bo"), &self.bo),
            (format!("h.{i}.ln2.gain"), &self.ln2_gain),
            (format!("h.{i}.ln2.bias"), &self.ln2_bias),
            (format!("h.{i}.mlp.w1"), &self.w1),
            (format!("h.{i}.mlp.b1"), &self.b1),
            (format!("h.{i}.mlp.w2"), &self.w2),
            (format!("h.{i}.mlp.b2"), &self.b2),
        ]
    }

    fn named_mut(&mut self, i: usize) -> Vec<(String, &mut Tensor)> {
        vec![
            (format!("h.{i}.ln1.gain"), &mut self.ln1_gain),
            (format!("h.{i}.ln1.bias"), &mut self.ln1_bias),
            (format!("h.{i}.attn.wq"), &mut self.wq),
            (format!("h.{i}.attn.bq"), &mut self.bq),
            (format!("h.{i}.attn.wk"), &mut self.wk),
            (format!("h.{i}.attn.bk"), &mut self.bk),
            (format!("h.{i}.attn.wv"), &mut self.wv),
            (format!("h.{i}.attn.bv"), &mut self.bv),
            (format!("h.{i}.attn.wo"), &mut self.wo),
            (format!("h.{i}.attn.bo"), &mut self.bo),
            (format!("h.{i}.ln2.gain"), &mut self.ln2_gain),
            (format!("h.{i}.ln2.bias"), &mut self.ln2_bias),
            (format!("h.{i}.mlp.w1"), &mut self.w1),
            (format!("h.{i}.mlp.b1"), &mut self.b1),
            (format!("h.{i}.mlp.w2"), &mut self.w2),
            (format!("h.{i}.mlp.b2"), &mut self.b2),
        ]
    }
}

/// Batch geometry of a forward pass: `batch` sequences of `seq` tokens stacked
/// row-wise into a `[batch*seq, model_dim]` matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub batch: usize,
    pub seq: usize,
}

impl SeqLayout {
    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }
}

/// Post-softmax weights and pre-mask scores of one layer, `[batch, heads, seq, seq]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAttention {
    pub batch: usize,
    pub heads: usize,
    pub seq: usize,
    pub probs: Vec<f32>,
    pub scores: Vec<f32>,
}

impl LayerAttention {
    /// `seq×seq` matrix of head `h` for sample `b`.
    pub fn head(&self, b: usize, h: usize) -> &[f32] {
        let tt = self.seq * self.seq;
        let start = (b * self.heads + h) * tt;
        &self.probs[start..start + tt]
    }

    pub fn head_scores(&self, b: usize, h: usize) -> &[f32] {
        let tt = self.seq * self.seq;
        let start = (b * self.heads + h) * tt;
        &self.scores[start..start + tt]
    }

    /// Mean over heads for sample `b`.
    pub fn head_mean(&self, b: usize) -> Vec<f32> {
        let tt = self.seq * self.seq;
        let mut out = vec![0.0; tt];
        for h in 0..self.heads {
            out.iter_mut().zip(self.head(b, h)).for_each(|(o, p)| *o += p);
        }
        out.iter_mut().for_each(|o| *o /= self.heads as f32);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct AttentionRecord {
    pub layers: Vec<LayerAttention>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transformer {
    pub config: TransformerConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub blocks: Vec<Block>,
    pub ln_f_gain: Tensor,
    pub ln_f_bias: Tensor,
}

/// Optional training-mode randomness: `Some` enables dropout.
pub type TrainRng<'a> = Option<&'a mut dyn RngCore>;

impl Transformer {
    pub fn new<R: Rng + ?Sized>(config: TransformerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let n = config.model_dim;
        let token_embedding = Tensor::randn(&[config.vocab_size, n], INIT_STD, rng);
        let position_embedding = Tensor::randn(&[config.max_positions, n], INIT_STD, rng);
        let blocks = (0..config.num_layers).map(|_| Block::new(n, config.num_layers, rng)).collect();
        Ok(Transformer {
            token_embedding,
            position_embedding,
            blocks,
            ln_f_gain: Tensor::full(&[n], 1.0),
            ln_f_bias: Tensor::zeros(&[n]),
            config,
        })
    }

    /// Replaces the positional table with a fresh random initialisation.
    pub fn reinit_positions<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let requires_grad = self.position_embedding.requires_grad();
        self.position_embedding = Tensor::randn(self.position_embedding.shape(), INIT_STD, rng);
        self.position_embedding.set_requires_grad(requires_grad);
    }

    /// Freezing excludes every transformer parameter (blocks, final layernorm,
    /// token and positional tables) from optimiser updates.
    pub fn set_frozen(&mut self, frozen: bool) {
        for (_, t) in self.named_params_mut() {
            t.set_requires_grad(!frozen);
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.named_params().iter().all(|(_, t)| !t.requires_grad())
    }

    /// Embedding lookup of token ids, `[tokens.len(), model_dim]`.
    pub fn embed_tokens(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        let table = g.param(&self.token_embedding);
        g.gather_rows(table, tokens)
    }

    /// Logits over the first `num_classes` rows of the tied embedding table.
    pub fn lm_logits(&self, g: &mut Graph, hidden: Var, num_classes: usize) -> Result<Var> {
        if num_classes == 0 || num_classes > self.config.vocab_size {
            return Err(Error::Config(format!(
                "{num_classes} output classes for a vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let table = g.param(&self.token_embedding);
        let head = if num_classes == self.config.vocab_size {
            table
        } else {
            let rows: Vec<usize> = (0..num_classes).collect();
            g.gather_rows(table, &rows)?
        };
        g.matmul_nt(hidden, head)
    }

    /// Multi-head causal self-attention of block `layer` followed by the
    /// output projection.
    pub fn causal_self_attention(
        &self,
        g: &mut Graph,
        x: Var,
        layer: usize,
        layout: SeqLayout,
        key_valid: Option<&[bool]>,
        capture: bool,
    ) -> Result<(Var, Option<LayerAttention>)> {
        let blk = &self.blocks[layer];
        let (wq, bq, wk, bk, wv, bv, wo, bo) = (
            g.param(&blk.wq),
            g.param(&blk.bq),
            g.param(&blk.wk),
            g.param(&blk.bk),
            g.param(&blk.wv),
            g.param(&blk.bv),
            g.param(&blk.wo),
            g.param(&blk.bo),
        );
        let q = g.linear(x, wq, bq)?;
        let k = g.linear(x, wk, bk)?;
        let v = g.linear(x, wv, bv)?;
        let attn_layout = AttnLayout {
            batch: layout.batch,
            seq: layout.seq,
            heads: self.config.num_heads,
        };
        let a = g.causal_attention(q, k, v, attn_layout, key_valid, capture)?;
        let record = if capture {
            let (l, probs, scores) = g.attention_maps(a).expect("attention node");
            Some(LayerAttention {
                batch: l.batch,
                heads: l.heads,
                seq: l.seq,
                probs: probs.to_vec(),
                scores: scores.expect("captured").to_vec(),
            })
        } else {
            None
        };
        Ok((g.linear(a, wo, bo)?, record))
    }

    /// `L2(g(L1(x)))` with hidden width `4n`.
    pub fn feedforward(&self, g: &mut Graph, x: Var, layer: usize) -> Result<Var> {
        let blk = &self.blocks[layer];
        let (w1, b1, w2, b2) = (g.param(&blk.w1), g.param(&blk.b1), g.param(&blk.w2), g.param(&blk.b2));
        let h = g.linear(x, w1, b1)?;
        let h = match self.config.activation {
            Activation::Relu => g.relu(h),
            Activation::Gelu => g.gelu(h),
            Activation::Identity => h,
        };
        g.linear(h, w2, b2)
    }

    /// Runs the block stack on already-embedded inputs.
    ///
    /// `positions` gives one absolute position per row. Within each sequence
    /// the positions of valid (unmasked) rows must be strictly increasing;
    /// masked padding rows may use any in-range index.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        embedded: Var,
        layout: SeqLayout,
        positions: &[usize],
        key_valid: Option<&[bool]>,
        capture: bool,
        mut rng: TrainRng<'_>,
    ) -> Result<(Var, Option<AttentionRecord>)> {
        let n = self.config.model_dim;
        if g.shape(embedded) != [layout.rows(), n] {
            return Err(Error::Shape {
                op: "transformer input",
                lhs: g.shape(embedded).to_vec(),
                rhs: vec![layout.rows(), n],
            });
        }
        self.check_positions(layout, positions, key_valid)?;
        let pos_table = g.param(&self.position_embedding);
        let pos = g.gather_rows(pos_table, positions)?;
        let mut x = g.add(embedded, pos)?;
        let p = self.config.dropout;
        if let Some(r) = rng.as_deref_mut() {
            x = g.dropout(x, p, r);
        }
        let mut record = capture.then(AttentionRecord::default);
        for (i, blk) in self.blocks.iter().enumerate() {
            let (gain, bias) = (g.param(&blk.ln1_gain), g.param(&blk.ln1_bias));
            let h = g.layernorm(x, gain, bias, LAYERNORM_EPS)?;
            let (mut a, layer_attn) = self.causal_self_attention(g, h, i, layout, key_valid, capture)?;
            if let (Some(rec), Some(la)) = (record.as_mut(), layer_attn) {
                rec.layers.push(la);
            }
            if let Some(r) = rng.as_deref_mut() {
                a = g.dropout(a, p, r);
            }
            x = g.add(x, a)?;
            let (gain, bias) = (g.param(&blk.ln2_gain), g.param(&blk.ln2_bias));
            let h = g.layernorm(x, gain, bias, LAYERNORM_EPS)?;
            let mut f = self.feedforward(g, h, i)?;
            if let Some(r) = rng.as_deref_mut() {
                f = g.dropout(f, p, r);
            }
            x = g.add(x, f)?;
        }
        let (gain, bias) = (g.param(&self.ln_f_gain), g.param(&self.ln_f_bias));
        Ok((g.layernorm(x, gain, bias, LAYERNORM_EPS)?, record))
    }

    fn check_positions(&self, layout: SeqLayout, positions: &[usize], key_valid: Option<&[bool]>) -> Result<()> {
        if positions.len() != layout.rows() {
            return Err(Error::Shape {
                op: "positions",
                lhs: vec![layout.rows()],
                rhs: vec![positions.len()],
            });
        }
        let max = self.config.max_positions;
        if let Some(&p) = positions.iter().max() {
            if p >= max {
                return Err(Error::ContextLength { len: p + 1, max });
            }
        }
        for b in 0..layout.batch {
            let mut last: Option<usize> = None;
            for t in 0..layout.seq {
                let r = b * layout.seq + t;
                if key_valid.is_some_and(|m| !m[r]) {
                    continue;
                }
                if last.is_some_and(|l| positions[r] <= l) {
                    return Err(Error::Contract(format!(
                        "positions of sequence {b} are not strictly increasing"
                    )));
                }
                last = Some(positions[r]);
            }
        }
        Ok(())
    }
}

impl Module for Transformer {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("wte".to_string(), &self.token_embedding),
            ("wpe".to_string(), &self.position_embedding),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named(i));
        }
        out.push(("ln_f.gain".into(), &self.ln_f_gain));
        out.push(("ln_f.bias".into(), &self.ln_f_bias));
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("wte".to_string(), &mut self.token_embedding),
            ("wpe".to_string(), &mut self.position_embedding),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.named_mut(i));
        }
        out.push(("ln_f.gain".into(), &mut self.ln_f_gain));
        out.push(("ln_f.bias".into(), &mut self.ln_f_bias));
        out
    }
}

/// Positions `0..seq` repeated for every sequence in the batch.
pub fn sequential_positions(layout: SeqLayout) -> Vec<usize> {
    (0..layout.batch).flat_map(|_| 0..layout.seq).collect()
}
