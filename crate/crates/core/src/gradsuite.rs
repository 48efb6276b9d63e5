//! The standard finite-difference suite: every differentiable op plus a full
//! transformer block, each checked on random inputs over many seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aux::{l_cos, EmbeddingAnchors};
use crate::error::Result;
use crate::optim::Module;
use crate::tensor::gradcheck::{check_gradients, check_module_gradients};
use crate::tensor::graph::AttnLayout;
use crate::tensor::{Graph, Tensor};
use crate::transformer::{Activation, SeqLayout, Transformer, TransformerConfig, LAYERNORM_EPS};

/// Step for the central differences.
pub const FD_STEP: f32 = 1e-3;

/// Maximum relative error observed for one op across all seeds.
#[derive(Clone, Debug)]
pub struct OpReport {
    pub op: &'static str,
    pub max_rel_error: f64,
    pub seeds: usize,
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Uniform values in [-1, 1] kept at least `margin` away from zero, so that
/// kinks at the origin cannot fall inside a difference stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f32) -> Tensor {
    let mut t = rand_t(rng, shape);
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v < 0.0 { -margin - v.abs() } else { margin + *v };
        }
    }
    t
}

/// Rows whose largest entry beats the runner-up by at least `gap`.
fn separated_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gap: f32) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        loop {
            let row: Vec<f32> = (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut sorted = row.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            if sorted[0] - sorted[1] >= gap {
                data.extend(row);
                break;
            }
        }
    }
    Tensor::new(vec![rows, cols], data).expect("consistent shape")
}

type Case = fn(&mut ChaCha8Rng) -> Result<f64>;

fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("matmul", |r| {
            let (a, b) = (rand_t(r, &[3, 4]), rand_t(r, &[4, 2]));
            Ok(check_gradients(&[a, b], FD_STEP, |g, v| {
                let c = g.matmul(v[0], v[1])?;
                Ok(g.sum(c))
            })?
            .max_rel_error())
        }),
        ("matmul_nt", |r| {
            let (a, b) = (rand_t(r, &[3, 4]), rand_t(r, &[5, 4]));
            Ok(check_gradients(&[a, b], FD_STEP, |g, v| g.matmul_nt(v[0], v[1]))?.max_rel_error())
        }),
        ("add", |r| {
            let (a, b) = (rand_t(r, &[2, 3]), rand_t(r, &[2, 3]));
            Ok(check_gradients(&[a, b], FD_STEP, |g, v| g.add(v[0], v[1]))?.max_rel_error())
        }),
        ("mul", |r| {
            let (a, b) = (rand_t(r, &[2, 3]), rand_t(r, &[2, 3]));
            Ok(check_gradients(&[a, b], FD_STEP, |g, v| g.mul(v[0], v[1]))?.max_rel_error())
        }),
        ("add_bias", |r| {
            let (a, b) = (rand_t(r, &[3, 4]), rand_t(r, &[4]));
            Ok(check_gradients(&[a, b], FD_STEP, |g, v| g.add_bias(v[0], v[1]))?.max_rel_error())
        }),
        ("scale", |r| {
            let a = rand_t(r, &[5]);
            Ok(check_gradients(&[a], FD_STEP, |g, v| Ok(g.scale(v[0], -1.7)))?.max_rel_error())
        }),
        ("relu", |r| {
            let a = away_from_zero(r, &[2, 5], 0.05);
            Ok(check_gradients(&[a], FD_STEP, |g, v| Ok(g.relu(v[0])))?.max_rel_error())
        }),
        ("gelu", |r| {
            let a = rand_t(r, &[2, 5]);
            Ok(check_gradients(&[a], FD_STEP, |g, v| Ok(g.gelu(v[0])))?.max_rel_error())
        }),
        ("tanh", |r| {
            let a = rand_t(r, &[2, 5]);
            Ok(check_gradients(&[a], FD_STEP, |g, v| Ok(g.tanh(v[0])))?.max_rel_error())
        }),
        ("softmax", |r| {
            let a = rand_t(r, &[5]);
            Ok(check_gradients(&[a], FD_STEP, |g, v| g.softmax(v[0]))?.max_rel_error())
        }),
        ("layernorm", |r| {
            let (x, gain, bias) = (rand_t(r, &[2, 8]), rand_t(r, &[8]), rand_t(r, &[8]));
            Ok(check_gradients(&[x, gain, bias], FD_STEP, |g, v| g.layernorm(v[0], v[1], v[2], LAYERNORM_EPS))?
                .max_rel_error())
        }),
        ("causal_attention", |r| {
            let (q, k, v) = (rand_t(r, &[8, 4]), rand_t(r, &[8, 4]), rand_t(r, &[8, 4]));
            let layout = AttnLayout {
                batch: 2,
                seq: 4,
                heads: 2,
            };
            let mask = [false, true, true, true, true, true, true, true];
            Ok(
                check_gradients(&[q, k, v], FD_STEP, |g, vs| g.causal_attention(vs[0], vs[1], vs[2], layout, Some(&mask), false))?
                    .max_rel_error(),
            )
        }),
        ("gather_rows", |r| {
            let t = rand_t(r, &[5, 3]);
            Ok(check_gradients(&[t], FD_STEP, |g, v| g.gather_rows(v[0], &[4, 0, 4, 2]))?.max_rel_error())
        }),
        ("concat_rows", |r| {
            let (a, b) = (rand_t(r, &[2, 3]), rand_t(r, &[1, 3]));
            Ok(check_gradients(&[a, b], FD_STEP, |g, v| g.concat_rows(&[v[0], v[1], v[0]]))?.max_rel_error())
        }),
        ("cross_entropy", |r| {
            let logits = rand_t(r, &[3, 6]);
            let targets = [r.random_range(0..6), r.random_range(0..6), r.random_range(0..6)];
            let weights = [1.0, 0.0, 2.0];
            Ok(check_gradients(&[logits], FD_STEP, |g, v| g.cross_entropy(v[0], &targets, Some(&weights)))?
                .max_rel_error())
        }),
        ("mse", |r| {
            let pred = rand_t(r, &[3, 2]);
            let target = rand_t(r, &[3, 2]).into_data();
            Ok(check_gradients(&[pred], FD_STEP, |g, v| g.mse(v[0], &target, Some(&[1.0, 1.0, 0.0])))?.max_rel_error())
        }),
        ("row_normalize", |r| {
            let x = away_from_zero(r, &[3, 4], 0.1);
            Ok(check_gradients(&[x], FD_STEP, |g, v| Ok(g.row_normalize(v[0])))?.max_rel_error())
        }),
        ("row_max", |r| {
            let x = separated_rows(r, 3, 4, 0.05);
            Ok(check_gradients(&[x], FD_STEP, |g, v| Ok(g.row_max(v[0])))?.max_rel_error())
        }),
        ("weighted_sum", |r| {
            let x = rand_t(r, &[2, 3]);
            let w = rand_t(r, &[6]).into_data();
            Ok(check_gradients(&[x], FD_STEP, |g, v| g.weighted_sum(v[0], &w))?.max_rel_error())
        }),
        ("sum_mean", |r| {
            let x = rand_t(r, &[2, 3]);
            Ok(check_gradients(&[x], FD_STEP, |g, v| {
                let s = g.sum(v[0]);
                let m = g.mean(v[0]);
                g.add(s, m)
            })?
            .max_rel_error())
        }),
        ("l_cos", |r| {
            let reps = rand_t(r, &[12, 8]);
            // anchors far apart in angle keep every row's argmax well separated
            let anchors = loop {
                let a = rand_t(r, &[4, 8]);
                let ok = (0..12).all(|i| {
                    let mut sims: Vec<f32> = (0..4).map(|j| cos(reps.row(i), a.row(j))).collect();
                    sims.sort_by(|x, y| y.total_cmp(x));
                    sims[0] - sims[1] > 0.05
                });
                if ok {
                    break EmbeddingAnchors::from_centers(a);
                }
            };
            let weights = vec![1.0; 12];
            Ok(check_gradients(&[reps], FD_STEP, |g, v| l_cos(g, v[0], &anchors, &weights))?.max_rel_error())
        }),
        ("feedforward", |r| block_case(r, Activation::Relu, true)),
        ("transformer_block_relu", |r| block_case(r, Activation::Relu, false)),
        ("transformer_block_gelu", |r| block_case(r, Activation::Gelu, false)),
    ]
}

fn cos(a: &[f32], b: &[f32]) -> f32 {
    let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
    let nb: f32 = b.iter().map(|x| x * x).sum::<f32>().sqrt();
    dot / (na * nb)
}

/// One pre-layernorm block (plus final layernorm) on a 2×4 input with every
/// parameter drawn from U(-1, 1). For ReLU, parameter draws are rejected until
/// all feedforward pre-activations sit clear of the kink.
fn block_case(r: &mut ChaCha8Rng, activation: Activation, ff_only: bool) -> Result<f64> {
    let cfg = TransformerConfig {
        model_dim: 4,
        num_heads: 2,
        num_layers: 1,
        max_positions: 4,
        vocab_size: 3,
        dropout: 0.0,
        activation,
    };
    let layout = SeqLayout { batch: 1, seq: 2 };
    loop {
        let mut m = Transformer::new(cfg.clone(), r)?;
        for (_, t) in m.named_params_mut() {
            for v in t.data_mut() {
                *v = r.random_range(-1.0..1.0);
            }
        }
        let x = rand_t(r, &[2, 4]);
        let xs = x.data().to_vec();
        let forward = move |m: &Transformer, g: &mut Graph| {
            let x = g.constant(vec![2, 4], xs.clone())?;
            if ff_only {
                m.feedforward(g, x, 0)
            } else {
                Ok(m.forward(g, x, layout, &[0, 1], None, false, None)?.0)
            }
        };
        if activation == Activation::Relu && relu_margin(&m, &x, ff_only)? < 0.05 {
            continue;
        }
        let report = check_module_gradients(&mut m, FD_STEP, forward)?;
        return Ok(report.iter().map(|(_, e)| *e).fold(0.0, f64::max));
    }
}

fn relu_margin(m: &Transformer, x: &Tensor, ff_only: bool) -> Result<f32> {
    let mut g = Graph::new();
    let mut h = g.leaf(x);
    if !ff_only {
        let blk = &m.blocks[0];
        let pos = g.param(&m.position_embedding);
        let p = g.gather_rows(pos, &[0, 1])?;
        let x0 = g.add(h, p)?;
        let (gain, bias) = (g.param(&blk.ln1_gain), g.param(&blk.ln1_bias));
        let a_in = g.layernorm(x0, gain, bias, LAYERNORM_EPS)?;
        let (a, _) = m.causal_self_attention(&mut g, a_in, 0, SeqLayout { batch: 1, seq: 2 }, None, false)?;
        let x1 = g.add(x0, a)?;
        let (gain, bias) = (g.param(&blk.ln2_gain), g.param(&blk.ln2_bias));
        h = g.layernorm(x1, gain, bias, LAYERNORM_EPS)?;
    }
    let blk = &m.blocks[0];
    let (w1, b1) = (g.param(&blk.w1), g.param(&blk.b1));
    let pre = g.linear(h, w1, b1)?;
    Ok(g.value(pre).iter().fold(f32::INFINITY, |acc, v| acc.min(v.abs())))
}

/// Runs every case for `seeds` seeds and reports the worst error per op.
pub fn run_suite(seeds: usize) -> Result<Vec<OpReport>> {
    let mut out = Vec::new();
    for (op, case) in cases() {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed as u64);
            worst = worst.max(case(&mut rng)?);
        }
        out.push(OpReport {
            op,
            max_rel_error: worst,
            seeds,
        });
    }
    Ok(out)
}

/// Names of the ops covered by [`run_suite`].
pub fn op_names() -> Vec<&'static str> {
    cases().into_iter().map(|(n, _)| n).collect()
}
