mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use textrl::checkpoint::Checkpoint;
use textrl::envlab::{generate_dataset, Env, Tier};
use textrl::evalkit::{attention_export, finetune, load_decision, rollout, FinetuneConfig, Init};
use textrl::lm::{bits_per_byte, lm_loss, pretrain, sample_windows, Corpus, PretrainConfig, TokenSequence};
use textrl::traj::{build_batch, sample_batch, DecisionConfig, DecisionModel, LossPositions, TrajectoryBatch};
use textrl::transformer::{Transformer, TransformerConfig};
use textrl::{AdamW, AdamWConfig, Graph, Module, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny(max_positions: usize, seed: u64) -> Transformer {
    let cfg = TransformerConfig {
        dropout: 0.0,
        max_positions,
        ..TransformerConfig::preset("tiny").unwrap()
    };
    Transformer::new(cfg, &mut rng(seed)).unwrap()
}

fn decision(env: &Env, context: usize, seed: u64) -> DecisionModel {
    let cfg = DecisionConfig {
        state_dim: env.state_dim(),
        action_space: env.action_space(),
        context,
        rtg_scale: env.default_rtg_scale(),
        max_timestep: env.horizon(),
        loss_positions: LossPositions::State,
    };
    DecisionModel::new(cfg, tiny(3 * context.max(8), seed), &mut rng(seed + 1)).unwrap()
}

fn state_prediction(model: &DecisionModel, batch: &TrajectoryBatch, t: usize) -> Vec<f32> {
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, batch, false, None).unwrap();
    let out = model.predict_rows(&mut g, fwd.hidden, &[3 * t + 1]).unwrap();
    g.value(out).to_vec()
}

#[test]
fn sixteen_bytes_are_memorised() {
    let loss = common::overfit_bytes(b"0123456789abcdef", 600, 0);
    assert!(loss < 0.05, "loss {loss}");
}

#[test]
fn zero_embeddings_give_uniform_loss() {
    let mut model = tiny(32, 3);
    model.token_embedding = Tensor::zeros(model.token_embedding.shape());
    let text = textrl::lm::tokenize(b"a uniform predictor knows nothing");
    let mut g = Graph::new();
    let loss = lm_loss(&model, &mut g, &[text], None).unwrap();
    assert!((g.scalar(loss) - 256f32.ln()).abs() < 1e-5);
}

#[test]
fn smoke_pretraining_lowers_loss() {
    let corpus = Corpus::bundled();
    let cfg = PretrainConfig {
        steps: 120,
        ..PretrainConfig::smoke()
    };
    let out = pretrain(&cfg, &corpus, None).unwrap();
    let head: f32 = out.losses[..10].iter().sum::<f32>() / 10.0;
    let tail: f32 = out.losses[110..].iter().sum::<f32>() / 10.0;
    assert!(tail < head - 0.5, "{head} -> {tail}");
    assert!(out.metrics.iter().all(|m| m.val_bpb >= 0.0));
}

#[test]
fn shuffled_text_scores_worse_after_learning() {
    let text: Vec<u8> = b"the quick brown fox jumps over the lazy dog. ".repeat(40);
    for seed in 0..5u64 {
        let cfg = TransformerConfig {
            dropout: 0.0,
            max_positions: 32,
            ..TransformerConfig::preset("tiny").unwrap()
        };
        let mut model = Transformer::new(cfg, &mut rng(seed)).unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            lr: 3e-3,
            warmup_steps: 0,
            ..AdamWConfig::default()
        });
        let mut r = rng(100 + seed);
        for _ in 0..150 {
            let w = sample_windows(&text, 32, 8, &mut r).unwrap();
            let mut g = Graph::new();
            let loss = lm_loss(&model, &mut g, &w, None).unwrap();
            g.backward(loss).unwrap();
            model.zero_grads();
            model.collect_grads(&g);
            opt.step(&mut model.named_params_mut()).unwrap();
        }
        let mut shuffled = text.clone();
        rand::seq::SliceRandom::shuffle(&mut shuffled[..], &mut r);
        let ordered = bits_per_byte(&model, &text, 32, 20).unwrap();
        let mixed = bits_per_byte(&model, &shuffled, 32, 20).unwrap();
        assert!(mixed > ordered, "seed {seed}: {ordered} vs {mixed}");
    }
}

#[test]
fn action_prediction_ignores_own_and_later_tokens() {
    let env = Env::by_name("pointmass").unwrap();
    let data = generate_dataset(&env, Tier::Medium, 4, 1).unwrap();
    let model = decision(&env, 6, 2);
    let ep = &data.episodes[0];
    let base = build_batch(&[ep], &[3], 6, 10.0, env.action_space()).unwrap();
    let t = 2;
    let sd = env.state_dim();
    let ad = match env.action_space() {
        textrl::traj::ActionSpace::Continuous(d) => d,
        textrl::traj::ActionSpace::Discrete(_) => unreachable!(),
    };
    let before = state_prediction(&model, &base, t);

    let mut later = base.clone();
    if let textrl::traj::BatchActions::Continuous(a) = &mut later.actions {
        // a_t and everything after it
        a[ad * t..].iter_mut().for_each(|x| *x = 0.9);
    }
    later.returns[t + 1..].iter_mut().for_each(|x| *x += 5.0);
    later.states[sd * (t + 1)..].iter_mut().for_each(|x| *x -= 1.0);
    assert_eq!(before, state_prediction(&model, &later, t));

    let mut cond = base.clone();
    cond.returns[t] += 1.0;
    assert_ne!(before, state_prediction(&model, &cond, t));
    let mut st = base;
    st.states[sd * t] += 0.5;
    assert_ne!(before, state_prediction(&model, &st, t));
}

#[test]
fn random_positions_replace_only_the_position_table() {
    let env = Env::by_name("gridworld").unwrap();
    let pre = tiny(30, 4);
    let cfg = decision(&env, 5, 0).config;
    let kept = DecisionModel::from_pretrained(cfg.clone(), pre.clone(), false, &mut rng(9)).unwrap();
    let moved = DecisionModel::from_pretrained(cfg, pre, true, &mut rng(9)).unwrap();
    let a = kept.transformer.named_params();
    let b = moved.transformer.named_params();
    for ((name, x), (_, y)) in a.iter().zip(&b) {
        if name == "wpe" {
            assert_ne!(x.data(), y.data(), "{name}");
        } else {
            assert_eq!(x.data(), y.data(), "{name}");
        }
    }
}

#[test]
fn action_loss_overfits_one_batch() {
    let env = Env::by_name("pointmass").unwrap();
    let data = generate_dataset(&env, Tier::MediumExpert, 6, 5).unwrap();
    let mut model = decision(&env, 4, 6);
    let batch = sample_batch(&data.episodes, 2, &model.config, &mut rng(7)).unwrap();
    let mut opt = AdamW::new(AdamWConfig {
        lr: 3e-3,
        warmup_steps: 0,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    let mut last = f32::INFINITY;
    for _ in 0..800 {
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &batch, false, None).unwrap();
        let loss = model.action_loss(&mut g, &fwd, &batch).unwrap();
        last = g.scalar(loss);
        if last < 1e-3 {
            break;
        }
        g.backward(loss).unwrap();
        model.zero_grads();
        model.collect_grads(&g);
        opt.step(&mut model.named_params_mut()).unwrap();
    }
    assert!(last < 1e-3, "loss {last}");
}

fn short_config() -> FinetuneConfig {
    FinetuneConfig {
        init: Init::Random,
        size: "tiny".into(),
        steps: 30,
        batch: 4,
        eval_every: 15,
        eval_episodes: 2,
        ..FinetuneConfig::desk()
    }
}

#[test]
fn frozen_finetuning_leaves_the_transformer_untouched() {
    let env = Env::by_name("pointmass").unwrap();
    let data = generate_dataset(&env, Tier::Medium, 8, 2).unwrap();
    let corpus = Corpus::bundled();
    let reference = tiny(192, 11);
    let cfg = FinetuneConfig {
        init: Init::Pretrained,
        freeze: true,
        ..short_config()
    };
    let out = finetune(&cfg, &data, &env, Some(&reference), Some(&corpus), 0, "frozen").unwrap();
    for ((name, a), (_, b)) in out.model.transformer.named_params().iter().zip(reference.named_params()) {
        assert_eq!(a.data(), b.data(), "{name} moved");
    }
    let fresh = DecisionModel::from_pretrained(out.model.config.clone(), reference, false, &mut rng(0)).unwrap();
    assert_ne!(fresh.proj, out.model.proj);
}

#[test]
fn decision_checkpoint_reproduces_predictions() {
    let env = Env::by_name("gridworld").unwrap();
    let data = generate_dataset(&env, Tier::Medium, 6, 3).unwrap();
    let cfg = FinetuneConfig {
        loss: textrl::aux::LossConfig::trajectory_only(),
        ..short_config()
    };
    let out = finetune(&cfg, &data, &env, None, None, 1, "dt").unwrap();
    let back = load_decision(&Checkpoint::from_bytes(&out.checkpoint().to_bytes()).unwrap()).unwrap();
    assert_eq!(back, out.model);
    let batch = sample_batch(&data.episodes, 1, &out.model.config, &mut rng(2)).unwrap();
    let (a, b) = (out.model.predict_last(&batch).unwrap(), back.predict_last(&batch).unwrap());
    assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
}

#[test]
fn context_beyond_the_horizon_changes_nothing() {
    let env = Env::by_name("gridworld").unwrap();
    let model = decision(&env, env.horizon() + 6, 8);
    let a = rollout(&model, &env, 1.0, env.horizon(), &mut rng(5)).unwrap();
    let b = rollout(&model, &env, 1.0, env.horizon() + 6, &mut rng(5)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn exported_attention_is_causal_and_stochastic() {
    let env = Env::by_name("pointmass").unwrap();
    let data = generate_dataset(&env, Tier::Medium, 3, 4).unwrap();
    let model = decision(&env, 5, 3);
    // a two-step window is left-padded to five
    let batch = build_batch(&[&data.episodes[0]], &[data.episodes[0].len() - 2], 5, 10.0, env.action_space()).unwrap();
    let maps = attention_export(&model, &batch, 0, 0.1).unwrap();
    let valid = batch.token_mask();
    assert_eq!(maps.len(), 2);
    for m in &maps {
        for map in [&m.mean, &m.tempered] {
            for i in 0..m.seq {
                let row = &map[i * m.seq..(i + 1) * m.seq];
                assert!((row.iter().map(|&p| p as f64).sum::<f64>() - 1.0).abs() < 1e-6);
                for j in 0..m.seq {
                    if j > i || (j != i && !valid[j]) {
                        assert_eq!(row[j], 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn lm_loss_rejects_single_token_windows() {
    let model = tiny(8, 0);
    let mut g = Graph::new();
    let w = TokenSequence {
        tokens: vec![1],
        offset: 0,
    };
    assert!(lm_loss(&model, &mut g, &[w], None).is_err());
}
