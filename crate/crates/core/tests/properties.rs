mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use textrl::aux::{kmeans, l_cos, lambda_schedule, EmbeddingAnchors};
use textrl::checkpoint::Checkpoint;
use textrl::evalkit::{bootstrap_ci, convergence_step, normalized_score};
use textrl::traj::compute_returns_to_go;
use textrl::transformer::{sequential_positions, SeqLayout, Transformer, TransformerConfig};
use textrl::{Graph, Tensor};

use common::{bootstrap_oracle, l_cos_oracle, returns_to_go_oracle};

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 48,
        ..ProptestConfig::default()
    }
}

fn rows(n: std::ops::Range<usize>, dim: usize) -> impl Strategy<Value = Vec<f32>> {
    n.prop_flat_map(move |r| prop::collection::vec(-1.0f32..1.0, r * dim))
        // a zero row has no direction
        .prop_filter("nonzero rows", move |v| v.chunks(dim).all(|c| c.iter().any(|x| x.abs() > 1e-3)))
}

fn l_cos_value(reps: &[f32], anchors: &EmbeddingAnchors, weights: &[f32]) -> f32 {
    let mut g = Graph::new();
    let x = g.constant(vec![weights.len(), anchors.dim], reps.to_vec()).unwrap();
    let l = l_cos(&mut g, x, anchors, weights).unwrap();
    g.scalar(l)
}

fn anchors(data: &[f32], dim: usize) -> EmbeddingAnchors {
    EmbeddingAnchors::from_centers(Tensor::new(vec![data.len() / dim, dim], data.to_vec()).unwrap())
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn softmax_rows_are_distributions(data in prop::collection::vec(-30.0f32..30.0, 1..8).prop_flat_map(|r| {
        let w = r.len();
        prop::collection::vec(-30.0f32..30.0, w * 5).prop_map(move |v| (v, w))
    })) {
        let (v, w) = data;
        let mut g = Graph::new();
        let x = g.constant(vec![5, w], v).unwrap();
        let p = g.softmax(x).unwrap();
        for row in g.value(p).chunks(w) {
            prop_assert!(row.iter().all(|&q| (0.0..=1.0).contains(&q)));
            let s: f64 = row.iter().map(|&q| q as f64).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6, "row sums to {s}");
        }
    }

    #[test]
    fn future_tokens_never_reach_the_past(seed in any::<u64>(), t in 1usize..8, new_token in 0usize..256) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = TransformerConfig { model_dim: 16, num_heads: 2, num_layers: 2, max_positions: 8, ..TransformerConfig::default() };
        let model = Transformer::new(cfg, &mut rng).unwrap();
        let tokens: Vec<usize> = (0..8).map(|i| (seed as usize + 31 * i) % 256).collect();
        let mut changed = tokens.clone();
        changed[t] = new_token;
        let layout = SeqLayout { batch: 1, seq: 8 };
        let run = |toks: &[usize]| {
            let mut g = Graph::new();
            let x = model.embed_tokens(&mut g, toks).unwrap();
            let (h, _) = model.forward(&mut g, x, layout, &sequential_positions(layout), None, false, None).unwrap();
            g.value(h).to_vec()
        };
        let (a, b) = (run(&tokens), run(&changed));
        // bit-identical rows before the perturbed one
        prop_assert_eq!(&a[..t * 16], &b[..t * 16]);
    }

    #[test]
    fn returns_to_go_follow_the_recurrence(rewards in prop::collection::vec(-10.0f32..10.0, 1..60)) {
        let r = compute_returns_to_go(&rewards);
        let n = rewards.len();
        prop_assert_eq!(r[n - 1], rewards[n - 1]);
        for i in 0..n - 1 {
            prop_assert_eq!(r[i], rewards[i] + r[i + 1]);
        }
        for (x, y) in r.iter().zip(returns_to_go_oracle(&rewards)) {
            prop_assert!((x - y).abs() <= 1e-5 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn l_cos_matches_double_loop(reps in rows(1..10, 6), cents in rows(1..8, 6), w in prop::collection::vec(0.0f32..2.0, 10)) {
        let n = reps.len() / 6;
        let weights = &w[..n];
        let got = l_cos_value(&reps, &anchors(&cents, 6), weights) as f64;
        let want = l_cos_oracle(&reps, &cents, 6, weights);
        prop_assert!((got - want).abs() <= 1e-5, "{got} vs {want}");
    }

    #[test]
    fn l_cos_ignores_positive_scale(reps in rows(1..7, 4), cents in rows(1..6, 4), row in 0usize..7, anchor in 0usize..6, s in 0.01f32..100.0) {
        let n = reps.len() / 4;
        let ones = vec![1.0; n];
        let base = l_cos_value(&reps, &anchors(&cents, 4), &ones);
        let mut r2 = reps.clone();
        r2[(row % n) * 4..(row % n + 1) * 4].iter_mut().for_each(|x| *x *= s);
        let mut c2 = cents.clone();
        let k = cents.len() / 4;
        c2[(anchor % k) * 4..(anchor % k + 1) * 4].iter_mut().for_each(|x| *x *= s);
        let scaled = l_cos_value(&r2, &anchors(&c2, 4), &ones);
        prop_assert!((base - scaled).abs() <= 1e-6, "{base} vs {scaled}");
    }

    #[test]
    fn l_cos_is_bounded_by_token_count(reps in rows(1..12, 5), cents in rows(1..6, 5)) {
        let n = reps.len() / 5;
        let l = l_cos_value(&reps, &anchors(&cents, 5), &vec![1.0; n]);
        prop_assert!(l >= -(n as f32) - 1e-5 && l <= n as f32 + 1e-5);
    }

    #[test]
    fn clustering_every_row_changes_nothing(table in rows(2..9, 3), reps in rows(1..6, 3), seed in any::<u64>()) {
        let v = table.len() / 3;
        // distinct rows are required for K = V to be a saturation point
        let distinct = (0..v).all(|i| (0..i).all(|j| table[i * 3..i * 3 + 3] != table[j * 3..j * 3 + 3]));
        prop_assume!(distinct);
        let km = kmeans(&table, 3, v, seed).unwrap();
        let mut got: Vec<&[f32]> = km.centers.chunks(3).collect();
        let mut want: Vec<&[f32]> = table.chunks(3).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        prop_assert_eq!(&got, &want);
        let ones = vec![1.0; reps.len() / 3];
        let clustered = l_cos_value(&reps, &anchors(&km.centers, 3), &ones);
        let raw = l_cos_value(&reps, &anchors(&table, 3), &ones);
        prop_assert_eq!(clustered, raw);
    }

    #[test]
    fn lambda_decays_monotonically_to_zero(initial in 0.0f32..5.0, end in 1u64..10_000, a in 0u64..20_000, b in 0u64..20_000) {
        let (lo, hi) = (a.min(b), a.max(b));
        let (x, y) = (lambda_schedule(lo, initial, end), lambda_schedule(hi, initial, end));
        prop_assert!(y <= x);
        prop_assert!((0.0..=initial).contains(&x));
        prop_assert_eq!(lambda_schedule(end + a, initial, end), 0.0);
        prop_assert_eq!(lambda_schedule(0, initial, end), initial);
    }

    #[test]
    fn normalized_score_is_affine_invariant(
        score in -1e3f64..1e3, random in -1e3f64..0.0, gap in 1.0f64..1e3, scale in 0.01f64..100.0, shift in -1e4f64..1e4,
    ) {
        let expert = random + gap;
        let base = normalized_score(score, random, expert).unwrap();
        let moved = normalized_score(scale * score + shift, scale * random + shift, scale * expert + shift).unwrap();
        prop_assert!((base - moved).abs() <= 1e-6 * (1.0 + base.abs()), "{base} vs {moved}");
    }

    #[test]
    fn raising_points_below_the_best_never_delays_convergence(
        curve in prop::collection::vec(0.0f64..100.0, 1..20),
        lifts in prop::collection::vec(0.0f64..1.0, 20),
    ) {
        let steps: Vec<(u64, f64)> = curve.iter().enumerate().map(|(i, &s)| (100 * (i as u64 + 1), s)).collect();
        let best = curve.iter().copied().fold(f64::MIN, f64::max);
        // each point moves a random fraction of its way up to the best
        let better: Vec<(u64, f64)> = steps.iter().zip(&lifts).map(|(&(t, s), f)| (t, s + f * (best - s))).collect();
        prop_assert!(convergence_step(&better).unwrap() <= convergence_step(&steps).unwrap());
        prop_assert!(convergence_step(&steps).unwrap() <= steps.last().unwrap().0);
    }

    #[test]
    fn bootstrap_matches_loop_oracle(scores in prop::collection::vec(-50.0f64..150.0, 2..12), seed in any::<u64>(), resamples in 1usize..400) {
        let got = bootstrap_ci(&scores, resamples, 0.95, seed).unwrap();
        prop_assert_eq!(got, bootstrap_oracle(&scores, resamples, 0.95, seed));
        prop_assert!(got.0 <= got.1);
    }

    #[test]
    fn bootstrap_of_constant_scores_has_zero_width(c in -100.0f64..100.0, n in 1usize..10, seed in any::<u64>()) {
        let (lo, hi) = bootstrap_ci(&vec![c; n], 500, 0.9, seed).unwrap();
        prop_assert_eq!(lo, hi);
        prop_assert!((lo - c).abs() <= 1e-12 * (1.0 + c.abs()));
    }

    #[test]
    fn checkpoint_bytes_round_trip(values in prop::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), 1..40), step in any::<u64>()) {
        let n = values.len();
        let ck = Checkpoint {
            kind: "test".into(),
            config: serde_json::json!({"n": n}),
            step,
            tensors: vec![("w".into(), Tensor::new(vec![n], values).unwrap())],
            optimizer: None,
            rng: None,
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        prop_assert_eq!(back, ck);
    }
}

#[test]
fn convergence_can_move_later_when_the_best_rises() {
    // raising the peak itself is not covered by the monotonicity property
    let before = [(100, 9.0), (200, 10.0)];
    let after = [(100, 9.0), (200, 20.0)];
    assert_eq!(convergence_step(&before).unwrap(), 100);
    assert_eq!(convergence_step(&after).unwrap(), 200);
}
