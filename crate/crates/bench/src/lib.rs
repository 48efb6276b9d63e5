//! Fixtures shared by the criterion benches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use textrl::envlab::{generate_dataset, Env, Tier};
use textrl::traj::{sample_batch, DecisionConfig, DecisionModel, LossPositions, TrajectoryBatch};
use textrl::transformer::{Transformer, TransformerConfig};
use textrl::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::randn(&[rows, cols], 1.0, &mut rng(seed))
}

pub fn transformer(size: &str) -> Transformer {
    let cfg = TransformerConfig::preset(size).expect("known preset");
    Transformer::new(cfg, &mut rng(0)).expect("valid preset")
}

/// A PointMass policy on top of `size` with a sampled batch to feed it.
pub fn decision_fixture(size: &str, context: usize, batch: usize) -> (DecisionModel, TrajectoryBatch) {
    let env = Env::by_name("pointmass").expect("bundled env");
    let data = generate_dataset(&env, Tier::MediumExpert, 20, 0).expect("dataset");
    let cfg = DecisionConfig {
        state_dim: env.state_dim(),
        action_space: env.action_space(),
        context,
        rtg_scale: env.default_rtg_scale(),
        max_timestep: env.horizon(),
        loss_positions: LossPositions::State,
    };
    let mut r = rng(1);
    let model = DecisionModel::from_pretrained(cfg, transformer(size), false, &mut r).expect("model");
    let b = sample_batch(&data.episodes, batch, &model.config, &mut r).expect("batch");
    (model, b)
}
