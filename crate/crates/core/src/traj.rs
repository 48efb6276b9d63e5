//! Return-conditioned trajectory modelling: returns-to-go, interleaved
//! (return, state, action) token windows and an action head on top of a
//! (possibly language-pretrained) transformer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::Module;
use crate::tensor::{Graph, Tensor, Var};
use crate::transformer::{AttentionRecord, SeqLayout, TrainRng, Transformer};

/// Undiscounted suffix sums, accumulated back to front so that
/// `R[i] == r[i] + R[i + 1]` holds exactly in f32.
pub fn compute_returns_to_go(rewards: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0f32; rewards.len()];
    let mut acc = 0.0f32;
    for i in (0..rewards.len()).rev() {
        acc = if i + 1 == rewards.len() { rewards[i] } else { rewards[i] + acc };
        out[i] = acc;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "size")]
pub enum ActionSpace {
    /// Real vectors of the given dimension, each component in [-1, 1].
    Continuous(usize),
    /// One of the given number of choices.
    Discrete(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Actions {
    Discrete(Vec<usize>),
    Continuous(Vec<Vec<f32>>),
}

impl Actions {
    pub fn len(&self) -> usize {
        match self {
            Actions::Continuous(a) => a.len(),
            Actions::Discrete(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One episode. `returns_to_go` is derived from `rewards` and not stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f32>>,
    pub actions: Actions,
    pub rewards: Vec<f32>,
    #[serde(skip)]
    pub returns_to_go: Vec<f32>,
}

impl Trajectory {
    pub fn new(states: Vec<Vec<f32>>, actions: Actions, rewards: Vec<f32>) -> Result<Self> {
        let mut t = Trajectory {
            states,
            actions,
            rewards,
            returns_to_go: Vec::new(),
        };
        t.finish()?;
        Ok(t)
    }

    /// Validates lengths and recomputes returns-to-go; call after deserialising.
    pub fn finish(&mut self) -> Result<()> {
        let n = self.rewards.len();
        if n == 0 {
            return Err(Error::Degenerate("empty trajectory".into()));
        }
        if self.states.len() != n || self.actions.len() != n {
            return Err(Error::Shape {
                op: "trajectory",
                lhs: vec![self.states.len(), self.actions.len()],
                rhs: vec![n],
            });
        }
        let sd = self.states[0].len();
        if self.states.iter().any(|s| s.len() != sd) {
            return Err(Error::Contract("states differ in dimension".into()));
        }
        if let Actions::Continuous(a) = &self.actions {
            let ad = a[0].len();
            if a.iter().any(|x| x.len() != ad) {
                return Err(Error::Contract("actions differ in dimension".into()));
            }
        }
        self.returns_to_go = compute_returns_to_go(&self.rewards);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn total_return(&self) -> f32 {
        self.returns_to_go[0]
    }

    pub fn check_space(&self, space: ActionSpace) -> Result<()> {
        match (&self.actions, space) {
            (Actions::Continuous(a), ActionSpace::Continuous(d)) if a[0].len() == d => Ok(()),
            (Actions::Discrete(a), ActionSpace::Discrete(n)) => match a.iter().find(|&&x| x >= n) {
                Some(&x) => Err(Error::Vocabulary { id: x, vocab: n }),
                None => Ok(()),
            },
            _ => Err(Error::Modality(format!("trajectory actions do not fit {space:?}"))),
        }
    }
}

/// Which hidden states predict `a_t`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossPositions {
    /// Only the `s_t` token.
    #[default]
    State,
    /// The `s_t`, `R̂_t` and `a_{t-1}` tokens, none of which can see `a_t`.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionConfig {
    pub state_dim: usize,
    pub action_space: ActionSpace,
    /// Timesteps per window (`K`); the model sees `3K` tokens.
    pub context: usize,
    /// Returns are divided by this before the return projection.
    pub rtg_scale: f32,
    /// Size of the learned timestep table.
    pub max_timestep: usize,
    #[serde(default)]
    pub loss_positions: LossPositions,
}

impl DecisionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context == 0 {
            return Err(Error::Config("context must be at least 1".into()));
        }
        if !(self.rtg_scale > 0.0 && self.rtg_scale.is_finite()) {
            return Err(Error::Config(format!("rtg_scale {} must be positive", self.rtg_scale)));
        }
        if self.state_dim == 0 || self.max_timestep == 0 {
            return Err(Error::Config("state_dim and max_timestep must be positive".into()));
        }
        match self.action_space {
            ActionSpace::Continuous(0) | ActionSpace::Discrete(0) => Err(Error::Config("empty action space".into())),
            _ => Ok(()),
        }
    }

    fn action_width(&self) -> usize {
        match self.action_space {
            ActionSpace::Continuous(d) | ActionSpace::Discrete(d) => d,
        }
    }
}

/// Batch targets in the layout of the action space.
#[derive(Clone, Debug, PartialEq)]
pub enum BatchActions {
    Continuous(Vec<f32>),
    Discrete(Vec<usize>),
}

/// `batch` windows of `context` timesteps, left-padded. Per-timestep arrays
/// are `[batch · context]` (times the feature width); tokens are ordered
/// `(R̂_t, s_t, a_t)` for every timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBatch {
    pub batch: usize,
    pub context: usize,
    pub returns: Vec<f32>,
    pub states: Vec<f32>,
    pub actions: BatchActions,
    pub timesteps: Vec<usize>,
    /// Per timestep; false for left padding.
    pub valid: Vec<bool>,
}

impl TrajectoryBatch {
    pub fn tokens(&self) -> usize {
        3 * self.batch * self.context
    }

    /// Per-token validity, three entries per timestep.
    pub fn token_mask(&self) -> Vec<bool> {
        self.valid.iter().flat_map(|&v| [v, v, v]).collect()
    }

    /// Interleaved positions: real tokens of a window count up from 0, padding
    /// sits at 0 (it is masked, so the value is never seen).
    pub fn positions(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.tokens());
        for b in 0..self.batch {
            let row = &self.valid[b * self.context..(b + 1) * self.context];
            let pad = row.iter().take_while(|v| !**v).count();
            for (k, &v) in row.iter().enumerate() {
                for m in 0..3 {
                    out.push(if v { 3 * (k - pad) + m } else { 0 });
                }
            }
        }
        out
    }

    pub fn valid_timesteps(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Builds one left-padded window per `(trajectory, start)` pair covering
/// timesteps `start .. min(start + context, len)`.
pub fn build_batch(
    trajectories: &[&Trajectory],
    starts: &[usize],
    context: usize,
    rtg_scale: f32,
    space: ActionSpace,
) -> Result<TrajectoryBatch> {
    if context == 0 {
        return Err(Error::Config("context must be at least 1".into()));
    }
    if !(rtg_scale > 0.0) {
        return Err(Error::Config(format!("rtg_scale {rtg_scale} must be positive")));
    }
    if trajectories.is_empty() || trajectories.len() != starts.len() {
        return Err(Error::Contract("one start per trajectory is required".into()));
    }
    let sd = trajectories[0].state_dim();
    let b = trajectories.len();
    let mut returns = vec![0.0; b * context];
    let mut states = vec![0.0; b * context * sd];
    let mut timesteps = vec![0; b * context];
    let mut valid = vec![false; b * context];
    let mut actions = match space {
        ActionSpace::Continuous(d) => BatchActions::Continuous(vec![0.0; b * context * d]),
        ActionSpace::Discrete(_) => BatchActions::Discrete(vec![0; b * context]),
    };
    for (i, (traj, &start)) in trajectories.iter().zip(starts).enumerate() {
        if traj.is_empty() {
            return Err(Error::Degenerate("empty trajectory".into()));
        }
        if traj.state_dim() != sd {
            return Err(Error::Shape {
                op: "batch states",
                lhs: vec![traj.state_dim()],
                rhs: vec![sd],
            });
        }
        traj.check_space(space)?;
        if start >= traj.len() {
            return Err(Error::Contract(format!("window start {start} beyond length {}", traj.len())));
        }
        let end = (start + context).min(traj.len());
        let pad = context - (end - start);
        for (k, t) in (start..end).enumerate() {
            let slot = i * context + pad + k;
            returns[slot] = traj.returns_to_go[t] / rtg_scale;
            states[slot * sd..(slot + 1) * sd].copy_from_slice(&traj.states[t]);
            timesteps[slot] = t;
            valid[slot] = true;
            match (&mut actions, &traj.actions) {
                (BatchActions::Continuous(dst), Actions::Continuous(src)) => {
                    let d = src[t].len();
                    dst[slot * d..(slot + 1) * d].copy_from_slice(&src[t]);
                }
                (BatchActions::Discrete(dst), Actions::Discrete(src)) => dst[slot] = src[t],
                _ => unreachable!("checked by check_space"),
            }
        }
    }
    Ok(TrajectoryBatch {
        batch: b,
        context,
        returns,
        states,
        actions,
        timesteps,
        valid,
    })
}

/// Random windows: trajectories uniformly, starts uniformly over timesteps.
pub fn sample_batch<R: Rng + ?Sized>(
    data: &[Trajectory],
    batch: usize,
    config: &DecisionConfig,
    rng: &mut R,
) -> Result<TrajectoryBatch> {
    if data.is_empty() {
        return Err(Error::Degenerate("empty dataset".into()));
    }
    let mut picks = Vec::with_capacity(batch);
    let mut starts = Vec::with_capacity(batch);
    for _ in 0..batch {
        let t = &data[rng.random_range(0..data.len())];
        picks.push(t);
        starts.push(rng.random_range(0..t.len()));
    }
    build_batch(&picks, &starts, config.context, config.rtg_scale, config.action_space)
}

/// Linear maps from each modality into the model width, the timestep table
/// and the action head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityProjections {
    pub return_w: Tensor,
    pub return_b: Tensor,
    pub state_w: Tensor,
    pub state_b: Tensor,
    /// `[action_dim, n]` for continuous actions, a `[choices, n]` table for discrete.
    pub action_w: Tensor,
    pub action_b: Tensor,
    pub timestep: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

const PROJ_STD: f32 = 0.02;

impl ModalityProjections {
    pub fn new<R: Rng + ?Sized>(config: &DecisionConfig, n: usize, rng: &mut R) -> Self {
        let a = config.action_width();
        ModalityProjections {
            return_w: Tensor::randn(&[1, n], PROJ_STD, rng),
            return_b: Tensor::zeros(&[n]),
            state_w: Tensor::randn(&[config.state_dim, n], PROJ_STD, rng),
            state_b: Tensor::zeros(&[n]),
            action_w: Tensor::randn(&[a, n], PROJ_STD, rng),
            action_b: Tensor::zeros(&[n]),
            timestep: Tensor::randn(&[config.max_timestep, n], PROJ_STD, rng),
            head_w: Tensor::randn(&[n, a], PROJ_STD, rng),
            head_b: Tensor::zeros(&[a]),
        }
    }
}

impl Module for ModalityProjections {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("proj.return.w".into(), &self.return_w),
            ("proj.return.b".into(), &self.return_b),
            ("proj.state.w".into(), &self.state_w),
            ("proj.state.b".into(), &self.state_b),
            ("proj.action.w".into(), &self.action_w),
            ("proj.action.b".into(), &self.action_b),
            ("proj.timestep".into(), &self.timestep),
            ("head.w".into(), &self.head_w),
            ("head.b".into(), &self.head_b),
        ]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("proj.return.w".into(), &mut self.return_w),
            ("proj.return.b".into(), &mut self.return_b),
            ("proj.state.w".into(), &mut self.state_w),
            ("proj.state.b".into(), &mut self.state_b),
            ("proj.action.w".into(), &mut self.action_w),
            ("proj.action.b".into(), &mut self.action_b),
            ("proj.timestep".into(), &mut self.timestep),
            ("head.w".into(), &mut self.head_w),
            ("head.b".into(), &mut self.head_b),
        ]
    }
}

/// Graph nodes produced by one forward pass.
pub struct DecisionForward {
    /// Interleaved input representations, `[3·B·K, n]`, before positions.
    pub embedded: Var,
    pub hidden: Var,
    pub attention: Option<AttentionRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecisionModel {
    pub config: DecisionConfig,
    pub transformer: Transformer,
    pub proj: ModalityProjections,
}

impl DecisionModel {
    /// Wraps `transformer` (pretrained or fresh) with new projections.
    pub fn new<R: Rng + ?Sized>(config: DecisionConfig, transformer: Transformer, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let need = 3 * config.context;
        if transformer.config.max_positions < need {
            return Err(Error::ContextLength {
                len: need,
                max: transformer.config.max_positions,
            });
        }
        let proj = ModalityProjections::new(&config, transformer.config.model_dim, rng);
        Ok(DecisionModel {
            config,
            transformer,
            proj,
        })
    }

    /// Pretrained transformer, optionally with its positional table replaced by
    /// a fresh random one.
    pub fn from_pretrained<R: Rng + ?Sized>(
        config: DecisionConfig,
        mut transformer: Transformer,
        random_positions: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if random_positions {
            transformer.reinit_positions(rng);
        }
        Self::new(config, transformer, rng)
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.transformer.set_frozen(frozen);
    }

    /// Interleaved token embeddings: each modality projected, plus the
    /// timestep embedding of its step.
    pub fn embed(&self, g: &mut Graph, batch: &TrajectoryBatch) -> Result<Var> {
        let (b, k) = (batch.batch, batch.context);
        let rows = b * k;
        if let Some(&t) = batch.timesteps.iter().max() {
            if t >= self.config.max_timestep {
                return Err(Error::ContextLength {
                    len: t + 1,
                    max: self.config.max_timestep,
                });
            }
        }
        let sd = self.config.state_dim;
        if batch.states.len() != rows * sd {
            return Err(Error::Shape {
                op: "state projection",
                lhs: vec![batch.states.len() / rows.max(1)],
                rhs: vec![sd],
            });
        }
        let p = &self.proj;
        let (rw, rb) = (g.param(&p.return_w), g.param(&p.return_b));
        let ret_in = g.constant(vec![rows, 1], batch.returns.clone())?;
        let r = g.linear(ret_in, rw, rb)?;
        let (sw, sb) = (g.param(&p.state_w), g.param(&p.state_b));
        let st_in = g.constant(vec![rows, sd], batch.states.clone())?;
        let s = g.linear(st_in, sw, sb)?;
        let (aw, ab) = (g.param(&p.action_w), g.param(&p.action_b));
        let a = match (&batch.actions, self.config.action_space) {
            (BatchActions::Continuous(x), ActionSpace::Continuous(d)) => {
                let a_in = g.constant(vec![rows, d], x.clone())?;
                g.linear(a_in, aw, ab)?
            }
            (BatchActions::Discrete(ids), ActionSpace::Discrete(_)) => {
                let e = g.gather_rows(aw, ids)?;
                g.add_bias(e, ab)?
            }
            _ => return Err(Error::Modality("batch actions do not match the action head".into())),
        };
        let table = g.param(&p.timestep);
        let te = g.gather_rows(table, &batch.timesteps)?;
        let r = g.add(r, te)?;
        let s = g.add(s, te)?;
        let a = g.add(a, te)?;
        let stacked = g.concat_rows(&[r, s, a])?;
        let order: Vec<usize> = (0..rows).flat_map(|i| [i, rows + i, 2 * rows + i]).collect();
        g.gather_rows(stacked, &order)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        batch: &TrajectoryBatch,
        capture: bool,
        rng: TrainRng<'_>,
    ) -> Result<DecisionForward> {
        if batch.context > self.config.context {
            return Err(Error::ContextLength {
                len: 3 * batch.context,
                max: 3 * self.config.context,
            });
        }
        let embedded = self.embed(g, batch)?;
        let layout = SeqLayout {
            batch: batch.batch,
            seq: 3 * batch.context,
        };
        let mask = batch.token_mask();
        let (hidden, attention) =
            self.transformer
                .forward(g, embedded, layout, &batch.positions(), Some(&mask), capture, rng)?;
        Ok(DecisionForward {
            embedded,
            hidden,
            attention,
        })
    }

    /// Head output for the given hidden rows: tanh-squashed actions for a
    /// continuous space, logits for a discrete one.
    pub fn predict_rows(&self, g: &mut Graph, hidden: Var, rows: &[usize]) -> Result<Var> {
        let h = g.gather_rows(hidden, rows)?;
        let (w, b) = (g.param(&self.proj.head_w), g.param(&self.proj.head_b));
        let out = g.linear(h, w, b)?;
        Ok(match self.config.action_space {
            ActionSpace::Continuous(_) => g.tanh(out),
            ActionSpace::Discrete(_) => out,
        })
    }

    /// Action loss of a forward pass: MSE for continuous actions,
    /// cross-entropy for discrete ones, over valid timesteps only.
    pub fn action_loss(&self, g: &mut Graph, fwd: &DecisionForward, batch: &TrajectoryBatch) -> Result<Var> {
        let k = batch.context;
        let mut rows = Vec::new();
        let mut steps = Vec::new();
        for b in 0..batch.batch {
            for t in 0..k {
                let slot = b * k + t;
                if !batch.valid[slot] {
                    continue;
                }
                let base = 3 * slot;
                rows.push(base + 1);
                steps.push(slot);
                if self.config.loss_positions == LossPositions::All {
                    rows.push(base);
                    steps.push(slot);
                    if t > 0 && batch.valid[slot - 1] {
                        rows.push(base - 1);
                        steps.push(slot);
                    }
                }
            }
        }
        if rows.is_empty() {
            log::warn!("action loss on a fully masked batch; returning 0");
            return g.constant(vec![1], vec![0.0]);
        }
        let pred = self.predict_rows(g, fwd.hidden, &rows)?;
        match (&batch.actions, self.config.action_space) {
            (BatchActions::Continuous(a), ActionSpace::Continuous(d)) => {
                let target: Vec<f32> = steps.iter().flat_map(|&s| a[s * d..(s + 1) * d].iter().copied()).collect();
                g.mse(pred, &target, None)
            }
            (BatchActions::Discrete(a), ActionSpace::Discrete(_)) => {
                let target: Vec<usize> = steps.iter().map(|&s| a[s]).collect();
                g.cross_entropy(pred, &target, None)
            }
            _ => Err(Error::Modality("batch actions do not match the action head".into())),
        }
    }

    /// Prediction for the last timestep of a single-window batch.
    pub fn predict_last(&self, batch: &TrajectoryBatch) -> Result<Vec<f32>> {
        if batch.batch != 1 {
            return Err(Error::Contract("prediction expects a batch of one window".into()));
        }
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, batch, false, None)?;
        let row = 3 * (batch.context - 1) + 1;
        let out = self.predict_rows(&mut g, fwd.hidden, &[row])?;
        Ok(g.value(out).to_vec())
    }
}

impl Module for DecisionModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.transformer.named_params();
        v.extend(self.proj.named_params());
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = self.transformer.named_params_mut();
        v.extend(self.proj.named_params_mut());
        v
    }
}
