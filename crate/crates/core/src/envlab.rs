//! Deterministic toy environments, scripted behaviour policies and offline
//! dataset generation in medium / medium-expert / medium-replay tiers.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::traj::{ActionSpace, Actions, Trajectory};

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Continuous(Vec<f32>),
    Discrete(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub obs: Vec<f32>,
    pub t: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub next: EnvState,
    pub reward: f32,
    pub done: bool,
}

/// 8×8 grid, four moves, reward 1 on reaching the goal corner.
#[derive(Clone, Debug, PartialEq)]
pub struct GridWorld {
    pub size: usize,
    pub goal: (usize, usize),
    pub horizon: usize,
}

impl Default for GridWorld {
    fn default() -> Self {
        GridWorld {
            size: 8,
            goal: (7, 7),
            horizon: 30,
        }
    }
}

/// Moves as `(dx, dy)`: up, down, right, left.
const MOVES: [(i64, i64); 4] = [(0, 1), (0, -1), (1, 0), (-1, 0)];

impl GridWorld {
    fn cell(&self, obs: &[f32]) -> (usize, usize) {
        let s = (self.size - 1) as f32;
        ((obs[0] * s).round() as usize, (obs[1] * s).round() as usize)
    }

    fn obs(&self, (x, y): (usize, usize)) -> Vec<f32> {
        let s = (self.size - 1) as f32;
        vec![x as f32 / s, y as f32 / s]
    }
}

/// Point in the plane driven by bounded acceleration towards the origin.
#[derive(Clone, Debug, PartialEq)]
pub struct PointMass {
    pub dt: f32,
    pub horizon: usize,
    /// Episode ends once the point is this close to the goal.
    pub goal_radius: f32,
}

impl Default for PointMass {
    fn default() -> Self {
        PointMass {
            dt: 0.1,
            horizon: 50,
            goal_radius: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Env {
    GridWorld(GridWorld),
    PointMass(PointMass),
}

impl Env {
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "gridworld" => Ok(Env::GridWorld(GridWorld::default())),
            "pointmass" => Ok(Env::PointMass(PointMass::default())),
            other => Err(Error::Config(format!("unknown environment `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Env::GridWorld(_) => "gridworld",
            Env::PointMass(_) => "pointmass",
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Env::GridWorld(_) => 2,
            Env::PointMass(_) => 4,
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        match self {
            Env::GridWorld(_) => ActionSpace::Discrete(4),
            Env::PointMass(_) => ActionSpace::Continuous(2),
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            Env::GridWorld(g) => g.horizon,
            Env::PointMass(p) => p.horizon,
        }
    }

    /// Return scale that maps episode returns to order one.
    pub fn default_rtg_scale(&self) -> f32 {
        match self {
            Env::GridWorld(_) => 1.0,
            Env::PointMass(_) => 10.0,
        }
    }

    /// Random start: any non-goal cell, or a resting point in `[-1, 1]²`
    /// outside the goal radius.
    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> EnvState {
        match self {
            Env::GridWorld(g) => loop {
                let c = (rng.random_range(0..g.size), rng.random_range(0..g.size));
                if c != g.goal {
                    return EnvState { obs: g.obs(c), t: 0 };
                }
            },
            Env::PointMass(p) => loop {
                let (x, y) = (rng.random_range(-1.0f32..1.0), rng.random_range(-1.0f32..1.0));
                if (x * x + y * y).sqrt() > 4.0 * p.goal_radius {
                    return EnvState {
                        obs: vec![x, y, 0.0, 0.0],
                        t: 0,
                    };
                }
            },
        }
    }

    /// Deterministic transition. Discrete actions outside the action set are
    /// rejected; continuous components are clamped to `[-1, 1]`.
    pub fn step(&self, state: &EnvState, action: &Action) -> Result<Transition> {
        if state.obs.len() != self.state_dim() {
            return Err(Error::Shape {
                op: "env step",
                lhs: vec![state.obs.len()],
                rhs: vec![self.state_dim()],
            });
        }
        let t = state.t + 1;
        match (self, action) {
            (Env::GridWorld(g), Action::Discrete(a)) => {
                let (dx, dy) = *MOVES
                    .get(*a)
                    .ok_or_else(|| Error::Contract(format!("action {a} outside the 4 grid moves")))?;
                let (x, y) = g.cell(&state.obs);
                let max = g.size as i64 - 1;
                let nx = (x as i64 + dx).clamp(0, max) as usize;
                let ny = (y as i64 + dy).clamp(0, max) as usize;
                let at_goal = (nx, ny) == g.goal;
                Ok(Transition {
                    next: EnvState { obs: g.obs((nx, ny)), t },
                    reward: if at_goal { 1.0 } else { 0.0 },
                    done: at_goal || t >= g.horizon,
                })
            }
            (Env::PointMass(p), Action::Continuous(a)) => {
                if a.len() != 2 {
                    return Err(Error::Modality(format!("point mass takes 2-D actions, got {}", a.len())));
                }
                let ax = a[0].clamp(-1.0, 1.0);
                let ay = a[1].clamp(-1.0, 1.0);
                let (x, y, vx, vy) = (state.obs[0], state.obs[1], state.obs[2], state.obs[3]);
                let nvx = vx + ax * p.dt;
                let nvy = vy + ay * p.dt;
                let nx = x + nvx * p.dt;
                let ny = y + nvy * p.dt;
                let dist = (nx * nx + ny * ny).sqrt();
                Ok(Transition {
                    next: EnvState {
                        obs: vec![nx, ny, nvx, nvy],
                        t,
                    },
                    reward: -dist,
                    done: dist < p.goal_radius || t >= p.horizon,
                })
            }
            _ => Err(Error::Modality(format!("{} cannot take {action:?}", self.name()))),
        }
    }

    /// Scripted expert: a shortest path on the grid, a saturated PD
    /// controller for the point mass.
    pub fn expert_action(&self, state: &EnvState) -> Action {
        match self {
            Env::GridWorld(g) => {
                let (x, y) = g.cell(&state.obs);
                let (gx, gy) = g.goal;
                let a = if x < gx {
                    2
                } else if x > gx {
                    3
                } else if y < gy {
                    0
                } else {
                    1
                };
                Action::Discrete(a)
            }
            Env::PointMass(_) => {
                let o = &state.obs;
                let (kp, kd) = (4.0, 4.0);
                Action::Continuous(vec![
                    (-kp * o[0] - kd * o[2]).clamp(-1.0, 1.0),
                    (-kp * o[1] - kd * o[3]).clamp(-1.0, 1.0),
                ])
            }
        }
    }

    pub fn random_action<R: Rng + ?Sized>(&self, rng: &mut R) -> Action {
        match self {
            Env::GridWorld(_) => Action::Discrete(rng.random_range(0..4)),
            Env::PointMass(_) => Action::Continuous(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]),
        }
    }
}

/// Scripted behaviour policies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "policy")]
pub enum Policy {
    Expert,
    Random,
    /// Expert with Gaussian action noise (continuous) or an ε-random choice
    /// (discrete); `noise` is σ or ε.
    Noisy { noise: f32 },
    /// With probability `1 - mix` a random action, otherwise the noisy expert.
    Replay { noise: f32, mix: f32 },
}

impl Policy {
    pub fn act<R: Rng + ?Sized>(&self, env: &Env, state: &EnvState, rng: &mut R) -> Action {
        match *self {
            Policy::Expert => env.expert_action(state),
            Policy::Random => env.random_action(rng),
            Policy::Noisy { noise } => match env.expert_action(state) {
                Action::Discrete(a) => {
                    if rng.random::<f32>() < noise {
                        env.random_action(rng)
                    } else {
                        Action::Discrete(a)
                    }
                }
                Action::Continuous(a) => {
                    let normal = Normal::new(0.0f32, noise.max(0.0)).expect("finite noise");
                    Action::Continuous(a.iter().map(|v| (v + normal.sample(rng)).clamp(-1.0, 1.0)).collect())
                }
            },
            Policy::Replay { noise, mix } => {
                if rng.random::<f32>() < mix {
                    Policy::Noisy { noise }.act(env, state, rng)
                } else {
                    env.random_action(rng)
                }
            }
        }
    }
}

/// Runs one episode to termination.
pub fn run_episode<R: Rng + ?Sized>(env: &Env, policy: Policy, rng: &mut R) -> Result<Trajectory> {
    let mut state = env.reset(rng);
    let mut states = Vec::new();
    let mut rewards = Vec::new();
    let mut cont = Vec::new();
    let mut disc = Vec::new();
    loop {
        let action = policy.act(env, &state, rng);
        let tr = env.step(&state, &action)?;
        states.push(state.obs.clone());
        rewards.push(tr.reward);
        match action {
            Action::Continuous(a) => cont.push(a),
            Action::Discrete(a) => disc.push(a),
        }
        state = tr.next;
        if tr.done {
            break;
        }
    }
    let actions = match env.action_space() {
        ActionSpace::Continuous(_) => Actions::Continuous(cont),
        ActionSpace::Discrete(_) => Actions::Discrete(disc),
    };
    Trajectory::new(states, actions, rewards)
}

/// Episode `index` of a seeded run: one ChaCha stream per episode so any
/// episode can be regenerated on its own.
pub fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn mean_return(env: &Env, policy: Policy, seed: u64, n: usize) -> Result<f64> {
    let mut total = 0.0f64;
    for i in 0..n {
        total += run_episode(env, policy, &mut episode_rng(seed, i as u64))?.total_return() as f64;
    }
    Ok(total / n as f64)
}

pub const REFERENCE_EPISODES: usize = 100;

/// Mean returns of the random policy and the scripted expert.
pub fn reference_scores(env: &Env, seed: u64, n: usize) -> Result<(f64, f64)> {
    Ok((mean_return(env, Policy::Random, seed, n)?, mean_return(env, Policy::Expert, seed, n)?))
}

/// Noise level whose noisy-expert return sits midway between the random and
/// expert references, found by bisection on a fixed episode set.
pub fn calibrate_noise(env: &Env, seed: u64, n: usize) -> Result<f32> {
    let (random, expert) = reference_scores(env, seed, n)?;
    let target = 0.5 * (random + expert);
    let (mut lo, mut hi) = match env {
        Env::GridWorld(_) => (0.0f32, 1.0f32),
        Env::PointMass(_) => (0.0f32, 8.0f32),
    };
    for _ in 0..24 {
        let mid = 0.5 * (lo + hi);
        if mean_return(env, Policy::Noisy { noise: mid }, seed, n)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tier {
    Medium,
    MediumExpert,
    MediumReplay,
}

impl Tier {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "medium" => Ok(Tier::Medium),
            "medium-expert" => Ok(Tier::MediumExpert),
            "medium-replay" => Ok(Tier::MediumReplay),
            other => Err(Error::Config(format!("unknown dataset tier `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Tier::Medium => "medium",
            Tier::MediumExpert => "medium-expert",
            Tier::MediumReplay => "medium-replay",
        }
    }

    /// Behaviour policy of each of `n` episodes.
    pub fn policies(&self, n: usize, noise: f32) -> Vec<Policy> {
        match self {
            Tier::Medium => vec![Policy::Noisy { noise }; n],
            Tier::MediumExpert => (0..n)
                .map(|i| if i < n / 2 { Policy::Expert } else { Policy::Noisy { noise } })
                .collect(),
            Tier::MediumReplay => (0..n)
                .map(|i| Policy::Replay {
                    noise,
                    mix: if n > 1 { i as f32 / (n - 1) as f32 } else { 1.0 },
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub env: String,
    pub tier: Tier,
    pub episodes: usize,
    pub seed: u64,
    /// Episode count per behaviour policy kind.
    pub policy_mix: Vec<(String, usize)>,
    pub noise: f32,
    pub random_score: f64,
    pub expert_score: f64,
    pub mean_return: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub episodes: Vec<Trajectory>,
}

fn policy_kind(p: &Policy) -> &'static str {
    match p {
        Policy::Expert => "expert",
        Policy::Random => "random",
        Policy::Noisy { .. } => "medium",
        Policy::Replay { .. } => "replay",
    }
}

/// Generates `n` episodes of `tier`. Reference scores use
/// [`REFERENCE_EPISODES`] episodes on streams separate from the data.
pub fn generate_dataset(env: &Env, tier: Tier, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("a dataset needs at least one episode".into()));
    }
    let ref_seed = seed ^ 0x5eed_0000_0000_0000;
    let (random_score, expert_score) = reference_scores(env, ref_seed, REFERENCE_EPISODES)?;
    if expert_score <= random_score {
        return Err(Error::Degenerate(format!(
            "expert score {expert_score} does not beat random {random_score}"
        )));
    }
    let noise = calibrate_noise(env, ref_seed, REFERENCE_EPISODES)?;
    let policies = tier.policies(n, noise);
    let mut episodes = Vec::with_capacity(n);
    for (i, p) in policies.iter().enumerate() {
        episodes.push(run_episode(env, *p, &mut episode_rng(seed, i as u64))?);
    }
    let mut policy_mix: Vec<(String, usize)> = Vec::new();
    for p in &policies {
        match policy_mix.iter_mut().find(|(k, _)| k == policy_kind(p)) {
            Some((_, c)) => *c += 1,
            None => policy_mix.push((policy_kind(p).to_string(), 1)),
        }
    }
    let mean_return = episodes.iter().map(|e| e.total_return() as f64).sum::<f64>() / n as f64;
    Ok(Dataset {
        manifest: DatasetManifest {
            env: env.name().to_string(),
            tier,
            episodes: n,
            seed,
            policy_mix,
            noise,
            random_score,
            expert_score,
            mean_return,
        },
        episodes,
    })
}

/// Manifest path belonging to an episodes file: `x.jsonl` → `x.manifest.json`.
pub fn manifest_path(episodes: &Path) -> PathBuf {
    episodes.with_extension("manifest.json")
}

impl Dataset {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut out = Vec::new();
        for e in &self.episodes {
            serde_json::to_writer(&mut out, e).expect("episodes serialise");
            out.push(b'\n');
        }
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(|e| Error::io(path, e))?;
        let mpath = manifest_path(path);
        let manifest = serde_json::to_vec_pretty(&self.manifest).expect("manifest serialises");
        fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut episodes = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut t: Trajectory = serde_json::from_str(&line).map_err(|e| Error::Format {
                what: "episode",
                detail: format!("line {}: {e}", i + 1),
            })?;
            t.finish()?;
            episodes.push(t);
        }
        let mpath = manifest_path(path);
        let raw = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: DatasetManifest = serde_json::from_slice(&raw).map_err(|e| Error::Format {
            what: "manifest",
            detail: e.to_string(),
        })?;
        if manifest.episodes != episodes.len() {
            return Err(Error::Format {
                what: "dataset",
                detail: format!("manifest lists {} episodes, file has {}", manifest.episodes, episodes.len()),
            });
        }
        Ok(Dataset { manifest, episodes })
    }
}
