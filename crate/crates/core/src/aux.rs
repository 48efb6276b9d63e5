//! Transfer objectives: k-means anchors over the language embedding table,
//! the max-cosine alignment loss, and the decayed combination of trajectory,
//! alignment and language-modelling losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Cosine similarity of two non-zero vectors.
pub fn cosine(z1: &[f32], z2: &[f32]) -> Result<f32> {
    if z1.len() != z2.len() {
        return Err(Error::Shape {
            op: "cosine",
            lhs: vec![z1.len()],
            rhs: vec![z2.len()],
        });
    }
    let n1 = z1.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
    let n2 = z2.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::Degenerate("cosine of a zero vector".into()));
    }
    let dot: f64 = z1.iter().zip(z2).map(|(a, b)| *a as f64 * *b as f64).sum();
    Ok((dot / (n1 * n2)).clamp(-1.0, 1.0) as f32)
}

/// SHA-256 of the little-endian bytes of `data`, hex encoded.
pub fn table_checksum(data: &[f32]) -> String {
    let mut h = Sha256::new();
    for v in data {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug)]
pub struct KMeans {
    /// `k × dim`, row-major.
    pub centers: Vec<f32>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances after each assignment step.
    pub objective_history: Vec<f64>,
}

pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_REL_TOL: f64 = 1e-6;

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - y).powi(2)).sum()
}

/// Lloyd's algorithm with k-means++ seeding over the rows of `data`.
///
/// Stops after [`KMEANS_MAX_ITERS`] iterations or when the objective improves
/// by less than [`KMEANS_REL_TOL`] relatively. An empty cluster is re-seeded
/// with the point farthest from its current center.
pub fn kmeans(data: &[f32], dim: usize, k: usize, seed: u64) -> Result<KMeans> {
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(Error::Shape {
            op: "kmeans",
            lhs: vec![data.len()],
            rhs: vec![dim],
        });
    }
    let n = data.len() / dim;
    if k == 0 || k > n {
        return Err(Error::Config(format!("K = {k} clusters for {n} points")));
    }
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.random_range(0..n);
    centers.push(row(first).iter().map(|&v| v as f64).collect());
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        if total <= 0.0 {
            return Err(Error::Degenerate(format!(
                "only {} distinct rows for K = {k}",
                centers.len()
            )));
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, d) in nearest.iter().enumerate() {
            if *d > 0.0 && target < *d {
                pick = i;
                break;
            }
            target -= d;
        }
        if nearest[pick] == 0.0 {
            pick = (0..n).rev().find(|&i| nearest[i] > 0.0).expect("total > 0");
        }
        let c: Vec<f64> = row(pick).iter().map(|&v| v as f64).collect();
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), &c));
        }
        centers.push(c);
    }

    let mut assignments = vec![0usize; n];
    let mut dists = vec![0.0f64; n];
    let mut history = Vec::new();
    for _ in 0..KMEANS_MAX_ITERS {
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(row(i), center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assignments[i] = best;
            dists[i] = best_d;
        }
        let objective: f64 = dists.iter().sum();
        let prev = history.last().copied();
        history.push(objective);
        if objective == 0.0 {
            break;
        }
        if let Some(p) = prev {
            if (p - objective) / p < KMEANS_REL_TOL {
                break;
            }
        }

        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assignments[i]] += 1;
            sums[assignments[i]].iter_mut().zip(row(i)).for_each(|(s, v)| *s += *v as f64);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n)
                .max_by(|&a, &b| {
                    sq_dist(row(a), &centers[assignments[a]]).total_cmp(&sq_dist(row(b), &centers[assignments[b]]))
                })
                .expect("n > 0");
            counts[assignments[far]] -= 1;
            counts[c] = 1;
            assignments[far] = c;
            centers[c] = row(far).iter().map(|&v| v as f64).collect();
        }
    }
    Ok(KMeans {
        centers: centers.into_iter().flatten().map(|v| v as f32).collect(),
        assignments,
        objective_history: history,
    })
}

/// Cluster centers of a language embedding table, held fixed during finetuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingAnchors {
    pub centers: Vec<f32>,
    pub k: usize,
    pub dim: usize,
    /// Checksum of the embedding rows the anchors were clustered from.
    pub source_checksum: String,
}

impl EmbeddingAnchors {
    /// Clusters the first `rows` rows of `table` into `k` anchors.
    pub fn from_table(table: &Tensor, rows: usize, k: usize, seed: u64) -> Result<Self> {
        let (r, dim) = table.dims2()?;
        if rows == 0 || rows > r {
            return Err(Error::Config(format!("{rows} rows requested from a table of {r}")));
        }
        let data = &table.data()[..rows * dim];
        let km = kmeans(data, dim, k, seed)?;
        Ok(EmbeddingAnchors {
            centers: km.centers,
            k,
            dim,
            source_checksum: table_checksum(data),
        })
    }

    /// Uses the rows of `centers` directly as anchors.
    pub fn from_centers(centers: Tensor) -> Self {
        let (k, dim) = centers.dims2().expect("anchor matrix");
        let source_checksum = table_checksum(centers.data());
        EmbeddingAnchors {
            centers: centers.into_data(),
            k,
            dim,
            source_checksum,
        }
    }

    pub fn matches(&self, table: &Tensor, rows: usize) -> bool {
        let dim = self.dim;
        table.data().len() >= rows * dim && table_checksum(&table.data()[..rows * dim]) == self.source_checksum
    }

    pub fn center(&self, j: usize) -> &[f32] {
        &self.centers[j * self.dim..(j + 1) * self.dim]
    }
}

/// How per-token similarities to the anchors are pooled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Max,
    /// Mean over anchors; kept for reproduction attempts only.
    Mean,
}

/// `-Σᵢ wᵢ · maxⱼ cos(Iᵢ, anchorⱼ)` over the rows of `reps`.
///
/// Rows and anchors are normalised, multiplied in one product, then reduced by
/// a row max whose ties resolve to the lowest anchor index. Anchors are
/// constants. Use `wᵢ = 1` for one sequence, zero for padding.
pub fn l_cos(g: &mut Graph, reps: Var, anchors: &EmbeddingAnchors, row_weights: &[f32]) -> Result<Var> {
    l_cos_pooled(g, reps, anchors, row_weights, Pooling::Max)
}

pub fn l_cos_pooled(
    g: &mut Graph,
    reps: Var,
    anchors: &EmbeddingAnchors,
    row_weights: &[f32],
    pooling: Pooling,
) -> Result<Var> {
    let shape = g.shape(reps).to_vec();
    if shape.len() != 2 || shape[1] != anchors.dim {
        return Err(Error::Shape {
            op: "l_cos",
            lhs: shape,
            rhs: vec![anchors.k, anchors.dim],
        });
    }
    if anchors.k == 0 {
        return Err(Error::Degenerate("no anchors".into()));
    }
    let a = g.constant(vec![anchors.k, anchors.dim], anchors.centers.clone())?;
    let a = g.row_normalize(a);
    let r = g.row_normalize(reps);
    let sims = g.matmul_nt(r, a)?;
    let pooled = match pooling {
        Pooling::Max => g.row_max(sims),
        Pooling::Mean => {
            let avg = g.constant(vec![anchors.k, 1], vec![1.0 / anchors.k as f32; anchors.k])?;
            g.matmul(sims, avg)?
        }
    };
    let neg: Vec<f32> = row_weights.iter().map(|w| -w).collect();
    g.weighted_sum(pooled, &neg)
}

/// Linear decay `initial · max(0, 1 - step / decay_end)`; exactly 0 from
/// `decay_end` on.
pub fn lambda_schedule(step: u64, initial: f32, decay_end: u64) -> f32 {
    if step >= decay_end {
        return 0.0;
    }
    (initial as f64 * (1.0 - step as f64 / decay_end as f64)) as f32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Initial weight of the alignment loss.
    pub lambda1: f32,
    /// Initial weight of the language-modelling loss.
    pub lambda2: f32,
    pub decay_end_step: u64,
    /// Number of k-means anchors.
    pub clusters: usize,
    /// Language windows per co-training step.
    pub cotrain_batch: usize,
    #[serde(default)]
    pub pooling: Pooling,
    /// Re-cluster anchors from the drifting embedding table every N steps.
    #[serde(default)]
    pub recluster_every: Option<u64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 0.1,
            lambda2: 0.2,
            decay_end_step: 5000,
            clusters: 100,
            cotrain_batch: 4,
            pooling: Pooling::Max,
            recluster_every: None,
        }
    }
}

impl LossConfig {
    /// Both auxiliary terms disabled.
    pub fn trajectory_only() -> Self {
        LossConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.decay_end_step == 0 {
            return Err(Error::Config("decay_end_step must be at least 1".into()));
        }
        Ok(())
    }

    /// `(λ1, λ2)` at `step`.
    pub fn weights_at(&self, step: u64) -> (f32, f32) {
        (
            lambda_schedule(step, self.lambda1, self.decay_end_step),
            lambda_schedule(step, self.lambda2, self.decay_end_step),
        )
    }
}

/// `L_MSE + λ1(step)·L_cos + λ2(step)·L_LM`. Terms whose weight is zero are
/// left out of the graph, so the result is `mse` itself once both have decayed.
pub fn combined_loss(
    g: &mut Graph,
    mse: Var,
    align: Option<Var>,
    lm: Option<Var>,
    step: u64,
    config: &LossConfig,
) -> Result<Var> {
    let (l1, l2) = config.weights_at(step);
    let mut total = mse;
    for (term, w) in [(align, l1), (lm, l2)] {
        if let Some(t) = term {
            if w != 0.0 {
                let scaled = g.scale(t, w);
                total = g.add(total, scaled)?;
            }
        }
    }
    Ok(total)
}
