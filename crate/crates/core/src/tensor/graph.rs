use std::collections::HashMap;

use rand::Rng;

use super::gemm::{gemm, View};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Shape bookkeeping for the fused causal attention op.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Mul(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        probs: Vec<f32>,
        scores: Option<Vec<f32>>,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Dropout {
        x: Var,
        mask: Vec<f32>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f32>,
        probs: Vec<f32>,
        total_weight: f32,
    },
    Mse {
        pred: Var,
        target: Vec<f32>,
        row_weights: Vec<f32>,
        denom: f32,
    },
    RowNormalize {
        x: Var,
        norms: Vec<f32>,
    },
    RowMax {
        x: Var,
        argmax: Vec<usize>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<f32>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    op: Op,
    requires_grad: bool,
}

/// Guard used when normalising rows, so zero vectors stay finite.
pub const NORM_EPS: f32 = 1e-8;

/// A tape of operations. Nodes are appended in execution order, so parents
/// always precede children and a reverse sweep is a valid topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
    grads: Vec<Option<Vec<f32>>>,
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

fn rows_of(shape: &[usize]) -> usize {
    let c = last_dim(shape);
    shape.iter().product::<usize>() / c.max(1)
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f32 {
        let n = &self.nodes[v.0];
        assert_eq!(n.value.len(), 1, "scalar() on a node of shape {:?}", n.shape);
        n.value[0]
    }

    /// Records a leaf that does not receive gradients.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || numel == 0 {
            return Err(Error::Shape {
                op: "constant",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    /// Records a copy of `t` as a leaf; gradients flow iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Binds a model parameter. Binding the same tensor twice returns the same
    /// node, and [`Graph::accumulate_grad`] finds it again by address, so the
    /// tensor must not move between the forward pass and gradient collection.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let key = t as *const Tensor as usize;
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.leaf(t);
        self.params.insert(key, v);
        v
    }

    /// Adds this graph's gradient for a bound parameter into `t.grad`.
    /// Returns false when the tensor was never bound or received no gradient.
    pub fn accumulate_grad(&self, t: &mut Tensor) -> bool {
        let key = t as *const Tensor as usize;
        match self.params.get(&key).and_then(|v| self.grad(*v)) {
            Some(g) => {
                t.accumulate_grad(g);
                true
            }
            None => false,
        }
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(sa.to_vec())
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            other => Err(Error::Shape {
                op,
                lhs: other.to_vec(),
                rhs: vec![],
            }),
        }
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (br, bc) = self.matrix("matmul", b)?;
        let (bk, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != bk {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        let bv = if trans_b { View::dense_t(0, k) } else { View::dense(0, n) };
        gemm(m, k, n, 1.0, self.value(a), View::dense(0, k), self.value(b), bv, 0.0, &mut out, View::dense(0, n));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Mul(a, b), rg))
    }

    /// Broadcast-adds a vector of length `cols` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = last_dim(&shape);
        if self.shape(bias) != [c] {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: shape,
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias);
        let out = self.value(x).chunks(c).flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y)).collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(shape, out, Op::AddBias { x, bias }, rg))
    }

    /// `x · w + b` with `w: in×out`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, factor), rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f32::tanh, Op::Tanh(x))
    }

    /// Layer normalisation over the last axis followed by a per-feature affine map.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = last_dim(&shape);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Shape {
                op: "layernorm",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let rows = rows_of(&shape);
        let xs = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(shape, out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = last_dim(&shape);
        let xs = self.value(x);
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax input"));
        }
        let mut out = vec![0.0; xs.len()];
        for (src, dst) in xs.chunks(d).zip(out.chunks_mut(d)) {
            softmax_into(src, dst);
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax(x), rg))
    }

    /// Fused multi-head causal attention over `[batch*seq, model_dim]` inputs.
    ///
    /// Query `i` attends to keys `j <= i` whose `key_valid` flag is set; a query
    /// always sees itself so fully padded rows stay well defined. Masked
    /// probabilities are exactly zero. With `capture`, the scaled pre-mask
    /// scores are kept for [`Graph::attention_maps`].
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        key_valid: Option<&[bool]>,
        capture: bool,
    ) -> Result<Var> {
        let shape = self.binary_same_shape("attention", q, k)?;
        self.binary_same_shape("attention", q, v)?;
        let AttnLayout { batch, seq, heads } = layout;
        let (rows, n) = self.matrix("attention", q)?;
        if rows != batch * seq || heads == 0 || n % heads != 0 {
            return Err(Error::Shape {
                op: "attention",
                lhs: shape,
                rhs: vec![batch, seq, heads],
            });
        }
        if let Some(mask) = key_valid {
            if mask.len() != rows {
                return Err(Error::Shape {
                    op: "attention mask",
                    lhs: vec![rows],
                    rhs: vec![mask.len()],
                });
            }
        }
        let dh = n / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let tt = seq * seq;
        let mut probs = vec![0.0; batch * heads * tt];
        let mut scores_all = capture.then(|| vec![0.0; batch * heads * tt]);
        let mut out = vec![0.0; rows * n];
        let mut scores = vec![0.0; tt];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * n + h * dh;
                gemm(seq, dh, seq, scale, qs, View::dense(off, n), ks, View::dense_t(off, n), 0.0, &mut scores, View::dense(0, seq));
                let base = (b * heads + h) * tt;
                if let Some(s) = scores_all.as_mut() {
                    s[base..base + tt].copy_from_slice(&scores);
                }
                let p = &mut probs[base..base + tt];
                for i in 0..seq {
                    let allowed = |j: usize| j == i || key_valid.is_none_or(|m| m[b * seq + j]);
                    let mut max = f32::NEG_INFINITY;
                    for j in (0..=i).filter(|&j| allowed(j)) {
                        max = max.max(scores[i * seq + j]);
                    }
                    let mut sum = 0.0;
                    for j in (0..=i).filter(|&j| allowed(j)) {
                        let e = (scores[i * seq + j] - max).exp();
                        p[i * seq + j] = e;
                        sum += e;
                    }
                    for j in 0..=i {
                        p[i * seq + j] /= sum;
                    }
                }
                gemm(seq, seq, dh, 1.0, p, View::dense(0, seq), vs, View::dense(off, n), 0.0, &mut out, View::dense(off, n));
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            vec![rows, n],
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
                scores: scores_all,
            },
            rg,
        ))
    }

    /// Post-softmax probabilities `[batch, heads, seq, seq]` and, when captured,
    /// the scaled pre-mask scores of an attention node.
    pub fn attention_maps(&self, v: Var) -> Option<(AttnLayout, &[f32], Option<&[f32]>)> {
        match &self.nodes[v.0].op {
            Op::Attention {
                layout,
                probs,
                scores,
                ..
            } => Some((*layout, probs.as_slice(), scores.as_deref())),
            _ => None,
        }
    }

    /// Selects rows of a matrix (embedding lookup). Gradients scatter-add.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix("gather_rows", table)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::Vocabulary { id: bad, vocab: r });
        }
        if indices.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&t[i * c..(i + 1) * c]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![indices.len(), c],
            out,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (_, c) = self.matrix("concat_rows", first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = self.matrix("concat_rows", p)?;
            if pc != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, c], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Inverted dropout. Identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f32, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f32> = (0..self.value(x).len())
            .map(|_| if rng.random::<f32>() < p { 0.0 } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Dropout { x, mask }, rg)
    }

    /// Weighted mean of `-log softmax(logits)[target]` over rows. Rows with
    /// weight zero are ignored; an all-zero weight vector yields 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Option<&[f32]>) -> Result<Var> {
        let (r, c) = self.matrix("cross_entropy", logits)?;
        if targets.len() != r {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![r, c],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Vocabulary { id: bad, vocab: c });
        }
        let weights = match weights {
            Some(w) if w.len() != r => {
                return Err(Error::Shape {
                    op: "cross_entropy weights",
                    lhs: vec![r],
                    rhs: vec![w.len()],
                })
            }
            Some(w) => w.to_vec(),
            None => vec![1.0; r],
        };
        let xs = self.value(logits);
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cross_entropy logits"));
        }
        let mut probs = vec![0.0; xs.len()];
        let mut total = 0.0f64;
        let mut total_weight = 0.0f32;
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            softmax_into(row, &mut probs[i * c..(i + 1) * c]);
            if weights[i] != 0.0 {
                let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
                let lse = max as f64 + row.iter().map(|&v| ((v - max) as f64).exp()).sum::<f64>().ln();
                total += weights[i] as f64 * (lse - row[targets[i]] as f64);
                total_weight += weights[i];
            }
        }
        let value = if total_weight > 0.0 { (total / total_weight as f64) as f32 } else { 0.0 };
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![value],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                probs,
                total_weight,
            },
            rg,
        ))
    }

    /// Mean squared error against a constant target, averaged over weighted rows
    /// and columns. Zero total weight yields 0.
    pub fn mse(&mut self, pred: Var, target: &[f32], row_weights: Option<&[f32]>) -> Result<Var> {
        let shape = self.shape(pred).to_vec();
        let c = last_dim(&shape);
        let r = rows_of(&shape);
        if target.len() != r * c {
            return Err(Error::Shape {
                op: "mse",
                lhs: shape,
                rhs: vec![target.len()],
            });
        }
        let row_weights = match row_weights {
            Some(w) if w.len() != r => {
                return Err(Error::Shape {
                    op: "mse weights",
                    lhs: vec![r],
                    rhs: vec![w.len()],
                })
            }
            Some(w) => w.to_vec(),
            None => vec![1.0; r],
        };
        let p = self.value(pred);
        let denom = row_weights.iter().sum::<f32>() * c as f32;
        let mut total = 0.0f64;
        for i in 0..r {
            if row_weights[i] == 0.0 {
                continue;
            }
            let se: f64 = (0..c).map(|j| ((p[i * c + j] - target[i * c + j]) as f64).powi(2)).sum();
            total += row_weights[i] as f64 * se;
        }
        let value = if denom > 0.0 { (total / denom as f64) as f32 } else { 0.0 };
        let rg = self.rg(pred);
        Ok(self.push(
            vec![1],
            vec![value],
            Op::Mse {
                pred,
                target: target.to_vec(),
                row_weights,
                denom,
            },
            rg,
        ))
    }

    /// Divides each row by its L2 norm (guarded below by [`NORM_EPS`]).
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let c = last_dim(&shape);
        let xs = self.value(x);
        let norms: Vec<f32> = xs.chunks(c).map(|r| r.iter().map(|v| v * v).sum::<f32>().sqrt().max(NORM_EPS)).collect();
        let out = xs.chunks(c).zip(&norms).flat_map(|(r, n)| r.iter().map(move |v| v / n)).collect();
        let rg = self.rg(x);
        self.push(shape, out, Op::RowNormalize { x, norms }, rg)
    }

    /// Row-wise maximum, `[rows, cols] -> [rows, 1]`. Ties go to the lowest column.
    pub fn row_max(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let c = last_dim(&shape);
        let mut argmax = Vec::with_capacity(rows_of(&shape));
        let mut out = Vec::with_capacity(rows_of(&shape));
        for row in self.value(x).chunks(c) {
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            argmax.push(best);
            out.push(row[best]);
        }
        let rows = out.len();
        let rg = self.rg(x);
        self.push(vec![rows, 1], out, Op::RowMax { x, argmax }, rg)
    }

    /// `Σ weights[i] * x[i]` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f32]) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::Shape {
                op: "weighted_sum",
                lhs: self.shape(x).to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let value = self.value(x).iter().zip(weights).map(|(a, b)| (*a as f64) * (*b as f64)).sum::<f64>() as f32;
        let rg = self.rg(x);
        Ok(self.push(
            vec![1],
            vec![value],
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| v as f64).sum::<f64>() as f32;
        let rg = self.rg(x);
        self.push(vec![1], vec![value], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let value = (self.value(x).iter().map(|&v| v as f64).sum::<f64>() / n as f64) as f32;
        let rg = self.rg(x);
        self.push(vec![1], vec![value], Op::Mean(x), rg)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        self.backward_with_seed(root, &[1.0])
    }

    /// Reverse sweep seeded with an explicit upstream gradient for `root`.
    pub fn backward_with_seed(&mut self, root: Var, seed: &[f32]) -> Result<()> {
        if seed.len() != self.value(root).len() {
            return Err(Error::Shape {
                op: "backward seed",
                lhs: self.shape(root).to_vec(),
                rhs: vec![seed.len()],
            });
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if self.rg(root) {
            grads[root.0] = Some(seed.to_vec());
        }
        for i in (0..=root.0).rev() {
            let Some(up) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &up, &mut grads);
            }
            grads[i] = Some(up);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, up: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |v: Var, contrib: &[f32]| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contrib.to_vec()),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = node.shape[1];
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    // dA = dC · Bᵀ (or dC · B when B was used transposed)
                    let bview = if *trans_b { View::dense(0, k) } else { View::dense_t(0, n) };
                    gemm(m, n, k, 1.0, up, View::dense(0, n), bv, bview, 0.0, &mut da, View::dense(0, k));
                    acc(*a, &da);
                }
                if nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    if *trans_b {
                        // B is n×k: dB = dCᵀ · A
                        gemm(n, m, k, 1.0, up, View::dense_t(0, n), av, View::dense(0, k), 0.0, &mut db, View::dense(0, k));
                    } else {
                        gemm(k, m, n, 1.0, av, View::dense_t(0, k), up, View::dense(0, n), 0.0, &mut db, View::dense(0, n));
                    }
                    acc(*b, &db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, up);
                acc(*b, up);
            }
            Op::AddBias { x, bias } => {
                acc(*x, up);
                let c = nodes[bias.0].value.len();
                let mut db = vec![0.0; c];
                for row in up.chunks(c) {
                    db.iter_mut().zip(row).for_each(|(d, u)| *d += u);
                }
                acc(*bias, &db);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let da: Vec<f32> = up.iter().zip(bv).map(|(u, y)| u * y).collect();
                let db: Vec<f32> = up.iter().zip(av).map(|(u, x)| u * x).collect();
                acc(*a, &da);
                acc(*b, &db);
            }
            Op::Scale(x, f) => {
                let dx: Vec<f32> = up.iter().map(|u| u * f).collect();
                acc(*x, &dx);
            }
            Op::Relu(x) => {
                let dx: Vec<f32> =
                    up.iter().zip(&nodes[x.0].value).map(|(u, v)| if *v > 0.0 { *u } else { 0.0 }).collect();
                acc(*x, &dx);
            }
            Op::Gelu(x) => {
                let dx: Vec<f32> = up.iter().zip(&nodes[x.0].value).map(|(u, v)| u * gelu_grad(*v)).collect();
                acc(*x, &dx);
            }
            Op::Tanh(x) => {
                let dx: Vec<f32> = up.iter().zip(&node.value).map(|(u, y)| u * (1.0 - y * y)).collect();
                acc(*x, &dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = nodes[gain.0].value.len();
                let g = &nodes[gain.0].value;
                let mut dx = vec![0.0; up.len()];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for (r, rs) in rstd.iter().enumerate() {
                    let dy = &up[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for c in 0..d {
                        let dxh = dy[c] * g[c];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[c];
                        dg[c] += dy[c] * xh[c];
                        db[c] += dy[c];
                    }
                    mean_dxh /= d as f32;
                    mean_dxh_xh /= d as f32;
                    for c in 0..d {
                        let dxh = dy[c] * g[c];
                        dx[r * d + c] = rs * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
                    }
                }
                acc(*x, &dx);
                acc(*gain, &dg);
                acc(*bias, &db);
            }
            Op::Softmax(x) => {
                let d = last_dim(&node.shape);
                let mut dx = vec![0.0; up.len()];
                for ((y, dy), out) in node.value.chunks(d).zip(up.chunks(d)).zip(dx.chunks_mut(d)) {
                    let dot: f32 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        out[j] = y[j] * (dy[j] - dot);
                    }
                }
                acc(*x, &dx);
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
                ..
            } => {
                let AttnLayout { batch, seq, heads } = *layout;
                let n = node.shape[1];
                let dh = n / heads;
                let scale = 1.0 / (dh as f32).sqrt();
                let (qs, ks, vs) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                let mut dq = vec![0.0; qs.len()];
                let mut dk = vec![0.0; ks.len()];
                let mut dv = vec![0.0; vs.len()];
                let tt = seq * seq;
                let mut dp = vec![0.0; tt];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = b * seq * n + h * dh;
                        let p = &probs[(b * heads + h) * tt..(b * heads + h + 1) * tt];
                        // dV = Pᵀ · dO
                        gemm(seq, seq, dh, 1.0, p, View::dense_t(0, seq), up, View::dense(off, n), 1.0, &mut dv, View::dense(off, n));
                        // dP = dO · Vᵀ
                        gemm(seq, dh, seq, 1.0, up, View::dense(off, n), vs, View::dense_t(off, n), 0.0, &mut dp, View::dense(0, seq));
                        for i in 0..seq {
                            let row_p = &p[i * seq..(i + 1) * seq];
                            let row_dp = &mut dp[i * seq..(i + 1) * seq];
                            let dot: f32 = row_p.iter().zip(row_dp.iter()).map(|(a, b)| a * b).sum();
                            for j in 0..seq {
                                row_dp[j] = row_p[j] * (row_dp[j] - dot);
                            }
                        }
                        // dQ = scale · dS · K ; dK = scale · dSᵀ · Q
                        gemm(seq, seq, dh, scale, &dp, View::dense(0, seq), ks, View::dense(off, n), 1.0, &mut dq, View::dense(off, n));
                        gemm(seq, seq, dh, scale, &dp, View::dense_t(0, seq), qs, View::dense(off, n), 1.0, &mut dk, View::dense(off, n));
                    }
                }
                acc(*q, &dq);
                acc(*k, &dk);
                acc(*v, &dv);
            }
            Op::Gather { table, indices } => {
                let c = node.shape[1];
                let mut dt = vec![0.0; nodes[table.0].value.len()];
                for (r, &idx) in indices.iter().enumerate() {
                    dt[idx * c..(idx + 1) * c].iter_mut().zip(&up[r * c..(r + 1) * c]).for_each(|(d, u)| *d += u);
                }
                acc(*table, &dt);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    acc(*p, &up[start..start + len]);
                    start += len;
                }
            }
            Op::Dropout { x, mask } => {
                let dx: Vec<f32> = up.iter().zip(mask).map(|(u, m)| u * m).collect();
                acc(*x, &dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                total_weight,
            } => {
                let c = nodes[logits.0].shape[1];
                let mut dx = vec![0.0; probs.len()];
                if *total_weight > 0.0 {
                    for (r, &t) in targets.iter().enumerate() {
                        let w = weights[r] / total_weight * up[0];
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..c {
                            dx[r * c + j] = w * probs[r * c + j];
                        }
                        dx[r * c + t] -= w;
                    }
                }
                acc(*logits, &dx);
            }
            Op::Mse {
                pred,
                target,
                row_weights,
                denom,
            } => {
                let p = &nodes[pred.0].value;
                let c = p.len() / row_weights.len();
                let mut dx = vec![0.0; p.len()];
                if *denom > 0.0 {
                    for (r, w) in row_weights.iter().enumerate() {
                        let s = 2.0 * w / denom * up[0];
                        for j in r * c..(r + 1) * c {
                            dx[j] = s * (p[j] - target[j]);
                        }
                    }
                }
                acc(*pred, &dx);
            }
            Op::RowNormalize { x, norms } => {
                let c = last_dim(&node.shape);
                let xs = &nodes[x.0].value;
                let mut dx = vec![0.0; up.len()];
                for (r, &nrm) in norms.iter().enumerate() {
                    let y = &node.value[r * c..(r + 1) * c];
                    let dy = &up[r * c..(r + 1) * c];
                    let raw_norm: f32 = xs[r * c..(r + 1) * c].iter().map(|v| v * v).sum::<f32>().sqrt();
                    if raw_norm < NORM_EPS {
                        for j in 0..c {
                            dx[r * c + j] = dy[j] / nrm;
                        }
                        continue;
                    }
                    let dot: f32 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] = (dy[j] - y[j] * dot) / nrm;
                    }
                }
                acc(*x, &dx);
            }
            Op::RowMax { x, argmax } => {
                let c = last_dim(&nodes[x.0].shape);
                let mut dx = vec![0.0; nodes[x.0].value.len()];
                for (r, &j) in argmax.iter().enumerate() {
                    dx[r * c + j] = up[r];
                }
                acc(*x, &dx);
            }
            Op::WeightedSum { x, weights } => {
                let dx: Vec<f32> = weights.iter().map(|w| w * up[0]).collect();
                acc(*x, &dx);
            }
            Op::Sum(x) => {
                let dx = vec![up[0]; nodes[x.0].value.len()];
                acc(*x, &dx);
            }
            Op::Mean(x) => {
                let n = nodes[x.0].value.len();
                let dx = vec![up[0] / n as f32; n];
                acc(*x, &dx);
            }
        }
    }
}

pub(crate) fn softmax_into(src: &[f32], dst: &mut [f32]) {
    let max = src.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    let mut sum = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        sum += *d;
    }
    dst.iter_mut().for_each(|d| *d /= sum);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let i = g.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.leaf(&t(&[2, 2], &[2.0, 3.0, 4.0, 5.0]));
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c), &[2.0, 3.0, 4.0, 5.0]);

        let r = g.leaf(&t(&[1, 2], &[1.0, 2.0]));
        let col = g.leaf(&t(&[2, 1], &[3.0, 4.0]));
        let d = g.matmul(r, col).unwrap();
        assert_eq!(g.value(d), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::zeros(&[2, 3]));
        let b = g.leaf(&Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_equal_and_saturated() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        for &p in g.value(y) {
            assert!((p - 1.0 / 3.0).abs() < 1e-7);
        }
        let x = g.leaf(&t(&[3], &[1000.0, 0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        assert!((g.value(y)[0] - 1.0).abs() < 1e-6);
        assert!(g.value(y)[1].abs() < 1e-6);

        let x = g.leaf(&t(&[2], &[f32::NAN, 0.0]));
        assert!(matches!(g.softmax(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn layernorm_limits() {
        let mut g = Graph::new();
        let gain = g.leaf(&Tensor::full(&[4], 1.0));
        let bias = g.leaf(&Tensor::zeros(&[4]));
        let x = g.leaf(&t(&[1, 4], &[3.0; 4]));
        let y = g.layernorm(x, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).iter().all(|v| *v == 0.0));

        let gain = g.leaf(&Tensor::full(&[2], 1.0));
        let bias = g.leaf(&Tensor::zeros(&[2]));
        let x = g.leaf(&t(&[1, 2], &[1.0, -1.0]));
        let y = g.layernorm(x, gain, bias, 1e-5).unwrap();
        assert!((g.value(y)[0] - 1.0).abs() < 1e-4);
        assert!((g.value(y)[1] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn losses() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[1, 2], &[1.0, 3.0]));
        let same = g.mse(x, &[1.0, 3.0], None).unwrap();
        assert_eq!(g.scalar(same), 0.0);
        let l = g.mse(x, &[0.0, 1.0], None).unwrap();
        assert_eq!(g.scalar(l), 2.5);

        let logits = g.leaf(&t(&[1, 2], &[0.0, 0.0]));
        let ce = g.cross_entropy(logits, &[0], None).unwrap();
        assert!((g.scalar(ce) - std::f32::consts::LN_2).abs() < 1e-7);
        assert!(matches!(g.cross_entropy(logits, &[2], None), Err(Error::Vocabulary { id: 2, vocab: 2 })));
    }

    #[test]
    fn scalar_chain_and_fan_out() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[1], &[2.0]));
        let y = g.scale(x, 3.0);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x), Some(&[3.0][..]));

        let mut g = Graph::new();
        let x = g.leaf(&t(&[1], &[2.0]));
        let y = g.add(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x), Some(&[2.0][..]));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_subexpression_matches_unshared_rewrite() {
        let data = [0.3, -0.7, 0.9, 0.1];
        // shared: s = tanh(x); y = sum(s * s)
        let mut g = Graph::new();
        let x = g.leaf(&t(&[2, 2], &data));
        let s = g.tanh(x);
        let p = g.mul(s, s).unwrap();
        let y = g.sum(p);
        g.backward(y).unwrap();
        let shared = g.grad(x).unwrap().to_vec();
        // unshared: two separately computed tanh nodes
        let mut g = Graph::new();
        let x = g.leaf(&t(&[2, 2], &data));
        let s1 = g.tanh(x);
        let s2 = g.tanh(x);
        let p = g.mul(s1, s2).unwrap();
        let y = g.sum(p);
        g.backward(y).unwrap();
        assert_eq!(shared, g.grad(x).unwrap());
    }

    #[test]
    fn params_are_bound_once_and_grads_flow_back() {
        let mut w = t(&[1, 2], &[1.0, 2.0]);
        let mut frozen = t(&[1, 2], &[1.0, 1.0]);
        frozen.set_requires_grad(false);
        let mut g = Graph::new();
        let a = g.param(&w);
        let b = g.param(&w);
        assert_eq!(a, b);
        let f = g.param(&frozen);
        let p = g.mul(a, f).unwrap();
        let y = g.sum(p);
        g.backward(y).unwrap();
        assert!(g.accumulate_grad(&mut w));
        assert!(!g.accumulate_grad(&mut frozen));
        assert_eq!(w.grad(), Some(&[1.0, 1.0][..]));
    }

    #[test]
    fn row_max_breaks_ties_low() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[1, 3], &[0.5, 0.5, 0.1]));
        let m = g.row_max(x);
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), Some(&[1.0, 0.0, 0.0][..]));
    }
}
