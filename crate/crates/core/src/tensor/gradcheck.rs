//! Central finite-difference oracle for checking analytic gradients.
//!
//! The function under test is reduced to a scalar `f = Σ wᵢ yᵢ` with fixed
//! random weights, accumulated in f64 so that reduction round-off does not
//! swamp the difference quotient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;
use crate::optim::Module;

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Per input: `max|analytic - numeric| / max(max|analytic|, max|numeric|)`.
    pub rel_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().cloned().fold(0.0, f64::max)
    }
}

fn projection(g: &Graph, out: Var, weights: &[f32]) -> f64 {
    g.value(out).iter().zip(weights).map(|(&y, &w)| y as f64 * w as f64).sum()
}

/// Compares reverse-mode gradients of `build` against central differences with
/// step `h` for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], h: f32, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.set_requires_grad(true);
                g.leaf(&t)
            })
            .collect();
        let out = build(&mut g, &vars)?;
        Ok((g, vars, out))
    };

    let (mut g, vars, out) = eval(inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let weights: Vec<f32> = (0..g.value(out).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    g.backward_with_seed(out, &weights)?;

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (idx, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match g.grad(*var) {
            Some(gr) => gr.iter().map(|&v| v as f64).collect(),
            None => vec![0.0; inputs[idx].numel()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        for e in 0..inputs[idx].numel() {
            let x0 = inputs[idx].data()[e];
            let (xp, xm) = (x0 + h, x0 - h);
            work[idx].data_mut()[e] = xp;
            let (gp, _, op) = eval(&work)?;
            let fp = projection(&gp, op, &weights);
            work[idx].data_mut()[e] = xm;
            let (gm, _, om) = eval(&work)?;
            let fm = projection(&gm, om, &weights);
            work[idx].data_mut()[e] = x0;
            numeric.push((fp - fm) / (xp as f64 - xm as f64));
        }
        let scale = analytic.iter().chain(&numeric).fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = analytic.iter().zip(&numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        rel_errors.push(if scale == 0.0 { 0.0 } else { diff / scale });
    }
    Ok(GradCheck { rel_errors })
}

/// Same oracle applied to every trainable parameter of a [`Module`]. The
/// closure runs the module's forward pass and returns the output node.
pub fn check_module_gradients<M, F>(module: &mut M, h: f32, forward: F) -> Result<Vec<(String, f64)>>
where
    M: Module,
    F: Fn(&M, &mut Graph) -> Result<Var>,
{
    module.zero_grads();
    let mut g = Graph::new();
    let out = forward(module, &mut g)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let weights: Vec<f32> = (0..g.value(out).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    g.backward_with_seed(out, &weights)?;
    module.collect_grads(&g);
    drop(g);

    let eval = |m: &M| -> Result<f64> {
        let mut g = Graph::new();
        let out = forward(m, &mut g)?;
        Ok(projection(&g, out, &weights))
    };

    let names: Vec<String> = module.named_params().into_iter().filter(|(_, t)| t.requires_grad()).map(|(n, _)| n).collect();
    let mut raw = Vec::with_capacity(names.len());
    for name in names {
        let analytic: Vec<f64> = param(module, &name).grad().expect("collected").iter().map(|&v| v as f64).collect();
        let mut numeric = Vec::with_capacity(analytic.len());
        for e in 0..analytic.len() {
            let x0 = param(module, &name).data()[e];
            let (xp, xm) = (x0 + h, x0 - h);
            param_mut(module, &name).data_mut()[e] = xp;
            let fp = eval(module)?;
            param_mut(module, &name).data_mut()[e] = xm;
            let fm = eval(module)?;
            param_mut(module, &name).data_mut()[e] = x0;
            numeric.push((fp - fm) / (xp as f64 - xm as f64));
        }
        let scale = analytic.iter().chain(&numeric).fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = analytic.iter().zip(&numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        raw.push((name, diff, scale));
    }
    module.zero_grads();
    // Some parameters have an exactly-zero true gradient (a key bias shifts
    // every score of a query equally), so each tensor is measured against the
    // largest gradient anywhere in the module rather than its own.
    let global = raw.iter().fold(0.0f64, |m, r| m.max(r.2));
    Ok(raw
        .into_iter()
        .map(|(name, diff, scale)| {
            let denom = scale.max(global);
            (name, if denom == 0.0 { 0.0 } else { diff / denom })
        })
        .collect())
}

fn param<'a, M: Module>(m: &'a M, name: &str) -> &'a Tensor {
    m.named_params().into_iter().find(|(n, _)| n == name).map(|(_, t)| t).expect("known parameter")
}

fn param_mut<'a, M: Module>(m: &'a mut M, name: &str) -> &'a mut Tensor {
    m.named_params_mut().into_iter().find(|(n, _)| n == name).map(|(_, t)| t).expect("known parameter")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn agrees_on_elementwise_ops() {
        let x = Tensor::new(vec![3], vec![0.5, -0.25, 0.75]).unwrap();
        let ok = check_gradients(std::slice::from_ref(&x), 1e-3, |g, v| Ok(g.scale(v[0], 2.0))).unwrap();
        assert!(ok.max_rel_error() < 1e-3);
        let sq = check_gradients(&[x], 1e-3, |g, v| g.mul(v[0], v[0])).unwrap();
        assert!(sq.max_rel_error() < 1e-3);
    }
}
