//! Central-difference verification of analytic gradients.

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::Model;
use crate::params::ParamRole;
use crate::tensor::{Real, Tensor};

/// Compares the analytic gradient of a scalar-valued graph function against
/// central finite differences, one parameter coordinate at a time.
///
/// `f` receives a fresh graph plus one leaf per entry of `params` (gradient
/// tracking forced on) and must return a scalar node. Returns the maximum
/// over all coordinates of `|analytic - numeric| / max(1e-8, |analytic| +
/// |numeric|)`.
///
/// `f` must be deterministic; this is enforced by evaluating the baseline
/// twice and demanding bitwise agreement.
pub fn finite_diff_check<T, F>(f: F, params: &[Tensor<T>], h: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::contract("finite_diff_check requires h > 0"));
    }
    let tracked: Vec<Tensor<T>> = params
        .iter()
        .map(|p| p.clone().requires_grad(true))
        .collect();

    let eval = |ps: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out)?.as_f64())
    };

    let base_a = eval(&tracked)?;
    let base_b = eval(&tracked)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(Error::NonDeterministic {
            first: base_a,
            second: base_b,
        });
    }

    // Analytic gradients in one forward + backward.
    let mut g = Graph::new();
    let vars: Vec<Var> = tracked.iter().map(|p| g.leaf(p)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&tracked)
        .map(|(v, p)| match g.grad(*v) {
            Some(gr) => gr.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; p.numel()],
        })
        .collect();

    let mut probe = tracked.clone();
    let step = T::from_f64(h);
    let mut max_rel = 0.0f64;
    for (pi, grads) in analytic.iter().enumerate() {
        for ci in 0..grads.len() {
            let orig = probe[pi].data()[ci];
            probe[pi].data_mut()[ci] = orig + step;
            let plus = eval(&probe)?;
            probe[pi].data_mut()[ci] = orig - step;
            let minus = eval(&probe)?;
            probe[pi].data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grads[ci];
            let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

/// Result of checking a whole model's gradients on one batch.
#[derive(Debug, Clone, Copy)]
pub struct ModelGradCheck {
    /// Max relative error over every coordinate probed by central
    /// differences.
    pub max_rel_error: f64,
    /// Max |analytic gradient| over the key-projection biases, which must
    /// be zero by softmax shift invariance.
    pub max_inert_grad: f64,
}

impl ModelGradCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance && self.max_inert_grad < 1e-12
    }
}

/// Verifies a model's loss gradients on `batch`.
///
/// Every parameter except the key-projection biases is probed with central
/// differences. The key biases cannot be checked that way: their true
/// gradient is exactly zero, so the numeric estimate is pure rounding noise
/// and the relative-error formula saturates. Instead the analytic gradient
/// is asserted to be zero directly, which is the stronger statement.
pub fn check_model_gradients(model: &Model<f64>, batch: &Batch, h: f64) -> Result<ModelGradCheck> {
    let inert: Vec<usize> = (0..model.params.len())
        .filter(|&i| model.params.entries()[i].role == ParamRole::AttnKeyBias)
        .collect();

    // Analytic pass over the full model for the inert-gradient assertion.
    let mut graph = Graph::new();
    let bound = model.params.bind(&mut graph);
    let trace = model.forward_bound(&mut graph, bound, &batch.input_ids, batch.batch)?;
    let loss = graph.cross_entropy(trace.logits, &batch.targets, crate::data::IGNORE_INDEX)?;
    graph.backward(loss)?;
    let mut max_inert_grad = 0.0f64;
    for &i in &inert {
        if let Some(g) = graph.grad(trace.bound[i]) {
            for v in g {
                max_inert_grad = max_inert_grad.max(v.abs());
            }
        }
    }

    let kept: Vec<usize> = (0..model.params.len()).filter(|i| !inert.contains(i)).collect();
    let tensors: Vec<Tensor<f64>> = kept
        .iter()
        .map(|&i| model.params.entries()[i].tensor.clone())
        .collect();
    let max_rel_error = finite_diff_check(
        |g, vars| {
            let mut bound = Vec::with_capacity(model.params.len());
            let mut vi = 0;
            for (i, e) in model.params.entries().iter().enumerate() {
                if kept.contains(&i) {
                    bound.push(vars[vi]);
                    vi += 1;
                } else {
                    bound.push(g.leaf(&e.tensor.clone().requires_grad(false)));
                }
            }
            let trace = model.forward_bound(g, bound, &batch.input_ids, batch.batch)?;
            g.cross_entropy(trace.logits, &batch.targets, crate::data::IGNORE_INDEX)
        },
        &tensors,
        h,
    )?;
    Ok(ModelGradCheck {
        max_rel_error,
        max_inert_grad,
    })
}
