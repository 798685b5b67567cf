//! Named, role-tagged parameter storage for a model.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// What a parameter tensor is, structurally. Roles drive weight-scale
/// initialization rules and per-block diagnostics grouping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    TokenEmbedding,
    PositionEmbedding,
    AttnQuery,
    AttnKey,
    AttnValue,
    AttnOutput,
    FfnIn,
    FfnOut,
    Bias,
    /// The key-projection bias. Softmax shift invariance makes its loss
    /// gradient exactly zero (adding a constant to every key shifts each
    /// score row uniformly), so the tensor exists but never trains.
    AttnKeyBias,
    LnGamma,
    LnBeta,
    HeadWeight,
}

impl ParamRole {
    /// Residual-branch weight matrices subject to DeepNorm's beta scaling:
    /// the feedforward matrices and the attention value/output projections.
    /// Query/key projections, embeddings, biases, and LN parameters are not.
    pub fn beta_scaled(self) -> bool {
        matches!(
            self,
            ParamRole::AttnValue | ParamRole::AttnOutput | ParamRole::FfnIn | ParamRole::FfnOut
        )
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T: Real> {
    pub name: String,
    /// Block index for per-layer parameters; None for embeddings, the final
    /// norm, and the head.
    pub layer: Option<usize>,
    pub role: ParamRole,
    pub tensor: Tensor<T>,
}

/// Ordered collection of model parameters. The order is the binding order
/// used for graph leaves and optimizer state, so it must stay stable across
/// save/load.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Real> {
    entries: Vec<ParamEntry<T>>,
    beta_applied: bool,
    training_started: bool,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            beta_applied: false,
            training_started: false,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, layer: Option<usize>, role: ParamRole, mut tensor: Tensor<T>) {
        tensor.requires_grad = true;
        self.entries.push(ParamEntry {
            name: name.into(),
            layer,
            role,
            tensor,
        });
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Total number of scalar parameters actually allocated.
    pub fn total_elements(&self) -> u64 {
        self.entries.iter().map(|e| e.tensor.numel() as u64).sum()
    }

    pub fn beta_applied(&self) -> bool {
        self.beta_applied
    }

    pub(crate) fn set_beta_applied(&mut self) {
        self.beta_applied = true;
    }

    pub fn training_started(&self) -> bool {
        self.training_started
    }

    pub fn mark_training_started(&mut self) {
        self.training_started = true;
    }

    /// Binds every parameter as a graph leaf, in store order.
    pub fn bind(&self, graph: &mut Graph<T>) -> Vec<Var> {
        self.entries.iter().map(|e| graph.leaf(&e.tensor)).collect()
    }

    /// Accumulates graph gradients into the tensors' grad buffers. `bound`
    /// must be the vector returned by [`ParamStore::bind`] on this graph.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>, bound: &[Var]) -> Result<()> {
        if bound.len() != self.entries.len() {
            return Err(Error::contract(
                "bound variable list does not match parameter store",
            ));
        }
        for (entry, var) in self.entries.iter_mut().zip(bound) {
            if let Some(g) = graph.grad(*var) {
                entry.tensor.accumulate_grad(g);
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Global L2 norm over all parameter gradients.
    pub fn grad_global_norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| {
                let n = e.tensor.grad_l2_norm();
                n * n
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Scales every gradient by `factor`.
    pub fn scale_grads(&mut self, factor: f64) {
        let f = T::from_f64(factor);
        for e in &mut self.entries {
            if let Some(g) = e.tensor.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = *x * f);
            }
        }
    }
}
