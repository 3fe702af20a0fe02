//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! Nodes are appended in topological order, so [`Graph::backward`] is a
//! single reverse sweep. Parameters live in a [`ParamStore`] outside the
//! graph and enter it through [`Graph::param`]; a fresh graph is built for
//! every step.

mod conv;
mod norm;
mod ops;

use std::collections::HashMap;

use crate::tensor::Tensor;

pub use conv::{ConvGeometry, KernelReduction};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Inputs to a backward closure.
pub struct BackwardCtx<'a> {
    pub grad: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    track: bool,
    params: HashMap<ParamId, Var>,
}

impl Graph {
    /// A graph that records backward closures.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            track: true,
            params: HashMap::new(),
        }
    }

    /// A graph for inference: no backward closures are stored.
    pub fn inference() -> Self {
        Self {
            track: false,
            ..Self::new()
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    /// A leaf that accumulates gradient (when tracking).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let track = self.track;
        self.push(value, Vec::new(), None, track)
    }

    /// Enter a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let trainable = store.is_trainable(id);
        let v = if trainable {
            self.leaf(store.get(id).clone())
        } else {
            self.constant(store.get(id).clone())
        };
        self.params.insert(id, v);
        v
    }

    /// Copy of `v` cut off from gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Record an operation. `backward` is dropped when no input needs
    /// gradient or the graph is not tracking.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor,
        backward: impl Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>> + 'static,
    ) -> Var {
        let requires_grad = self.track && inputs.iter().any(|&v| self.requires_grad(v));
        let backward: Option<BackwardFn> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push(value, inputs.to_vec(), backward, requires_grad)
    }

    fn push(
        &mut self,
        value: Tensor,
        parents: Vec<Var>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`, seeded with gradient 1.
    pub fn backward(&self, loss: Var) -> Gradients {
        let seed = Tensor::full(self.value(loss).shape(), 1.0);
        self.backward_with(loss, seed)
    }

    /// Reverse sweep from `output` seeded with an explicit upstream gradient.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.requires_grad(output) {
            return Gradients {
                grads,
                params: self.params.clone(),
            };
        }
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                inputs: node.parents.iter().map(|p| self.value(*p)).collect(),
                output: &node.value,
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.value(*p).shape());
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            // Keep gradients of intermediate nodes available to callers.
            grads[i] = Some(grad);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.get(*v))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    trainable: Vec<bool>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, true)
    }

    /// A stored tensor that never receives gradient (e.g. EMA state).
    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, false)
    }

    fn insert(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(trainable);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_elements(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central finite differences in `f64` over an `f32` forward pass.

    use super::*;

    /// Compares analytic gradients of `f` against finite differences for
    /// every element of every input (up to `max_per_input` elements each).
    /// Returns the worst relative error seen.
    pub fn check(
        inputs: &[Tensor],
        eps: f32,
        max_per_input: usize,
        f: impl Fn(&mut Graph, &[Var]) -> Var,
    ) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);
        let mut worst = 0.0f64;
        for (i, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
            let n = t.numel();
            let step = (n / max_per_input).max(1);
            for j in (0..n).step_by(step) {
                let eval = |delta: f32| {
                    let mut perturbed: Vec<Tensor> = inputs.to_vec();
                    perturbed[i].data_mut()[j] += delta;
                    let mut g = Graph::inference();
                    let vars: Vec<Var> = perturbed.into_iter().map(|t| g.constant(t)).collect();
                    let out = f(&mut g, &vars);
                    g.value(out).sum()
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps as f64);
                let a = analytic.data()[j] as f64;
                let denom = a.abs().max(numeric.abs()).max(1e-2);
                worst = worst.max((a - numeric).abs() / denom);
            }
        }
        worst
    }
}
