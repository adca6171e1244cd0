//! Named parameter storage, binding into a graph, and the Adam optimizer.

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Named tensors, iterated in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Copy every entry of `other` whose name starts with `prefix`.
    pub fn merge_prefix(&mut self, other: &ParamStore, prefix: &str) {
        for (k, v) in other.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.insert(k, v.clone());
        }
    }
}

/// Lazily lifts parameters from a [`ParamStore`] into a graph, once per name.
///
/// Parameters selected by the `trainable` predicate become tracked leaves;
/// the rest enter the graph as constants.
pub struct ParamBinding<'g, 's> {
    graph: &'g Graph,
    store: &'s ParamStore,
    trainable: Box<dyn Fn(&str) -> bool + 's>,
    bound: RefCell<BTreeMap<String, Var<'g>>>,
}

impl<'g, 's> ParamBinding<'g, 's> {
    pub fn new(graph: &'g Graph, store: &'s ParamStore, trainable: impl Fn(&str) -> bool + 's) -> Self {
        Self { graph, store, trainable: Box::new(trainable), bound: RefCell::new(BTreeMap::new()) }
    }

    /// Every parameter is tracked.
    pub fn all_trainable(graph: &'g Graph, store: &'s ParamStore) -> Self {
        Self::new(graph, store, |_| true)
    }

    /// Every parameter is a constant.
    pub fn frozen(graph: &'g Graph, store: &'s ParamStore) -> Self {
        Self::new(graph, store, |_| false)
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// Bind `name`, panicking if it is missing from the store.
    pub fn get(&self, name: &str) -> Var<'g> {
        self.try_get(name).unwrap_or_else(|| panic!("parameter `{name}` not found"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var<'g>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Some(*v);
        }
        let value = self.store.get(name)?.clone();
        let var = if (self.trainable)(name) {
            self.graph.variable(value)
        } else {
            self.graph.constant(value)
        };
        self.bound.borrow_mut().insert(name.to_string(), var);
        Some(var)
    }

    /// Bind `name` to an existing graph node instead of the stored value.
    pub fn bind(&self, name: impl Into<String>, var: Var<'g>) {
        self.bound.borrow_mut().insert(name.into(), var);
    }

    /// Gradients of every bound trainable parameter, keyed by name.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(k, v)| (k.clone(), grads.get_or_zeros(*v)))
            .collect()
    }
}

/// Global L2 norm of a gradient map.
pub fn grad_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescale gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let Some(p) = store.get_mut(name) else { continue };
            let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *pv -= self.lr * (*mv / c1) / ((*vv / c2).sqrt() + self.eps);
            }
        }
    }
}
