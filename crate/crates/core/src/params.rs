//! Named parameter storage, initialization and counting.

use std::collections::HashMap;

use himode_autograd::{Float, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Handle of one parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat list of named parameter tensors. Names are dotted paths such as
/// `encoder.0.qkv.weight`; the first segment is the block group.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
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

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    /// Graph node for `id`; repeated calls within one graph share the node.
    pub fn var(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        g.param(id.0, &self.values[id.0])
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Parameter counts per block group (first name segment), in
    /// registration order.
    pub fn count_by_group(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            let group = name.split('.').next().unwrap_or(name);
            match out.iter_mut().find(|(g, _)| g == group) {
                Some((_, n)) => *n += v.numel(),
                None => out.push((group.to_string(), v.numel())),
            }
        }
        out
    }

    /// Number of scalars whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    /// Gradients of every parameter after `g.backward`, zeros for
    /// parameters the graph never touched.
    pub fn grads(&self, g: &Graph<T>) -> Vec<Tensor<T>> {
        let vars: HashMap<usize, Var> = g.param_vars().into_iter().collect();
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| match vars.get(&i) {
                Some(&var) => g.grad_tensor(var),
                None => Tensor::zeros(v.shape()),
            })
            .collect()
    }
}

/// Registers parameters under a scoped name and draws their initial values
/// from a seeded stream. Values are generated in 64-bit so a model built in
/// either precision from one seed holds the same weights.
pub struct ParamBuilder {
    store: ParamStore<f64>,
    rng: ChaCha8Rng,
    scope: Vec<String>,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            scope: Vec::new(),
        }
    }

    pub fn scoped<R>(&mut self, name: impl std::fmt::Display, f: impl FnOnce(&mut Self) -> R) -> R {
        self.scope.push(name.to_string());
        let out = f(self);
        self.scope.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.scope.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        let t = Tensor::new(shape, data).expect("shape matches data");
        let full = self.full_name(name);
        self.store.push(full, t)
    }

    /// Kaiming-uniform (ReLU gain): bound `sqrt(6 / fan_in)`.
    pub fn kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        self.uniform(name, shape, (6.0 / fan_in.max(1) as f64).sqrt())
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let full = self.full_name(name);
        self.store.push(full, Tensor::full(shape, value))
    }

    pub fn finish<T: Float>(self) -> ParamStore<T> {
        self.store.cast()
    }
}
