use super::{Element, Graph, NodeId, Tensor};
use indexmap::IndexMap;

/// Named parameter collection. Iteration order is insertion order, which
/// fixes checkpoint layout and optimizer update order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<E> {
    entries: IndexMap<String, Tensor<E>>,
}

impl<E: Element> Default for ParamSet<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamSet<E> {
    pub fn new() -> Self {
        Self { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<E>) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<E>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<E>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Register every parameter on a graph. `trainable` decides which leaves
    /// track gradients.
    pub fn register(
        &self,
        graph: &mut Graph<E>,
        trainable: impl Fn(&str) -> bool,
    ) -> IndexMap<String, NodeId> {
        let mut ids = IndexMap::new();
        for (name, value) in &self.entries {
            let id = graph.leaf(value.clone(), trainable(name));
            ids.insert(name.clone(), id);
        }
        ids
    }

    /// Pull accumulated gradients off a graph for the given registration.
    /// Parameters without a gradient buffer are omitted.
    pub fn collect_grads(
        &self,
        graph: &Graph<E>,
        ids: &IndexMap<String, NodeId>,
    ) -> IndexMap<String, Vec<E>> {
        let mut grads = IndexMap::new();
        for (name, &id) in ids {
            if let Some(g) = graph.grad(id) {
                grads.insert(name.clone(), g.to_vec());
            }
        }
        grads
    }

    pub fn convert<F: Element>(&self) -> ParamSet<F> {
        let mut out = ParamSet::new();
        for (name, t) in &self.entries {
            out.insert(name.clone(), t.map(|v| F::from_f64(v.to_f64().unwrap()).unwrap()));
        }
        out
    }
}
