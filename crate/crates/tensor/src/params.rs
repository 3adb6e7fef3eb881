use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::graph::{Grads, Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by optimizers.
    Weight,
    /// State carried with the model but never differentiated (running statistics, averages).
    Buffer,
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    kind: ParamKind,
    value: Arc<Tensor<T>>,
}

/// Named, ordered collection of parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: BTreeMap::new() }
    }

    pub fn root(&mut self) -> Path<'_, T> {
        Path { store: self, prefix: String::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn insert(&mut self, name: String, kind: ParamKind, value: Tensor<T>) -> ParamId {
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(Entry { name, kind, value: Arc::new(value) });
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_arc(&self, id: ParamId) -> Arc<Tensor<T>> {
        self.entries[id.0].value.clone()
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        self.entries[id.0].value.expect_shape(value.shape())?;
        self.entries[id.0].value = Arc::new(value);
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamKind, &Tensor<T>)> + '_ {
        self.entries.iter().map(|e| (e.name.as_str(), e.kind, e.value.as_ref()))
    }

    pub fn num_weights(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == ParamKind::Weight).map(|e| e.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), kind: e.kind, value: Arc::new(e.value.cast()) })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Overwrite every entry of `self` from `other` by name; shapes must agree.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for e in self.entries.iter_mut() {
            let i = other.index.get(&e.name).ok_or_else(|| TensorError::UnknownParam(e.name.clone()))?;
            let v = &other.entries[*i].value;
            e.value.expect_shape(v.shape())?;
            e.value = v.clone();
        }
        Ok(())
    }

    /// True when both stores hold identical values under the same names.
    pub fn same_values(&self, other: &ParamStore<T>) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().all(|e| {
                other
                    .index
                    .get(&e.name)
                    .is_some_and(|&i| other.entries[i].value.data() == e.value.data())
            })
    }
}

/// Builder handle that prefixes parameter names, in the spirit of `nn::Path`.
pub struct Path<'a, T> {
    store: &'a mut ParamStore<T>,
    prefix: String,
}

impl<T: Real> Path<'_, T> {
    pub fn sub(&mut self, name: impl AsRef<str>) -> Path<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Path { store: self.store, prefix }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn weight(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let n = self.full(name);
        self.store.insert(n, ParamKind::Weight, value)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let n = self.full(name);
        self.store.insert(n, ParamKind::Buffer, value)
    }
}

/// A parameter store attached to a graph for one forward pass.
///
/// Each parameter becomes a leaf the first time it is requested. When the binding is
/// frozen the leaves carry no gradient and no weight gradients are ever computed.
pub struct Bound<'g, 's, T> {
    graph: &'g Graph<T>,
    store: &'s ParamStore<T>,
    trainable: bool,
    leaves: RefCell<Vec<Option<Var<'g, T>>>>,
}

impl<'g, 's, T: Real> Bound<'g, 's, T> {
    pub fn new(graph: &'g Graph<T>, store: &'s ParamStore<T>, trainable: bool) -> Self {
        Self { graph, store, trainable, leaves: RefCell::new(vec![None; store.len()]) }
    }

    pub fn frozen(graph: &'g Graph<T>, store: &'s ParamStore<T>) -> Self {
        Self::new(graph, store, false)
    }

    pub fn trainable(graph: &'g Graph<T>, store: &'s ParamStore<T>) -> Self {
        Self::new(graph, store, true)
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn var(&self, id: ParamId) -> Var<'g, T> {
        let mut leaves = self.leaves.borrow_mut();
        if let Some(v) = leaves[id.0] {
            return v;
        }
        let grad = self.trainable && self.store.kind(id) == ParamKind::Weight;
        let v = self.graph.leaf_arc(self.store.get_arc(id), grad);
        leaves[id.0] = Some(v);
        v
    }

    /// Raw tensor of a parameter, outside the graph.
    pub fn tensor(&self, id: ParamId) -> &'s Tensor<T> {
        self.store.get(id)
    }

    /// Per-parameter gradients indexed like the store; `None` for untouched or frozen entries.
    pub fn grads(&self, grads: &Grads<T>) -> Vec<Option<Tensor<T>>> {
        self.leaves.borrow().iter().map(|l| l.and_then(|v| grads.get(v).cloned())).collect()
    }
}
