//! Named parameter storage shared between the model and the optimizer.

use std::collections::HashMap;

use ndarray::IxDyn;

use crate::graph::{Array, Gradients, Graph, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array>,
    index: HashMap<String, usize>,
}

/// Parameters registered on one [`Graph`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps vars created by the caller, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name, which is a
    /// programming error in model construction.
    pub fn add(&mut self, name: impl Into<String>, value: Array) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Array {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub(crate) fn values_mut(&mut self) -> &mut [Array] {
        &mut self.values
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Scalars in parameters whose name satisfies `pred`.
    pub fn num_scalars_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.iter()
            .filter(|(_, n, _)| pred(n))
            .map(|(_, _, v)| v.len())
            .sum()
    }

    /// Places every parameter on `g`; `trainable` selects leaf vs constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    g.leaf(v.clone())
                } else {
                    g.constant(v.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Collects gradients for every parameter, zeros where unreachable.
    pub fn gradients(&self, bound: &Bound, grads: &Gradients) -> Vec<Array> {
        self.values
            .iter()
            .zip(&bound.vars)
            .map(|(v, var)| grads.get_or_zeros(*var, v.shape()))
            .collect()
    }

    /// Replaces values with those of `other`, which must have identical
    /// names and shapes.
    pub fn copy_from(&mut self, other: &ParamStore) {
        assert_eq!(self.names, other.names);
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            dst.assign(src);
        }
    }

    pub fn values(&self) -> &[Array] {
        &self.values
    }

    pub fn zeros_like(&self) -> Vec<Array> {
        self.values
            .iter()
            .map(|v| Array::zeros(IxDyn(v.shape())))
            .collect()
    }
}
