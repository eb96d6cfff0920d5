//! Named parameter storage and per-tape binding.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named tensors. Insertion order is the
/// serialization order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Normal-initialized parameter.
    pub fn normal<R: Rng>(
        &mut self,
        rng: &mut R,
        name: impl Into<String>,
        shape: Vec<usize>,
        std: f64,
    ) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::new(shape, data).expect("shape"))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .cloned()
            .zip(self.values.iter().cloned())
            .collect()
    }

    /// Overwrites every parameter from `named`; the name sets and shapes
    /// must match exactly.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        if named.len() != self.len() {
            return Err(Error::format(
                "checkpoint",
                format!("expected {} tensors, found {}", self.len(), named.len()),
            ));
        }
        for (name, t) in named {
            let id = self
                .id(name)
                .ok_or_else(|| Error::format("checkpoint", format!("unknown tensor {name}")))?;
            if self.values[id.0].shape() != t.shape() {
                return Err(Error::Shape {
                    op: "load checkpoint",
                    lhs: self.values[id.0].shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            self.values[id.0] = t.clone();
        }
        Ok(())
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| tape.leaf(v.clone(), trainable))
            .collect();
        Bound { vars }
    }
}

/// Tape handles for a [`ParamStore`], index-aligned with it.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles index-aligned with a store's parameters, e.g. leaves created
    /// by a gradient checker.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Running sum of gradients, index-aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradBuffer {
    grads: Vec<Vec<f64>>,
}

impl GradBuffer {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.values.iter().map(|v| vec![0.0; v.numel()]).collect(),
        }
    }

    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) {
        for (acc, &var) in self.grads.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(var) {
                acc.iter_mut().zip(g.data()).for_each(|(a, g)| *a += g);
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.grads.iter_mut().flatten().for_each(|v| *v *= c);
    }

    pub fn zero(&mut self) {
        self.grads.iter_mut().flatten().for_each(|v| *v = 0.0);
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub(crate) fn slots(&self) -> &[Vec<f64>] {
        &self.grads
    }
}
