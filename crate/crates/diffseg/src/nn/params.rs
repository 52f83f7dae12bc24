//! Flat parameter and gradient storage shared by all layers.
//!
//! Layers hold `ParamId` handles into a single `Params` store, which keeps
//! the optimizer, gradient clipping, and checkpoint serialization trivial.

use std::collections::HashMap;

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Params<S: Scalar> {
    names: Vec<String>,
    values: Vec<ArrayD<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Params<S> {
    pub fn new() -> Self {
        Params {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: ArrayD<S>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id.0);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<S> {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<S>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.values.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Overwrite a parameter by name; shapes must match (checkpoint load).
    pub fn set_by_name(&mut self, name: &str, value: ArrayD<S>) -> Result<()> {
        let idx = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if self.values[idx].shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name}: have {:?}, checkpoint {:?}",
                self.values[idx].shape(),
                value.shape()
            )));
        }
        self.values[idx] = value;
        Ok(())
    }
}

impl<S: Scalar> Default for Params<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient slots aligned with a `Params` store.
#[derive(Debug, Clone)]
pub struct Grads<S: Scalar> {
    slots: Vec<Option<ArrayD<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn for_params(params: &Params<S>) -> Self {
        Grads {
            slots: vec![None; params.len()],
        }
    }

    pub fn accumulate(&mut self, id: ParamId, grad: ArrayD<S>) {
        match &mut self.slots[id.0] {
            Some(g) => *g += &grad,
            slot @ None => *slot = Some(grad),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&ArrayD<S>> {
        self.slots[id.0].as_ref()
    }

    pub fn clear(&mut self) {
        for s in &mut self.slots {
            *s = None;
        }
    }

    /// Global L2 norm over all gradient entries.
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0;
        for s in self.slots.iter().flatten() {
            for v in s.iter() {
                let v = v.to_double();
                acc += v * v;
            }
        }
        acc.sqrt()
    }

    pub fn scale(&mut self, factor: S) {
        for s in self.slots.iter_mut().flatten() {
            s.mapv_inplace(|v| v * factor);
        }
    }
}
