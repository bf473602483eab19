//! Named trainable parameters, kept outside any tape.
//!
//! Parameters live in a [`ParamStore`]; each forward pass leases them onto a
//! fresh tape as leaf nodes via [`TapeParams`], and after `backward` the
//! tape's leaf gradients are accumulated back with
//! [`ParamStore::accumulate_grads`]. Iteration order is registration order,
//! which keeps optimizer updates and checkpoints deterministic.

use std::collections::HashMap;

use crate::autodiff::tape::{NodeId, Tape};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
}

#[derive(Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor under `name`; names must be unique.
    pub fn register(&mut self, name: &str, value: Tensor) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!(
                "parameter {name:?} registered twice"
            )));
        }
        let grad = vec![0.0; value.len()];
        let slot = self.params.len();
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
        });
        self.index.insert(name.to_string(), slot);
        Ok(slot)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn slot(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn value(&self, slot: usize) -> &Tensor {
        &self.params[slot].value
    }

    pub fn value_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.params[slot].value
    }

    pub fn grad(&self, slot: usize) -> &[f64] {
        &self.params[slot].grad
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.params[slot].name
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Add the tape's leaf gradients into the store (accumulating; callers
    /// decide when to zero).
    pub fn accumulate_grads(&mut self, tape: &Tape) {
        for (slot, grad) in tape.slot_grads() {
            let dst = &mut self.params[slot].grad;
            debug_assert_eq!(dst.len(), grad.len());
            for (d, g) in dst.iter_mut().zip(grad) {
                *d += g;
            }
        }
    }

    /// Total number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Snapshot as `(name, tensor)` pairs in registration order.
    pub fn export(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Overwrite values from `(name, tensor)` pairs. Every stored parameter
    /// must be present with a matching shape; extra names are rejected.
    pub fn import(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let mut seen = vec![false; self.params.len()];
        for (name, tensor) in entries {
            let slot = self.slot(name).map_err(|_| {
                Error::Format {
                    what: "checkpoint",
                    message: format!("unexpected parameter {name:?}"),
                }
            })?;
            if self.params[slot].value.shape() != tensor.shape() {
                return Err(Error::Format {
                    what: "checkpoint",
                    message: format!(
                        "parameter {name:?} has shape {:?}, expected {:?}",
                        tensor.shape(),
                        self.params[slot].value.shape()
                    ),
                });
            }
            self.params[slot].value = tensor.clone();
            seen[slot] = true;
        }
        if let Some(slot) = seen.iter().position(|s| !s) {
            return Err(Error::Format {
                what: "checkpoint",
                message: format!("missing parameter {:?}", self.params[slot].name),
            });
        }
        Ok(())
    }
}

/// Per-tape memo of leased parameters, so that leasing the same slot twice
/// (e.g. shared part queries across a test/exemplar pair) yields one shared
/// leaf node and gradients combine through it.
#[derive(Default)]
pub struct TapeParams {
    nodes: HashMap<usize, NodeId>,
}

impl TapeParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node(&mut self, tape: &mut Tape, store: &ParamStore, slot: usize) -> NodeId {
        *self
            .nodes
            .entry(slot)
            .or_insert_with(|| tape.leaf_for_slot(store.value(slot).clone(), slot))
    }

    pub fn by_name(&mut self, tape: &mut Tape, store: &ParamStore, name: &str) -> Result<NodeId> {
        let slot = store.slot(name)?;
        Ok(self.node(tape, store, slot))
    }
}
