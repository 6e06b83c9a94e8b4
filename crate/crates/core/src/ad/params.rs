use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AdError, Tensor};

/// Which optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// HexPlane planes and heads.
    Radiance,
    /// Twist-field MLPs and the acceleration prior.
    Motion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named parameter tensors, each with a same-shaped gradient buffer.
///
/// Shapes are fixed once an entry is added.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Re-registering an existing name is an error.
    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        value: Tensor,
    ) -> Result<ParamId, AdError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(AdError::DuplicateParam(name));
        }
        let id = ParamId(self.entries.len());
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.by_name.insert(name.clone(), id.0);
        self.entries.push(ParamEntry {
            name,
            group,
            value,
            grad,
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    /// Replaces a value, keeping the registered shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<(), AdError> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(AdError::ShapeMismatch {
                context: format!("set_value({})", entry.name),
                expected: entry.value.shape(),
                found: value.shape(),
            });
        }
        entry.value = value;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// Adds `grads` into the gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.iter() {
            self.entries[id.0].grad.add_assign(g);
        }
    }

    /// Sum of squared gradient entries in a group.
    pub fn grad_norm_sq(&self, group: ParamGroup) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .flat_map(|e| e.grad.data().iter())
            .map(|g| g * g)
            .sum()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Gradients produced by one backward pass, keyed by parameter.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub(crate) fn with_len(n: usize) -> Self {
        Self {
            slots: vec![None; n],
        }
    }

    pub(crate) fn accumulate(
        &mut self,
        id: ParamId,
        shape: (usize, usize),
        add: impl FnOnce(&mut Tensor),
    ) {
        if id.0 >= self.slots.len() {
            self.slots.resize(id.0 + 1, None);
        }
        let slot = self.slots[id.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1));
        add(slot);
    }

    /// Gradient for `id`, or `None` when the parameter was not reached.
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|t| (ParamId(i), t)))
    }

    /// Element-wise sum, preserving the order of `self` then `other`.
    pub fn merge(&mut self, other: &Gradients) {
        for (id, g) in other.iter() {
            self.accumulate(id, g.shape(), |slot| slot.add_assign(g));
        }
    }
}
