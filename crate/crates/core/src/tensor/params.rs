use std::collections::BTreeMap;

use super::{Tensor, TensorError};

/// Handle to one parameter slot. Two names that alias the same slot share
/// storage and gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Slot {
    name: String,
    value: Tensor,
    grad: Tensor,
}

/// Named collection of trainable tensors with gradient accumulators.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    slots: Vec<Slot>,
    names: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a new slot, replacing the value if the name already exists.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        if let Some(&id) = self.names.get(&name) {
            let slot = &mut self.slots[id.0];
            slot.grad = Tensor::zeros_like(&value);
            slot.value = value;
            return id;
        }
        let id = ParamId(self.slots.len());
        self.slots.push(Slot {
            name: name.clone(),
            grad: Tensor::zeros_like(&value),
            value,
        });
        self.names.insert(name, id);
        id
    }

    /// Makes `name` refer to the same storage as `target`.
    pub fn alias(&mut self, name: impl Into<String>, target: &str) -> Result<ParamId, TensorError> {
        let id = self
            .id(target)
            .ok_or_else(|| TensorError::contract("alias", format!("unknown parameter {target}")))?;
        let name = name.into();
        if let Some(&existing) = self.names.get(&name) {
            if existing != id && self.slots[existing.0].name == name {
                return Err(TensorError::contract(
                    "alias",
                    format!("{name} already owns its own storage"),
                ));
            }
        }
        self.names.insert(name, id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.get(name).copied()
    }

    pub fn expect_id(&self, name: &str) -> Result<ParamId, TensorError> {
        self.id(name)
            .ok_or_else(|| TensorError::contract("params", format!("missing parameter {name}")))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.slots[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.slots[id.0].grad
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        self.slots[id.0].grad.add_assign(g);
    }

    pub fn zero_grad(&mut self) {
        for s in &mut self.slots {
            s.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Name that owns the slot's storage.
    pub fn canonical_name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    /// Unique slots in insertion order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    /// Every registered name (aliases included), sorted.
    pub fn names(&self) -> impl Iterator<Item = (&str, ParamId)> {
        self.names.iter().map(|(n, &id)| (n.as_str(), id))
    }

    /// `(alias, canonical)` pairs.
    pub fn aliases(&self) -> Vec<(String, String)> {
        self.names
            .iter()
            .filter(|(n, id)| self.slots[id.0].name != **n)
            .map(|(n, id)| (n.clone(), self.slots[id.0].name.clone()))
            .collect()
    }

    pub fn num_values(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.slots
            .iter()
            .flat_map(|s| s.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for s in &mut self.slots {
            s.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Copies every slot whose name starts with `from` into `dest` under the
    /// prefix `to`. Aliases are not carried over.
    pub fn copy_prefixed_into(&self, from: &str, to: &str, dest: &mut ParamStore) {
        for s in &self.slots {
            if let Some(rest) = s.name.strip_prefix(from) {
                dest.insert(format!("{to}{rest}"), s.value.clone());
            }
        }
    }
}
