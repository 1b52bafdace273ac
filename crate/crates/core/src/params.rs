//! Named parameter registry with group tags and trainability flags.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which part of the network a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    Decoder,
    /// Blocks appended for feature reuse after source training.
    AuxiliaryNew,
}

impl ParamGroup {
    pub fn code(self) -> u8 {
        match self {
            Self::Encoder => 0,
            Self::Decoder => 1,
            Self::AuxiliaryNew => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Self::Encoder),
            1 => Ok(Self::Decoder),
            2 => Ok(Self::AuxiliaryNew),
            other => Err(Error::Format(format!("unknown parameter group code {other}"))),
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Encoder => "encoder",
            Self::Decoder => "decoder",
            Self::AuxiliaryNew => "auxiliary_new",
        })
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Self::Encoder),
            "decoder" => Ok(Self::Decoder),
            "auxiliary_new" => Ok(Self::AuxiliaryNew),
            other => Err(Error::Config(format!("unknown parameter group '{other}'"))),
        }
    }
}

/// Index of a tensor inside a [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
    pub trainable: bool,
    /// Accumulated gradient; only ever populated for trainable entries.
    pub grad: Option<Vec<f64>>,
}

/// Flat registry of every model tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor, group: ParamGroup) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("parameter '{name}' registered twice")));
        }
        value.ensure_finite("register")?;
        let id = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            group,
            trainable: true,
            grad: None,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    /// Registers a `fan_in × fan_out` weight with uniform Glorot initialization.
    pub fn register_linear_weight<R: Rng>(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.register(name, Tensor::uniform(&[fan_in, fan_out], bound, rng), group)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Scalar count of all registered values.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn numel_in(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Marks every tensor in `groups` trainable and everything else frozen.
    pub fn set_trainable_groups(&mut self, groups: &[ParamGroup]) {
        for e in &mut self.entries {
            e.trainable = groups.contains(&e.group);
            if !e.trainable {
                e.grad = None;
            }
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for e in &mut self.entries {
            e.trainable = trainable;
            if !trainable {
                e.grad = None;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// Adds `grad` into the accumulated gradient of `id`.
    ///
    /// Frozen tensors never receive gradients.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) -> Result<()> {
        let e = &mut self.entries[id.0];
        if !e.trainable {
            return Err(Error::Contract(format!(
                "gradient written to frozen parameter '{}'",
                e.name
            )));
        }
        if grad.len() != e.value.numel() {
            return Err(crate::error::dim_err(
                "accumulate_grad",
                format!("'{}' has {} values, gradient {}", e.name, e.value.numel(), grad.len()),
            ));
        }
        match &mut e.grad {
            Some(acc) => acc.iter_mut().zip(grad).for_each(|(a, g)| *a += g),
            None => e.grad = Some(grad.to_vec()),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::new();
        s.register("a", Tensor::zeros(&[2]), ParamGroup::Encoder).unwrap();
        assert!(s.register("a", Tensor::zeros(&[2]), ParamGroup::Decoder).is_err());
    }

    #[test]
    fn frozen_rejects_gradient() {
        let mut s = ParameterStore::new();
        let a = s.register("a", Tensor::zeros(&[2]), ParamGroup::Encoder).unwrap();
        let b = s.register("b", Tensor::zeros(&[2]), ParamGroup::Decoder).unwrap();
        s.set_trainable_groups(&[ParamGroup::Decoder]);
        assert!(s.accumulate_grad(a, &[1.0, 1.0]).is_err());
        s.accumulate_grad(b, &[1.0, 2.0]).unwrap();
        s.accumulate_grad(b, &[1.0, 2.0]).unwrap();
        assert_eq!(s.entry(b).grad.as_deref(), Some(&[2.0, 4.0][..]));
    }
}
