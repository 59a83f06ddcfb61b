use std::collections::BTreeMap;

use super::{Gradients, Tape, Tensor, TensorError, Var};

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, TensorError> {
        self.tensors
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, TensorError> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Moves every tensor from `other` into `self`, replacing same-named entries.
    pub fn extend(&mut self, other: ParamSet) {
        self.tensors.extend(other.tensors);
    }

    pub fn checksum(&self) -> u64 {
        self.tensors.iter().fold(0u64, |h, (k, v)| {
            let name = k
                .bytes()
                .fold(h, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3));
            (name ^ v.checksum()).rotate_left(7)
        })
    }

    /// Records every tensor on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(v.clone())))
            .collect();
        Bound { vars }
    }
}

/// Parameters recorded on a particular tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var, TensorError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    /// Gradient per parameter name; parameters that did not influence the
    /// output get an all-zero tensor.
    pub fn collect_grads(&self, tape: &Tape, grads: &Gradients) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, &var) in &self.vars {
            let g = grads
                .get(var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(var).shape()));
            out.insert(name.clone(), g);
        }
        out
    }
}
