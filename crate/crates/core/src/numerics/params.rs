use std::collections::HashMap;

use super::tensor::{NumericsError, Tensor};

/// Handle to a parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named trainable tensor; the unit of checkpoint serialization.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    /// Frozen parameters keep their gradients but are skipped by optimizers.
    pub trainable: bool,
}

/// All parameters of one model, with unique names and a stable order.
///
/// Registration order is the order parameters appear in checkpoints, so it
/// must be deterministic for a given configuration.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> super::Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NumericsError::DuplicateParameter { name });
        }
        let mut tensor = tensor;
        tensor.requires_grad = true;
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            trainable: true,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    /// Parameters in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Mark every parameter whose name starts with `prefix` as frozen.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = false;
            }
        }
    }

    /// Total number of scalar values across all parameters.
    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::zeros(2, 2)).unwrap();
        let err = ps.add("w", Tensor::zeros(2, 2)).unwrap_err();
        assert!(matches!(err, NumericsError::DuplicateParameter { .. }));
    }

    #[test]
    fn lookup_and_order() {
        let mut ps = ParamSet::new();
        let a = ps.add("a", Tensor::zeros(1, 1)).unwrap();
        let b = ps.add("b", Tensor::zeros(1, 2)).unwrap();
        assert_eq!(ps.by_name("a"), Some(a));
        assert_eq!(ps.by_name("b"), Some(b));
        let names: Vec<_> = ps.iter().map(|(_, p)| p.name.clone()).collect();
        assert_eq!(names, ["a", "b"]);
        assert_eq!(ps.total_len(), 3);
    }
}
