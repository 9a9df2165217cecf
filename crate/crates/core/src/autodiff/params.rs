//! Named, persistent model parameters.

use super::tensor::{Scalar, Tensor};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in the owning [`ParamSet`]'s registration order.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Registry of parameters; each name registers exactly once.
#[derive(Clone, Default)]
pub struct ParamSet<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "parameter {name:?} registered twice"
        );
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name).map(|&i| &self.params[i].value)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    /// Total scalar count across all parameters.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    #[should_panic(expected = "registered twice")]
    fn duplicate_registration_panics() {
        let mut ps: ParamSet<f32> = ParamSet::new();
        ps.register("w", Tensor::zeros(&[2]));
        ps.register("w", Tensor::zeros(&[2]));
    }

    #[test]
    fn lookup_by_name() {
        let mut ps: ParamSet<f32> = ParamSet::new();
        let id = ps.register("head.w", Tensor::full(&[3], 2.0));
        assert_eq!(ps.name(id), "head.w");
        assert_eq!(ps.get("head.w").unwrap().data(), &[2.0, 2.0, 2.0]);
        assert!(ps.get("missing").is_none());
        assert_eq!(ps.num_values(), 3);
    }
}
