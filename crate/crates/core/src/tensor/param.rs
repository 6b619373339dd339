use super::{NodeId, Tape, Tensor, TensorError};
use crate::scalar::Scalar;

/// A named trainable array.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Param {
            name: name.into(),
            value,
        }
    }
}

/// Ordered collection of parameters. The order is fixed at model
/// construction and shared by tape registration, optimizer state and
/// checkpoint serialization.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        let idx = self.params.len();
        self.params.push(Param::new(name, value));
        idx
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn get(&self, idx: usize) -> &Param<T> {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param<T> {
        &mut self.params[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Register every parameter on a tape, in set order.
    pub fn register(&self, tape: &mut Tape<T>) -> Result<Vec<NodeId>, TensorError> {
        self.params
            .iter()
            .map(|p| tape.param(p.value.clone()))
            .collect()
    }

    /// Collect gradients for previously registered nodes, zeros where no
    /// gradient flowed.
    pub fn gradients(&self, tape: &Tape<T>, nodes: &[NodeId]) -> Vec<Vec<T>> {
        nodes.iter().map(|&id| tape.grad_or_zeros(id)).collect()
    }

    /// Convert every parameter to a different scalar type.
    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param::new(p.name.clone(), p.value.cast()))
                .collect(),
        }
    }
}
