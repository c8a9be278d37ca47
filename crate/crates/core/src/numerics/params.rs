use std::collections::HashMap;

use crate::error::{CafeError, Result};

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Whether a parameter takes weight decay. Biases and normalization
/// affines are exempt.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

/// Ordered, named parameter registry. The registration order fixes both
/// the Adam moment layout and the checkpoint manifest order.
#[derive(Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    kinds: Vec<ParamKind>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor, kind: ParamKind) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.kinds.push(kind);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[self.index[name]]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.tensors[self.index[name]]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors.iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn kinds(&self) -> &[ParamKind] {
        &self.kinds
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    /// Replace values from a loaded checkpoint; names and shapes must match.
    pub fn load_values(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(CafeError::config(format!(
                "checkpoint has {} tensors, model expects {}",
                values.len(),
                self.tensors.len()
            )));
        }
        for (name, tensor) in values {
            let Some(&i) = self.index.get(&name) else {
                return Err(CafeError::config(format!("unknown parameter {name}")));
            };
            if tensor.shape() != self.tensors[i].shape() {
                return Err(CafeError::config(format!(
                    "parameter {name}: checkpoint shape {:?} vs model shape {:?}",
                    tensor.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = tensor;
        }
        Ok(())
    }
}

/// Tape handles for every parameter of a [`ParamSet`], created once per
/// forward/backward pass.
pub struct ParamVars {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl ParamVars {
    pub fn insert(tape: &mut Tape, params: &ParamSet, requires_grad: bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect();
        ParamVars {
            vars,
            index: params.index.clone(),
        }
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }

    /// Gradients per parameter, in registry order.
    pub fn grads<'t>(&self, tape: &'t Tape) -> Vec<Option<&'t Tensor>> {
        self.vars.iter().map(|&v| tape.grad(v)).collect()
    }
}
