//! Named parameter storage with additive gradient accumulators.
//!
//! A parameter bound to several graph nodes (a time-invariant weight used at
//! every unrolled step) receives the sum of its per-use gradients; per-step
//! parameters are bound to exactly one node. Accumulators are zeroed
//! explicitly at the start of each training step, never implicitly.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a parameter inside one [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// True for parameters bound to more than one node (time-invariant weights).
    pub shared: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor, shared: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name '{name}'")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape(), value.precision());
        self.params.push(Parameter { name: name.to_string(), value, grad, shared });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    /// Overwrites a parameter value; the shape and precision must match.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if value.shape() != p.value.shape() {
            return Err(Error::ShapeMismatch {
                context: format!("set_value '{}'", p.name),
                lhs: value.shape().to_string(),
                rhs: p.value.shape().to_string(),
            });
        }
        p.value = value;
        Ok(())
    }

    /// Mutable access for the optimizer; callers re-quantize via the tensor.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].grad
    }

    pub fn accumulate_grad(&mut self, id: ParamId, delta: &Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        let sum = p.grad.ewise_add(delta)?;
        p.grad = sum;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape(), p.value.precision());
        }
    }

    /// Parameters in registration order (stable, deterministic).
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.value.shape().numel()).sum()
    }
}
