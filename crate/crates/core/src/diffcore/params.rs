use std::collections::HashMap;

use crate::scalar::Real;

use super::tensor::{DiffError, Tensor};

/// Handle into a [`ParamStore`]. Ids are dense and follow registration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

/// Ordered parameter table. Iteration, gradient reduction and optimizer
/// updates all walk registration order, which keeps training deterministic
/// regardless of how gradients were produced.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a tensor under a unique dotted name.
    pub fn add(&mut self, name: &str, value: Tensor<F>) -> Result<ParamId, DiffError> {
        if self.index.contains_key(name) {
            return Err(DiffError::DuplicateParam {
                name: name.to_string(),
            });
        }
        let id = self.params.len();
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
        });
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].grad
    }

    /// Adds `delta` into the stored gradient of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, delta: &Tensor<F>) -> Result<(), DiffError> {
        let param = &mut self.params[id.0];
        if param.grad.shape() != delta.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "accumulate_grad",
                detail: format!(
                    "param {} has shape {:?}, delta {:?}",
                    param.name,
                    param.grad.shape(),
                    delta.shape()
                ),
            });
        }
        for (g, d) in param.grad.data_mut().iter_mut().zip(delta.data()) {
            *g += *d;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = F::zero());
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Parameters in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Euclidean norm of the concatenated gradient vector.
    pub fn grad_global_norm(&self) -> F {
        let mut acc = F::zero();
        for p in &self.params {
            for &g in p.grad.data() {
                acc += g * g;
            }
        }
        acc.sqrt()
    }

    /// Multiplies every gradient coordinate by `factor`.
    pub fn scale_grads(&mut self, factor: F) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }
}
