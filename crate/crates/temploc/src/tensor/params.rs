use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{Real, Tensor};

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: expected {expected}, got {got} in {context}")]
    ShapeMismatch { expected: String, got: String, context: String },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward called before forward")]
    BackwardBeforeForward,
}

pub(crate) struct ParamEntry<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

/// Named parameter arrays with matching gradient buffers.
pub struct ParamStore<F> {
    pub(crate) entries: Vec<ParamEntry<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Registers a parameter with an explicit initial value.
    pub fn add(&mut self, name: &str, value: Tensor<F>) -> Result<usize, TensorError> {
        if self.index.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        let grad = Tensor::zeros(value.rows, value.cols);
        let id = self.entries.len();
        self.entries.push(ParamEntry { name: name.to_string(), value, grad });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Registers a parameter drawn from a fan-in-scaled uniform distribution.
    pub fn add_uniform(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<usize, TensorError> {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let mut t = Tensor::zeros(rows, cols);
        for v in t.data.iter_mut() {
            *v = F::from_f64(rng.gen_range(-bound..bound));
        }
        self.add(name, t)
    }

    pub fn id_of(&self, name: &str) -> Result<usize, TensorError> {
        self.index.get(name).copied().ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn value(&self, id: usize) -> &Tensor<F> {
        &self.entries[id].value
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor<F> {
        &mut self.entries[id].value
    }

    pub fn grad(&self, id: usize) -> &Tensor<F> {
        &self.entries[id].grad
    }

    pub fn value_by_name(&self, name: &str) -> Result<&Tensor<F>, TensorError> {
        Ok(self.value(self.id_of(name)?))
    }

    pub fn grad_by_name(&self, name: &str) -> Result<&Tensor<F>, TensorError> {
        Ok(self.grad(self.id_of(name)?))
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.iter_mut() {
            for g in e.grad.data.iter_mut() {
                *g = F::zero();
            }
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: usize, grad: &Tensor<F>) {
        let entry = &mut self.entries[id];
        debug_assert!(entry.grad.same_shape(grad));
        for (g, d) in entry.grad.data.iter_mut().zip(grad.data.iter()) {
            *g = *g + *d;
        }
    }

    pub fn iter_named(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }
}
