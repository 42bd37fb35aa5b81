use super::Tensor;
use crate::error::{Error, Result};

/// Index of a trainable tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces a tensor, keeping its dims.
    pub fn set(&mut self, id: ParamId, tensor: Tensor) -> Result<()> {
        let current = &self.tensors[id.0];
        if current.dims() != tensor.dims() {
            return Err(Error::shape(
                "param_set",
                format!(
                    "{} has dims {:?}, got {:?}",
                    self.names[id.0],
                    current.dims(),
                    tensor.dims()
                ),
            ));
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }
}

/// One gradient tensor per parameter of a store, aligned by [`ParamId`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            grads: store.tensors.iter().map(|t| Tensor::zeros(t.dims())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        if self.grads.len() != other.grads.len() {
            return Err(Error::contract(format!(
                "gradient sets differ in length: {} vs {}",
                self.grads.len(),
                other.grads.len()
            )));
        }
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            if a.dims() != b.dims() {
                return Err(Error::shape("accumulate", format!("{:?} vs {:?}", a.dims(), b.dims())));
            }
            a.add_assign(b);
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
}
