//! Shared plumbing for creating parameters fresh or re-binding them by name.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Uniform(f64),
}

pub(crate) trait ParamSource {
    fn param(&mut self, name: String, dims: &[usize], init: Init) -> Result<ParamId>;
}

/// Adds freshly drawn parameters to a store.
pub(crate) struct Fresh<'a, R: ?Sized> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng + ?Sized> ParamSource for Fresh<'_, R> {
    fn param(&mut self, name: String, dims: &[usize], init: Init) -> Result<ParamId> {
        if self.store.find(&name).is_some() {
            return Err(Error::config(format!("duplicate parameter `{name}`")));
        }
        let rng = &mut *self.rng;
        let tensor = match init {
            Init::Zeros => Tensor::zeros(dims),
            Init::Ones => Tensor::full(dims, 1.0),
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
                Tensor::from_fn(dims, |_| d.sample(rng))
            }
            Init::Uniform(bound) => {
                let d = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::config(e.to_string()))?;
                Tensor::from_fn(dims, |_| d.sample(rng))
            }
        };
        Ok(self.store.add(name, tensor))
    }
}

/// Looks parameters up in an existing store, checking their shapes.
pub(crate) struct Existing<'a> {
    pub store: &'a ParamStore,
}

impl ParamSource for Existing<'_> {
    fn param(&mut self, name: String, dims: &[usize], _init: Init) -> Result<ParamId> {
        let id = self
            .store
            .find(&name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))?;
        let found = self.store.get(id).dims();
        if found != dims {
            return Err(Error::config(format!("parameter `{name}` has dims {found:?}, expected {dims:?}")));
        }
        Ok(id)
    }
}
