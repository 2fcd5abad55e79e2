//! Named parameters and non-trainable buffers.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)] // only needed when no dependency links std
#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<R> {
    pub name: String,
    pub value: Tensor<R>,
    pub grad: Tensor<R>,
    /// Buffers (e.g. running statistics) are persisted but never optimized.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<R> {
    params: Vec<Parameter<R>>,
}

/// Records which tape leaves stand for which parameters during one forward.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    pairs: Vec<(Var, ParamId)>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    fn insert(&mut self, name: String, value: Tensor<R>, trainable: bool) -> ParamId {
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name,
            value,
            grad,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<R>) -> ParamId {
        self.insert(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<R>) -> ParamId {
        self.insert(name.into(), value, false)
    }

    /// He-normal initialisation with the given fan-in.
    pub fn add_he<G: Rng>(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut G) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            R::from_f64(z * std)
        });
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<R>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<R>> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<R> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<R> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Puts a parameter on the tape as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape<R>, id: ParamId, bindings: &mut Bindings) -> Var {
        let p = &self.params[id.0];
        let v = tape.leaf(p.value.clone(), p.trainable);
        if p.trainable {
            bindings.pairs.push((v, id));
        }
        v
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = R::zero());
        }
    }

    /// Adds tape gradients of bound leaves into `Parameter::grad`.
    pub fn accumulate(&mut self, grads: &Gradients<R>, bindings: &Bindings) {
        for &(v, id) in &bindings.pairs {
            if let Some(g) = grads.get(v) {
                self.params[id.0].grad.add_assign(g);
            }
        }
    }

    /// Copies values from another store, matching by name and shape.
    pub fn load_from(&mut self, other: &[(String, Tensor<R>)]) -> Result<()> {
        for p in &self.params {
            if !other.iter().any(|(n, _)| *n == p.name) {
                return Err(Error::ParamMismatch {
                    name: p.name.clone(),
                    reason: "missing from checkpoint".into(),
                });
            }
        }
        for (name, value) in other {
            let Some(id) = self.find(name) else {
                return Err(Error::ParamMismatch {
                    name: name.clone(),
                    reason: "not a parameter of this model".into(),
                });
            };
            let p = &mut self.params[id.0];
            if p.value.shape() != value.shape() {
                return Err(Error::ParamMismatch {
                    name: name.clone(),
                    reason: format!("shape {:?} vs model {:?}", value.shape(), p.value.shape()),
                });
            }
            p.value = value.clone();
        }
        Ok(())
    }
}
