use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::TensorError;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Weight initialisation family for a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    /// Normal with variance `2 / fan_in`.
    Kaiming,
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
    Xavier,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Weight { scheme: Scheme, fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
    Const(f64),
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    inits: Vec<Init>,
    tensors: Vec<Tensor<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), inits: Vec::new(), tensors: Vec::new(), by_name: HashMap::new() }
    }

    /// Registers a zero-filled tensor; values are set by [`ParamStore::initialize`].
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.inits.push(init);
        self.tensors.push(Tensor::zeros(shape.to_vec()));
        ParamId(id)
    }

    /// Draws every tensor from its registered initialiser, in registration order.
    ///
    /// Samples are drawn in `f64` and rounded, so `f32` and `f64` stores built
    /// from the same seed hold the same values up to rounding.
    pub fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (t, init) in self.tensors.iter_mut().zip(&self.inits) {
            let shape = t.shape().to_vec();
            *t = match *init {
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::full(shape, T::one()),
                Init::Const(c) => Tensor::full(shape, T::lit(c)),
                Init::Weight { scheme: Scheme::Kaiming, fan_in, .. } => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(shape, |_| T::lit(std * rng.sample::<f64, _>(StandardNormal)))
                }
                Init::Weight { scheme: Scheme::Xavier, fan_in, fan_out } => {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
                }
            };
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn init_of(&self, id: ParamId) -> Init {
        self.inits[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, t: Tensor<T>) -> Result<(), TensorError> {
        if t.shape() != self.tensors[id.0].shape() {
            return Err(TensorError::shape(
                "param_set",
                format!("{}: {:?} vs {:?}", self.names[id.0], t.shape(), self.tensors[id.0].shape()),
            ));
        }
        self.tensors[id.0] = t;
        Ok(())
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            inits: self.inits.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Inserts every tensor into `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| g.param(t.clone())).collect())
    }
}

/// Graph handles for a [`ParamStore`] bound into one graph.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps graph handles created in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}
