//! Reverse-mode autodiff, the restoration network, losses, dropout and Adam.

mod adam;
mod dropout;
mod graph;
mod loss;
mod net;
mod train;

use std::collections::BTreeMap;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use dropout::mc_dropout;
pub use graph::{Gradients, Graph, Var};
pub use loss::{gaussian_nll, mae_loss};
pub use net::{sinusoidal_embedding, Heads, NetConfig, NetOutput, RestorationNet};
pub(crate) use train::as_single_channel as train_input;
pub use train::{batch_gradients, LrSchedule, Trainer};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Named parameter tensors, ordered by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.dims())))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// `self += other`, name by name.
    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        for (name, t) in self.map.iter_mut() {
            let o = other
                .get(name)
                .ok_or_else(|| Error::usage(format!("missing parameter {name}")))?;
            t.add_assign(o)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, c: T) {
        for t in self.map.values_mut() {
            *t = t.scale(c);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }
}

/// Per-pixel Gaussian prediction `N(mu, sigma²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrediction<T> {
    pub mu: Tensor<T>,
    pub sigma: Tensor<T>,
}

impl<T: Scalar> GaussianPrediction<T> {
    pub fn new(mu: Tensor<T>, sigma: Tensor<T>) -> Result<Self> {
        mu.check_same_dims(&sigma)?;
        if sigma.data().iter().any(|s| !(*s > T::zero())) {
            return Err(Error::domain("sigma must be strictly positive"));
        }
        Ok(Self { mu, sigma })
    }

    /// Mean-only prediction carrying the `sigma ≡ 1` sentinel.
    pub fn mean_only(mu: Tensor<T>) -> Self {
        let sigma = Tensor::ones(mu.dims());
        Self { mu, sigma }
    }
}
