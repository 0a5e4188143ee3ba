use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::graph::{Graph, Var};
use super::net::RestorationNet;
use super::ParamSet;

/// Learning-rate schedule driving Adam's step size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from the base rate to `floor × base` over `total` steps.
    Cosine {
        total: u64,
        floor: f64,
    },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { total, floor } => {
                let frac = (step as f64 / total.max(1) as f64).min(1.0);
                let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
                base * (floor + (1.0 - floor) * cos)
            }
        }
    }
}

/// Mean loss and mean parameter gradient over `n_items` independent graphs.
///
/// `item_loss` builds the scalar loss of item `i` on a fresh graph; it gets a
/// per-item child stream of `rng`, so results do not depend on scheduling.
/// Items run in parallel and are reduced in index order.
pub fn batch_gradients<T, F>(
    net: &RestorationNet<T>,
    n_items: usize,
    rng: &RngStream,
    item_loss: F,
) -> Result<(f64, ParamSet<T>)>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &BTreeMap<String, Var>, usize, &mut RngStream) -> Result<Var> + Sync,
{
    if n_items == 0 {
        return Err(Error::usage("empty batch"));
    }
    let per_item: Vec<Result<(f64, ParamSet<T>)>> = (0..n_items)
        .into_par_iter()
        .map(|i| {
            let mut g = Graph::new();
            let pv = net.param_vars(&mut g);
            let mut item_rng = rng.child_indexed("item", i as u64);
            let loss = item_loss(&mut g, &pv, i, &mut item_rng)?;
            let value = g.value(loss).item()?.as_f64();
            let grads = g.backward(loss)?;
            let mut ps = ParamSet::new();
            for (name, t) in net.params().iter() {
                ps.insert(name.clone(), grads.get_or_zeros(pv[name], t.dims()));
            }
            Ok((value, ps))
        })
        .collect();
    let mut total = 0.0;
    let mut acc = net.params().zeros_like();
    for r in per_item {
        let (l, g) = r?;
        total += l;
        acc.accumulate(&g)?;
    }
    acc.scale(T::of(1.0 / n_items as f64));
    Ok((total / n_items as f64, acc))
}

/// Owns a network and its optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub net: RestorationNet<T>,
    pub adam: AdamConfig,
    pub schedule: LrSchedule,
    pub state: AdamState<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(net: RestorationNet<T>, adam: AdamConfig, schedule: LrSchedule) -> Self {
        Self {
            net,
            adam,
            schedule,
            state: AdamState::new(),
        }
    }

    /// One optimizer step on a batch. Aborts on a non-finite loss or gradient.
    pub fn step<F>(&mut self, n_items: usize, rng: &RngStream, item_loss: F) -> Result<f64>
    where
        F: Fn(&mut Graph<T>, &BTreeMap<String, Var>, usize, &mut RngStream) -> Result<Var> + Sync,
    {
        let (loss, grads) = batch_gradients(&self.net, n_items, rng, item_loss)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss {loss} at optimizer step {}",
                self.state.step + 1
            )));
        }
        let lr = self.schedule.rate(self.adam.lr, self.state.step);
        adam_step(self.net.params_mut(), &grads, &mut self.state, &self.adam, lr)?;
        Ok(loss)
    }
}

/// Reshapes an `H×W` image to `1×H×W` for the network input.
pub(crate) fn as_single_channel<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    match *img.dims() {
        [h, w] => img.clone().reshape(&[1, h, w]),
        [1, _, _] => Ok(img.clone()),
        ref d => Err(Error::shape(format!("expected H×W image, got {d:?}"))),
    }
}
