//! Fixed-rate Monte Carlo dropout.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

fn check_rate(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::domain(format!("dropout rate {p} outside [0, 1)")));
    }
    Ok(())
}

/// Inverted-dropout mask: `0` with probability `p`, else `1 / (1 - p)`.
pub(crate) fn dropout_mask<T: Scalar>(n: usize, p: f64, rng: &mut RngStream) -> Result<Vec<T>> {
    check_rate(p)?;
    if p == 0.0 {
        return Ok(vec![T::one(); n]);
    }
    let keep = T::of(1.0 / (1.0 - p));
    Ok((0..n)
        .map(|_| if rng.bernoulli(p) { T::zero() } else { keep })
        .collect())
}

/// Applies inverted dropout to `x`. With `p = 0` this is the identity and
/// consumes no randomness.
pub fn mc_dropout<T: Scalar>(x: &Tensor<T>, p: f64, rng: &mut RngStream) -> Result<Tensor<T>> {
    let mask = dropout_mask::<T>(x.numel(), p, rng)?;
    let mut y = x.clone();
    for (e, m) in y.data_mut().iter_mut().zip(mask) {
        *e *= m;
    }
    Ok(y)
}
