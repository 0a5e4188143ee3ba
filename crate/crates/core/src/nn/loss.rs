//! Scalar losses on plain tensors. The differentiable versions are
//! [`Graph::mae`](super::Graph::mae) and
//! [`Graph::gaussian_nll`](super::Graph::gaussian_nll).

use crate::error::{Error, Result};
use crate::tensor::{pairwise_sum, Scalar, Tensor};

use super::GaussianPrediction;

pub fn mae_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    let diff = pred.zip_map(target, |a, b| (a - b).abs())?;
    Ok(diff.mean())
}

/// `(1/K) Σ_k [ln(√(2π) σ_k) + (x_k − μ_k)² / (2 σ_k²)]`
pub fn gaussian_nll<T: Scalar>(pred: &GaussianPrediction<T>, target: &Tensor<T>) -> Result<T> {
    pred.mu.check_same_dims(target)?;
    pred.mu.check_same_dims(&pred.sigma)?;
    if let Some(bad) = pred.sigma.data().iter().find(|s| !(**s > T::zero())) {
        return Err(Error::domain(format!("nonpositive sigma {bad:?}")));
    }
    let sqrt_2pi = T::of((2.0 * std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    let terms: Vec<T> = pred
        .mu
        .data()
        .iter()
        .zip(pred.sigma.data())
        .zip(target.data())
        .map(|((&m, &s), &x)| {
            let r = x - m;
            (sqrt_2pi * s).ln() + half * r * r / (s * s)
        })
        .collect();
    Ok(pairwise_sum(&terms) / T::of(terms.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn pred(mu: Tensor<f64>, sigma: Tensor<f64>) -> GaussianPrediction<f64> {
        GaussianPrediction::new(mu, sigma).unwrap()
    }

    #[test]
    fn nll_at_zero_residual_unit_sigma() {
        let x = Tensor::<f64>::full(&[4, 4], 0.3);
        let l = gaussian_nll(&pred(x.clone(), Tensor::ones(&[4, 4])), &x).unwrap();
        assert!((l - 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn nll_with_unit_residual_adds_one_half() {
        let x = Tensor::<f64>::zeros(&[3, 5]);
        let mu = Tensor::ones(&[3, 5]);
        let l = gaussian_nll(&pred(mu, Tensor::ones(&[3, 5])), &x).unwrap();
        assert!((l - 1.418_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn nll_rejects_nonpositive_sigma() {
        let p = GaussianPrediction {
            mu: Tensor::<f64>::zeros(&[2]),
            sigma: Tensor::new(&[2], vec![1.0, 0.0]).unwrap(),
        };
        assert!(matches!(gaussian_nll(&p, &Tensor::zeros(&[2])), Err(Error::Domain(_))));
    }

    #[test]
    fn nll_minimized_at_target_for_fixed_sigma() {
        let mut rng = RngStream::new(4);
        let x = rng.uniform::<f64>(&[8]);
        let sigma = rng.uniform::<f64>(&[8]).map(|v| 0.1 + v);
        let at = gaussian_nll(&pred(x.clone(), sigma.clone()), &x).unwrap();
        for i in 0..8 {
            for h in [1e-3, -1e-3] {
                let mut mu = x.clone();
                mu.data_mut()[i] += h;
                let moved = gaussian_nll(&pred(mu, sigma.clone()), &x).unwrap();
                assert!(moved > at);
            }
        }
    }

    #[test]
    fn mae_cases() {
        let mut rng = RngStream::new(6);
        let a = rng.gaussian::<f64>(&[5, 5]);
        assert_eq!(mae_loss(&a, &a).unwrap(), 0.0);
        let shifted = a.map(|v| v - 0.75);
        assert!((mae_loss(&a, &shifted).unwrap() - 0.75).abs() < 1e-12);
        let b = rng.gaussian::<f64>(&[5, 5]);
        let mut s = 0.0;
        for (x, y) in a.data().iter().zip(b.data()) {
            s += (x - y).abs();
        }
        assert!((mae_loss(&a, &b).unwrap() - s / 25.0).abs() < 1e-6);
        assert!(matches!(mae_loss(&a, &Tensor::zeros(&[4])), Err(Error::Shape(_))));
    }
}
