//! Deterministic degradation schedule and the blend `D(x, t)`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Weights `α_0 = 1 > α_1 > … > α_T = 0` for a horizon of `T` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    alphas: Vec<f64>,
}

/// A broken schedule invariant, reported by [`Schedule::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    StartNotOne { value: f64 },
    EndNotZero { value: f64 },
    NotDecreasing { t: usize },
    OutOfUnitRange { t: usize },
}

impl Schedule {
    /// `α_t = cos²(πt / 2T)`, evaluated as `(1 + cos(πt/T)) / 2` so that
    /// `α_{T/2}` is exactly `0.5`; both endpoints are snapped to 1 and 0.
    pub fn alpha_cosine(steps: usize) -> Result<Self> {
        if steps < 1 {
            return Err(Error::usage("schedule needs at least one step"));
        }
        let mut alphas: Vec<f64> = (0..=steps)
            .map(|t| 0.5 * (1.0 + (std::f64::consts::PI * (t as f64 / steps as f64)).cos()))
            .collect();
        alphas[0] = 1.0;
        alphas[steps] = 0.0;
        Ok(Self { alphas })
    }

    /// Wraps hand-built weights without checking them; see [`Self::validate`].
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        if alphas.len() < 2 {
            return Err(Error::usage("schedule needs at least two weights"));
        }
        Ok(Self { alphas })
    }

    pub fn steps(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.alphas
            .get(t)
            .copied()
            .ok_or(Error::StepOutOfRange { t, max: self.steps() })
    }

    /// Empty when every invariant holds.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let a = &self.alphas;
        if a[0] != 1.0 {
            out.push(Violation::StartNotOne { value: a[0] });
        }
        let last = *a.last().expect("nonempty");
        if last != 0.0 {
            out.push(Violation::EndNotZero { value: last });
        }
        for (t, &v) in a.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                out.push(Violation::OutOfUnitRange { t });
            }
        }
        if let Some(t) = (1..a.len()).find(|&t| !(a[t] < a[t - 1])) {
            out.push(Violation::NotDecreasing { t });
        }
        out
    }

    /// `D(x, t) = α_t x + (1 − α_t) y_T`.
    pub fn degrade<T: Scalar>(&self, x: &Tensor<T>, y_t: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        let a = self.alpha(t)?;
        let (wa, wb) = (T::of(a), T::of(1.0 - a));
        x.zip_map(y_t, |xv, yv| wa * xv + wb * yv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let s = Schedule::alpha_cosine(20).unwrap();
        assert_eq!(s.alpha(0).unwrap(), 1.0);
        assert_eq!(s.alpha(20).unwrap(), 0.0);
        for t in (2..=200).step_by(2) {
            assert_eq!(Schedule::alpha_cosine(t).unwrap().alpha(t / 2).unwrap(), 0.5, "T = {t}");
        }
        assert!(Schedule::alpha_cosine(0).is_err());
    }

    #[test]
    fn validate_accepts_cosine_and_flags_hand_built_failures() {
        for t in [1, 2, 3, 20, 100, 1000] {
            assert!(Schedule::alpha_cosine(t).unwrap().validate().is_empty());
        }
        let flat = Schedule::from_alphas(vec![1.0, 0.8, 0.5, 0.5, 0.0]).unwrap();
        assert_eq!(flat.validate(), vec![Violation::NotDecreasing { t: 3 }]);
        let tail = Schedule::from_alphas(vec![1.0, 0.5, 1e-9]).unwrap();
        assert_eq!(tail.validate(), vec![Violation::EndNotZero { value: 1e-9 }]);
    }

    #[test]
    fn degrade_endpoints_are_exact() {
        let mut rng = RngStream::new(1);
        let x = rng.uniform::<f32>(&[4, 4]);
        let y = rng.uniform::<f32>(&[4, 4]);
        let s = Schedule::alpha_cosine(20).unwrap();
        assert_eq!(s.degrade(&x, &y, 0).unwrap(), x);
        assert_eq!(s.degrade(&x, &y, 20).unwrap(), y);
        let mid = s.degrade(&Tensor::<f64>::ones(&[2]), &Tensor::zeros(&[2]), 10).unwrap();
        assert!(mid.data().iter().all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn degrade_errors() {
        let s = Schedule::alpha_cosine(4).unwrap();
        let x = Tensor::<f64>::zeros(&[2]);
        assert!(matches!(
            s.degrade(&x, &x, 5),
            Err(Error::StepOutOfRange { t: 5, max: 4 })
        ));
        assert!(matches!(s.degrade(&x, &Tensor::zeros(&[3]), 1), Err(Error::Shape(_))));
    }

    #[test]
    fn telescoping_weights_sum_to_one() {
        for steps in [1, 5, 20, 50, 100] {
            let s = Schedule::alpha_cosine(steps).unwrap();
            let total: f64 = (1..=steps).map(|t| s.alphas()[t - 1] - s.alphas()[t]).sum();
            assert!((total - 1.0).abs() < 1e-15, "T={steps}: {total}");
        }
    }

    proptest::proptest! {
        #[test]
        fn degrade_is_convex_and_linear(steps in 1usize..60, frac in 0.0f64..=1.0, seed in 0u64..500) {
            let s = Schedule::alpha_cosine(steps).unwrap();
            let t = ((steps as f64) * frac).round() as usize;
            let mut rng = RngStream::new(seed);
            let x = rng.gaussian::<f64>(&[12]);
            let x2 = rng.gaussian::<f64>(&[12]);
            let y = rng.gaussian::<f64>(&[12]);
            let d = s.degrade(&x, &y, t).unwrap();
            for ((&dv, &xv), &yv) in d.data().iter().zip(x.data()).zip(y.data()) {
                proptest::prop_assert!(dv >= xv.min(yv) - 1e-12 && dv <= xv.max(yv) + 1e-12);
            }
            // superposition with the pattern contribution held fixed
            let (a, b) = (0.7, -1.3);
            let combo = x.scale(a).add(&x2.scale(b)).unwrap();
            let lhs = s.degrade(&combo, &y.scale(a + b), t).unwrap();
            let rhs = d.scale(a).add(&s.degrade(&x2, &y, t).unwrap().scale(b)).unwrap();
            proptest::prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
        }
    }
}
