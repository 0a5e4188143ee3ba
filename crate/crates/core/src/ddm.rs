//! Deterministic diffusion: training objective and the reverse samplers.
//!
//! The forward process is the fixed blend `y_t = D(x, t) = α_t x + (1−α_t) y_T`
//! between the ground truth `x` and the measured pattern `y_T`. A restoration
//! network `R(y_t, t) ≈ x` is trained on random `t`, and the chain is run
//! backwards from `y_T` with either update:
//!
//! * direct: `y_{t−1} = D(R, t−1)`
//! * indirect: `y_{t−1} = y_t − D(R, t) + D(R, t−1)`
//!
//! Unrolling the indirect update gives
//! `y_t = (1−α_t) y_T + Σ_{s>t} (α_{s−1} − α_s) R(y_s, s)`, so `y_0` is a convex
//! combination of every restoration along the path and a restoration error
//! shared by all steps passes through unamplified.

use crate::error::{Error, Result};
use crate::nn::{GaussianPrediction, RestorationNet, Trainer};
use crate::rng::RngStream;
use crate::schedule::Schedule;
use crate::tensor::{Scalar, Tensor};

/// Anything that maps a degraded state at step `t` of a `horizon`-step chain
/// to a per-pixel Gaussian estimate of the clean image.
pub trait Restorer<T: Scalar>: Sync {
    fn restore(
        &self,
        y: &Tensor<T>,
        t: usize,
        horizon: usize,
        rng: Option<&mut RngStream>,
    ) -> Result<GaussianPrediction<T>>;

    /// Whether repeated calls with different streams give different outputs.
    fn is_stochastic(&self) -> bool {
        false
    }

    fn predicts_sigma(&self) -> bool {
        false
    }
}

impl<T: Scalar> Restorer<T> for RestorationNet<T> {
    fn restore(
        &self,
        y: &Tensor<T>,
        t: usize,
        horizon: usize,
        rng: Option<&mut RngStream>,
    ) -> Result<GaussianPrediction<T>> {
        self.forward(y, t as f64 / horizon as f64, rng)
    }

    fn is_stochastic(&self) -> bool {
        self.dropout_active() && self.config().dropout > 0.0
    }

    fn predicts_sigma(&self) -> bool {
        self.has_sigma_head()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SamplerMode {
    Direct,
    Indirect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mae,
    GaussianNll,
}

/// States and restorations visited by one reverse run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub mode: SamplerMode,
    /// Visited step indices, strictly decreasing from `T` to `0`.
    pub steps: Vec<usize>,
    /// `y[k]` is the state at `steps[k]`; `y[0]` is the raw pattern.
    pub y: Vec<Tensor<T>>,
    /// `restorations[k]` is `R(y[k], steps[k])`; one fewer than `y`.
    pub restorations: Vec<Tensor<T>>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn raw_pattern(&self) -> &Tensor<T> {
        &self.y[0]
    }

    pub fn final_state(&self) -> &Tensor<T> {
        self.y.last().expect("trajectory holds at least y_T")
    }

    /// Number of reverse steps taken.
    pub fn len(&self) -> usize {
        self.restorations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.restorations.is_empty()
    }
}

fn check_step(sched: &Schedule, t: usize) -> Result<()> {
    if t == 0 || t > sched.steps() {
        return Err(Error::StepOutOfRange { t, max: sched.steps() });
    }
    Ok(())
}

/// Applies one update from `t` to `to < t` given the restoration `r`.
pub fn apply_update<T: Scalar>(
    mode: SamplerMode,
    sched: &Schedule,
    y_t: &Tensor<T>,
    raw: &Tensor<T>,
    r: &Tensor<T>,
    t: usize,
    to: usize,
) -> Result<Tensor<T>> {
    if to >= t {
        return Err(Error::InvalidSteps(format!("update from {t} to {to}")));
    }
    match mode {
        SamplerMode::Direct => sched.degrade(r, raw, to),
        SamplerMode::Indirect => {
            // Kept in the literal (y_t − D(R,t)) + D(R,to) order: with a perfect
            // restorer the first difference is exactly zero at every step.
            let here = sched.degrade(r, raw, t)?;
            let next = sched.degrade(r, raw, to)?;
            y_t.sub(&here)?.add(&next)
        }
    }
}

/// `D(R(y_t, t), t−1)`.
pub fn step_direct<T: Scalar, R: Restorer<T> + ?Sized>(
    net: &R,
    sched: &Schedule,
    y_t: &Tensor<T>,
    raw: &Tensor<T>,
    t: usize,
    rng: Option<&mut RngStream>,
) -> Result<Tensor<T>> {
    check_step(sched, t)?;
    let r = net.restore(y_t, t, sched.steps(), rng)?.mu;
    apply_update(SamplerMode::Direct, sched, y_t, raw, &r, t, t - 1)
}

/// `y_t − D(R(y_t, t), t) + D(R(y_t, t), t−1)`.
pub fn step_indirect<T: Scalar, R: Restorer<T> + ?Sized>(
    net: &R,
    sched: &Schedule,
    y_t: &Tensor<T>,
    raw: &Tensor<T>,
    t: usize,
    rng: Option<&mut RngStream>,
) -> Result<Tensor<T>> {
    check_step(sched, t)?;
    let r = net.restore(y_t, t, sched.steps(), rng)?.mu;
    apply_update(SamplerMode::Indirect, sched, y_t, raw, &r, t, t - 1)
}

/// Full sequence `T, T−1, …, 0`.
pub fn full_steps(horizon: usize) -> Vec<usize> {
    (0..=horizon).rev().collect()
}

/// `K` reverse steps evenly spread over `T`: `round(T·i/K)` for `i = K..0`.
pub fn even_steps(horizon: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > horizon {
        return Err(Error::InvalidSteps(format!(
            "cannot take {k} steps over a horizon of {horizon}"
        )));
    }
    let mut s: Vec<usize> = (0..=k)
        .map(|i| ((horizon * i) as f64 / k as f64).round() as usize)
        .collect();
    s.dedup();
    s.reverse();
    Ok(s)
}

fn check_sequence(sched: &Schedule, steps: &[usize]) -> Result<()> {
    let horizon = sched.steps();
    match (steps.first(), steps.last()) {
        (Some(&first), Some(&0)) if first == horizon && steps.len() >= 2 => {}
        _ => {
            return Err(Error::InvalidSteps(format!(
                "sequence must start at {horizon} and end at 0, got {steps:?}"
            )))
        }
    }
    if steps.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidSteps(format!(
            "sequence must be strictly decreasing, got {steps:?}"
        )));
    }
    Ok(())
}

/// Runs the reverse chain from the raw pattern down to `y_0`.
///
/// `steps`, when given, is a strictly decreasing sub-sequence from `T` to
/// `0`; visited steps use the schedule's own `α` values.
pub fn reconstruct<T: Scalar, R: Restorer<T> + ?Sized>(
    net: &R,
    sched: &Schedule,
    raw: &Tensor<T>,
    mode: SamplerMode,
    steps: Option<&[usize]>,
    mut rng: Option<&mut RngStream>,
) -> Result<Trajectory<T>> {
    let steps = match steps {
        Some(s) => s.to_vec(),
        None => full_steps(sched.steps()),
    };
    check_sequence(sched, &steps)?;
    let mut y = Vec::with_capacity(steps.len());
    let mut restorations = Vec::with_capacity(steps.len() - 1);
    y.push(raw.clone());
    for w in steps.windows(2) {
        let (t, to) = (w[0], w[1]);
        let cur = y.last().expect("nonempty");
        let r = net.restore(cur, t, sched.steps(), rng.as_deref_mut())?.mu;
        let next = apply_update(mode, sched, cur, raw, &r, t, to)?;
        restorations.push(r);
        y.push(next);
    }
    Ok(Trajectory {
        mode,
        steps,
        y,
        restorations,
    })
}

/// Recomputes the state at visit index `k` of an indirect trajectory from
/// the raw pattern and the stored restorations:
/// `y = (1 − α_{s_k}) y_T + Σ_{j<k} (α_{s_{j+1}} − α_{s_j}) R_j`.
pub fn expand_history_at<T: Scalar>(traj: &Trajectory<T>, sched: &Schedule, k: usize) -> Result<Tensor<T>> {
    if traj.mode != SamplerMode::Indirect {
        return Err(Error::Unsupported(
            "history expansion needs an indirect trajectory".into(),
        ));
    }
    if k >= traj.steps.len() {
        return Err(Error::InvalidSteps(format!(
            "visit index {k} beyond {} visits",
            traj.steps.len()
        )));
    }
    let a = |s: usize| sched.alpha(s);
    let mut out = traj.raw_pattern().scale(T::of(1.0 - a(traj.steps[k])?));
    for j in 0..k {
        let w = a(traj.steps[j + 1])? - a(traj.steps[j])?;
        out.axpy(T::of(w), &traj.restorations[j])?;
    }
    Ok(out)
}

/// `y_0` rebuilt from the stored restorations of an indirect trajectory.
pub fn history_expansion<T: Scalar>(traj: &Trajectory<T>, sched: &Schedule) -> Result<Tensor<T>> {
    expand_history_at(traj, sched, traj.steps.len() - 1)
}

/// Restoration loss at a fixed step, for any [`Restorer`].
pub fn ddm_loss<T: Scalar, R: Restorer<T> + ?Sized>(
    net: &R,
    sched: &Schedule,
    x: &Tensor<T>,
    raw: &Tensor<T>,
    t: usize,
    kind: LossKind,
) -> Result<T> {
    let y_t = sched.degrade(x, raw, t)?;
    let pred = net.restore(&y_t, t, sched.steps(), None)?;
    match kind {
        LossKind::Mae => crate::nn::mae_loss(&pred.mu, x),
        LossKind::GaussianNll => crate::nn::gaussian_nll(&pred, x),
    }
}

/// One optimizer step on a batch of `(x, y_T)` pairs: each item draws
/// `t ∈ {1..T}` uniformly, forms `y_t = D(x, t)` and scores `R(y_t, t)`
/// against `x` with dropout on. Returns the batch-mean loss.
pub fn ddm_train_step<T: Scalar>(
    trainer: &mut Trainer<T>,
    sched: &Schedule,
    xs: &[Tensor<T>],
    raws: &[Tensor<T>],
    kind: LossKind,
    rng: &RngStream,
) -> Result<f64> {
    if xs.len() != raws.len() {
        return Err(Error::shape("batch of ground truths and patterns differ in length"));
    }
    if kind == LossKind::GaussianNll && !trainer.net.has_sigma_head() {
        return Err(Error::usage("NLL training needs a log-variance head"));
    }
    let horizon = sched.steps();
    let net = trainer.net.with_dropout(true);
    trainer.step(xs.len(), rng, |g, pv, i, item_rng| {
        let t = 1 + item_rng.below(horizon as u64) as usize;
        let y_t = sched.degrade(&xs[i], &raws[i], t)?;
        let input = g.leaf(crate::nn::train_input(&y_t)?);
        let out = net.build(g, pv, input, t as f64 / horizon as f64, Some(item_rng))?;
        let target = crate::nn::train_input(&xs[i])?;
        match kind {
            LossKind::Mae => g.mae(out.mu, &target),
            LossKind::GaussianNll => {
                let ls = out.log_sigma.expect("checked above");
                g.gaussian_nll(out.mu, ls, &target)
            }
        }
    })
}
