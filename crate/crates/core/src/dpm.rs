//! Conditional Gaussian diffusion baseline with deterministic (η = 0)
//! sampling and quadratic respacing.
//!
//! The noise predictor sees the condition `y_c` stacked with the noised
//! sample `y*_t` as two channels, and `γ_t` through the time embedding.
//! [`dpm_train_step`] and [`dpm_reconstruct`] take images in `[0, 1]` and
//! work on `2x − 1` internally.

use crate::error::{Error, Result};
use crate::nn::{mae_loss, RestorationNet, Trainer};
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

/// Linear `β` schedule with cumulative products `γ_t = Π_{s≤t} (1 − β_s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DpmSchedule {
    betas: Vec<f64>,
    gammas: Vec<f64>,
    eta: f64,
    sigmas: Vec<f64>,
}

pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.05;

/// `β_t` linear from `beta_start` at `t = 1` to `beta_end` at `t = T`, η = 0.
pub fn gamma_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DpmSchedule> {
    if steps < 1 {
        return Err(Error::usage("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::domain(format!(
            "need 0 < β_1 ≤ β_T < 1, got {beta_start}, {beta_end}"
        )));
    }
    let mut betas = vec![0.0];
    for t in 1..=steps {
        let f = if steps == 1 {
            0.0
        } else {
            (t - 1) as f64 / (steps - 1) as f64
        };
        betas.push(beta_start + (beta_end - beta_start) * f);
    }
    DpmSchedule::from_betas(betas, 0.0)
}

impl DpmSchedule {
    /// `betas[0]` is ignored; `betas[t]` for `t = 1..=T`.
    pub fn from_betas(mut betas: Vec<f64>, eta: f64) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::usage("schedule needs at least one step"));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::domain(format!("η = {eta} outside [0, 1]")));
        }
        betas[0] = 0.0;
        if betas[1..].iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::domain("every β must lie in (0, 1)"));
        }
        let mut gammas = Vec::with_capacity(betas.len());
        let mut g = 1.0;
        gammas.push(g);
        for b in &betas[1..] {
            g *= 1.0 - b;
            gammas.push(g);
        }
        let mut sigmas = vec![0.0];
        for t in 1..gammas.len() {
            let (gt, gp) = (gammas[t], gammas[t - 1]);
            sigmas.push(eta * ((1.0 - gp) / (1.0 - gt) * (1.0 - gt / gp)).sqrt());
        }
        Ok(Self {
            betas,
            gammas,
            eta,
            sigmas,
        })
    }

    pub fn steps(&self) -> usize {
        self.gammas.len() - 1
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn gamma(&self, t: usize) -> Result<f64> {
        self.gammas
            .get(t)
            .copied()
            .ok_or(Error::StepOutOfRange { t, max: self.steps() })
    }
}

/// `y*_t = √γ_t y0 + √(1−γ_t) ε` for a given `ε`.
pub fn dpm_noise<T: Scalar>(sched: &DpmSchedule, y0: &Tensor<T>, eps: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
    let g = sched.gamma(t)?;
    let (a, b) = (T::of(g.sqrt()), T::of((1.0 - g).sqrt()));
    y0.zip_map(eps, |x, e| a * x + b * e)
}

/// Draws `ε ~ N(0, I)` and returns `(y*_t, ε)`.
pub fn dpm_degrade<T: Scalar>(
    sched: &DpmSchedule,
    y0: &Tensor<T>,
    t: usize,
    rng: &mut RngStream,
) -> Result<(Tensor<T>, Tensor<T>)> {
    sched.gamma(t)?;
    let eps = rng.gaussian::<T>(y0.dims());
    Ok((dpm_noise(sched, y0, &eps, t)?, eps))
}

/// `(y*_t − √(1−γ_t) ε̂) / √γ_t`.
pub fn estimate_x0<T: Scalar>(
    sched: &DpmSchedule,
    y_star: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
) -> Result<Tensor<T>> {
    let g = sched.gamma(t)?;
    if !(g > 0.0) {
        return Err(Error::Numerical(format!("γ_{t} = 0 cannot be inverted")));
    }
    let (b, inv) = (T::of((1.0 - g).sqrt()), T::of(1.0 / g.sqrt()));
    y_star.zip_map(eps_hat, |y, e| (y - b * e) * inv)
}

/// Predicts the injected noise from the condition and the noised sample.
pub trait NoisePredictor<T: Scalar>: Sync {
    fn predict(&self, y_c: &Tensor<T>, y_star: &Tensor<T>, t: usize, sched: &DpmSchedule) -> Result<Tensor<T>>;
}

fn stack_condition<T: Scalar>(y_c: &Tensor<T>, y_star: &Tensor<T>) -> Result<Tensor<T>> {
    y_c.check_same_dims(y_star)?;
    match *y_c.dims() {
        [h, w] => Tensor::stack(&[y_c.clone(), y_star.clone()])?.reshape(&[2, h, w]),
        ref d => Err(Error::shape(format!("expected H×W images, got {d:?}"))),
    }
}

impl<T: Scalar> NoisePredictor<T> for RestorationNet<T> {
    fn predict(&self, y_c: &Tensor<T>, y_star: &Tensor<T>, t: usize, sched: &DpmSchedule) -> Result<Tensor<T>> {
        if self.config().in_channels != 2 {
            return Err(Error::usage("noise predictor needs two input channels"));
        }
        let input = stack_condition(y_c, y_star)?;
        Ok(self.forward(&input, sched.gamma(t)?, None)?.mu)
    }
}

/// Deterministic update from `t` to any `to < t`:
/// `√γ_to x̂0 + √(1−γ_to) ε̂`.
pub fn ddim_step_to<T: Scalar, N: NoisePredictor<T> + ?Sized>(
    net: &N,
    sched: &DpmSchedule,
    y_t: &Tensor<T>,
    y_c: &Tensor<T>,
    t: usize,
    to: usize,
) -> Result<Tensor<T>> {
    if sched.eta() != 0.0 {
        return Err(Error::Unsupported("only η = 0 sampling is implemented".into()));
    }
    if t == 0 || t > sched.steps() {
        return Err(Error::StepOutOfRange { t, max: sched.steps() });
    }
    if to >= t {
        return Err(Error::InvalidSteps(format!("update from {t} to {to}")));
    }
    let eps_hat = net.predict(y_c, y_t, t, sched)?;
    let x0 = estimate_x0(sched, y_t, &eps_hat, t)?;
    dpm_noise(sched, &x0, &eps_hat, to)
}

/// One η = 0 step from `t` to `t − 1`.
pub fn ddim_step<T: Scalar, N: NoisePredictor<T> + ?Sized>(
    net: &N,
    sched: &DpmSchedule,
    y_t: &Tensor<T>,
    y_c: &Tensor<T>,
    t: usize,
) -> Result<Tensor<T>> {
    ddim_step_to(net, sched, y_t, y_c, t, t.saturating_sub(1))
}

/// `round(T (i/K)²)` for `i = 0..=K`, nudged up where rounding collides so
/// that exactly `K` distinct steps are visited.
pub fn respace_quadratic(steps: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > steps {
        return Err(Error::InvalidSteps(format!("cannot respace {steps} steps to {k}")));
    }
    let mut s = Vec::with_capacity(k + 1);
    for i in 0..=k {
        let q = (steps as f64 * (i as f64 / k as f64).powi(2)).round() as usize;
        let lo = s.last().map_or(0, |&p: &usize| p + 1);
        s.push(q.max(lo).min(steps - (k - i)));
    }
    Ok(s)
}

/// Runs the η = 0 chain from `y_start` down to step 0 through `steps`
/// (increasing, `0..=T` when `None`).
pub fn ddim_sample<T: Scalar, N: NoisePredictor<T> + ?Sized>(
    net: &N,
    sched: &DpmSchedule,
    y_start: &Tensor<T>,
    y_c: &Tensor<T>,
    steps: Option<&[usize]>,
) -> Result<Tensor<T>> {
    let steps = match steps {
        Some(s) => s.to_vec(),
        None => (0..=sched.steps()).collect(),
    };
    if steps.first() != Some(&0)
        || steps.last() != Some(&sched.steps())
        || steps.len() < 2
        || steps.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(Error::InvalidSteps(format!(
            "expected an increasing sequence from 0 to {}, got {steps:?}",
            sched.steps()
        )));
    }
    let mut y = y_start.clone();
    for w in steps.windows(2).rev() {
        y = ddim_step_to(net, sched, &y, y_c, w[1], w[0])?;
    }
    Ok(y)
}

fn to_signed<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let two = T::of(2.0);
    x.map(|v| two * v - T::one())
}

fn from_signed<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let half = T::of(0.5);
    x.map(|v| half * (v + T::one()))
}

/// Reconstructs a `[0, 1]` image from a `[0, 1]` pattern, starting from
/// Gaussian noise drawn from `rng`.
pub fn dpm_reconstruct<T: Scalar, N: NoisePredictor<T> + ?Sized>(
    net: &N,
    sched: &DpmSchedule,
    pattern: &Tensor<T>,
    steps: Option<&[usize]>,
    rng: &mut RngStream,
) -> Result<Tensor<T>> {
    let start = rng.gaussian::<T>(pattern.dims());
    let y0 = ddim_sample(net, sched, &start, &to_signed(pattern), steps)?;
    Ok(from_signed(&y0))
}

/// Noise-prediction MAE at a fixed step and noise draw, for any predictor.
pub fn dpm_loss<T: Scalar, N: NoisePredictor<T> + ?Sized>(
    net: &N,
    sched: &DpmSchedule,
    y_c: &Tensor<T>,
    y0: &Tensor<T>,
    eps: &Tensor<T>,
    t: usize,
) -> Result<T> {
    let y_star = dpm_noise(sched, y0, eps, t)?;
    mae_loss(&net.predict(y_c, &y_star, t, sched)?, eps)
}

/// One optimizer step on `(pattern, ground truth)` pairs in `[0, 1]`: each
/// item draws `t ∈ {1..T}` and `ε`, and scores `f(y_c, y*_t, γ_t)` against
/// `ε` by MAE. Returns the batch-mean loss.
pub fn dpm_train_step<T: Scalar>(
    trainer: &mut Trainer<T>,
    sched: &DpmSchedule,
    patterns: &[Tensor<T>],
    xs: &[Tensor<T>],
    rng: &RngStream,
) -> Result<f64> {
    if patterns.len() != xs.len() {
        return Err(Error::shape("batch of patterns and ground truths differ in length"));
    }
    if trainer.net.config().in_channels != 2 {
        return Err(Error::usage("noise predictor needs two input channels"));
    }
    let horizon = sched.steps();
    let net = trainer.net.with_dropout(true);
    trainer.step(xs.len(), rng, |g, pv, i, item_rng| {
        let t = 1 + item_rng.below(horizon as u64) as usize;
        let (y0, y_c) = (to_signed(&xs[i]), to_signed(&patterns[i]));
        let (y_star, eps) = dpm_degrade(sched, &y0, t, &mut item_rng.child("eps"))?;
        let input = g.leaf(stack_condition(&y_c, &y_star)?);
        let out = net.build(g, pv, input, sched.gamma(t)?, Some(item_rng))?;
        let target = crate::nn::train_input(&eps)?;
        g.mae(out.mu, &target)
    })
}
