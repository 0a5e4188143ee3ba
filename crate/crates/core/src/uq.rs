//! Monte Carlo dropout uncertainty along the indirect reverse chain.
//!
//! At every visited step the restorer is sampled `S` times with independent
//! dropout masks. The spread of the sampled means is the model uncertainty
//! `σ^(M)`; the RMS of the predicted σ heads is the data uncertainty `σ^(D)`.
//! Only the predictive mean `μ̂` drives the chain. Per-step maps are combined
//! into totals with
//!
//! * naive: `σ = Σ_t |Δα_t| σ_t`
//! * full: `σ² = Σ_t (Δα_t σ_t)² + 2 Σ_t Δα_t cov_t`, `Δα_t = α_t − α_{t−1}`
//!
//! where `cov_t` couples step `t` to the step visited just before it and is
//! zero at `T`.

use rayon::prelude::*;

use crate::archive::TensorArchive;
use crate::ddm::{apply_update, full_steps, Restorer, SamplerMode};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::schedule::Schedule;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_S: usize = 16;
pub const DEFAULT_H: usize = 24;
pub const DEFAULT_PATHS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UqMode {
    Naive,
    Full,
}

/// Per-pixel mean `x_0 + Σ (x_s − x_0) / n`; identical samples give their
/// common value exactly.
pub fn sample_mean<T: Scalar>(samples: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = samples.first().ok_or_else(|| Error::usage("mean of zero samples"))?;
    let inv = T::of(1.0 / samples.len() as f64);
    let mut acc: Tensor<T> = Tensor::zeros(first.dims());
    for s in &samples[1..] {
        first.check_same_dims(s)?;
        for ((a, &v), &f) in acc.data_mut().iter_mut().zip(s.data()).zip(first.data()) {
            *a += v - f;
        }
    }
    first.zip_map(&acc, |f, a| f + a * inv)
}

/// Per-pixel population standard deviation about `mean`.
fn sample_std<T: Scalar>(samples: &[Tensor<T>], mean: &Tensor<T>) -> Result<Tensor<T>> {
    let inv = T::of(1.0 / samples.len() as f64);
    let mut acc: Tensor<T> = Tensor::zeros(mean.dims());
    for s in samples {
        for ((a, &v), &m) in acc.data_mut().iter_mut().zip(s.data()).zip(mean.data()) {
            *a += (v - m) * (v - m);
        }
    }
    Ok(acc.map(|a| (a * inv).sqrt()))
}

/// Per-pixel root mean square, scaled by the per-pixel maximum so that equal
/// inputs return their common value exactly.
fn sample_rms<T: Scalar>(samples: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = samples.first().ok_or_else(|| Error::usage("RMS of zero samples"))?;
    let mut peak = first.map(|v| v.abs());
    for s in &samples[1..] {
        peak = peak.zip_map(s, |p, v| p.max(v.abs()))?;
    }
    let mut acc: Tensor<T> = Tensor::zeros(first.dims());
    for s in samples {
        for ((a, &v), &p) in acc.data_mut().iter_mut().zip(s.data()).zip(peak.data()) {
            if p > T::zero() {
                let r = v / p;
                *a += r * r;
            }
        }
    }
    let inv = T::of(1.0 / samples.len() as f64);
    acc.zip_map(&peak, |a, p| p * (a * inv).sqrt())
}

/// Predictive statistics at one step from retained `(μ^(s), σ^(s))` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStatistics<T> {
    pub t: usize,
    pub mu_hat: Tensor<T>,
    pub sigma_model: Tensor<T>,
    pub sigma_data: Tensor<T>,
    pub mus: Vec<Tensor<T>>,
    pub sigmas: Vec<Tensor<T>>,
}

impl<T: Scalar> StepStatistics<T> {
    /// `μ̂ = mean μ^(s)`, `σ^(M) = √(mean (μ^(s) − μ̂)²)`,
    /// `σ^(D) = √(mean (σ^(s))²)`.
    pub fn from_samples(t: usize, mus: Vec<Tensor<T>>, sigmas: Vec<Tensor<T>>) -> Result<Self> {
        if mus.is_empty() || mus.len() != sigmas.len() {
            return Err(Error::usage(format!(
                "need matching nonempty sample sets, got {} means and {} sigmas",
                mus.len(),
                sigmas.len()
            )));
        }
        for (m, s) in mus.iter().zip(&sigmas) {
            m.check_same_dims(s)?;
            if s.data().iter().any(|v| !(*v > T::zero())) {
                return Err(Error::domain("sample sigma must be strictly positive"));
            }
        }
        let mu_hat = sample_mean(&mus)?;
        let sigma_model = sample_std(&mus, &mu_hat)?;
        let sigma_data = sample_rms(&sigmas)?;
        Ok(Self {
            t,
            mu_hat,
            sigma_model,
            sigma_data,
            mus,
            sigmas,
        })
    }

    pub fn samples(&self) -> usize {
        self.mus.len()
    }
}

fn check_uq_net<T: Scalar, R: Restorer<T> + ?Sized>(net: &R) -> Result<()> {
    if !net.predicts_sigma() {
        return Err(Error::usage("uncertainty analysis needs a network with a σ head"));
    }
    Ok(())
}

/// `S` dropout passes at step `t`; pass `s` draws from
/// `rng.child_indexed("mc", s)`. The restorer must already have its
/// dropout switched on for the passes to differ.
pub fn mc_sample_step<T: Scalar, R: Restorer<T> + ?Sized>(
    net: &R,
    y_t: &Tensor<T>,
    t: usize,
    horizon: usize,
    samples: usize,
    rng: &RngStream,
) -> Result<StepStatistics<T>> {
    check_uq_net(net)?;
    if samples < 2 {
        return Err(Error::usage(format!("need S ≥ 2 dropout samples, got {samples}")));
    }
    let preds = (0..samples)
        .into_par_iter()
        .map(|s| net.restore(y_t, t, horizon, Some(&mut rng.child_indexed("mc", s as u64))))
        .collect::<Result<Vec<_>>>()?;
    let (mus, sigmas) = preds.into_iter().map(|p| (p.mu, p.sigma)).unzip();
    StepStatistics::from_samples(t, mus, sigmas)
}

/// What the step-`t` network sees for covariance sample `h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceInput {
    /// The indirect update from `t+1` with `μ_{t+1}^(h)` as the restoration.
    ChainUpdate,
    /// `μ_{t+1}^(h)` itself.
    Restoration,
}

/// How the data covariance is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataCovariance {
    /// `(1/H) Σ_h σ_{t+1}^(h) ⊙ σ_t(y_t^(h))`, unit correlation.
    Product,
    /// Resample `r^(h) ~ N(μ_{t+1}^(h), σ_{t+1}^(h))` and average
    /// `(r^(h) − μ_{t+1}^(h)) ⊙ (μ_t(y_t(r^(h))) − μ_t(y_t(μ_{t+1}^(h))))`.
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceKind {
    Model,
    Data,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CovarianceConfig {
    /// `H`, covariance samples taken from the later step.
    pub h: usize,
    /// Dropout passes averaged for each step-`t` prediction.
    pub inner: usize,
    pub input: CovarianceInput,
    pub data: DataCovariance,
}

impl Default for CovarianceConfig {
    fn default() -> Self {
        Self {
            h: DEFAULT_H,
            inner: DEFAULT_S,
            input: CovarianceInput::ChainUpdate,
            data: DataCovariance::Product,
        }
    }
}

/// Model and data covariance between the restorations at `t_next` and `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariancePair<T> {
    pub model: Tensor<T>,
    pub data: Tensor<T>,
}

impl<T: Scalar> CovariancePair<T> {
    pub fn zeros(dims: &[usize]) -> Self {
        Self {
            model: Tensor::zeros(dims),
            data: Tensor::zeros(dims),
        }
    }

    pub fn get(&self, kind: CovarianceKind) -> &Tensor<T> {
        match kind {
            CovarianceKind::Model => &self.model,
            CovarianceKind::Data => &self.data,
        }
    }
}

/// The chain position at the later step of a covariance estimate.
#[derive(Debug, Clone, Copy)]
pub struct ChainPoint<'a, T> {
    pub sched: &'a Schedule,
    pub raw: &'a Tensor<T>,
    /// `y_{t+1}`, the state the later-step samples were drawn at.
    pub y_next: &'a Tensor<T>,
    pub t_next: usize,
    pub t: usize,
}

/// Estimates both covariances between step `t_next` (samples in
/// `stats_next`, the first `H` used) and step `t`. Sample `h` draws its
/// step-`t` passes from `rng.child_indexed("cov", h)`.
pub fn covariance_pair<T: Scalar, R: Restorer<T> + ?Sized>(
    net: &R,
    stats_next: &StepStatistics<T>,
    at: ChainPoint<'_, T>,
    cfg: &CovarianceConfig,
    rng: &RngStream,
) -> Result<CovariancePair<T>> {
    check_uq_net(net)?;
    if cfg.h < 2 || cfg.inner < 2 {
        return Err(Error::usage("covariance needs H ≥ 2 and at least 2 inner passes"));
    }
    if stats_next.samples() < cfg.h {
        return Err(Error::usage(format!(
            "covariance needs {} retained samples, have {}",
            cfg.h,
            stats_next.samples()
        )));
    }
    let horizon = at.sched.steps();
    let input_for = |r: &Tensor<T>| -> Result<Tensor<T>> {
        match cfg.input {
            CovarianceInput::ChainUpdate => {
                apply_update(SamplerMode::Indirect, at.sched, at.y_next, at.raw, r, at.t_next, at.t)
            }
            CovarianceInput::Restoration => Ok(r.clone()),
        }
    };
    struct Sample<T> {
        mu: Tensor<T>,
        sigma: Tensor<T>,
        resampled: Option<(Tensor<T>, Tensor<T>)>,
    }
    let per_h = (0..cfg.h)
        .into_par_iter()
        .map(|h| {
            let hr = rng.child_indexed("cov", h as u64);
            let y = input_for(&stats_next.mus[h])?;
            let st = mc_sample_step(net, &y, at.t, horizon, cfg.inner, &hr)?;
            let resampled = match cfg.data {
                DataCovariance::Product => None,
                DataCovariance::Sampled => {
                    let z = hr.child("resample").gaussian::<T>(y.dims());
                    let (m, s) = (&stats_next.mus[h], &stats_next.sigmas[h]);
                    let dev = s.mul(&z)?;
                    let r = m.add(&dev)?;
                    let shifted = mc_sample_step(net, &input_for(&r)?, at.t, horizon, cfg.inner, &hr.child("r"))?;
                    Some((dev, shifted.mu_hat.sub(&st.mu_hat)?))
                }
            };
            Ok(Sample {
                mu: st.mu_hat,
                sigma: st.sigma_data,
                resampled,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let next_mus = &stats_next.mus[..cfg.h];
    let next_mean = sample_mean(next_mus)?;
    let here: Vec<Tensor<T>> = per_h.iter().map(|s| s.mu.clone()).collect();
    let here_mean = sample_mean(&here)?;
    let inv = T::of(1.0 / cfg.h as f64);
    let dims = next_mean.dims().to_vec();
    let mut model = Tensor::zeros(&dims);
    let mut data = Tensor::zeros(&dims);
    for (h, s) in per_h.iter().enumerate() {
        let a = next_mus[h].sub(&next_mean)?;
        let b = s.mu.sub(&here_mean)?;
        model.add_assign(&a.mul(&b)?)?;
        match &s.resampled {
            None => data.add_assign(&stats_next.sigmas[h].mul(&s.sigma)?)?,
            Some((dev, shift)) => data.add_assign(&dev.mul(shift)?)?,
        }
    }
    Ok(CovariancePair {
        model: model.scale(inv),
        data: data.scale(inv),
    })
}

/// One covariance map of the requested kind; see [`covariance_pair`].
pub fn covariance_estimate<T: Scalar, R: Restorer<T> + ?Sized>(
    net: &R,
    stats_next: &StepStatistics<T>,
    at: ChainPoint<'_, T>,
    cfg: &CovarianceConfig,
    kind: CovarianceKind,
    rng: &RngStream,
) -> Result<Tensor<T>> {
    Ok(covariance_pair(net, stats_next, at, cfg, rng)?.get(kind).clone())
}

/// Totals from per-step maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Propagated<T> {
    pub model: Tensor<T>,
    pub data: Tensor<T>,
    /// Pixels whose full-mode variance came out negative and was set to 0.
    pub clamped_model: usize,
    pub clamped_data: usize,
}

/// Combines per-step σ maps (one per visited step in `steps[..K]`, where
/// `steps` runs from `T` to `0`) into totals. `covariances[k]` couples
/// visit `k` to visit `k − 1`; entry 0 is ignored and treated as zero.
pub fn propagate<T: Scalar>(
    per_step: &[StepStatistics<T>],
    covariances: Option<&[CovariancePair<T>]>,
    sched: &Schedule,
    steps: &[usize],
    mode: UqMode,
) -> Result<Propagated<T>> {
    if steps.len() < 2 || per_step.len() != steps.len() - 1 {
        return Err(Error::InvalidSteps(format!(
            "{} step statistics for a sequence of {} states",
            per_step.len(),
            steps.len()
        )));
    }
    for (k, st) in per_step.iter().enumerate() {
        if st.t != steps[k] {
            return Err(Error::InvalidSteps(format!(
                "statistics for step {} found where step {} was visited",
                st.t, steps[k]
            )));
        }
    }
    let dims = per_step[0].mu_hat.dims().to_vec();
    let mut dalpha = Vec::with_capacity(per_step.len());
    for k in 0..per_step.len() {
        dalpha.push(sched.alpha(steps[k])? - sched.alpha(steps[k + 1])?);
    }
    match mode {
        UqMode::Naive => {
            let mut m = Tensor::zeros(&dims);
            let mut d = Tensor::zeros(&dims);
            for (st, da) in per_step.iter().zip(&dalpha) {
                m.axpy(T::of(da.abs()), &st.sigma_model)?;
                d.axpy(T::of(da.abs()), &st.sigma_data)?;
            }
            Ok(Propagated {
                model: m,
                data: d,
                clamped_model: 0,
                clamped_data: 0,
            })
        }
        UqMode::Full => {
            let cov = covariances.ok_or_else(|| Error::usage("full propagation needs covariances"))?;
            if cov.len() != per_step.len() {
                return Err(Error::InvalidSteps(format!(
                    "{} covariance maps for {} steps",
                    cov.len(),
                    per_step.len()
                )));
            }
            let total = |kind: CovarianceKind| -> Result<(Tensor<T>, usize)> {
                let mut var = Tensor::zeros(&dims);
                for (k, (st, &da)) in per_step.iter().zip(&dalpha).enumerate() {
                    let s = match kind {
                        CovarianceKind::Model => &st.sigma_model,
                        CovarianceKind::Data => &st.sigma_data,
                    };
                    let a = T::of(da);
                    for (v, &sv) in var.data_mut().iter_mut().zip(s.data()) {
                        *v += (a * sv) * (a * sv);
                    }
                    if k > 0 {
                        var.axpy(T::of(2.0 * da), cov[k].get(kind))?;
                    }
                }
                let clamped = var.data().iter().filter(|v| **v < T::zero()).count();
                Ok((var.map(|v| v.max(T::zero()).sqrt()), clamped))
            };
            let (model, clamped_model) = total(CovarianceKind::Model)?;
            let (data, clamped_data) = total(CovarianceKind::Data)?;
            Ok(Propagated {
                model,
                data,
                clamped_model,
                clamped_data,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UqConfig {
    pub samples: usize,
    pub mode: UqMode,
    pub covariance: CovarianceConfig,
}

impl Default for UqConfig {
    fn default() -> Self {
        Self {
            samples: DEFAULT_S,
            mode: UqMode::Full,
            covariance: CovarianceConfig::default(),
        }
    }
}

/// Everything produced by one uncertainty run over a reverse chain.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyReport<T> {
    pub mode: UqMode,
    pub samples: usize,
    pub h: usize,
    pub steps: Vec<usize>,
    pub total_model: Tensor<T>,
    pub total_data: Tensor<T>,
    pub per_step: Vec<StepStatistics<T>>,
    /// Present in full mode, one per visited step, first entry zero.
    pub covariances: Option<Vec<CovariancePair<T>>>,
    /// `y_0` of the μ̂-driven chain.
    pub reconstruction: Tensor<T>,
    pub clamped_model: usize,
    pub clamped_data: usize,
}

/// Runs the μ̂-driven indirect chain from `raw`, collecting per-step
/// statistics (and covariances in full mode) and propagating them.
///
/// Visit `k` samples with `rng.child_indexed("step", k)`; in full mode the
/// `H` covariance samples at visit `k − 1` come from
/// `rng.child_indexed("cov-source", k − 1)` unless `S ≥ H`.
pub fn run_uncertainty<T: Scalar, R: Restorer<T> + ?Sized>(
    net: &R,
    sched: &Schedule,
    raw: &Tensor<T>,
    steps: Option<&[usize]>,
    cfg: &UqConfig,
    rng: &RngStream,
) -> Result<UncertaintyReport<T>> {
    check_uq_net(net)?;
    let steps = steps.map_or_else(|| full_steps(sched.steps()), <[usize]>::to_vec);
    if steps.first() != Some(&sched.steps())
        || steps.last() != Some(&0)
        || steps.len() < 2
        || steps.windows(2).any(|w| w[1] >= w[0])
    {
        return Err(Error::InvalidSteps(format!("bad step sequence {steps:?}")));
    }
    let horizon = sched.steps();
    let full = cfg.mode == UqMode::Full;
    let mut y = raw.clone();
    let mut per_step: Vec<StepStatistics<T>> = Vec::new();
    let mut covs: Vec<CovariancePair<T>> = Vec::new();
    let mut prev: Option<(Tensor<T>, StepStatistics<T>)> = None;
    for k in 0..steps.len() - 1 {
        let (t, to) = (steps[k], steps[k + 1]);
        let st = mc_sample_step(net, &y, t, horizon, cfg.samples, &rng.child_indexed("step", k as u64))?;
        if full {
            covs.push(match &prev {
                None => CovariancePair::zeros(raw.dims()),
                Some((y_prev, source)) => covariance_pair(
                    net,
                    source,
                    ChainPoint {
                        sched,
                        raw,
                        y_next: y_prev,
                        t_next: steps[k - 1],
                        t,
                    },
                    &cfg.covariance,
                    &rng.child_indexed("cov", k as u64),
                )?,
            });
            let source = if cfg.samples >= cfg.covariance.h {
                st.clone()
            } else {
                mc_sample_step(
                    net,
                    &y,
                    t,
                    horizon,
                    cfg.covariance.h,
                    &rng.child_indexed("cov-source", k as u64),
                )?
            };
            prev = Some((y.clone(), source));
        }
        let next = apply_update(SamplerMode::Indirect, sched, &y, raw, &st.mu_hat, t, to)?;
        if !next.is_finite() {
            return Err(Error::Numerical(format!("non-finite state after step {t}")));
        }
        per_step.push(st);
        y = next;
    }
    let totals = propagate(&per_step, full.then_some(covs.as_slice()), sched, &steps, cfg.mode)?;
    Ok(UncertaintyReport {
        mode: cfg.mode,
        samples: cfg.samples,
        h: cfg.covariance.h,
        steps,
        total_model: totals.model,
        total_data: totals.data,
        per_step,
        covariances: full.then_some(covs),
        reconstruction: y,
        clamped_model: totals.clamped_model,
        clamped_data: totals.clamped_data,
    })
}

impl<T: Scalar> UncertaintyReport<T> {
    /// Named maps for persistence. Covariance entries appear only in full
    /// mode; retained per-sample tensors are not stored.
    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        let mode = match self.mode {
            UqMode::Naive => 0.0,
            UqMode::Full => 1.0,
        };
        let meta = vec![
            self.samples as f64,
            self.h as f64,
            mode,
            self.steps[0] as f64,
            self.clamped_model as f64,
            self.clamped_data as f64,
        ];
        a.insert("meta", Tensor::new(&[meta.len()], meta)?)?;
        let steps: Vec<f64> = self.steps.iter().map(|&s| s as f64).collect();
        a.insert("steps", Tensor::new(&[steps.len()], steps)?)?;
        a.insert("sigma_model", self.total_model.cast::<f64>())?;
        a.insert("sigma_data", self.total_data.cast::<f64>())?;
        a.insert("reconstruction", self.reconstruction.cast::<f64>())?;
        for st in &self.per_step {
            a.insert(format!("step.{}.mu_hat", st.t), st.mu_hat.cast::<f64>())?;
            a.insert(format!("step.{}.sigma_model", st.t), st.sigma_model.cast::<f64>())?;
            a.insert(format!("step.{}.sigma_data", st.t), st.sigma_data.cast::<f64>())?;
        }
        if let Some(covs) = &self.covariances {
            for (st, c) in self.per_step.iter().zip(covs) {
                a.insert(format!("step.{}.cov_model", st.t), c.model.cast::<f64>())?;
                a.insert(format!("step.{}.cov_data", st.t), c.data.cast::<f64>())?;
            }
        }
        Ok(a)
    }
}

/// Oracle output: spread and mean of `y_0` over independent chains.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSpread<T> {
    pub std: Tensor<T>,
    pub mean: Tensor<T>,
    pub runs: usize,
}

/// Brute-force reference: `runs` full indirect chains, each step drawing one
/// fresh dropout mask (and, with `resample_data`, replacing the restoration
/// by a draw from `N(μ, σ²)`). Returns the per-pixel population std of
/// `y_0`. Run `r` draws from `rng.child_indexed("run", r)`.
pub fn chain_variance_oracle<T: Scalar, R: Restorer<T> + ?Sized>(
    net: &R,
    sched: &Schedule,
    raw: &Tensor<T>,
    steps: Option<&[usize]>,
    runs: usize,
    resample_data: bool,
    rng: &RngStream,
) -> Result<ChainSpread<T>> {
    if runs < 2 {
        return Err(Error::usage("oracle needs at least two runs"));
    }
    let steps = steps.map_or_else(|| full_steps(sched.steps()), <[usize]>::to_vec);
    let horizon = sched.steps();
    let finals = (0..runs)
        .into_par_iter()
        .map(|r| {
            let mut run_rng = rng.child_indexed("run", r as u64);
            let mut y = raw.clone();
            for w in steps.windows(2) {
                let pred = net.restore(&y, w[0], horizon, Some(&mut run_rng))?;
                let rest = if resample_data {
                    let z = run_rng.gaussian::<T>(y.dims());
                    pred.mu.add(&pred.sigma.mul(&z)?)?
                } else {
                    pred.mu
                };
                y = apply_update(SamplerMode::Indirect, sched, &y, raw, &rest, w[0], w[1])?;
            }
            Ok(y)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = sample_mean(&finals)?;
    let std = sample_std(&finals, &mean)?;
    Ok(ChainSpread { std, mean, runs })
}

/// Average of `paths` dropout-active chains, each driven by the `S`-sample
/// predictive mean at every step. Path `p` draws from
/// `rng.child_indexed("path", p)`.
pub fn most_trusted_path<T: Scalar, R: Restorer<T> + ?Sized>(
    net: &R,
    sched: &Schedule,
    raw: &Tensor<T>,
    steps: Option<&[usize]>,
    paths: usize,
    samples: usize,
    rng: &RngStream,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    if paths < 1 {
        return Err(Error::usage("need at least one path"));
    }
    let steps = steps.map_or_else(|| full_steps(sched.steps()), <[usize]>::to_vec);
    let horizon = sched.steps();
    let finals = (0..paths)
        .into_par_iter()
        .map(|p| {
            let path_rng = rng.child_indexed("path", p as u64);
            let mut y = raw.clone();
            for (k, w) in steps.windows(2).enumerate() {
                let mu = if samples == 1 {
                    net.restore(&y, w[0], horizon, Some(&mut path_rng.child_indexed("step", k as u64)))?
                        .mu
                } else {
                    let mut per = Vec::with_capacity(samples);
                    for s in 0..samples {
                        let mut r = path_rng.child_indexed("step", k as u64).child_indexed("mc", s as u64);
                        per.push(net.restore(&y, w[0], horizon, Some(&mut r))?.mu);
                    }
                    sample_mean(&per)?
                };
                y = apply_update(SamplerMode::Indirect, sched, &y, raw, &mu, w[0], w[1])?;
            }
            Ok(y)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((sample_mean(&finals)?, finals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ddm::reconstruct;
    use crate::nn::{mc_dropout, GaussianPrediction};

    /// `μ = a·m·y` with a Bernoulli dropout mask `m` on the scalar weight and a
    /// constant σ head.
    struct Linear {
        a: f64,
        p: f64,
        sigma: f64,
    }

    impl Restorer<f64> for Linear {
        fn restore(
            &self,
            y: &Tensor<f64>,
            _t: usize,
            _h: usize,
            rng: Option<&mut RngStream>,
        ) -> Result<GaussianPrediction<f64>> {
            let w = Tensor::scalar(self.a);
            let w = match rng {
                Some(r) => mc_dropout(&w, self.p, r)?,
                None => w,
            };
            let k = w.data()[0];
            GaussianPrediction::new(y.map(|v| k * v), Tensor::full(y.dims(), self.sigma))
        }

        fn predicts_sigma(&self) -> bool {
            true
        }
    }

    fn state(seed: u64) -> Tensor<f64> {
        RngStream::new(seed).uniform(&[4, 4])
    }

    #[test]
    fn estimators_are_exact_on_dyadic_sets() {
        // means 0.5 ± 0.125, eight each: mean 0.5, std 0.125
        let mus: Vec<_> = (0..16)
            .map(|s| Tensor::full(&[2], if s % 2 == 0 { 0.375 } else { 0.625 }))
            .collect();
        // one σ of 1, six of 1/2, nine of 1/4: RMS 7/16
        let sig = |s: usize| match s {
            0 => 1.0,
            1..=6 => 0.5,
            _ => 0.25,
        };
        let sigmas: Vec<_> = (0..16).map(|s| Tensor::full(&[2], sig(s))).collect();
        let st = StepStatistics::from_samples(3, mus, sigmas).unwrap();
        assert_eq!(st.mu_hat.data(), &[0.5, 0.5]);
        assert_eq!(st.sigma_model.data(), &[0.125, 0.125]);
        assert_eq!(st.sigma_data.data(), &[0.4375, 0.4375]);
    }

    #[test]
    fn estimators_match_direct_formulas() {
        let mut rng = RngStream::new(1);
        let mus: Vec<Tensor<f64>> = (0..7).map(|_| rng.gaussian(&[3, 3])).collect();
        let sigmas: Vec<Tensor<f64>> = (0..7).map(|_| rng.uniform::<f64>(&[3, 3]).map(|v| v + 0.1)).collect();
        let st = StepStatistics::from_samples(1, mus.clone(), sigmas.clone()).unwrap();
        for i in 0..9 {
            let m: f64 = mus.iter().map(|t| t.data()[i]).sum::<f64>() / 7.0;
            let sm = (mus.iter().map(|t| (t.data()[i] - m).powi(2)).sum::<f64>() / 7.0).sqrt();
            let sd = (sigmas.iter().map(|t| t.data()[i].powi(2)).sum::<f64>() / 7.0).sqrt();
            assert!((st.mu_hat.data()[i] - m).abs() < 1e-15);
            assert!((st.sigma_model.data()[i] - sm).abs() < 1e-15);
            assert!((st.sigma_data.data()[i] - sd).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_dropout_and_constant_sigma() {
        let net = Linear {
            a: 0.7,
            p: 0.0,
            sigma: 0.0123,
        };
        let y = state(2);
        let st = mc_sample_step(&net, &y, 3, 5, 5, &RngStream::new(3)).unwrap();
        assert!(st.sigma_model.data().iter().all(|&v| v == 0.0));
        assert_eq!(st.mu_hat, net.restore(&y, 3, 5, None).unwrap().mu);
        assert!(st.sigma_data.data().iter().all(|&v| v == 0.0123));
    }

    #[test]
    fn bernoulli_weight_spread() {
        let net = Linear {
            a: 1.0,
            p: 0.5,
            sigma: 1.0,
        };
        let y = Tensor::full(&[1], 0.8);
        let st = mc_sample_step(&net, &y, 1, 1, 10_000, &RngStream::new(4)).unwrap();
        // w·m/(1−p): std = a·y·√(p/(1−p))
        let want = 0.8;
        assert!((st.sigma_model.data()[0] / want - 1.0).abs() < 0.05);
    }

    #[test]
    fn sampling_errors() {
        let net = Linear {
            a: 1.0,
            p: 0.1,
            sigma: 1.0,
        };
        assert!(mc_sample_step(&net, &state(5), 1, 2, 1, &RngStream::new(5)).is_err());
        struct MeanOnly;
        impl Restorer<f64> for MeanOnly {
            fn restore(
                &self,
                y: &Tensor<f64>,
                _t: usize,
                _h: usize,
                _r: Option<&mut RngStream>,
            ) -> Result<GaussianPrediction<f64>> {
                Ok(GaussianPrediction::mean_only(y.clone()))
            }
        }
        assert!(matches!(
            mc_sample_step(&MeanOnly, &state(5), 1, 2, 4, &RngStream::new(5)),
            Err(Error::Usage(_))
        ));
    }

    fn point<'a>(sched: &'a Schedule, raw: &'a Tensor<f64>, y_next: &'a Tensor<f64>) -> ChainPoint<'a, f64> {
        ChainPoint {
            sched,
            raw,
            y_next,
            t_next: 3,
            t: 2,
        }
    }

    #[test]
    fn covariance_vanishes_without_dropout() {
        let sched = Schedule::alpha_cosine(4).unwrap();
        let (raw, y) = (state(6), state(7));
        let net = Linear {
            a: 0.9,
            p: 0.0,
            sigma: 0.5,
        };
        let src = mc_sample_step(&net, &y, 3, 4, 24, &RngStream::new(8)).unwrap();
        let cfg = CovarianceConfig {
            inner: 4,
            ..Default::default()
        };
        let c = covariance_estimate(
            &net,
            &src,
            point(&sched, &raw, &y),
            &cfg,
            CovarianceKind::Model,
            &RngStream::new(9),
        )
        .unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    /// Identity at step t, dropout noise only at step t+1.
    struct Split;

    impl Restorer<f64> for Split {
        fn restore(
            &self,
            y: &Tensor<f64>,
            t: usize,
            _h: usize,
            rng: Option<&mut RngStream>,
        ) -> Result<GaussianPrediction<f64>> {
            let mu = if t == 3 {
                mc_dropout(y, 0.3, rng.expect("stochastic"))?
            } else {
                y.clone()
            };
            Ok(GaussianPrediction::mean_only(mu))
        }

        fn predicts_sigma(&self) -> bool {
            true
        }
    }

    #[test]
    fn identity_step_reduces_to_sample_variance() {
        let sched = Schedule::alpha_cosine(4).unwrap();
        let (raw, y) = (state(10), state(11));
        let src = mc_sample_step(&Split, &y, 3, 4, 24, &RngStream::new(12)).unwrap();
        let var = src.sigma_model.map(|s| s * s);
        let rng = RngStream::new(13);
        let base = CovarianceConfig {
            inner: 3,
            ..Default::default()
        };
        let direct = CovarianceConfig {
            input: CovarianceInput::Restoration,
            ..base
        };
        let c = covariance_estimate(
            &Split,
            &src,
            point(&sched, &raw, &y),
            &direct,
            CovarianceKind::Model,
            &rng,
        )
        .unwrap();
        assert!(c.max_abs_diff(&var).unwrap() < 1e-6);
        // through the chain update the deviation is scaled by α_2 − α_3
        let chained = covariance_estimate(
            &Split,
            &src,
            point(&sched, &raw, &y),
            &base,
            CovarianceKind::Model,
            &rng,
        )
        .unwrap();
        let w = sched.alpha(2).unwrap() - sched.alpha(3).unwrap();
        assert!(chained.max_abs_diff(&var.scale(w)).unwrap() < 1e-6);
    }

    #[test]
    fn linear_chain_covariance_matches_closed_form() {
        let sched = Schedule::alpha_cosine(4).unwrap();
        let raw = Tensor::full(&[1], 0.3);
        let y = Tensor::full(&[1], 0.8);
        let (a, p) = (0.9, 0.2);
        let net = Linear { a, p, sigma: 0.1 };
        let h = 20_000;
        let src = mc_sample_step(&net, &y, 3, 4, h, &RngStream::new(14)).unwrap();
        let cfg = CovarianceConfig {
            h,
            inner: 16,
            ..Default::default()
        };
        let c = covariance_estimate(
            &net,
            &src,
            point(&sched, &raw, &y),
            &cfg,
            CovarianceKind::Model,
            &RngStream::new(15),
        )
        .unwrap();
        // y_2 = y + Δ(a_h y − y_T), μ_2 = a·y_2: cov = a Δ y² Var(a_h)
        let delta = sched.alpha(2).unwrap() - sched.alpha(3).unwrap();
        let want = a * delta * 0.64 * a * a * p / (1.0 - p);
        assert!((c.data()[0] / want - 1.0).abs() < 0.1, "{} vs {want}", c.data()[0]);
        let d = covariance_estimate(
            &net,
            &src,
            point(&sched, &raw, &y),
            &cfg,
            CovarianceKind::Data,
            &RngStream::new(15),
        )
        .unwrap();
        assert!((d.data()[0] - 0.01).abs() < 1e-12);
    }

    #[test]
    fn covariance_needs_enough_samples() {
        let sched = Schedule::alpha_cosine(4).unwrap();
        let (raw, y) = (state(16), state(17));
        let net = Linear {
            a: 0.9,
            p: 0.1,
            sigma: 0.5,
        };
        let src = mc_sample_step(&net, &y, 3, 4, 8, &RngStream::new(18)).unwrap();
        assert!(covariance_pair(
            &net,
            &src,
            point(&sched, &raw, &y),
            &CovarianceConfig::default(),
            &RngStream::new(1)
        )
        .is_err());
    }

    fn flat_stats(t: usize, sigma: f64) -> StepStatistics<f64> {
        StepStatistics {
            t,
            mu_hat: Tensor::zeros(&[2]),
            sigma_model: Tensor::full(&[2], sigma),
            sigma_data: Tensor::full(&[2], sigma),
            mus: vec![],
            sigmas: vec![],
        }
    }

    #[test]
    fn propagation_closed_forms() {
        let sched = Schedule::alpha_cosine(2).unwrap();
        let steps = [2, 1, 0];
        let per = vec![flat_stats(2, 0.1), flat_stats(1, 0.1)];
        let covs = vec![CovariancePair::zeros(&[2]), CovariancePair::zeros(&[2])];
        let full = propagate(&per, Some(&covs), &sched, &steps, UqMode::Full).unwrap();
        assert!(full
            .model
            .data()
            .iter()
            .all(|v| (v - (2.0 * 0.05f64.powi(2)).sqrt()).abs() < 1e-15));
        let naive = propagate(&per, None, &sched, &steps, UqMode::Naive).unwrap();
        assert!(naive.model.data().iter().all(|v| (v - 0.1).abs() < 1e-15));

        let one = Schedule::alpha_cosine(1).unwrap();
        let per = vec![flat_stats(1, 0.3)];
        // a nonzero first covariance is ignored: nothing precedes step T
        let covs = vec![CovariancePair {
            model: Tensor::full(&[2], 5.0),
            data: Tensor::full(&[2], 5.0),
        }];
        let r = propagate(&per, Some(&covs), &one, &[1, 0], UqMode::Full).unwrap();
        assert!(r.model.data().iter().all(|v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn negative_variance_is_clamped_and_counted() {
        let sched = Schedule::alpha_cosine(2).unwrap();
        let per = vec![flat_stats(2, 0.1), flat_stats(1, 0.1)];
        let mut cov = CovariancePair::zeros(&[2]);
        cov.model.data_mut()[0] = 1.0;
        let covs = vec![CovariancePair::zeros(&[2]), cov];
        let r = propagate(&per, Some(&covs), &sched, &[2, 1, 0], UqMode::Full).unwrap();
        assert_eq!(r.clamped_model, 1);
        assert_eq!(r.model.data()[0], 0.0);
        assert_eq!(r.clamped_data, 0);
    }

    #[test]
    fn propagation_needs_every_step() {
        let sched = Schedule::alpha_cosine(3).unwrap();
        let per = vec![flat_stats(3, 0.1), flat_stats(2, 0.1)];
        assert!(propagate(&per, None, &sched, &[3, 2, 1, 0], UqMode::Naive).is_err());
        assert!(propagate(&per, None, &sched, &[3, 2, 0], UqMode::Full).is_err());
    }

    #[test]
    fn oracle_is_zero_without_randomness() {
        let sched = Schedule::alpha_cosine(5).unwrap();
        let net = Linear {
            a: 0.9,
            p: 0.0,
            sigma: 0.1,
        };
        let o = chain_variance_oracle(&net, &sched, &state(19), None, 16, false, &RngStream::new(20)).unwrap();
        assert!(o.std.data().iter().all(|&v| v == 0.0));
        let noisy = chain_variance_oracle(&net, &sched, &state(19), None, 16, true, &RngStream::new(20)).unwrap();
        assert!(noisy.std.data().iter().all(|&v| v > 0.0));
    }

    /// Ignores its input: `μ = c·m` for a dropout mask `m`.
    struct Flat {
        c: f64,
        p: f64,
    }

    impl Restorer<f64> for Flat {
        fn restore(
            &self,
            y: &Tensor<f64>,
            _t: usize,
            _h: usize,
            rng: Option<&mut RngStream>,
        ) -> Result<GaussianPrediction<f64>> {
            let w = mc_dropout(&Tensor::scalar(self.c), self.p, rng.expect("stochastic"))?;
            Ok(GaussianPrediction::mean_only(Tensor::full(y.dims(), w.data()[0])))
        }

        fn predicts_sigma(&self) -> bool {
            true
        }
    }

    #[test]
    fn oracle_matches_linear_chain_variance() {
        // restorations are independent of the state, so
        // Var(y_0) = Σ w_k² Var(R) with Var(R) = c² p / (1 − p)
        let sched = Schedule::alpha_cosine(6).unwrap();
        let (c, p) = (0.5, 0.25);
        let net = Flat { c, p };
        let raw = Tensor::zeros(&[1]);
        let o = chain_variance_oracle(&net, &sched, &raw, None, 10_000, false, &RngStream::new(21)).unwrap();
        let w2: f64 = (1..=6)
            .map(|t| (sched.alpha(t - 1).unwrap() - sched.alpha(t).unwrap()).powi(2))
            .sum();
        let want = (w2 * c * c * p / (1.0 - p)).sqrt();
        assert!((o.std.data()[0] / want - 1.0).abs() < 0.1);
    }

    #[test]
    fn oracle_error_shrinks_with_runs() {
        let sched = Schedule::alpha_cosine(6).unwrap();
        let net = Flat { c: 0.5, p: 0.25 };
        let raw = Tensor::zeros(&[1]);
        let w2: f64 = (1..=6)
            .map(|t| (sched.alpha(t - 1).unwrap() - sched.alpha(t).unwrap()).powi(2))
            .sum();
        let want = (w2 * 0.25 * 0.25 / 0.75).sqrt();
        let spread = |runs: usize| {
            let errs: Vec<f64> = (0..40)
                .map(|rep| {
                    let o = chain_variance_oracle(&net, &sched, &raw, None, runs, false, &RngStream::new(100 + rep))
                        .unwrap();
                    o.std.data()[0] - want
                })
                .collect();
            (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt()
        };
        let ratio = spread(64) / spread(128);
        assert!((1.1..2.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn most_trusted_degenerate_cases() {
        let sched = Schedule::alpha_cosine(5).unwrap();
        let raw = state(22);
        let net = Linear {
            a: 0.9,
            p: 0.0,
            sigma: 0.1,
        };
        let det = reconstruct(&net, &sched, &raw, SamplerMode::Indirect, None, None).unwrap();
        let (avg, _) = most_trusted_path(&net, &sched, &raw, None, 4, 3, &RngStream::new(23)).unwrap();
        assert_eq!(&avg, det.final_state());
        let noisy = Linear {
            a: 0.9,
            p: 0.3,
            sigma: 0.1,
        };
        let (avg, paths) = most_trusted_path(&noisy, &sched, &raw, None, 1, 3, &RngStream::new(24)).unwrap();
        assert_eq!(avg, paths[0]);
    }

    #[test]
    fn averaging_paths_attenuates_high_frequencies() {
        use crate::metrics::{highpass_energy, HIGHPASS_CUTOFF};
        /// Pixelwise dropout on the state: high-frequency noise per path.
        struct Speckle;
        impl Restorer<f64> for Speckle {
            fn restore(
                &self,
                y: &Tensor<f64>,
                _t: usize,
                _h: usize,
                rng: Option<&mut RngStream>,
            ) -> Result<GaussianPrediction<f64>> {
                Ok(GaussianPrediction::mean_only(mc_dropout(
                    y,
                    0.3,
                    rng.expect("stochastic"),
                )?))
            }
            fn predicts_sigma(&self) -> bool {
                true
            }
        }
        let sched = Schedule::alpha_cosine(5).unwrap();
        let raw = RngStream::new(25).uniform::<f64>(&[8, 8]);
        let (avg, paths) = most_trusted_path(&Speckle, &sched, &raw, None, 8, 1, &RngStream::new(26)).unwrap();
        let each: f64 = paths
            .iter()
            .map(|p| highpass_energy(p, HIGHPASS_CUTOFF).unwrap())
            .sum::<f64>()
            / 8.0;
        assert!(highpass_energy(&avg, HIGHPASS_CUTOFF).unwrap() <= each);
    }

    #[test]
    fn report_archive_entries_follow_mode() {
        let sched = Schedule::alpha_cosine(3).unwrap();
        let net = Linear {
            a: 0.9,
            p: 0.2,
            sigma: 0.1,
        };
        let raw = state(27);
        let mut cfg = UqConfig {
            samples: 4,
            mode: UqMode::Naive,
            covariance: CovarianceConfig {
                h: 4,
                inner: 2,
                ..Default::default()
            },
        };
        let naive = run_uncertainty(&net, &sched, &raw, None, &cfg, &RngStream::new(28)).unwrap();
        let a = naive.to_archive().unwrap();
        assert!(a.names().all(|n| !n.contains("cov")));
        assert_eq!(a.require::<f64>("meta").unwrap().data()[..2], [4.0, 4.0]);
        cfg.mode = UqMode::Full;
        let full = run_uncertainty(&net, &sched, &raw, None, &cfg, &RngStream::new(28)).unwrap();
        let a = full.to_archive().unwrap();
        assert_eq!(a.names().filter(|n| n.contains("cov")).count(), 6);
        // the chain is driven by the same μ̂ in both modes
        assert_eq!(naive.reconstruction, full.reconstruction);
    }
}
