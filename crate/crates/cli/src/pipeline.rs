//! In-memory pipeline stages shared by the commands and the test suites.

use ddm_core::ddm::{ddm_train_step, even_steps, reconstruct, LossKind, SamplerMode};
use ddm_core::dpm::{dpm_reconstruct, dpm_train_step, gamma_schedule, respace_quadratic, DpmSchedule};
use ddm_core::metrics::MetricRow;
use ddm_core::nn::{AdamConfig, Heads, LrSchedule, RestorationNet, Trainer};
use ddm_core::optics::{gen_shapes_dataset, Dataset, ForwardOperator};
use ddm_core::uq::{most_trusted_path, run_uncertainty, CovarianceConfig, UncertaintyReport, UqConfig, UqMode};
use ddm_core::{RngStream, Schedule, Tensor};
use rayon::prelude::*;

use crate::artifacts::{Model, ModelKind, Reconstructions};
use crate::config::{LossName, OperatorName, RunConfig};
use crate::error::{CliError, Result};

pub fn forward_operator(cfg: &RunConfig) -> Result<ForwardOperator> {
    let mut rng = RngStream::new(cfg.operator.seed);
    let pixels = cfg.data.height * cfg.data.width;
    let op = match cfg.operator.kind {
        OperatorName::Scattering => ForwardOperator::scattering(&mut rng, pixels)?,
        OperatorName::Shg => ForwardOperator::shg(&mut rng, pixels)?,
        OperatorName::Identity => ForwardOperator::identity(),
    };
    Ok(op.with_noise(cfg.operator.noise_level))
}

/// Images from `data.seed`, patterns through the configured operator.
pub fn generate_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let rng = RngStream::new(cfg.data.seed);
    let images = gen_shapes_dataset(&rng.child("images"), cfg.data.count, cfg.data.height, cfg.data.width)?;
    Ok(Dataset::simulate(
        &forward_operator(cfg)?,
        images,
        &rng.child("detection"),
    )?)
}

/// How long to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Budget {
    Epochs(usize),
    Steps(u64),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mean step loss of each (possibly partial) epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

pub fn ddm_schedule(cfg: &RunConfig) -> Result<Schedule> {
    Ok(Schedule::alpha_cosine(cfg.schedule.steps)?)
}

pub fn dpm_schedule(cfg: &RunConfig) -> Result<DpmSchedule> {
    Ok(gamma_schedule(
        cfg.schedule.steps,
        cfg.schedule.dpm_beta_start,
        cfg.schedule.dpm_beta_end,
    )?)
}

/// Trains a fresh network on the training split.
///
/// Epoch `e` visits the split in the order of
/// `RngStream::new(seed).child_indexed("epoch", e)`; step `s` draws from
/// `child_indexed("step", s)`.
pub fn train(
    cfg: &RunConfig,
    kind: ModelKind,
    ds: &Dataset,
    budget: Budget,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    let (h, w) = ds.image_dims();
    if (h, w) != (cfg.data.height, cfg.data.width) {
        return Err(CliError::data(format!(
            "dataset images are {h}×{w}, config expects {}×{}",
            cfg.data.height, cfg.data.width
        )));
    }
    let n = ds.train.len();
    if n == 0 {
        return Err(CliError::data("training split is empty"));
    }
    let tc = &cfg.trainer;
    let batch = tc.batch.min(n);
    let per_epoch = n.div_ceil(batch) as u64;
    let total = match budget {
        Budget::Epochs(e) => e as u64 * per_epoch,
        Budget::Steps(s) => s,
    };
    let root = RngStream::new(tc.seed);
    let net_cfg = match kind {
        ModelKind::Ddm => cfg.net_config(1, cfg.ddm_heads()),
        ModelKind::Dpm => cfg.net_config(2, Heads::MeanOnly),
    };
    let net = RestorationNet::<f32>::new(net_cfg, &mut root.child("init"))?;
    let adam = AdamConfig {
        lr: tc.lr,
        ..AdamConfig::default()
    };
    let mut trainer = Trainer::new(
        net,
        adam,
        LrSchedule::Cosine {
            total,
            floor: tc.lr_floor,
        },
    );
    let sched = ddm_schedule(cfg)?;
    let dpm_sched = dpm_schedule(cfg)?;
    let loss_kind = match cfg.model.loss {
        LossName::Mae => LossKind::Mae,
        LossName::Nll => LossKind::GaussianNll,
    };
    let xs: Vec<Tensor<f32>> = (0..ds.len())
        .map(|i| ds.ground_truth.index_axis0(i).map(|t| t.cast()))
        .collect::<ddm_core::Result<_>>()?;
    let ys: Vec<Tensor<f32>> = (0..ds.len())
        .map(|i| ds.raw_patterns.index_axis0(i).map(|t| t.cast()))
        .collect::<ddm_core::Result<_>>()?;

    let mut step = 0u64;
    let mut epoch_losses = Vec::new();
    let mut epoch = 0usize;
    while step < total {
        let order = root.child_indexed("epoch", epoch as u64).permutation(n);
        let mut sum = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(batch) {
            if step >= total {
                break;
            }
            let bx: Vec<Tensor<f32>> = chunk.iter().map(|&i| xs[ds.train[i]].clone()).collect();
            let by: Vec<Tensor<f32>> = chunk.iter().map(|&i| ys[ds.train[i]].clone()).collect();
            let srng = root.child_indexed("step", step);
            let loss = match kind {
                ModelKind::Ddm => ddm_train_step(&mut trainer, &sched, &bx, &by, loss_kind, &srng)?,
                ModelKind::Dpm => dpm_train_step(&mut trainer, &dpm_sched, &by, &bx, &srng)?,
            };
            sum += loss;
            count += 1;
            step += 1;
        }
        let mean = sum / count as f64;
        on_epoch(epoch, mean);
        epoch_losses.push(mean);
        epoch += 1;
    }
    let net = trainer.net;
    let model = match kind {
        ModelKind::Ddm => Model::Ddm { net, sched },
        ModelKind::Dpm => Model::Dpm { net, sched: dpm_sched },
    };
    Ok(TrainOutcome {
        model,
        epoch_losses,
        steps: step,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    pub mode: SamplerMode,
    /// Reverse steps to take; `None` uses the trained horizon.
    pub steps: Option<usize>,
    pub seed: u64,
    pub keep_trajectory: bool,
}

/// The DDM schedule and visited steps for a requested step count: an even
/// sub-sequence of the trained schedule for `N ≤ T`, a fresh `N`-step
/// schedule beyond it.
pub fn ddm_plan(sched: &Schedule, steps: Option<usize>) -> Result<(Schedule, Vec<usize>)> {
    let t = sched.steps();
    match steps {
        None => Ok((sched.clone(), ddm_core::ddm::full_steps(t))),
        Some(0) => Err(CliError::usage("--steps must be positive")),
        Some(n) if n <= t => Ok((sched.clone(), even_steps(t, n)?)),
        Some(n) => Ok((Schedule::alpha_cosine(n)?, ddm_core::ddm::full_steps(n))),
    }
}

fn dpm_plan(sched: &DpmSchedule, steps: Option<usize>) -> Result<Vec<usize>> {
    let t = sched.steps();
    match steps {
        None => Ok((0..=t).collect()),
        Some(n) if n > t => Err(CliError::usage(format!(
            "the DPM baseline was trained with {t} steps and cannot take {n}"
        ))),
        Some(n) => Ok(respace_quadratic(t, n)?),
    }
}

/// Reconstructs the given dataset samples. DPM sample `id` starts from
/// `RngStream::new(seed).child_indexed("sample", id)`.
pub fn sample(model: &Model, ds: &Dataset, ids: &[usize], opts: &SampleOptions) -> Result<Reconstructions> {
    if let Some(&bad) = ids.iter().find(|&&i| i >= ds.len()) {
        return Err(CliError::data(format!("sample id {bad} beyond {} samples", ds.len())));
    }
    let root = RngStream::new(opts.seed);
    match model {
        Model::Ddm { net, sched } => {
            let (sched, steps) = ddm_plan(sched, opts.steps)?;
            let outs = ids
                .par_iter()
                .map(|&id| {
                    let raw: Tensor<f32> = ds.raw_patterns.index_axis0(id)?.cast();
                    let tr = reconstruct(net, &sched, &raw, opts.mode, Some(&steps), None)?;
                    let last = tr.final_state().cast::<f64>();
                    if !last.is_finite() {
                        return Err(CliError::Numerical(format!(
                            "non-finite reconstruction for sample {id}"
                        )));
                    }
                    let traj = if opts.keep_trajectory {
                        let states: Vec<Tensor<f64>> = tr.y.iter().map(|t| t.cast()).collect();
                        Some(Tensor::stack(&states)?)
                    } else {
                        None
                    };
                    Ok((last, traj))
                })
                .collect::<Result<Vec<_>>>()?;
            let (images, trajs): (Vec<_>, Vec<_>) = outs.into_iter().unzip();
            Ok(Reconstructions {
                ids: ids.to_vec(),
                images,
                steps,
                trajectories: opts.keep_trajectory.then(|| trajs.into_iter().flatten().collect()),
            })
        }
        Model::Dpm { net, sched } => {
            if opts.keep_trajectory {
                return Err(CliError::usage(
                    "trajectory dumps are only available for DDM checkpoints",
                ));
            }
            let steps = dpm_plan(sched, opts.steps)?;
            let images = ids
                .par_iter()
                .map(|&id| {
                    let raw: Tensor<f32> = ds.raw_patterns.index_axis0(id)?.cast();
                    let mut rng = root.child_indexed("sample", id as u64);
                    let y = dpm_reconstruct(net, sched, &raw, Some(&steps), &mut rng)?.cast::<f64>();
                    if !y.is_finite() {
                        return Err(CliError::Numerical(format!(
                            "non-finite reconstruction for sample {id}"
                        )));
                    }
                    Ok(y)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Reconstructions {
                ids: ids.to_vec(),
                images,
                steps,
                trajectories: None,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UqOptions {
    pub samples: usize,
    pub h: usize,
    pub mode: UqMode,
    pub paths: usize,
    pub seed: u64,
}

impl UqOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            samples: cfg.uq.samples,
            h: cfg.uq.h,
            mode: cfg.uq.mode.into(),
            paths: cfg.uq.paths,
            seed: cfg.uq.seed,
        }
    }
}

/// Uncertainty report and most-trusted reconstruction for one sample.
#[derive(Debug, Clone)]
pub struct SampleUncertainty {
    pub id: usize,
    pub report: UncertaintyReport<f32>,
    pub most_trusted: Tensor<f32>,
    pub paths: Vec<Tensor<f32>>,
}

/// Runs the uncertainty analysis with dropout switched on. Sample `id`
/// draws from `RngStream::new(seed).child_indexed("uq", id)`.
pub fn uncertainty(model: &Model, ds: &Dataset, id: usize, opts: &UqOptions) -> Result<SampleUncertainty> {
    let Model::Ddm { net, sched } = model else {
        return Err(CliError::usage("uncertainty analysis needs a DDM checkpoint"));
    };
    if !net.has_sigma_head() {
        return Err(CliError::usage(
            "uncertainty analysis needs a checkpoint trained with a σ head",
        ));
    }
    if id >= ds.len() {
        return Err(CliError::data(format!("sample id {id} beyond {} samples", ds.len())));
    }
    let net = net.with_dropout(true);
    let raw: Tensor<f32> = ds.raw_patterns.index_axis0(id)?.cast();
    let rng = RngStream::new(opts.seed).child_indexed("uq", id as u64);
    let cfg = UqConfig {
        samples: opts.samples,
        mode: opts.mode,
        covariance: CovarianceConfig {
            h: opts.h,
            inner: opts.samples,
            ..CovarianceConfig::default()
        },
    };
    let report = run_uncertainty(&net, sched, &raw, None, &cfg, &rng.child("report"))?;
    let (most_trusted, paths) =
        most_trusted_path(&net, sched, &raw, None, opts.paths, opts.samples, &rng.child("paths"))?;
    Ok(SampleUncertainty {
        id,
        report,
        most_trusted,
        paths,
    })
}

/// Metric rows ordered by id. Every id must exist in the dataset.
pub fn evaluate(recon: &Reconstructions, ds: &Dataset) -> Result<Vec<MetricRow>> {
    let mut pairs: Vec<(usize, &Tensor<f64>)> = recon.ids.iter().copied().zip(&recon.images).collect();
    pairs.sort_by_key(|p| p.0);
    if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(CliError::data("reconstructions repeat a sample id"));
    }
    pairs
        .par_iter()
        .map(|&(id, img)| {
            if id >= ds.len() {
                return Err(CliError::data(format!("reconstruction id {id} is not in the dataset")));
            }
            let truth = ds.ground_truth.index_axis0(id)?;
            Ok(MetricRow::compute(id, img, &truth)?)
        })
        .collect()
}
