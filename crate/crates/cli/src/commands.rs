//! File-level commands: read inputs, run a pipeline stage, write artifacts
//! and a manifest.

use std::path::{Path, PathBuf};

use ddm_core::archive::TensorArchive;
use ddm_core::ddm::SamplerMode;
use ddm_core::metrics::{g6, metrics_csv, summary_line};
use ddm_core::uq::UqMode;
use ddm_core::Tensor;
use serde_json::json;

use crate::artifacts::{
    dataset_to_archive, load_dataset, normalized_for_display, write_manifest, write_pgm, write_text, Checkpoint,
    ModelKind, Reconstructions,
};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::pipeline::{self, Budget, SampleOptions, UqOptions};

pub const DATA_FILE: &str = "data.ddt";

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))
}

fn sibling_data(ckpt: &Path) -> PathBuf {
    ckpt.with_file_name(DATA_FILE)
}

/// Generates the dataset archive in the config's artifact directory.
pub fn gen_data(config: &Path) -> Result<PathBuf> {
    let loaded = RunConfig::load(config)?;
    let cfg = &loaded.config;
    ensure_dir(&loaded.out_dir)?;
    let ds = pipeline::generate_dataset(cfg)?;
    let path = loaded.out_dir.join(DATA_FILE);
    dataset_to_archive(&ds)?.save(&path)?;
    write_manifest(
        &path,
        "gen-data",
        &cfg.hash(),
        json!({
            "operator": {
                "kind": cfg.operator.kind,
                "seed": cfg.operator.seed,
                "noise_level": cfg.operator.noise_level,
            },
            "data_seed": cfg.data.seed,
            "dims": [cfg.data.height, cfg.data.width],
            "train": ds.train.len(),
            "test": ds.test.len(),
        }),
    )?;
    Ok(path)
}

/// Trains a model on the generated dataset and writes `<kind>.ckpt` plus
/// `<kind>.loss.csv` with one row per epoch.
pub fn train(config: &Path, kind: ModelKind, log: &mut dyn FnMut(&str)) -> Result<PathBuf> {
    let loaded = RunConfig::load(config)?;
    let cfg = &loaded.config;
    let ds = load_dataset(&loaded.out_dir.join(DATA_FILE))?;
    let mut csv = String::from("epoch,loss\n");
    let outcome = pipeline::train(cfg, kind, &ds, Budget::Epochs(cfg.trainer.epochs), |e, loss| {
        csv.push_str(&format!("{e},{}\n", g6(loss)));
        log(&format!("{} epoch {e}: loss {}", kind.name(), g6(loss)));
    })?;
    let path = loaded.out_dir.join(format!("{}.ckpt", kind.name()));
    Checkpoint {
        model: outcome.model,
        config: cfg.clone(),
    }
    .save(&path)?;
    let csv_path = loaded.out_dir.join(format!("{}.loss.csv", kind.name()));
    write_text(&csv_path, &csv)?;
    write_manifest(
        &path,
        "train",
        &cfg.hash(),
        json!({
            "model": kind.name(),
            "trainer_seed": cfg.trainer.seed,
            "epochs": outcome.epoch_losses.len(),
            "optimizer_steps": outcome.steps,
            "final_loss": outcome.epoch_losses.last(),
        }),
    )?;
    Ok(path)
}

#[derive(Debug, Clone, Default)]
pub struct SampleArgs {
    pub data: Option<PathBuf>,
    pub mode: Option<SamplerMode>,
    pub steps: Option<usize>,
    pub out: Option<PathBuf>,
    pub trajectory: bool,
    pub previews: Option<usize>,
}

fn mode_name(m: SamplerMode) -> &'static str {
    match m {
        SamplerMode::Direct => "direct",
        SamplerMode::Indirect => "indirect",
    }
}

/// Reconstructs the test split; writes the archive and PGM previews.
pub fn sample(ckpt: &Path, args: &SampleArgs) -> Result<PathBuf> {
    let ck = Checkpoint::load(ckpt)?;
    let kind = ck.model.kind();
    let mode = match (kind, args.mode) {
        (ModelKind::Dpm, Some(_)) => {
            return Err(CliError::usage("--mode applies to DDM checkpoints only"));
        }
        (_, m) => m.unwrap_or(SamplerMode::Indirect),
    };
    let data_path = args.data.clone().unwrap_or_else(|| sibling_data(ckpt));
    let ds = load_dataset(&data_path)?;
    let opts = SampleOptions {
        mode,
        steps: args.steps,
        seed: ck.config.sampling.seed,
        keep_trajectory: args.trajectory,
    };
    let recon = pipeline::sample(&ck.model, &ds, &ds.test, &opts)?;
    let taken = recon.steps.len() - 1;
    let out = args.out.clone().unwrap_or_else(|| {
        let name = match kind {
            ModelKind::Ddm => format!("ddm-{}-{taken}.recon.ddt", mode_name(mode)),
            ModelKind::Dpm => format!("dpm-{taken}.recon.ddt"),
        };
        ckpt.with_file_name(name)
    });
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    recon.to_archive()?.save(&out)?;
    let previews = args.previews.unwrap_or(ck.config.sampling.previews);
    let dir = out.with_extension("previews");
    if previews > 0 {
        ensure_dir(&dir)?;
    }
    for (id, img) in recon.ids.iter().zip(&recon.images).take(previews) {
        write_pgm(&dir.join(format!("{id}.pgm")), img)?;
    }
    write_manifest(
        &out,
        "sample",
        &ck.config.hash(),
        json!({
            "model": kind.name(),
            "mode": if kind == ModelKind::Ddm { Some(mode_name(mode)) } else { None },
            "steps_taken": taken,
            "visited": recon.steps,
            "samples": recon.ids.len(),
            "sampling_seed": ck.config.sampling.seed,
        }),
    )?;
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct UncertaintyArgs {
    pub data: Option<PathBuf>,
    pub samples: Option<usize>,
    pub h: Option<usize>,
    pub mode: Option<UqMode>,
    pub paths: Option<usize>,
    pub count: Option<usize>,
    pub out: Option<PathBuf>,
}

/// Uncertainty maps and most-trusted reconstructions for the first test
/// samples. Archive entries are prefixed by the sample id.
pub fn uncertainty(ckpt: &Path, args: &UncertaintyArgs) -> Result<PathBuf> {
    let ck = Checkpoint::load(ckpt)?;
    if ck.model.kind() != ModelKind::Ddm {
        return Err(CliError::usage("uncertainty analysis needs a DDM checkpoint"));
    }
    if !ck.model.net().has_sigma_head() {
        return Err(CliError::usage(
            "uncertainty analysis needs a checkpoint trained with a σ head",
        ));
    }
    let mut opts = UqOptions::from_config(&ck.config);
    opts.samples = args.samples.unwrap_or(opts.samples);
    opts.h = args.h.unwrap_or(opts.h);
    opts.mode = args.mode.unwrap_or(opts.mode);
    opts.paths = args.paths.unwrap_or(opts.paths);
    if opts.samples < 2 || opts.h < 2 || opts.paths < 1 {
        return Err(CliError::usage("need S ≥ 2, H ≥ 2 and at least one path"));
    }
    let ds = load_dataset(&args.data.clone().unwrap_or_else(|| sibling_data(ckpt)))?;
    let count = args.count.unwrap_or(ck.config.uq.count).min(ds.test.len());
    let ids = &ds.test[..count];
    let mode = match opts.mode {
        UqMode::Naive => "naive",
        UqMode::Full => "full",
    };
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| ckpt.with_file_name(format!("uq-{mode}.ddt")));
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    let maps = out.with_extension("previews");
    ensure_dir(&maps)?;
    let mut archive = TensorArchive::new();
    archive.insert(
        "ids",
        Tensor::new(&[ids.len()], ids.iter().map(|&i| i as f64).collect())?,
    )?;
    let mut clamped = Vec::new();
    for &id in ids {
        let u = pipeline::uncertainty(&ck.model, &ds, id, &opts)?;
        for (name, t) in u.report.to_archive()?.iter() {
            archive.insert(format!("{id}/{name}"), t.clone())?;
        }
        archive.insert(format!("{id}/most_trusted"), u.most_trusted.cast::<f64>())?;
        for (p, y) in u.paths.iter().enumerate() {
            archive.insert(format!("{id}/path.{p}"), y.cast::<f64>())?;
        }
        let show = |t: &Tensor<f32>| normalized_for_display(&t.cast());
        write_pgm(
            &maps.join(format!("{id}_sigma_model.pgm")),
            &show(&u.report.total_model),
        )?;
        write_pgm(&maps.join(format!("{id}_sigma_data.pgm")), &show(&u.report.total_data))?;
        write_pgm(&maps.join(format!("{id}_most_trusted.pgm")), &u.most_trusted.cast())?;
        clamped.push(json!({"id": id, "model": u.report.clamped_model, "data": u.report.clamped_data}));
    }
    archive.save(&out)?;
    write_manifest(
        &out,
        "uncertainty",
        &ck.config.hash(),
        json!({
            "S": opts.samples,
            "H": opts.h,
            "mode": mode,
            "paths": opts.paths,
            "uq_seed": opts.seed,
            "ids": ids,
            "clamped_variances": clamped,
        }),
    )?;
    Ok(out)
}

/// Per-sample metrics CSV next to the reconstructions (or at `out`) and
/// a one-line summary, which is also returned.
pub fn eval(recon: &Path, data: &Path, out: Option<&Path>) -> Result<(PathBuf, String)> {
    let r = Reconstructions::load(recon)?;
    let ds = load_dataset(data)?;
    let rows = pipeline::evaluate(&r, &ds)?;
    let csv_path = out.map_or_else(|| recon.with_extension("metrics.csv"), Path::to_path_buf);
    write_text(&csv_path, &metrics_csv(&rows))?;
    let summary = summary_line(&rows);
    write_text(&csv_path.with_extension("summary.txt"), &format!("{summary}\n"))?;
    let hash = recon_config_hash(recon);
    write_manifest(
        &csv_path,
        "eval",
        &hash,
        json!({
            "reconstructions": recon.file_name().map(|f| f.to_string_lossy().into_owned()),
            "rows": rows.len(),
        }),
    )?;
    Ok((csv_path, summary))
}

/// The config hash recorded by the command that wrote `recon`, if any.
fn recon_config_hash(recon: &Path) -> String {
    std::fs::read_to_string(crate::artifacts::manifest_path(recon))
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| v["config_sha256"].as_str().map(str::to_owned))
        .unwrap_or_else(|| "unknown".into())
}
