//! On-disk forms of datasets, checkpoints, reconstructions, previews and
//! manifests.

use std::fs;
use std::path::Path;

use ddm_core::archive::{write_atomic, TensorArchive};
use ddm_core::dpm::DpmSchedule;
use ddm_core::nn::{Heads, NetConfig, ParamSet, RestorationNet};
use ddm_core::optics::Dataset;
use ddm_core::{Schedule, Tensor};
use serde_json::Value;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

fn indices(v: &[usize]) -> Tensor<f64> {
    Tensor::new(&[v.len()], v.iter().map(|&i| i as f64).collect()).expect("1-D")
}

fn to_indices(t: &Tensor<f64>, what: &str) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < 1e15 {
                Ok(v as usize)
            } else {
                Err(CliError::data(format!("{what} holds a non-index value {v}")))
            }
        })
        .collect()
}

pub fn dataset_to_archive(ds: &Dataset) -> Result<TensorArchive> {
    let mut a = TensorArchive::new();
    a.insert("X", ds.ground_truth.clone())?;
    a.insert("Y_T", ds.raw_patterns.clone())?;
    a.insert("train", indices(&ds.train))?;
    a.insert("test", indices(&ds.test))?;
    Ok(a)
}

pub fn dataset_from_archive(a: &TensorArchive) -> Result<Dataset> {
    let mut ds = Dataset::from_parts(a.require("X")?, a.require("Y_T")?)?;
    ds.train = to_indices(&a.require("train")?, "train split")?;
    ds.test = to_indices(&a.require("test")?, "test split")?;
    if let Some(&i) = ds.train.iter().chain(&ds.test).find(|&&i| i >= ds.len()) {
        return Err(CliError::data(format!("split index {i} beyond {} samples", ds.len())));
    }
    Ok(ds)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let a = TensorArchive::load(path)
        .map_err(|e| CliError::data(format!("cannot read dataset {}: {e}", path.display())))?;
    dataset_from_archive(&a)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Ddm,
    Dpm,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Ddm => "ddm",
            ModelKind::Dpm => "dpm",
        }
    }
}

/// A trained network with the schedule it was trained under.
#[derive(Debug, Clone)]
pub enum Model {
    Ddm {
        net: RestorationNet<f32>,
        sched: Schedule,
    },
    Dpm {
        net: RestorationNet<f32>,
        sched: DpmSchedule,
    },
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Ddm { .. } => ModelKind::Ddm,
            Model::Dpm { .. } => ModelKind::Dpm,
        }
    }

    pub fn net(&self) -> &RestorationNet<f32> {
        match self {
            Model::Ddm { net, .. } | Model::Dpm { net, .. } => net,
        }
    }
}

/// A model plus the config it was trained from.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub config: RunConfig,
}

impl Checkpoint {
    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        let net = self.model.net();
        let c = net.config();
        let kind = match self.model.kind() {
            ModelKind::Ddm => 0.0,
            ModelKind::Dpm => 1.0,
        };
        let heads = match c.heads {
            Heads::MeanOnly => 0.0,
            Heads::MeanLogVar => 1.0,
        };
        a.insert("model", Tensor::new(&[1], vec![kind])?)?;
        let meta = vec![
            c.in_channels as f64,
            c.base_width as f64,
            c.time_embed_width as f64,
            c.dropout,
            heads,
        ];
        a.insert("net", Tensor::new(&[5], meta)?)?;
        match &self.model {
            Model::Ddm { sched, .. } => a.insert(
                "schedule.alphas",
                Tensor::new(&[sched.alphas().len()], sched.alphas().to_vec())?,
            )?,
            Model::Dpm { sched, .. } => a.insert(
                "schedule.betas",
                Tensor::new(&[sched.betas().len()], sched.betas().to_vec())?,
            )?,
        }
        let json = self.config.canonical_json().into_bytes();
        a.insert(
            "config",
            Tensor::new(&[json.len()], json.iter().map(|&b| b as f32).collect())?,
        )?;
        for (name, t) in net.params().iter() {
            a.insert(format!("param.{name}"), t.clone())?;
        }
        Ok(a)
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        let meta = a.require::<f64>("net")?;
        let m = meta.data();
        if m.len() != 5 {
            return Err(CliError::data("checkpoint network header has the wrong length"));
        }
        let heads = if m[4] == 0.0 {
            Heads::MeanOnly
        } else {
            Heads::MeanLogVar
        };
        let cfg = NetConfig {
            in_channels: m[0] as usize,
            base_width: m[1] as usize,
            time_embed_width: m[2] as usize,
            dropout: m[3],
            heads,
        };
        let mut params = ParamSet::new();
        for (name, t) in a.iter() {
            if let Some(p) = name.strip_prefix("param.") {
                params.insert(p, t.to::<f32>());
            }
        }
        let net = RestorationNet::from_params(cfg, params)?;
        let bytes: Vec<u8> = a.require::<f32>("config")?.data().iter().map(|&b| b as u8).collect();
        let text = String::from_utf8(bytes).map_err(|_| CliError::data("checkpoint config is not UTF-8"))?;
        let config = RunConfig::parse(&text)?;
        let model = match a.require::<f64>("model")?.data() {
            [k] if *k == 0.0 => Model::Ddm {
                net,
                sched: Schedule::from_alphas(a.require::<f64>("schedule.alphas")?.into_data())?,
            },
            [k] if *k == 1.0 => Model::Dpm {
                net,
                sched: DpmSchedule::from_betas(a.require::<f64>("schedule.betas")?.into_data(), 0.0)?,
            },
            _ => return Err(CliError::data("unknown model kind in checkpoint")),
        };
        Ok(Self { model, config })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_archive()?.save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a = TensorArchive::load(path)
            .map_err(|e| CliError::data(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::from_archive(&a)
    }
}

/// Reconstructed test images keyed by sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstructions {
    pub ids: Vec<usize>,
    pub images: Vec<Tensor<f64>>,
    /// Visited steps, descending for DDM and ascending for DPM.
    pub steps: Vec<usize>,
    /// Per-sample state sequences, `(K+1)×H×W`, when requested.
    pub trajectories: Option<Vec<Tensor<f64>>>,
}

impl Reconstructions {
    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        a.insert("ids", indices(&self.ids))?;
        a.insert("steps", indices(&self.steps))?;
        a.insert("recon", Tensor::stack(&self.images)?)?;
        if let Some(tr) = &self.trajectories {
            for (id, t) in self.ids.iter().zip(tr) {
                a.insert(format!("trajectory.{id}"), t.clone())?;
            }
        }
        Ok(a)
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        let ids = to_indices(&a.require("ids")?, "ids")?;
        let steps = to_indices(&a.require("steps")?, "steps")?;
        let stack = a.require::<f64>("recon")?;
        if stack.dims().len() != 3 || stack.dims()[0] != ids.len() {
            return Err(CliError::data(format!(
                "recon dims {:?} do not match {} ids",
                stack.dims(),
                ids.len()
            )));
        }
        let images = (0..ids.len())
            .map(|i| stack.index_axis0(i))
            .collect::<ddm_core::Result<Vec<_>>>()?;
        let trajectories = if a.names().any(|n| n.starts_with("trajectory.")) {
            Some(
                ids.iter()
                    .map(|id| a.require(&format!("trajectory.{id}")))
                    .collect::<ddm_core::Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(Self {
            ids,
            images,
            steps,
            trajectories,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a = TensorArchive::load(path)
            .map_err(|e| CliError::data(format!("cannot read reconstructions {}: {e}", path.display())))?;
        Self::from_archive(&a)
    }
}

/// Binary PGM (P5, maxval 255); values are clamped to `[0, 1]` and rounded.
pub fn pgm_bytes(img: &Tensor<f64>) -> Result<Vec<u8>> {
    let (h, w) = match *img.dims() {
        [h, w] => (h, w),
        ref d => return Err(CliError::data(format!("preview needs an H×W image, got {d:?}"))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// Scales a nonnegative map by its maximum for display.
pub fn normalized_for_display(img: &Tensor<f64>) -> Tensor<f64> {
    let m = img.max();
    if m > 0.0 {
        img.scale(1.0 / m)
    } else {
        img.clone()
    }
}

pub fn write_pgm(path: &Path, img: &Tensor<f64>) -> Result<()> {
    Ok(write_atomic(path, &pgm_bytes(img)?)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(write_atomic(path, text.as_bytes())?)
}

/// `<artifact>.manifest.json` naming the command and the config hash.
pub fn write_manifest(artifact: &Path, command: &str, config_hash: &str, details: Value) -> Result<()> {
    let mut body = serde_json::json!({
        "command": command,
        "config_sha256": config_hash,
        "artifact": artifact.file_name().map(|f| f.to_string_lossy().into_owned()),
    });
    if let (Value::Object(map), Value::Object(extra)) = (&mut body, details) {
        map.extend(extra);
    }
    let mut text = serde_json::to_string_pretty(&body).expect("manifest serializes");
    text.push('\n');
    let name = format!(
        "{}.manifest.json",
        artifact
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default()
    );
    write_text(&artifact.with_file_name(name), &text)
}

pub fn manifest_path(artifact: &Path) -> std::path::PathBuf {
    let name = artifact
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    artifact.with_file_name(format!("{name}.manifest.json"))
}
