//! Desk-scale U-shaped restoration network.
//!
//! Two resolution levels with one skip connection:
//!
//! ```text
//! input ─drop─ enc1 (W) ───────────────────────┐
//!                 └ pool ─drop─ enc2 (2W) ─ up ─┴ concat ─drop─ dec1 (W) ─ heads
//! ```
//!
//! Each block is `conv3×3 → +time bias → SiLU → conv3×3 → SiLU`. The scalar
//! time input is embedded sinusoidally, passed through one dense layer, and
//! projected per block to a per-channel bias. The mean head is a 3×3 conv to
//! one channel; the optional log-variance head is clamped to `[-10, 4]`
//! before exponentiation so `σ = exp(logvar / 2)` stays positive and bounded.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

use super::graph::{Graph, Var};
use super::{GaussianPrediction, ParamSet};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 4.0;

/// Scale applied to the scalar time input before the sinusoidal embedding,
/// so inputs in `[0, 1]` span many periods of the fastest frequency.
const TIME_SCALE: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Heads {
    MeanOnly,
    MeanLogVar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub time_embed_width: usize,
    pub dropout: f64,
    pub heads: Heads,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_width: 16,
            time_embed_width: 32,
            dropout: 0.1,
            heads: Heads::MeanLogVar,
        }
    }
}

impl NetConfig {
    /// Parameter names and shapes, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (w, e) = (self.base_width, self.time_embed_width);
        let mut out = vec![
            ("time.lin.w".to_string(), vec![e, e]),
            ("time.lin.b".to_string(), vec![e]),
        ];
        let blocks = [("enc1", self.in_channels, w), ("enc2", w, 2 * w), ("dec1", 3 * w, w)];
        for (name, cin, cout) in blocks {
            out.push((format!("{name}.conv1.w"), vec![cout, cin, 3, 3]));
            out.push((format!("{name}.conv1.b"), vec![cout]));
            out.push((format!("{name}.temb.w"), vec![cout, e]));
            out.push((format!("{name}.temb.b"), vec![cout]));
            out.push((format!("{name}.conv2.w"), vec![cout, cout, 3, 3]));
            out.push((format!("{name}.conv2.b"), vec![cout]));
        }
        out.push(("head.mu.w".to_string(), vec![1, w, 3, 3]));
        out.push(("head.mu.b".to_string(), vec![1]));
        if self.heads == Heads::MeanLogVar {
            out.push(("head.logvar.w".to_string(), vec![1, w, 3, 3]));
            out.push(("head.logvar.b".to_string(), vec![1]));
        }
        out
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 {
            return Err(Error::usage("network widths must be positive"));
        }
        if self.time_embed_width == 0 || !self.time_embed_width.is_multiple_of(2) {
            return Err(Error::usage("time embedding width must be even and positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::domain(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of a scalar: `[sin(s·ω_i), cos(s·ω_i)]`, with
/// `ω_i = 10000^{-i/(width/2)}`.
pub fn sinusoidal_embedding<T: Scalar>(value: f64, width: usize) -> Tensor<T> {
    let half = width / 2;
    let s = value * TIME_SCALE;
    Tensor::from_fn(&[width], |i| {
        let k = i % half;
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let a = s * freq;
        T::of(if i < half { a.sin() } else { a.cos() })
    })
}

/// Graph handles produced by [`RestorationNet::build`].
#[derive(Debug, Clone, Copy)]
pub struct NetOutput {
    pub mu: Var,
    pub log_sigma: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestorationNet<T> {
    config: NetConfig,
    params: ParamSet<T>,
    dropout_active: bool,
}

impl<T: Scalar> RestorationNet<T> {
    /// He-style initialization; biases start at zero, heads are scaled down.
    pub fn new(config: NetConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        for (name, dims) in config.param_shapes() {
            let t = if name.ends_with(".b") {
                Tensor::zeros(&dims)
            } else {
                let fan_in: usize = dims[1..].iter().product();
                let mut std = (2.0 / fan_in as f64).sqrt();
                if name.starts_with("head.") {
                    std *= 0.1;
                }
                rng.gaussian::<f64>(&dims).scale(std).cast()
            };
            params.insert(name, t);
        }
        Ok(Self {
            config,
            params,
            dropout_active: false,
        })
    }

    pub fn from_params(config: NetConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (name, dims) in &shapes {
            match params.get(name) {
                Some(t) if t.dims() == dims.as_slice() => {}
                Some(t) => {
                    return Err(Error::Format(format!(
                        "parameter {name} has dims {:?}, expected {dims:?}",
                        t.dims()
                    )))
                }
                None => return Err(Error::Format(format!("missing parameter {name}"))),
            }
        }
        Ok(Self {
            config,
            params,
            dropout_active: false,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn dropout_active(&self) -> bool {
        self.dropout_active
    }

    pub fn set_dropout_active(&mut self, active: bool) {
        self.dropout_active = active;
    }

    pub fn with_dropout(&self, active: bool) -> Self {
        let mut n = self.clone();
        n.dropout_active = active;
        n
    }

    /// Sets the dropout rate, e.g. to 0 to switch off weight randomness.
    pub fn with_dropout_rate(&self, p: f64) -> Result<Self> {
        let mut n = self.clone();
        n.config.dropout = p;
        n.config.validate()?;
        Ok(n)
    }

    pub fn has_sigma_head(&self) -> bool {
        self.config.heads == Heads::MeanLogVar
    }

    /// Zeroes the mean head so `mu ≡ 0` for every input.
    pub fn zero_output_head(&mut self) {
        for name in ["head.mu.w", "head.mu.b"] {
            if let Some(t) = self.params.get_mut(name) {
                *t = Tensor::zeros(t.dims());
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> RestorationNet<U> {
        RestorationNet {
            config: self.config.clone(),
            params: self.params.cast(),
            dropout_active: self.dropout_active,
        }
    }

    /// Places every parameter on `g` as a leaf.
    pub fn param_vars(&self, g: &mut Graph<T>) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), g.leaf(v.clone())))
            .collect()
    }

    /// Normalizes an input to `C×H×W`.
    pub fn shape_input(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let c = self.config.in_channels;
        let shaped = match *input.dims() {
            [h, w] if c == 1 => input.clone().reshape(&[1, h, w])?,
            [ci, _, _] if ci == c => input.clone(),
            ref d => {
                return Err(Error::shape(format!(
                    "network expects {c} input channel(s), got dims {d:?}"
                )))
            }
        };
        let (h, w) = (shaped.dims()[1], shaped.dims()[2]);
        if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!(
                "spatial dims {h}×{w} must be even and at least 2"
            )));
        }
        Ok(shaped)
    }

    /// Records a forward pass on `g`. `input` must be `C×H×W`.
    pub fn build(
        &self,
        g: &mut Graph<T>,
        pv: &BTreeMap<String, Var>,
        input: Var,
        time: f64,
        mut rng: Option<&mut RngStream>,
    ) -> Result<NetOutput> {
        if self.dropout_active && rng.is_none() {
            return Err(Error::usage("dropout is active but no rng was supplied"));
        }
        let p = |name: &str| -> Result<Var> {
            pv.get(name)
                .copied()
                .ok_or_else(|| Error::usage(format!("missing parameter {name}")))
        };
        let rate = self.config.dropout;
        let active = self.dropout_active;
        let mut drop = |g: &mut Graph<T>, x: Var| -> Result<Var> {
            match rng.as_deref_mut() {
                Some(r) if active => g.dropout(x, rate, r),
                _ => Ok(x),
            }
        };

        let emb = g.leaf(sinusoidal_embedding(time, self.config.time_embed_width));
        let temb = g.linear(emb, p("time.lin.w")?, p("time.lin.b")?)?;
        let temb = g.silu(temb);

        let block = |g: &mut Graph<T>, x: Var, name: &str| -> Result<Var> {
            let h = g.conv2d(x, p(&format!("{name}.conv1.w"))?, p(&format!("{name}.conv1.b"))?)?;
            let tb = g.linear(temb, p(&format!("{name}.temb.w"))?, p(&format!("{name}.temb.b"))?)?;
            let h = g.channel_bias(h, tb)?;
            let h = g.silu(h);
            let h = g.conv2d(h, p(&format!("{name}.conv2.w"))?, p(&format!("{name}.conv2.b"))?)?;
            Ok(g.silu(h))
        };

        let x = drop(g, input)?;
        let h1 = block(g, x, "enc1")?;
        let d = g.avg_pool2(h1)?;
        let d = drop(g, d)?;
        let h2 = block(g, d, "enc2")?;
        let u = g.upsample2(h2)?;
        let cat = g.concat_channels(u, h1)?;
        let cat = drop(g, cat)?;
        let h3 = block(g, cat, "dec1")?;

        let mu = g.conv2d(h3, p("head.mu.w")?, p("head.mu.b")?)?;
        let log_sigma = if self.has_sigma_head() {
            let lv = g.conv2d(h3, p("head.logvar.w")?, p("head.logvar.b")?)?;
            let lv = g.clamp(lv, T::of(LOGVAR_MIN), T::of(LOGVAR_MAX));
            Some(g.scale(lv, T::of(0.5)))
        } else {
            None
        };
        Ok(NetOutput { mu, log_sigma })
    }

    /// Prediction for one input; `rng` is required iff dropout is active.
    /// Mean-only networks return `sigma ≡ 1`.
    pub fn forward(&self, input: &Tensor<T>, time: f64, rng: Option<&mut RngStream>) -> Result<GaussianPrediction<T>> {
        let shaped = self.shape_input(input)?;
        let (h, w) = (shaped.dims()[1], shaped.dims()[2]);
        let mut g = Graph::new();
        let pv = self.param_vars(&mut g);
        let x = g.leaf(shaped);
        let out = self.build(&mut g, &pv, x, time, rng)?;
        let mu = g.value(out.mu).clone().reshape(&[h, w])?;
        match out.log_sigma {
            Some(ls) => {
                let sigma = g.value(ls).map(T::exp).reshape(&[h, w])?;
                GaussianPrediction::new(mu, sigma)
            }
            None => Ok(GaussianPrediction::mean_only(mu)),
        }
    }
}
