//! Simulated nonlocal optics: phase encoding, random scattering media, a
//! factorized second-harmonic medium, detector noise and the synthetic
//! shapes dataset.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Dense row-major complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(Error::shape(format!(
                "{rows}×{cols} matrix from {} entries",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![Complex64::new(0.0, 0.0); n * n];
        for i in 0..n {
            data[i * n + i] = Complex64::new(1.0, 0.0);
        }
        Self { rows: n, cols: n, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[Complex64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matvec(&self, v: &[Complex64]) -> Result<Vec<Complex64>> {
        if v.len() != self.cols {
            return Err(Error::shape(format!(
                "matrix with {} columns applied to a vector of {}",
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }
}

/// `E_j = exp(iπ·img_j)`.
pub fn phase_encode(img: &Tensor<f64>) -> Result<Vec<Complex64>> {
    img.data()
        .iter()
        .map(|&v| {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::domain(format!("pixel value {v} outside [0, 1]")));
            }
            Ok(Complex64::from_polar(1.0, std::f64::consts::PI * v))
        })
        .collect()
}

/// `M×N` matrix of i.i.d. `CN(0, 1/N)` entries.
pub fn make_transmission_matrix(rng: &mut RngStream, m: usize, n: usize) -> Result<ComplexMatrix> {
    if m == 0 || n == 0 {
        return Err(Error::usage("transmission matrix needs M, N ≥ 1"));
    }
    // each of the real and imaginary parts carries half the variance
    let s = (0.5 / n as f64).sqrt();
    let data = (0..m * n)
        .map(|_| {
            let (a, b) = rng.normal_pair();
            Complex64::new(s * a, s * b)
        })
        .collect();
    ComplexMatrix::new(m, n, data)
}

/// Scales to `[0, 1]` by the image's own extrema; a constant image maps to
/// zeros.
pub fn normalize_minmax(x: &Tensor<f64>) -> Tensor<f64> {
    let (lo, hi) = (x.min(), x.max());
    if !(hi > lo) {
        return Tensor::zeros(x.dims());
    }
    let inv = 1.0 / (hi - lo);
    x.map(|v| ((v - lo) * inv).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Medium {
    /// Output field `T·E`.
    Scattering(ComplexMatrix),
    /// Output field `(A·E) ⊙ (B·E)`, the rank-one form `d_mjk = A_mj B_mk`.
    Shg(ComplexMatrix, ComplexMatrix),
    /// Pattern equals the image; a local control with no scrambling.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    Scattering,
    Shg,
    Identity,
}

/// Phase image in, normalized intensity pattern out.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOperator {
    pub medium: Medium,
    pub noise_level: f64,
}

impl ForwardOperator {
    pub fn scattering(rng: &mut RngStream, pixels: usize) -> Result<Self> {
        Ok(Self {
            medium: Medium::Scattering(make_transmission_matrix(rng, pixels, pixels)?),
            noise_level: 0.0,
        })
    }

    pub fn shg(rng: &mut RngStream, pixels: usize) -> Result<Self> {
        let a = make_transmission_matrix(&mut rng.child("shg.a"), pixels, pixels)?;
        let b = make_transmission_matrix(&mut rng.child("shg.b"), pixels, pixels)?;
        Ok(Self {
            medium: Medium::Shg(a, b),
            noise_level: 0.0,
        })
    }

    pub fn identity() -> Self {
        Self {
            medium: Medium::Identity,
            noise_level: 0.0,
        }
    }

    pub fn with_noise(mut self, level: f64) -> Self {
        self.noise_level = level;
        self
    }

    pub fn kind(&self) -> OperatorKind {
        match self.medium {
            Medium::Scattering(_) => OperatorKind::Scattering,
            Medium::Shg(..) => OperatorKind::Shg,
            Medium::Identity => OperatorKind::Identity,
        }
    }

    /// Detected intensity before normalization.
    pub fn intensity(&self, img: &Tensor<f64>) -> Result<Tensor<f64>> {
        let dims = img.dims();
        let n = img.numel();
        let check = |m: &ComplexMatrix| {
            if m.rows() != n || m.cols() != n {
                return Err(Error::shape(format!(
                    "operator is {}×{} but the image has {n} pixels",
                    m.rows(),
                    m.cols()
                )));
            }
            Ok(())
        };
        match &self.medium {
            Medium::Scattering(t) => {
                check(t)?;
                let out = t.matvec(&phase_encode(img)?)?;
                Tensor::new(dims, out.iter().map(|e| e.norm_sqr()).collect())
            }
            Medium::Shg(a, b) => {
                check(a)?;
                check(b)?;
                let e = phase_encode(img)?;
                let (ae, be) = (a.matvec(&e)?, b.matvec(&e)?);
                Tensor::new(dims, ae.iter().zip(&be).map(|(x, y)| (x * y).norm_sqr()).collect())
            }
            Medium::Identity => {
                phase_encode(img)?;
                Ok(img.clone())
            }
        }
    }

    /// Normalized noiseless pattern.
    pub fn apply(&self, img: &Tensor<f64>) -> Result<Tensor<f64>> {
        let raw = self.intensity(img)?;
        Ok(match self.medium {
            Medium::Identity => raw,
            _ => normalize_minmax(&raw),
        })
    }

    /// Normalized pattern with the operator's detector noise.
    pub fn simulate(&self, img: &Tensor<f64>, rng: &mut RngStream) -> Result<Tensor<f64>> {
        add_detection_noise(&self.apply(img)?, self.noise_level, rng)
    }
}

fn expect_kind(op: &ForwardOperator, kind: OperatorKind) -> Result<()> {
    if op.kind() != kind {
        return Err(Error::usage(format!(
            "expected a {kind:?} operator, got {:?}",
            op.kind()
        )));
    }
    Ok(())
}

/// `|T·exp(iπ img)|²`, min-max normalized.
pub fn scattering_forward(op: &ForwardOperator, img: &Tensor<f64>) -> Result<Tensor<f64>> {
    expect_kind(op, OperatorKind::Scattering)?;
    op.apply(img)
}

/// `|(A·E) ⊙ (B·E)|²` with `E = exp(iπ img)`, min-max normalized.
pub fn shg_forward(op: &ForwardOperator, img: &Tensor<f64>) -> Result<Tensor<f64>> {
    expect_kind(op, OperatorKind::Shg)?;
    op.apply(img)
}

/// `pattern + level·N(0, I)`, clamped to `[0, 1]`.
pub fn add_detection_noise(pattern: &Tensor<f64>, level: f64, rng: &mut RngStream) -> Result<Tensor<f64>> {
    if !(level >= 0.0) {
        return Err(Error::domain(format!("noise level {level} is negative")));
    }
    if level == 0.0 {
        return Ok(pattern.clone());
    }
    let noise = rng.gaussian::<f64>(pattern.dims());
    pattern.zip_map(&noise, |p, z| (p + level * z).clamp(0.0, 1.0))
}

const SUPERSAMPLE: usize = 4;

struct Shape {
    ellipse: bool,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    cos: f64,
    sin: f64,
    lo: f64,
    hi: f64,
    gx: f64,
    gy: f64,
}

impl Shape {
    fn random(rng: &mut RngStream, h: usize, w: usize) -> Self {
        let side = h.min(w) as f64;
        let theta = std::f64::consts::PI * rng.next_f64();
        let grad = 2.0 * std::f64::consts::PI * rng.next_f64();
        let lo = 0.3 + 0.4 * rng.next_f64();
        Shape {
            ellipse: rng.bernoulli(0.5),
            cx: w as f64 * (0.2 + 0.6 * rng.next_f64()),
            cy: h as f64 * (0.2 + 0.6 * rng.next_f64()),
            rx: side * (0.1 + 0.15 * rng.next_f64()),
            ry: side * (0.1 + 0.15 * rng.next_f64()),
            cos: theta.cos(),
            sin: theta.sin(),
            lo,
            hi: lo + (1.0 - lo) * rng.next_f64(),
            gx: grad.cos(),
            gy: grad.sin(),
        }
    }

    /// Intensity at a point, or `None` outside the shape.
    fn value(&self, x: f64, y: f64) -> Option<f64> {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.rx;
        let v = (-dx * self.sin + dy * self.cos) / self.ry;
        let inside = if self.ellipse {
            u * u + v * v <= 1.0
        } else {
            u.abs() <= 1.0 && v.abs() <= 1.0
        };
        if !inside {
            return None;
        }
        let r = self.rx.max(self.ry);
        let s = (0.5 + 0.5 * (dx * self.gx + dy * self.gy) / r).clamp(0.0, 1.0);
        Some(self.lo + (self.hi - self.lo) * s)
    }
}

fn shapes_image(rng: &mut RngStream, h: usize, w: usize) -> Tensor<f64> {
    let n = 1 + rng.below(4) as usize;
    let shapes: Vec<Shape> = (0..n).map(|_| Shape::random(rng, h, w)).collect();
    let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    Tensor::from_fn(&[h, w], |idx| {
        let (r, c) = (idx / w, idx % w);
        let mut acc = 0.0;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let x = c as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                let y = r as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                let v = shapes.iter().filter_map(|s| s.value(x, y)).fold(0.0, f64::max);
                acc += v;
            }
        }
        (acc * inv).clamp(0.0, 1.0)
    })
}

/// `count` images of 1–4 anti-aliased ellipses and rectangles with graded
/// intensity on a zero background, stacked as `count×H×W`.
pub fn gen_shapes_dataset(rng: &RngStream, count: usize, h: usize, w: usize) -> Result<Tensor<f64>> {
    if h < 8 || w < 8 {
        return Err(Error::usage(format!("images must be at least 8×8, got {h}×{w}")));
    }
    let images: Vec<Tensor<f64>> = (0..count)
        .into_par_iter()
        .map(|i| shapes_image(&mut rng.child_indexed("shape", i as u64), h, w))
        .collect();
    if images.is_empty() {
        return Ok(Tensor::zeros(&[0, h, w]));
    }
    Tensor::stack(&images)
}

/// Fraction of pixels above `1e-3`.
pub fn foreground_fraction(img: &Tensor<f64>) -> f64 {
    img.data().iter().filter(|&&v| v > 1e-3).count() as f64 / img.numel() as f64
}

/// Paired ground truths and patterns with a 90/10 train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ground_truth: Tensor<f64>,
    pub raw_patterns: Tensor<f64>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    /// Runs every image through `op`; item `i` draws detector noise from
    /// `rng.child_indexed("noise", i)`. The first `round(0.9·N)` items train.
    pub fn simulate(op: &ForwardOperator, images: Tensor<f64>, rng: &RngStream) -> Result<Self> {
        let n = match images.dims() {
            [n, _, _] => *n,
            d => return Err(Error::shape(format!("expected N×H×W images, got {d:?}"))),
        };
        let patterns: Vec<Tensor<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let img = images.index_axis0(i)?;
                op.simulate(&img, &mut rng.child_indexed("noise", i as u64))
            })
            .collect::<Result<_>>()?;
        let raw_patterns = if n == 0 {
            images.clone()
        } else {
            Tensor::stack(&patterns)?
        };
        Self::from_parts(images, raw_patterns)
    }

    pub fn from_parts(ground_truth: Tensor<f64>, raw_patterns: Tensor<f64>) -> Result<Self> {
        ground_truth.check_same_dims(&raw_patterns)?;
        if ground_truth.dims().len() != 3 {
            return Err(Error::shape("dataset arrays must be N×H×W"));
        }
        for (name, t) in [("ground truth", &ground_truth), ("patterns", &raw_patterns)] {
            if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::domain(format!("{name} outside [0, 1]")));
            }
        }
        let n = ground_truth.dims()[0];
        let n_train = (0.9 * n as f64).round() as usize;
        Ok(Self {
            ground_truth,
            raw_patterns,
            train: (0..n_train).collect(),
            test: (n_train..n).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ground_truth.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_dims(&self) -> (usize, usize) {
        let d = self.ground_truth.dims();
        (d[1], d[2])
    }

    /// `(x, y_T)` for item `i`.
    pub fn pair(&self, i: usize) -> Result<(Tensor<f64>, Tensor<f64>)> {
        Ok((self.ground_truth.index_axis0(i)?, self.raw_patterns.index_axis0(i)?))
    }
}
