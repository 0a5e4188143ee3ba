//! Image-quality metrics and their CSV rendering.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

pub fn mse(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    a.check_same_dims(b)?;
    let d = a.zip_map(b, |x, y| (x - y) * (x - y))?;
    Ok(d.sum() / a.numel() as f64)
}

/// `10·log10(1/mse)` in dB; `+∞` when the images agree exactly.
pub fn psnr(a: &Tensor<f64>, reference: &Tensor<f64>) -> Result<f64> {
    let m = mse(a, reference)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

fn image_dims(a: &Tensor<f64>) -> Result<(usize, usize)> {
    match *a.dims() {
        [h, w] => Ok((h, w)),
        ref d => Err(Error::shape(format!("expected an H×W image, got {d:?}"))),
    }
}

/// Summed-area table with a zero first row and column.
fn integral(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for r in 0..h {
        let mut row = 0.0;
        for c in 0..w {
            row += f(r, c);
            s[(r + 1) * (w + 1) + c + 1] = s[r * (w + 1) + c + 1] + row;
        }
    }
    s
}

/// Mean SSIM over every 8×8 window (stride 1, uniform weights, population
/// moments).
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    a.check_same_dims(b)?;
    let (h, w) = image_dims(a)?;
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(Error::shape(format!(
            "{h}×{w} image is smaller than the {k}×{k} window"
        )));
    }
    let (x, y) = (a.data(), b.data());
    let at = |r: usize, c: usize| r * w + c;
    let sx = integral(h, w, |r, c| x[at(r, c)]);
    let sy = integral(h, w, |r, c| y[at(r, c)]);
    let sxx = integral(h, w, |r, c| x[at(r, c)] * x[at(r, c)]);
    let syy = integral(h, w, |r, c| y[at(r, c)] * y[at(r, c)]);
    let sxy = integral(h, w, |r, c| x[at(r, c)] * y[at(r, c)]);
    let box_sum = |s: &[f64], r: usize, c: usize| {
        let i = |r: usize, c: usize| s[r * (w + 1) + c];
        i(r + k, c + k) - i(r, c + k) - i(r + k, c) + i(r, c)
    };
    let n = (k * k) as f64;
    let mut total = 0.0;
    for r in 0..=h - k {
        for c in 0..=w - k {
            let mx = box_sum(&sx, r, c) / n;
            let my = box_sum(&sy, r, c) / n;
            let vx = box_sum(&sxx, r, c) / n - mx * mx;
            let vy = box_sum(&syy, r, c) / n - my * my;
            let cxy = box_sum(&sxy, r, c) / n - mx * my;
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
        }
    }
    Ok(total / ((h - k + 1) * (w - k + 1)) as f64)
}

/// Per-pixel signal power carried by frequencies whose
/// normalized radius `√((k_x/W)² + (k_y/H)²)` exceeds `cutoff`. With a
/// negative cutoff this is the mean square of the image.
pub fn highpass_energy(img: &Tensor<f64>, cutoff: f64) -> Result<f64> {
    let (h, w) = image_dims(img)?;
    let mut buf: Vec<Complex64> = img.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    for row in buf.chunks_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = buf[r * w + c];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            buf[r * w + c] = col[r];
        }
    }
    let signed = |k: usize, n: usize| if 2 * k >= n { k as f64 - n as f64 } else { k as f64 };
    let mut e = 0.0;
    for r in 0..h {
        for c in 0..w {
            let (fy, fx) = (signed(r, h) / h as f64, signed(c, w) / w as f64);
            if (fx * fx + fy * fy).sqrt() > cutoff {
                e += buf[r * w + c].norm_sqr();
            }
        }
    }
    let n = (h * w) as f64;
    Ok(e / (n * n))
}

/// Default cutoff for [`highpass_energy`]: the upper half of the band.
pub const HIGHPASS_CUTOFF: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub id: usize,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

impl MetricRow {
    pub fn compute(id: usize, recon: &Tensor<f64>, truth: &Tensor<f64>) -> Result<Self> {
        Ok(Self {
            id,
            mse: mse(recon, truth)?,
            psnr: psnr(recon, truth)?,
            ssim: ssim(recon, truth)?,
        })
    }
}

/// Mean and population standard deviation of one metric column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        if !mean.is_finite() {
            return Self { mean, std: f64::NAN };
        }
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// `%g`-style rendering with six significant digits.
pub fn g6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.into();
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mant, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-4..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mant), exp.abs())
    } else {
        let prec = (5 - exp).max(0) as usize;
        trim(&format!("{x:.prec$}"))
    }
}

pub const CSV_HEADER: &str = "id,mse,psnr,ssim";

/// Header plus one LF-terminated row per entry, in the given order.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.id, g6(r.mse), g6(r.psnr), g6(r.ssim)));
    }
    out
}

/// `mse=m±s psnr=m±s ssim=m±s` over the rows.
pub fn summary_line(rows: &[MetricRow]) -> String {
    let col = |f: fn(&MetricRow) -> f64| Summary::of(&rows.iter().map(f).collect::<Vec<_>>());
    let fmt = |s: Summary| format!("{}±{}", g6(s.mean), g6(s.std));
    format!(
        "n={} mse={} psnr={} ssim={}",
        rows.len(),
        fmt(col(|r| r.mse)),
        fmt(col(|r| r.psnr)),
        fmt(col(|r| r.ssim))
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn pair(seed: u64, h: usize, w: usize) -> (Tensor<f64>, Tensor<f64>) {
        let mut rng = RngStream::new(seed);
        (rng.uniform(&[h, w]), rng.uniform(&[h, w]))
    }

    #[test]
    fn mse_cases() {
        let (a, b) = pair(1, 9, 7);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        let shifted = a.map(|v| v + 0.5);
        assert!((mse(&shifted, &a).unwrap() - 0.25).abs() < 1e-15);
        let mut acc = 0.0;
        for i in 0..a.numel() {
            let d = a.data()[i] - b.data()[i];
            acc += d * d;
        }
        assert!((mse(&a, &b).unwrap() - acc / 63.0).abs() < 1e-7);
        assert!(mse(&a, &Tensor::zeros(&[7, 9])).is_err());
    }

    #[test]
    fn psnr_cases() {
        let a = Tensor::zeros(&[4, 4]);
        assert!((psnr(&a.map(|_| 0.1), &a).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(psnr(&a.map(|_| 1.0), &a).unwrap(), 0.0);
    }

    fn ssim_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let (h, w) = (a.dims()[0], a.dims()[1]);
        let mut total = 0.0;
        let mut count = 0;
        for r in 0..=h - 8 {
            for c in 0..=w - 8 {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for i in 0..8 {
                    for j in 0..8 {
                        xs.push(a.data()[(r + i) * w + c + j]);
                        ys.push(b.data()[(r + i) * w + c + j]);
                    }
                }
                let mx = xs.iter().sum::<f64>() / 64.0;
                let my = ys.iter().sum::<f64>() / 64.0;
                let vx = xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / 64.0;
                let vy = ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / 64.0;
                let cxy = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / 64.0;
                total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_cases() {
        let (a, b) = pair(2, 16, 12);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let zero = Tensor::zeros(&[8, 8]);
        let one = Tensor::ones(&[8, 8]);
        let want = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((ssim(&zero, &one).unwrap() - want).abs() < 1e-12);
        assert!((ssim(&a, &b).unwrap() - ssim_loop(&a, &b)).abs() < 1e-6);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        assert!(ssim(&Tensor::zeros(&[7, 9]), &Tensor::zeros(&[7, 9])).is_err());
    }

    #[test]
    fn mse_falls_along_interpolation() {
        let (a, b) = pair(3, 8, 8);
        let mut last = f64::INFINITY;
        for k in 0..=10 {
            let f = k as f64 / 10.0;
            let c = b.zip_map(&a, |x, y| (1.0 - f) * x + f * y).unwrap();
            let m = mse(&c, &a).unwrap();
            assert!(m <= last);
            last = m;
        }
        assert_eq!(last, 0.0);
    }

    #[test]
    fn highpass_energy_of_constant_and_checkerboard() {
        let flat = Tensor::full(&[8, 8], 0.7);
        assert!(highpass_energy(&flat, HIGHPASS_CUTOFF).unwrap() < 1e-20);
        let checker = Tensor::from_fn(&[8, 8], |i| ((i / 8 + i % 8) % 2) as f64);
        // all energy at (4, 4) except the DC term: mean square minus squared mean
        let e = highpass_energy(&checker, HIGHPASS_CUTOFF).unwrap();
        assert!((e - 0.25).abs() < 1e-12, "{e}");
        let total = highpass_energy(&checker, -1.0).unwrap();
        assert!((total - 0.5).abs() < 1e-12);
    }

    #[test]
    fn g6_matches_printf() {
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (0.1, "0.1"),
            (123456.0, "123456"),
            (1234567.0, "1.23457e+06"),
            (0.0001, "0.0001"),
            (0.00001234567, "1.23457e-05"),
            (4.56789012, "4.56789"),
            (-2.5, "-2.5"),
            (20.0, "20"),
            (999999.5, "1e+06"),
            (f64::INFINITY, "inf"),
        ];
        for (x, want) in cases {
            assert_eq!(g6(x), want, "{x}");
        }
    }

    #[test]
    fn csv_and_summary() {
        let truth = pair(4, 8, 8).0;
        let rows: Vec<_> = (0..3).map(|i| MetricRow::compute(i, &truth, &truth).unwrap()).collect();
        let csv = metrics_csv(&rows);
        assert_eq!(csv, "id,mse,psnr,ssim\n0,0,inf,1\n1,0,inf,1\n2,0,inf,1\n");
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - 1.25f64.sqrt()).abs() < 1e-15);
        assert!(summary_line(&rows).starts_with("n=3 mse=0±0"));
    }
}
