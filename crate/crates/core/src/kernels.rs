//! Dense kernels: matrix product, 3×3 same-padded convolution, 2× pooling
//! and upsampling, channel concatenation. The backward kernels used by the
//! autodiff graph live next to their forward counterparts.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn dims3<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize)> {
    match *t.dims() {
        [c, h, w] => Ok((c, h, w)),
        ref d => Err(Error::shape(format!("{what}: expected C×H×W, got {d:?}"))),
    }
}

/// `a[M×K] · b[K×N]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = match *a.dims() {
        [m, k] => (m, k),
        ref d => return Err(Error::shape(format!("matmul lhs must be 2-D, got {d:?}"))),
    };
    let (k2, n) = match *b.dims() {
        [k2, n] => (k2, n),
        ref d => return Err(Error::shape(format!("matmul rhs must be 2-D, got {d:?}"))),
    };
    if k != k2 {
        return Err(Error::shape(format!("matmul inner dims disagree: {m}×{k} · {k2}×{n}")));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = match *a.dims() {
        [m, n] => (m, n),
        ref d => return Err(Error::shape(format!("transpose needs 2-D, got {d:?}"))),
    };
    let src = a.data();
    Ok(Tensor::from_fn(&[n, m], |idx| {
        let (j, i) = (idx / m, idx % m);
        src[i * n + j]
    }))
}

/// Valid output column range for a horizontal kernel offset `dx ∈ {-1,0,1}`.
#[inline]
fn col_range(w: usize, dx: isize) -> (usize, usize) {
    match dx {
        -1 => (1, w),
        0 => (0, w),
        _ => (0, w.saturating_sub(1)),
    }
}

/// 3×3 cross-correlation with one pixel of zero padding, plus bias.
///
/// `x: C×H×W`, `kernels: C'×C×3×3`, `bias: C'` → `C'×H×W`.
pub fn conv2d_same<T: Scalar>(x: &Tensor<T>, kernels: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = dims3(x, "conv2d_same input")?;
    let co = check_kernel(kernels, c)?;
    if bias.dims() != [co] {
        return Err(Error::shape(format!(
            "conv2d_same bias {:?}, expected [{co}]",
            bias.dims()
        )));
    }
    let (xd, kd, bd) = (x.data(), kernels.data(), bias.data());
    let plane = h * w;
    let mut out = vec![T::zero(); co * plane];
    for o in 0..co {
        let oplane = &mut out[o * plane..(o + 1) * plane];
        oplane.iter_mut().for_each(|v| *v = bd[o]);
        for i in 0..c {
            let iplane = &xd[i * plane..(i + 1) * plane];
            let kbase = (o * c + i) * 9;
            for ky in 0..3 {
                let dy = ky as isize - 1;
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let wv = kd[kbase + ky * 3 + kx];
                    let (x0, x1) = col_range(w, dx);
                    for oy in 0..h {
                        let iy = oy as isize + dy;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let irow = iy as usize * w;
                        let src = &iplane
                            [(irow as isize + x0 as isize + dx) as usize..(irow as isize + x1 as isize + dx) as usize];
                        let dst = &mut oplane[oy * w + x0..oy * w + x1];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[co, h, w], out)
}

fn check_kernel<T: Scalar>(kernels: &Tensor<T>, c: usize) -> Result<usize> {
    match *kernels.dims() {
        [co, ci, 3, 3] if ci == c => Ok(co),
        [_, ci, 3, 3] => Err(Error::shape(format!(
            "conv2d_same channel mismatch: kernel expects {ci}, input has {c}"
        ))),
        ref d => Err(Error::shape(format!("conv2d_same kernels must be C'×C×3×3, got {d:?}"))),
    }
}

/// Gradients of [`conv2d_same`] with respect to input, kernels and bias.
pub fn conv2d_same_backward<T: Scalar>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (c, h, w) = dims3(x, "conv2d_same_backward input")?;
    let co = check_kernel(kernels, c)?;
    if grad_out.dims() != [co, h, w] {
        return Err(Error::shape("conv2d_same_backward grad_out dims"));
    }
    let (xd, kd, gd) = (x.data(), kernels.data(), grad_out.data());
    let plane = h * w;
    let mut gx = vec![T::zero(); c * plane];
    let mut gk = vec![T::zero(); co * c * 9];
    let mut gb = vec![T::zero(); co];
    for o in 0..co {
        let gplane = &gd[o * plane..(o + 1) * plane];
        gb[o] = gplane.iter().copied().sum();
        for i in 0..c {
            let iplane = &xd[i * plane..(i + 1) * plane];
            let gxplane = &mut gx[i * plane..(i + 1) * plane];
            let kbase = (o * c + i) * 9;
            for ky in 0..3 {
                let dy = ky as isize - 1;
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let wv = kd[kbase + ky * 3 + kx];
                    let (x0, x1) = col_range(w, dx);
                    let mut acc = T::zero();
                    for oy in 0..h {
                        let iy = oy as isize + dy;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let irow = iy as usize * w;
                        let lo = (irow as isize + x0 as isize + dx) as usize;
                        let hi = (irow as isize + x1 as isize + dx) as usize;
                        let g = &gplane[oy * w + x0..oy * w + x1];
                        for (&gv, &xv) in g.iter().zip(&iplane[lo..hi]) {
                            acc += gv * xv;
                        }
                        for (d, &gv) in gxplane[lo..hi].iter_mut().zip(g) {
                            *d += wv * gv;
                        }
                    }
                    gk[kbase + ky * 3 + kx] = acc;
                }
            }
        }
    }
    Ok((
        Tensor::new(&[c, h, w], gx)?,
        Tensor::new(kernels.dims(), gk)?,
        Tensor::new(&[co], gb)?,
    ))
}

/// 2×2 average pooling, stride 2. Spatial dims must be even.
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = dims3(x, "avg_pool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("avg_pool2 needs even dims, got {h}×{w}")));
    }
    let (h2, w2) = (h / 2, w / 2);
    let xd = x.data();
    let quarter = T::of(0.25);
    Ok(Tensor::from_fn(&[c, h2, w2], |idx| {
        let (ch, r) = (idx / (h2 * w2), idx % (h2 * w2));
        let (y, xx) = (r / w2, r % w2);
        let base = ch * h * w + 2 * y * w + 2 * xx;
        (xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1]) * quarter
    }))
}

pub fn avg_pool2_backward<T: Scalar>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h2, w2) = dims3(grad_out, "avg_pool2_backward")?;
    let (h, w) = (h2 * 2, w2 * 2);
    let gd = grad_out.data();
    let quarter = T::of(0.25);
    Ok(Tensor::from_fn(&[c, h, w], |idx| {
        let (ch, r) = (idx / (h * w), idx % (h * w));
        let (y, xx) = (r / w, r % w);
        gd[ch * h2 * w2 + (y / 2) * w2 + xx / 2] * quarter
    }))
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = dims3(x, "upsample2")?;
    let (h2, w2) = (h * 2, w * 2);
    let xd = x.data();
    Ok(Tensor::from_fn(&[c, h2, w2], |idx| {
        let (ch, r) = (idx / (h2 * w2), idx % (h2 * w2));
        let (y, xx) = (r / w2, r % w2);
        xd[ch * h * w + (y / 2) * w + xx / 2]
    }))
}

pub fn upsample2_backward<T: Scalar>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h2, w2) = dims3(grad_out, "upsample2_backward")?;
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(Error::shape("upsample2_backward needs even dims"));
    }
    let (h, w) = (h2 / 2, w2 / 2);
    let gd = grad_out.data();
    Ok(Tensor::from_fn(&[c, h, w], |idx| {
        let (ch, r) = (idx / (h * w), idx % (h * w));
        let (y, xx) = (r / w, r % w);
        let base = ch * h2 * w2 + 2 * y * w2 + 2 * xx;
        gd[base] + gd[base + 1] + gd[base + w2] + gd[base + w2 + 1]
    }))
}

/// Concatenates two C×H×W tensors along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ca, h, w) = dims3(a, "concat lhs")?;
    let (cb, hb, wb) = dims3(b, "concat rhs")?;
    if (h, w) != (hb, wb) {
        return Err(Error::shape(format!("concat spatial mismatch {h}×{w} vs {hb}×{wb}")));
    }
    let mut data = Vec::with_capacity((ca + cb) * h * w);
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(&[ca + cb, h, w], data)
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels<T: Scalar>(g: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, h, w) = dims3(g, "split_channels")?;
    if ca > c {
        return Err(Error::shape("split_channels index beyond channel count"));
    }
    let cut = ca * h * w;
    Ok((
        Tensor::new(&[ca, h, w], g.data()[..cut].to_vec())?,
        Tensor::new(&[c - ca, h, w], g.data()[cut..].to_vec())?,
    ))
}
