//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Nodes
//! are appended in evaluation order, so walking the tape backwards from a
//! scalar root visits each node after all of its consumers.

use crate::error::{Error, Result};
use crate::kernels;
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

use super::dropout::dropout_mask;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Var },
    Linear { x: Var, w: Var, b: Var },
    Matmul { a: Var, b: Var },
    Silu(Var),
    AvgPool(Var),
    Upsample(Var),
    Concat { a: Var, b: Var, split: usize },
    ChannelBias { x: Var, v: Var },
    Dropout { x: Var, mask: Vec<T> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Clamp { x: Var, lo: T, hi: T },
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Mae { pred: Var, target: Tensor<T> },
    GaussianNll { mu: Var, log_sigma: Var, target: Tensor<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Input or parameter node.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = kernels::conv2d_same(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Conv { x, w, b }))
    }

    /// Dense layer on a vector: `w[out×in] · x[in] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let n_in = xv.numel();
        let col = xv.clone().reshape(&[n_in, 1])?;
        let y = kernels::matmul(self.value(w), &col)?;
        let n_out = y.numel();
        let y = y.reshape(&[n_out])?.add(self.value(b))?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Matmul { a, b }))
    }

    /// `x · sigmoid(x)`
    pub fn silu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v * sigmoid(v));
        self.push(y, Op::Silu(x))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let y = kernels::avg_pool2(self.value(x))?;
        Ok(self.push(y, Op::AvgPool(x)))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let y = kernels::upsample2(self.value(x))?;
        Ok(self.push(y, Op::Upsample(x)))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::concat_channels(self.value(a), self.value(b))?;
        let split = self.value(a).dims()[0];
        Ok(self.push(y, Op::Concat { a, b, split }))
    }

    /// Adds `v[c]` to every pixel of channel `c` of `x: C×H×W`.
    pub fn channel_bias(&mut self, x: Var, v: Var) -> Result<Var> {
        let xv = self.value(x);
        let vv = self.value(v);
        let c = xv.dims()[0];
        if xv.dims().len() != 3 || vv.dims() != [c] {
            return Err(Error::shape(format!("channel_bias {:?} + {:?}", xv.dims(), vv.dims())));
        }
        let plane = xv.numel() / c;
        let mut y = xv.clone();
        for (ch, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
            let b = vv.data()[ch];
            chunk.iter_mut().for_each(|e| *e += b);
        }
        Ok(self.push(y, Op::ChannelBias { x, v }))
    }

    /// Inverted dropout with a fresh mask drawn from `rng`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut RngStream) -> Result<Var> {
        let mask = dropout_mask::<T>(self.value(x).numel(), p, rng)?;
        let mut y = self.value(x).clone();
        for (e, &m) in y.data_mut().iter_mut().zip(&mask) {
            *e *= m;
        }
        Ok(self.push(y, Op::Dropout { x, mask }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).sub(self.value(b))?;
        Ok(self.push(y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).mul(self.value(b))?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let y = self.value(a).scale(c);
        self.push(y, Op::Scale(a, c))
    }

    /// Elementwise clamp; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let y = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(y, Op::Clamp { x, lo, hi })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let y = self.value(x).map(T::exp);
        self.push(y, Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v * v);
        self.push(y, Op::Square(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).mean());
        self.push(y, Op::Mean(x))
    }

    /// Mean absolute error against a constant target.
    pub fn mae(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let value = super::loss::mae_loss(self.value(pred), target)?;
        Ok(self.push(
            Tensor::scalar(value),
            Op::Mae {
                pred,
                target: target.clone(),
            },
        ))
    }

    /// Per-pixel Gaussian negative log-likelihood, averaged over pixels,
    /// parameterized by `log σ` so that `σ > 0` holds by construction.
    pub fn gaussian_nll(&mut self, mu: Var, log_sigma: Var, target: &Tensor<T>) -> Result<Var> {
        let m = self.value(mu);
        let ls = self.value(log_sigma);
        m.check_same_dims(target)?;
        m.check_same_dims(ls)?;
        let half_ln_2pi = T::of(0.5 * (2.0 * std::f64::consts::PI).ln());
        let half = T::of(0.5);
        let terms: Vec<T> = m
            .data()
            .iter()
            .zip(ls.data())
            .zip(target.data())
            .map(|((&mu, &l), &x)| {
                let r = x - mu;
                l + half_ln_2pi + half * r * r * (-(l + l)).exp()
            })
            .collect();
        let value = crate::tensor::pairwise_sum(&terms) / T::of(terms.len() as f64);
        Ok(self.push(
            Tensor::scalar(value),
            Op::GaussianNll {
                mu,
                log_sigma,
                target: target.clone(),
            },
        ))
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::usage(format!(
                "backward from non-scalar root with dims {:?}",
                self.value(root).dims()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.value(root).dims()));

        fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    // leaves keep their gradient for the caller
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv { x, w, b } => {
                    let (gx, gw, gb) = kernels::conv2d_same_backward(self.value(*x), self.value(*w), &g)?;
                    acc(&mut grads, *x, gx)?;
                    acc(&mut grads, *w, gw)?;
                    acc(&mut grads, *b, gb)?;
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (n_out, n_in) = (wv.dims()[0], wv.dims()[1]);
                    let gcol = g.clone().reshape(&[n_out, 1])?;
                    let xrow = xv.clone().reshape(&[1, n_in])?;
                    let gw = kernels::matmul(&gcol, &xrow)?;
                    let grow = g.clone().reshape(&[1, n_out])?;
                    let gx = kernels::matmul(&grow, wv)?.reshape(xv.dims())?;
                    acc(&mut grads, *x, gx)?;
                    acc(&mut grads, *w, gw)?;
                    acc(&mut grads, *b, g)?;
                }
                Op::Matmul { a, b } => {
                    let ga = kernels::matmul(&g, &kernels::transpose(self.value(*b))?)?;
                    let gb = kernels::matmul(&kernels::transpose(self.value(*a))?, &g)?;
                    acc(&mut grads, *a, ga)?;
                    acc(&mut grads, *b, gb)?;
                }
                Op::Silu(x) => {
                    let gx = self.value(*x).zip_map(&g, |v, gv| {
                        let s = sigmoid(v);
                        gv * s * (T::one() + v * (T::one() - s))
                    })?;
                    acc(&mut grads, *x, gx)?;
                }
                Op::AvgPool(x) => acc(&mut grads, *x, kernels::avg_pool2_backward(&g)?)?,
                Op::Upsample(x) => acc(&mut grads, *x, kernels::upsample2_backward(&g)?)?,
                Op::Concat { a, b, split } => {
                    let (ga, gb) = kernels::split_channels(&g, *split)?;
                    acc(&mut grads, *a, ga)?;
                    acc(&mut grads, *b, gb)?;
                }
                Op::ChannelBias { x, v } => {
                    let c = g.dims()[0];
                    let plane = g.numel() / c;
                    let gv: Vec<T> = g.data().chunks(plane).map(crate::tensor::pairwise_sum).collect();
                    acc(&mut grads, *v, Tensor::new(&[c], gv)?)?;
                    acc(&mut grads, *x, g)?;
                }
                Op::Dropout { x, mask } => {
                    let mut gx = g;
                    for (e, &m) in gx.data_mut().iter_mut().zip(mask) {
                        *e *= m;
                    }
                    acc(&mut grads, *x, gx)?;
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone())?;
                    acc(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.scale(-T::one()))?;
                    acc(&mut grads, *a, g)?;
                }
                Op::Mul(a, b) => {
                    let ga = g.mul(self.value(*b))?;
                    let gb = g.mul(self.value(*a))?;
                    acc(&mut grads, *a, ga)?;
                    acc(&mut grads, *b, gb)?;
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.scale(*c))?,
                Op::Clamp { x, lo, hi } => {
                    let (lo, hi) = (*lo, *hi);
                    let gx = self
                        .value(*x)
                        .zip_map(&g, |v, gv| if v < lo || v > hi { T::zero() } else { gv })?;
                    acc(&mut grads, *x, gx)?;
                }
                Op::Exp(x) => {
                    let gx = node.value.mul(&g)?;
                    acc(&mut grads, *x, gx)?;
                }
                Op::Square(x) => {
                    let two = T::of(2.0);
                    let gx = self.value(*x).zip_map(&g, |v, gv| two * v * gv)?;
                    acc(&mut grads, *x, gx)?;
                }
                Op::Sum(x) => {
                    let gs = g.item()?;
                    acc(&mut grads, *x, Tensor::full(self.value(*x).dims(), gs))?;
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let gs = g.item()? / T::of(xv.numel() as f64);
                    acc(&mut grads, *x, Tensor::full(xv.dims(), gs))?;
                }
                Op::Mae { pred, target } => {
                    let k = T::of(target.numel() as f64);
                    let gs = g.item()?;
                    let gp = self.value(*pred).zip_map(target, |p, t| {
                        let d = p - t;
                        if d > T::zero() {
                            gs / k
                        } else if d < T::zero() {
                            -gs / k
                        } else {
                            T::zero()
                        }
                    })?;
                    acc(&mut grads, *pred, gp)?;
                }
                Op::GaussianNll { mu, log_sigma, target } => {
                    let k = T::of(target.numel() as f64);
                    let gs = g.item()? / k;
                    let mv = self.value(*mu);
                    let lv = self.value(*log_sigma);
                    let mut gm = Vec::with_capacity(mv.numel());
                    let mut gl = Vec::with_capacity(mv.numel());
                    for ((&m, &l), &x) in mv.data().iter().zip(lv.data()).zip(target.data()) {
                        let inv_var = (-(l + l)).exp();
                        let r = x - m;
                        gm.push(-gs * r * inv_var);
                        gl.push(gs * (T::one() - r * r * inv_var));
                    }
                    acc(&mut grads, *mu, Tensor::new(mv.dims(), gm)?)?;
                    acc(&mut grads, *log_sigma, Tensor::new(lv.dims(), gl)?)?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf, or `None` if the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, with zeros for leaves the root does not reach.
    pub fn get_or_zeros(&self, v: Var, dims: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(dims))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient_is_twice_theta() {
        let mut rng = RngStream::new(1);
        let theta = rng.gaussian::<f64>(&[3, 4]);
        let mut g = Graph::new();
        let t = g.leaf(theta.clone());
        let sq = g.square(t);
        let l = g.sum(sq);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(t).unwrap(), &theta.scale(2.0));
    }

    #[test]
    fn non_scalar_root_is_usage_error() {
        let mut g = Graph::<f32>::new();
        let t = g.leaf(Tensor::ones(&[2]));
        let s = g.square(t);
        assert!(matches!(g.backward(s), Err(Error::Usage(_))));
    }

    #[test]
    fn unused_leaf_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::ones(&[2]));
        let unused = g.leaf(Tensor::ones(&[5]));
        let l = g.sum(a);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.get_or_zeros(unused, &[5]), Tensor::zeros(&[5]));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // L = sum(a * a + a) → dL/da = 2a + 1
        let a0 = Tensor::<f64>::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut g = Graph::new();
        let a = g.leaf(a0.clone());
        let aa = g.mul(a, a).unwrap();
        let s = g.add(aa, a).unwrap();
        let l = g.sum(s);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap(), &a0.map(|v| 2.0 * v + 1.0));
    }
}
