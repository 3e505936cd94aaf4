//! Linear (fully connected) layers and the ReLU activation.

use rand::Rng;

use super::linalg::{Mat, Scalar};
use crate::{Error, Result};

/// `y = W x + b` with `W [out x in]`, applied to feature-major batches.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Mat<T>,
    pub b: Vec<T>,
}

/// Gradients shape-congruent with [`Linear`].
#[derive(Debug, Clone)]
pub struct LinearGrads<T> {
    pub w: Mat<T>,
    pub b: Vec<T>,
}

impl<T: Scalar> LinearGrads<T> {
    pub fn zeros_like(layer: &Linear<T>) -> Self {
        Self { w: Mat::zeros(layer.out_dim, layer.in_dim), b: vec![T::ZERO; layer.out_dim] }
    }
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { in_dim, out_dim, w: Mat::zeros(out_dim, in_dim), b: vec![T::ZERO; out_dim] }
    }

    /// Random init: weights uniform in `±1/sqrt(in_dim)`, zero bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let s = 1.0 / (in_dim as f64).sqrt();
        let w = Mat::from_fn(out_dim, in_dim, |_, _| T::from_f64(rng.gen_range(-s..s)));
        Self { in_dim, out_dim, w, b: vec![T::ZERO; out_dim] }
    }

    pub fn param_count(&self) -> usize {
        self.out_dim * self.in_dim + self.out_dim
    }

    /// `y = W x + b` for a batch of columns; `y` is resized to `out x B`.
    pub fn forward(&self, x: &Mat<T>, y: &mut Mat<T>) -> Result<()> {
        if x.rows() != self.in_dim {
            return Err(Error::shape(format!(
                "linear input dim {} != {}",
                x.rows(),
                self.in_dim
            )));
        }
        y.resize(self.out_dim, x.cols());
        y.gemm(&self.w, x, false);
        y.add_col_broadcast(&self.b);
        Ok(())
    }

    /// Apply the layer to every step of a sequence.
    pub fn forward_seq(&self, xs: &[Mat<T>]) -> Result<Vec<Mat<T>>> {
        let mut out = Vec::with_capacity(xs.len());
        for x in xs {
            let mut y = Mat::zeros(0, 0);
            self.forward(x, &mut y)?;
            out.push(y);
        }
        Ok(out)
    }

    /// Accumulate parameter gradients and return the input gradients for a
    /// sequence of steps.
    pub fn backward_seq(
        &self,
        xs: &[Mat<T>],
        d_ys: &[Mat<T>],
        g: &mut LinearGrads<T>,
    ) -> Result<Vec<Mat<T>>> {
        if xs.len() != d_ys.len() {
            return Err(Error::shape("sequence length mismatch"));
        }
        let wt = self.w.transposed();
        let mut d_xs = Vec::with_capacity(xs.len());
        for (x, dy) in xs.iter().zip(d_ys) {
            if dy.rows() != self.out_dim || x.rows() != self.in_dim || dy.cols() != x.cols() {
                return Err(Error::shape("linear backward dims"));
            }
            g.w.gemm_abt(dy, x);
            dy.row_sums_into(&mut g.b);
            let mut dx = Mat::zeros(self.in_dim, x.cols());
            dx.gemm(&wt, dy, false);
            d_xs.push(dx);
        }
        Ok(d_xs)
    }
}

/// `max(x, 0)` in place.
pub fn relu_mut<T: Scalar>(xs: &mut [T]) {
    for x in xs {
        if *x < T::ZERO {
            *x = T::ZERO;
        }
    }
}

/// Gradient through ReLU given the post-activation values: passes where the
/// output is positive, zero elsewhere.
pub fn relu_backward<T: Scalar>(post: &[T], d: &mut [T]) {
    for (dv, &y) in d.iter_mut().zip(post) {
        if y <= T::ZERO {
            *dv = T::ZERO;
        }
    }
}
