//! Row-major matrices and the kernel layer the network runs on.
//!
//! Activations are stored feature-major — a batch of B vectors of dimension D
//! is a `D x B` matrix with the batch contiguous — so every layer step is one
//! GEMM with the batch as the column dimension. The [`Scalar`] trait carries
//! the three kernels the recurrent stack needs (`C = A*B`, `C += A*B^T`,
//! slice-wise sigmoid/tanh); `f64` uses straightforward loops and libm,
//! `f32` dispatches to AVX-512F or AVX2+FMA code paths when the CPU has them.
//!
//! Every kernel accumulates along `k` in increasing order for each output
//! element, so results are reproducible run-to-run on the same machine and
//! identical between code paths that share a shape.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::{Error, Result};

/// Element type the network math is generic over.
///
/// `f32` is the production type (fast kernels); `f64` backs the
/// finite-difference gradient oracle where approximation error in the
/// activations would drown the signal.
pub trait Scalar:
    Copy
    + Clone
    + Default
    + PartialOrd
    + Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;

    /// Logistic function applied in place.
    fn sigmoid_mut(xs: &mut [Self]);
    /// Hyperbolic tangent applied in place.
    fn tanh_mut(xs: &mut [Self]);

    /// `C[m x n] = A[m x k] * B[k x n]`, or `+=` when `accumulate`.
    fn gemm_nn(m: usize, n: usize, k: usize, a: &[Self], b: &[Self], c: &mut [Self], accumulate: bool);

    /// `C[m x n] += A[m x kb] * B[n x kb]^T` — both factors row-major, the
    /// contraction runs over their contiguous rows.
    fn gemm_abt(m: usize, n: usize, kb: usize, a: &[Self], b: &[Self], c: &mut [Self]);
}

// ---------------------------------------------------------------------------
// portable reference kernels

pub(crate) fn gemm_nn_generic<T: Scalar>(
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        if !accumulate {
            crow.fill(T::ZERO);
        }
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aik * bj;
            }
        }
    }
}

pub(crate) fn gemm_abt_generic<T: Scalar>(
    m: usize,
    n: usize,
    kb: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * kb);
    debug_assert_eq!(b.len(), n * kb);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * kb..(i + 1) * kb];
        for j in 0..n {
            let brow = &b[j * kb..(j + 1) * kb];
            let mut acc = T::ZERO;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }

    fn sigmoid_mut(xs: &mut [Self]) {
        for x in xs {
            *x = 1.0 / (1.0 + (-*x).exp());
        }
    }

    fn tanh_mut(xs: &mut [Self]) {
        for x in xs {
            *x = x.tanh();
        }
    }

    fn gemm_nn(m: usize, n: usize, k: usize, a: &[Self], b: &[Self], c: &mut [Self], accumulate: bool) {
        gemm_nn_generic(m, n, k, a, b, c, accumulate);
    }

    fn gemm_abt(m: usize, n: usize, kb: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        gemm_abt_generic(m, n, kb, a, b, c);
    }
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn abs(self) -> Self {
        f32::abs(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    #[inline]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }

    fn sigmoid_mut(xs: &mut [Self]) {
        super::simd::sigmoid_mut_f32(xs);
    }

    fn tanh_mut(xs: &mut [Self]) {
        super::simd::tanh_mut_f32(xs);
    }

    fn gemm_nn(m: usize, n: usize, k: usize, a: &[Self], b: &[Self], c: &mut [Self], accumulate: bool) {
        super::simd::gemm_nn_f32(m, n, k, a, b, c, accumulate);
    }

    fn gemm_abt(m: usize, n: usize, kb: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        super::simd::gemm_abt_f32(m, n, kb, a, b, c);
    }
}

// ---------------------------------------------------------------------------

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::ZERO; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }
    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }
    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }
    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }
    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }
    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn fill(&mut self, v: T) {
        self.data.fill(v);
    }

    /// Reshape in place, reallocating only when the element count grows.
    pub fn resize(&mut self, rows: usize, cols: usize) {
        self.data.resize(rows * cols, T::ZERO);
        self.rows = rows;
        self.cols = cols;
    }

    pub fn transposed(&self) -> Mat<T> {
        Mat::from_fn(self.cols, self.rows, |r, c| self.at(c, r))
    }

    /// `self = A * B` (or `+=` with `accumulate`).
    pub fn gemm(&mut self, a: &Mat<T>, b: &Mat<T>, accumulate: bool) {
        assert_eq!(a.cols, b.rows, "inner dims");
        assert_eq!(self.rows, a.rows, "out rows");
        assert_eq!(self.cols, b.cols, "out cols");
        T::gemm_nn(a.rows, b.cols, a.cols, &a.data, &b.data, &mut self.data, accumulate);
    }

    /// `self += A * B^T` where the contraction runs over the rows of both.
    pub fn gemm_abt(&mut self, a: &Mat<T>, b: &Mat<T>) {
        assert_eq!(a.cols, b.cols, "contraction dims");
        assert_eq!(self.rows, a.rows, "out rows");
        assert_eq!(self.cols, b.rows, "out cols");
        T::gemm_abt(a.rows, b.rows, a.cols, &a.data, &b.data, &mut self.data);
    }

    /// Add a column vector to every column.
    pub fn add_col_broadcast(&mut self, bias: &[T]) {
        assert_eq!(bias.len(), self.rows, "bias length");
        for (r, &bv) in bias.iter().enumerate() {
            for v in self.row_mut(r) {
                *v += bv;
            }
        }
    }

    /// Sum across columns into a vector of length `rows`.
    pub fn row_sums_into(&self, out: &mut [T]) {
        assert_eq!(out.len(), self.rows, "output length");
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = T::ZERO;
            for &v in self.row(r) {
                acc += v;
            }
            *o += acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat<T: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat<T> {
        Mat::from_fn(rows, cols, |_, _| T::from_f64(rng.gen_range(-1.0..1.0)))
    }

    #[test]
    fn gemm_identity() {
        let eye = Mat::<f64>::from_fn(3, 3, |r, c| if r == c { 1.0 } else { 0.0 });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_mat::<f64>(3, 5, &mut rng);
        let mut y = Mat::zeros(3, 5);
        y.gemm(&eye, &x, false);
        assert_eq!(y, x);
    }

    #[test]
    fn gemm_hand_example() {
        let a = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Mat::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let mut c = Mat::<f64>::zeros(2, 2);
        c.gemm(&a, &b, false);
        assert_eq!(c.as_slice(), &[58.0, 64.0, 139.0, 154.0]);
    }

    /// f32 kernels (whatever path the CPU selects) agree with the f64
    /// reference loops to f32 rounding across shapes that exercise all tile
    /// remainders.
    #[test]
    fn f32_kernels_match_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for &(m, n, k) in &[
            (1usize, 1usize, 1usize),
            (3, 2, 4),
            (6, 64, 32),
            (7, 65, 33),
            (13, 100, 17),
            (64, 1, 128),
            (5, 257, 40),
            (48, 31, 96),
        ] {
            let a64 = random_mat::<f64>(m, k, &mut rng);
            let b64 = random_mat::<f64>(k, n, &mut rng);
            let a32 = Mat::<f32>::from_fn(m, k, |r, c| a64.at(r, c) as f32);
            let b32 = Mat::<f32>::from_fn(k, n, |r, c| b64.at(r, c) as f32);

            let mut c64 = Mat::<f64>::zeros(m, n);
            c64.gemm(&a64, &b64, false);
            let mut c32 = Mat::<f32>::zeros(m, n);
            c32.gemm(&a32, &b32, false);
            for i in 0..m * n {
                let err = (c32.as_slice()[i] as f64 - c64.as_slice()[i]).abs();
                assert!(err < 1e-4 * (k as f64), "nn {m}x{n}x{k} at {i}: {err}");
            }

            // accumulate path
            let mut acc32 = c32.clone();
            acc32.gemm(&a32, &b32, true);
            for i in 0..m * n {
                let want = 2.0 * c64.as_slice()[i];
                let err = (acc32.as_slice()[i] as f64 - want).abs();
                assert!(err < 2e-4 * (k as f64), "nn-acc {m}x{n}x{k} at {i}");
            }

            // A * B^T against the reference
            let bt64 = random_mat::<f64>(n, k, &mut rng);
            let bt32 = Mat::<f32>::from_fn(n, k, |r, c| bt64.at(r, c) as f32);
            let mut d64 = Mat::<f64>::zeros(m, n);
            d64.gemm_abt(&a64, &bt64);
            let mut d32 = Mat::<f32>::zeros(m, n);
            d32.gemm_abt(&a32, &bt32);
            for i in 0..m * n {
                let err = (d32.as_slice()[i] as f64 - d64.as_slice()[i]).abs();
                assert!(err < 1e-4 * (k as f64), "abt {m}x{n}x{k} at {i}: {err}");
            }
        }
    }

    /// Same shape, same data: the f32 GEMM must be bitwise reproducible.
    #[test]
    fn f32_gemm_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_mat::<f32>(50, 70, &mut rng);
        let b = random_mat::<f32>(70, 90, &mut rng);
        let mut c1 = Mat::zeros(50, 90);
        let mut c2 = Mat::zeros(50, 90);
        c1.gemm(&a, &b, false);
        c2.gemm(&a, &b, false);
        assert_eq!(c1.as_slice(), c2.as_slice());
    }

    #[test]
    fn sigmoid_tanh_accuracy_f32() {
        let xs: Vec<f32> = (-2000..=2000).map(|i| i as f32 * 0.01).collect();
        let mut sig = xs.clone();
        f32::sigmoid_mut(&mut sig);
        let mut th = xs.clone();
        f32::tanh_mut(&mut th);
        for (i, &x) in xs.iter().enumerate() {
            let s_ref = 1.0 / (1.0 + (-(x as f64)).exp());
            let t_ref = (x as f64).tanh();
            let s_err = (sig[i] as f64 - s_ref).abs() / s_ref.abs().max(1e-12);
            assert!(s_err < 1e-5, "sigmoid({x}): rel err {s_err}");
            let t_err = (th[i] as f64 - t_ref).abs();
            assert!(t_err < 1e-5, "tanh({x}): abs err {t_err}");
        }
    }

    #[test]
    fn sigmoid_saturation() {
        let mut xs = vec![-1e4f32, -100.0, 0.0, 100.0, 1e4];
        f32::sigmoid_mut(&mut xs);
        assert_eq!(xs[0], 0.0);
        assert!(xs[1] < 1e-30);
        assert_eq!(xs[2], 0.5);
        assert!((xs[3] - 1.0).abs() < 1e-6);
        assert_eq!(xs[4], 1.0);
        let mut t = vec![-1e4f32, 0.0, 1e4];
        f32::tanh_mut(&mut t);
        assert_eq!(t[0], -1.0);
        assert_eq!(t[1], 0.0);
        assert_eq!(t[2], 1.0);
    }

    #[test]
    fn broadcast_and_row_sums() {
        let mut m = Mat::from_vec(2, 3, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        m.add_col_broadcast(&[10.0, 20.0]);
        assert_eq!(m.as_slice(), &[11.0, 12.0, 13.0, 24.0, 25.0, 26.0]);
        let mut sums = vec![0.0; 2];
        m.row_sums_into(&mut sums);
        assert_eq!(sums, vec![36.0, 75.0]);
    }

    #[test]
    fn from_vec_shape_checked() {
        assert!(Mat::<f64>::from_vec(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn transpose_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_mat::<f64>(4, 7, &mut rng);
        assert_eq!(a.transposed().transposed(), a);
    }
}
