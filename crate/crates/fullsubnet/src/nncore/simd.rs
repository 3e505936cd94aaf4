//! f32 kernels with runtime ISA dispatch.
//!
//! One code path is picked per process (AVX-512F, then AVX2+FMA, then
//! portable loops) so identical shapes always run through identical
//! instruction sequences — a requirement for the bit-reproducibility the
//! streaming/offline equivalence tests rely on. Remainder lanes use masked
//! loads/stores rather than scalar epilogues for the same reason.
//!
//! The transcendentals are a Cephes-style polynomial `exp` (max relative
//! error ~1.4e-7 for the logistic, well under f32 training noise), with
//! `tanh(x) = 2*sigmoid(2x) - 1`.

use std::sync::OnceLock;

use super::linalg::{gemm_abt_generic, gemm_nn_generic};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Isa {
    Avx512,
    Avx2,
    Portable,
}

fn isa() -> Isa {
    static ISA: OnceLock<Isa> = OnceLock::new();
    *ISA.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        {
            if is_x86_feature_detected!("avx512f") {
                return Isa::Avx512;
            }
            if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
                return Isa::Avx2;
            }
        }
        Isa::Portable
    })
}

pub(crate) fn gemm_nn_f32(
    m: usize,
    n: usize,
    k: usize,
    a: &[f32],
    b: &[f32],
    c: &mut [f32],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    match isa() {
        #[cfg(target_arch = "x86_64")]
        Isa::Avx512 => unsafe {
            if n == 1 {
                avx512::matvec(m, k, a, b, c, accumulate)
            } else {
                avx512::gemm_nn(m, n, k, a, b, c, accumulate)
            }
        },
        #[cfg(target_arch = "x86_64")]
        Isa::Avx2 => unsafe {
            if n == 1 {
                avx2::matvec(m, k, a, b, c, accumulate)
            } else {
                avx2::gemm_nn(m, n, k, a, b, c, accumulate)
            }
        },
        _ => gemm_nn_generic(m, n, k, a, b, c, accumulate),
    }
}

pub(crate) fn gemm_abt_f32(m: usize, n: usize, kb: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    if m == 0 || n == 0 {
        return;
    }
    match isa() {
        // Per-element dots stall badly when the contraction is short (the
        // recurrent nets call this with kb = batch, often 1). Transposing B
        // once lets the register-tiled NN kernel stream both factors at any
        // kb, so that is the only vector path.
        #[cfg(target_arch = "x86_64")]
        Isa::Avx512 => unsafe {
            let bt = transpose(b, n, kb);
            avx512::gemm_nn(m, n, kb, a, &bt, c, true);
        },
        #[cfg(target_arch = "x86_64")]
        Isa::Avx2 => unsafe {
            let bt = transpose(b, n, kb);
            avx2::gemm_nn(m, n, kb, a, &bt, c, true);
        },
        _ => gemm_abt_generic(m, n, kb, a, b, c),
    }
}

/// Row-major transpose of an `rows x cols` matrix.
#[cfg(target_arch = "x86_64")]
fn transpose(src: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut out = vec![0.0f32; src.len()];
    for r in 0..rows {
        for (k, &v) in src[r * cols..(r + 1) * cols].iter().enumerate() {
            out[k * rows + r] = v;
        }
    }
    out
}

pub(crate) fn sigmoid_mut_f32(xs: &mut [f32]) {
    match isa() {
        #[cfg(target_arch = "x86_64")]
        Isa::Avx512 => unsafe { avx512::sigmoid_mut(xs) },
        #[cfg(target_arch = "x86_64")]
        Isa::Avx2 => unsafe { avx2::sigmoid_mut(xs) },
        _ => {
            for x in xs {
                *x = scalar::sigmoid(*x);
            }
        }
    }
}

pub(crate) fn tanh_mut_f32(xs: &mut [f32]) {
    match isa() {
        #[cfg(target_arch = "x86_64")]
        Isa::Avx512 => unsafe { avx512::tanh_mut(xs) },
        #[cfg(target_arch = "x86_64")]
        Isa::Avx2 => unsafe { avx2::tanh_mut(xs) },
        _ => {
            for x in xs {
                *x = scalar::tanh(*x);
            }
        }
    }
}

// Cephes expf reduction/polynomial constants, shared by all paths.
const EXP_HI: f32 = 88.722_83;
const EXP_LO: f32 = -87.336_55;
const LOG2EF: f32 = std::f32::consts::LOG2_E;
const LN2_HI: f32 = 0.693_359_4;
const LN2_LO: f32 = -2.121_944_4e-4;
const P0: f32 = 1.987_569_2e-4;
const P1: f32 = 1.398_199_9e-3;
const P2: f32 = 8.333_452e-3;
const P3: f32 = 4.166_579_6e-2;
const P4: f32 = 1.666_666_5e-1;
const P5: f32 = 5.000_000_3e-1;

pub(crate) mod scalar {
    use super::*;

    /// Polynomial expf — the same reduction the vector paths use, so a
    /// machine without SIMD still computes the same function.
    #[inline]
    pub(crate) fn expf(x: f32) -> f32 {
        let x = x.clamp(EXP_LO, EXP_HI);
        let n = (x * LOG2EF).round_ties_even();
        let r = x - n * LN2_HI - n * LN2_LO;
        let z = r * r;
        let mut p = P0;
        p = p * r + P1;
        p = p * r + P2;
        p = p * r + P3;
        p = p * r + P4;
        p = p * r + P5;
        let y = p * z + r + 1.0;
        y * f32::from_bits(((n as i32 + 127) as u32) << 23)
    }

    #[inline]
    pub(crate) fn sigmoid(x: f32) -> f32 {
        1.0 / (1.0 + expf(-x))
    }

    #[inline]
    pub(crate) fn tanh(x: f32) -> f32 {
        2.0 * sigmoid(2.0 * x) - 1.0
    }
}

#[cfg(target_arch = "x86_64")]
pub(crate) mod avx512 {
    use super::*;
    use std::arch::x86_64::*;

    const MR: usize = 6;
    const LANES: usize = 16;
    const NV: usize = 4; // up to 4 vectors = 64 columns per tile

    /// 16-bit lane mask covering `rem` leading lanes (`rem` in 1..=16).
    #[inline]
    fn lane_mask(rem: usize) -> u16 {
        if rem >= LANES {
            0xffff
        } else {
            (1u16 << rem) - 1
        }
    }

    /// Register-tiled C (+)= A*B. Safety: caller verified avx512f and the
    /// slice dimensions.
    #[target_feature(enable = "avx512f")]
    pub(crate) unsafe fn gemm_nn(
        m: usize,
        n: usize,
        k: usize,
        a: &[f32],
        b: &[f32],
        c: &mut [f32],
        accumulate: bool,
    ) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        let mut j0 = 0;
        while j0 < n {
            let ncols = (n - j0).min(NV * LANES);
            let nv = ncols.div_ceil(LANES);
            let mask = lane_mask(ncols - (nv - 1) * LANES);
            let mut i0 = 0;
            while i0 < m {
                let mr = (m - i0).min(MR);
                let ap = a.as_ptr().add(i0 * k);
                let bp = b.as_ptr().add(j0);
                let cp = c.as_mut_ptr().add(i0 * n + j0);
                match (mr, nv) {
                    (1, 1) => nn_tile::<1, 1>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (1, 2) => nn_tile::<1, 2>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (1, 3) => nn_tile::<1, 3>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (1, 4) => nn_tile::<1, 4>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (2, 1) => nn_tile::<2, 1>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (2, 2) => nn_tile::<2, 2>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (2, 3) => nn_tile::<2, 3>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (2, 4) => nn_tile::<2, 4>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (3, 1) => nn_tile::<3, 1>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (3, 2) => nn_tile::<3, 2>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (3, 3) => nn_tile::<3, 3>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (3, 4) => nn_tile::<3, 4>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (4, 1) => nn_tile::<4, 1>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (4, 2) => nn_tile::<4, 2>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (4, 3) => nn_tile::<4, 3>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (4, 4) => nn_tile::<4, 4>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (5, 1) => nn_tile::<5, 1>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (5, 2) => nn_tile::<5, 2>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (5, 3) => nn_tile::<5, 3>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (5, 4) => nn_tile::<5, 4>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (6, 1) => nn_tile::<6, 1>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (6, 2) => nn_tile::<6, 2>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (6, 3) => nn_tile::<6, 3>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (6, 4) => nn_tile::<6, 4>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    _ => unreachable!("tile {mr}x{nv}"),
                }
                i0 += mr;
            }
            j0 += ncols;
        }
    }

    /// One MRx(NVx16) tile. `mask` applies to the last of the NV column
    /// vectors; pointers stay inside their rows, masked lanes are never
    /// dereferenced.
    #[target_feature(enable = "avx512f")]
    unsafe fn nn_tile<const TM: usize, const TN: usize>(
        a: *const f32,
        lda: usize,
        b: *const f32,
        ldb: usize,
        c: *mut f32,
        ldc: usize,
        k: usize,
        mask: u16,
        accumulate: bool,
    ) {
        let mut acc = [[_mm512_setzero_ps(); TN]; TM];
        if accumulate {
            for r in 0..TM {
                for v in 0..TN {
                    let p = c.add(r * ldc + v * LANES);
                    acc[r][v] = if v == TN - 1 {
                        _mm512_maskz_loadu_ps(mask, p)
                    } else {
                        _mm512_loadu_ps(p)
                    };
                }
            }
        }
        for kk in 0..k {
            let brow = b.add(kk * ldb);
            let mut bv = [_mm512_setzero_ps(); TN];
            for v in 0..TN {
                bv[v] = if v == TN - 1 {
                    _mm512_maskz_loadu_ps(mask, brow.add(v * LANES))
                } else {
                    _mm512_loadu_ps(brow.add(v * LANES))
                };
            }
            for r in 0..TM {
                let av = _mm512_set1_ps(*a.add(r * lda + kk));
                for v in 0..TN {
                    acc[r][v] = _mm512_fmadd_ps(av, bv[v], acc[r][v]);
                }
            }
        }
        for r in 0..TM {
            for v in 0..TN {
                let p = c.add(r * ldc + v * LANES);
                if v == TN - 1 {
                    _mm512_mask_storeu_ps(p, mask, acc[r][v]);
                } else {
                    _mm512_storeu_ps(p, acc[r][v]);
                }
            }
        }
    }

    /// y (+)= A*x for a single column — dot products along contiguous rows.
    #[target_feature(enable = "avx512f")]
    pub(crate) unsafe fn matvec(
        m: usize,
        k: usize,
        a: &[f32],
        x: &[f32],
        y: &mut [f32],
        accumulate: bool,
    ) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(x.len(), k);
        debug_assert_eq!(y.len(), m);
        for r in 0..m {
            let s = dot(a.as_ptr().add(r * k), x.as_ptr(), k);
            if accumulate {
                y[r] += s;
            } else {
                y[r] = s;
            }
        }
    }

    #[target_feature(enable = "avx512f")]
    unsafe fn dot(a: *const f32, b: *const f32, k: usize) -> f32 {
        let mut acc0 = _mm512_setzero_ps();
        let mut acc1 = _mm512_setzero_ps();
        let mut acc2 = _mm512_setzero_ps();
        let mut acc3 = _mm512_setzero_ps();
        let mut i = 0;
        while i + 4 * LANES <= k {
            acc0 = _mm512_fmadd_ps(_mm512_loadu_ps(a.add(i)), _mm512_loadu_ps(b.add(i)), acc0);
            acc1 = _mm512_fmadd_ps(
                _mm512_loadu_ps(a.add(i + LANES)),
                _mm512_loadu_ps(b.add(i + LANES)),
                acc1,
            );
            acc2 = _mm512_fmadd_ps(
                _mm512_loadu_ps(a.add(i + 2 * LANES)),
                _mm512_loadu_ps(b.add(i + 2 * LANES)),
                acc2,
            );
            acc3 = _mm512_fmadd_ps(
                _mm512_loadu_ps(a.add(i + 3 * LANES)),
                _mm512_loadu_ps(b.add(i + 3 * LANES)),
                acc3,
            );
            i += 4 * LANES;
        }
        while i + LANES <= k {
            acc0 = _mm512_fmadd_ps(_mm512_loadu_ps(a.add(i)), _mm512_loadu_ps(b.add(i)), acc0);
            i += LANES;
        }
        if i < k {
            let mask = lane_mask(k - i);
            acc1 = _mm512_fmadd_ps(
                _mm512_maskz_loadu_ps(mask, a.add(i)),
                _mm512_maskz_loadu_ps(mask, b.add(i)),
                acc1,
            );
        }
        let sum = _mm512_add_ps(_mm512_add_ps(acc0, acc1), _mm512_add_ps(acc2, acc3));
        _mm512_reduce_add_ps(sum)
    }

    #[target_feature(enable = "avx512f")]
    #[inline]
    unsafe fn exp_v(x: __m512) -> __m512 {
        let x = _mm512_min_ps(_mm512_set1_ps(EXP_HI), _mm512_max_ps(_mm512_set1_ps(EXP_LO), x));
        let ni = _mm512_cvtps_epi32(_mm512_mul_ps(x, _mm512_set1_ps(LOG2EF)));
        let nf = _mm512_cvtepi32_ps(ni);
        let r = _mm512_fnmadd_ps(nf, _mm512_set1_ps(LN2_HI), x);
        let r = _mm512_fnmadd_ps(nf, _mm512_set1_ps(LN2_LO), r);
        let z = _mm512_mul_ps(r, r);
        let mut p = _mm512_set1_ps(P0);
        p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(P1));
        p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(P2));
        p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(P3));
        p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(P4));
        p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(P5));
        let y = _mm512_add_ps(_mm512_fmadd_ps(p, z, r), _mm512_set1_ps(1.0));
        let pow2n = _mm512_castsi512_ps(_mm512_slli_epi32::<23>(_mm512_add_epi32(
            ni,
            _mm512_set1_epi32(127),
        )));
        _mm512_mul_ps(y, pow2n)
    }

    #[target_feature(enable = "avx512f")]
    #[inline]
    unsafe fn sigmoid_v(x: __m512) -> __m512 {
        let one = _mm512_set1_ps(1.0);
        let e = exp_v(_mm512_sub_ps(_mm512_setzero_ps(), x));
        _mm512_div_ps(one, _mm512_add_ps(one, e))
    }

    #[target_feature(enable = "avx512f")]
    pub(crate) unsafe fn sigmoid_mut(xs: &mut [f32]) {
        let n = xs.len();
        let p = xs.as_mut_ptr();
        let mut i = 0;
        while i + LANES <= n {
            _mm512_storeu_ps(p.add(i), sigmoid_v(_mm512_loadu_ps(p.add(i))));
            i += LANES;
        }
        if i < n {
            let mask = lane_mask(n - i);
            let v = sigmoid_v(_mm512_maskz_loadu_ps(mask, p.add(i)));
            _mm512_mask_storeu_ps(p.add(i), mask, v);
        }
    }

    #[target_feature(enable = "avx512f")]
    pub(crate) unsafe fn tanh_mut(xs: &mut [f32]) {
        let two = _mm512_set1_ps(2.0);
        let one = _mm512_set1_ps(1.0);
        let n = xs.len();
        let p = xs.as_mut_ptr();
        let mut i = 0;
        while i + LANES <= n {
            let s = sigmoid_v(_mm512_mul_ps(two, _mm512_loadu_ps(p.add(i))));
            _mm512_storeu_ps(p.add(i), _mm512_fmsub_ps(two, s, one));
            i += LANES;
        }
        if i < n {
            let mask = lane_mask(n - i);
            let s = sigmoid_v(_mm512_mul_ps(two, _mm512_maskz_loadu_ps(mask, p.add(i))));
            _mm512_mask_storeu_ps(p.add(i), mask, _mm512_fmsub_ps(two, s, one));
        }
    }
}

#[cfg(target_arch = "x86_64")]
pub(crate) mod avx2 {
    use super::*;
    use std::arch::x86_64::*;

    const MR: usize = 4;
    const LANES: usize = 8;
    const NV: usize = 4; // up to 32 columns per tile

    // Sliding-window mask table: starting at index (8 - rem) gives a vector
    // whose first `rem` lanes are set.
    static MASKS: [i32; 16] = [-1, -1, -1, -1, -1, -1, -1, -1, 0, 0, 0, 0, 0, 0, 0, 0];

    #[inline]
    unsafe fn lane_mask(rem: usize) -> __m256i {
        debug_assert!(rem >= 1 && rem <= LANES);
        _mm256_loadu_si256(MASKS.as_ptr().add(LANES - rem) as *const __m256i)
    }

    #[target_feature(enable = "avx2,fma")]
    pub(crate) unsafe fn gemm_nn(
        m: usize,
        n: usize,
        k: usize,
        a: &[f32],
        b: &[f32],
        c: &mut [f32],
        accumulate: bool,
    ) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        let mut j0 = 0;
        while j0 < n {
            let ncols = (n - j0).min(NV * LANES);
            let nv = ncols.div_ceil(LANES);
            let mask = lane_mask(ncols - (nv - 1) * LANES);
            let mut i0 = 0;
            while i0 < m {
                let mr = (m - i0).min(MR);
                let ap = a.as_ptr().add(i0 * k);
                let bp = b.as_ptr().add(j0);
                let cp = c.as_mut_ptr().add(i0 * n + j0);
                match (mr, nv) {
                    (1, 1) => nn_tile::<1, 1>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (1, 2) => nn_tile::<1, 2>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (1, 3) => nn_tile::<1, 3>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (1, 4) => nn_tile::<1, 4>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (2, 1) => nn_tile::<2, 1>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (2, 2) => nn_tile::<2, 2>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (2, 3) => nn_tile::<2, 3>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (2, 4) => nn_tile::<2, 4>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (3, 1) => nn_tile::<3, 1>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (3, 2) => nn_tile::<3, 2>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (3, 3) => nn_tile::<3, 3>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (3, 4) => nn_tile::<3, 4>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (4, 1) => nn_tile::<4, 1>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (4, 2) => nn_tile::<4, 2>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (4, 3) => nn_tile::<4, 3>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    (4, 4) => nn_tile::<4, 4>(ap, k, bp, n, cp, n, k, mask, accumulate),
                    _ => unreachable!("tile {mr}x{nv}"),
                }
                i0 += mr;
            }
            j0 += ncols;
        }
    }

    #[target_feature(enable = "avx2,fma")]
    unsafe fn nn_tile<const TM: usize, const TN: usize>(
        a: *const f32,
        lda: usize,
        b: *const f32,
        ldb: usize,
        c: *mut f32,
        ldc: usize,
        k: usize,
        mask: __m256i,
        accumulate: bool,
    ) {
        let mut acc = [[_mm256_setzero_ps(); TN]; TM];
        if accumulate {
            for r in 0..TM {
                for v in 0..TN {
                    let p = c.add(r * ldc + v * LANES);
                    acc[r][v] = if v == TN - 1 {
                        _mm256_maskload_ps(p, mask)
                    } else {
                        _mm256_loadu_ps(p)
                    };
                }
            }
        }
        for kk in 0..k {
            let brow = b.add(kk * ldb);
            let mut bv = [_mm256_setzero_ps(); TN];
            for v in 0..TN {
                bv[v] = if v == TN - 1 {
                    _mm256_maskload_ps(brow.add(v * LANES), mask)
                } else {
                    _mm256_loadu_ps(brow.add(v * LANES))
                };
            }
            for r in 0..TM {
                let av = _mm256_set1_ps(*a.add(r * lda + kk));
                for v in 0..TN {
                    acc[r][v] = _mm256_fmadd_ps(av, bv[v], acc[r][v]);
                }
            }
        }
        for r in 0..TM {
            for v in 0..TN {
                let p = c.add(r * ldc + v * LANES);
                if v == TN - 1 {
                    _mm256_maskstore_ps(p, mask, acc[r][v]);
                } else {
                    _mm256_storeu_ps(p, acc[r][v]);
                }
            }
        }
    }

    #[target_feature(enable = "avx2,fma")]
    pub(crate) unsafe fn matvec(
        m: usize,
        k: usize,
        a: &[f32],
        x: &[f32],
        y: &mut [f32],
        accumulate: bool,
    ) {
        for r in 0..m {
            let s = dot(a.as_ptr().add(r * k), x.as_ptr(), k);
            if accumulate {
                y[r] += s;
            } else {
                y[r] = s;
            }
        }
    }

    #[target_feature(enable = "avx2,fma")]
    unsafe fn dot(a: *const f32, b: *const f32, k: usize) -> f32 {
        let mut acc0 = _mm256_setzero_ps();
        let mut acc1 = _mm256_setzero_ps();
        let mut acc2 = _mm256_setzero_ps();
        let mut acc3 = _mm256_setzero_ps();
        let mut i = 0;
        while i + 4 * LANES <= k {
            acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a.add(i)), _mm256_loadu_ps(b.add(i)), acc0);
            acc1 = _mm256_fmadd_ps(
                _mm256_loadu_ps(a.add(i + LANES)),
                _mm256_loadu_ps(b.add(i + LANES)),
                acc1,
            );
            acc2 = _mm256_fmadd_ps(
                _mm256_loadu_ps(a.add(i + 2 * LANES)),
                _mm256_loadu_ps(b.add(i + 2 * LANES)),
                acc2,
            );
            acc3 = _mm256_fmadd_ps(
                _mm256_loadu_ps(a.add(i + 3 * LANES)),
                _mm256_loadu_ps(b.add(i + 3 * LANES)),
                acc3,
            );
            i += 4 * LANES;
        }
        while i + LANES <= k {
            acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a.add(i)), _mm256_loadu_ps(b.add(i)), acc0);
            i += LANES;
        }
        if i < k {
            let mask = lane_mask(k - i);
            acc1 = _mm256_fmadd_ps(
                _mm256_maskload_ps(a.add(i), mask),
                _mm256_maskload_ps(b.add(i), mask),
                acc1,
            );
        }
        let sum = _mm256_add_ps(_mm256_add_ps(acc0, acc1), _mm256_add_ps(acc2, acc3));
        let mut t = _mm_add_ps(_mm256_castps256_ps128(sum), _mm256_extractf128_ps::<1>(sum));
        t = _mm_add_ps(t, _mm_movehl_ps(t, t));
        t = _mm_add_ss(t, _mm_shuffle_ps::<1>(t, t));
        _mm_cvtss_f32(t)
    }

    #[target_feature(enable = "avx2,fma")]
    #[inline]
    unsafe fn exp_v(x: __m256) -> __m256 {
        let x = _mm256_min_ps(_mm256_set1_ps(EXP_HI), _mm256_max_ps(_mm256_set1_ps(EXP_LO), x));
        let ni = _mm256_cvtps_epi32(_mm256_mul_ps(x, _mm256_set1_ps(LOG2EF)));
        let nf = _mm256_cvtepi32_ps(ni);
        let r = _mm256_fnmadd_ps(nf, _mm256_set1_ps(LN2_HI), x);
        let r = _mm256_fnmadd_ps(nf, _mm256_set1_ps(LN2_LO), r);
        let z = _mm256_mul_ps(r, r);
        let mut p = _mm256_set1_ps(P0);
        p = _mm256_fmadd_ps(p, r, _mm256_set1_ps(P1));
        p = _mm256_fmadd_ps(p, r, _mm256_set1_ps(P2));
        p = _mm256_fmadd_ps(p, r, _mm256_set1_ps(P3));
        p = _mm256_fmadd_ps(p, r, _mm256_set1_ps(P4));
        p = _mm256_fmadd_ps(p, r, _mm256_set1_ps(P5));
        let y = _mm256_add_ps(_mm256_fmadd_ps(p, z, r), _mm256_set1_ps(1.0));
        let pow2n = _mm256_castsi256_ps(_mm256_slli_epi32::<23>(_mm256_add_epi32(
            ni,
            _mm256_set1_epi32(127),
        )));
        _mm256_mul_ps(y, pow2n)
    }

    #[target_feature(enable = "avx2,fma")]
    #[inline]
    unsafe fn sigmoid_v(x: __m256) -> __m256 {
        let one = _mm256_set1_ps(1.0);
        let e = exp_v(_mm256_sub_ps(_mm256_setzero_ps(), x));
        _mm256_div_ps(one, _mm256_add_ps(one, e))
    }

    #[target_feature(enable = "avx2,fma")]
    pub(crate) unsafe fn sigmoid_mut(xs: &mut [f32]) {
        let n = xs.len();
        let p = xs.as_mut_ptr();
        let mut i = 0;
        while i + LANES <= n {
            _mm256_storeu_ps(p.add(i), sigmoid_v(_mm256_loadu_ps(p.add(i))));
            i += LANES;
        }
        if i < n {
            let mask = lane_mask(n - i);
            let v = sigmoid_v(_mm256_maskload_ps(p.add(i), mask));
            _mm256_maskstore_ps(p.add(i), mask, v);
        }
    }

    #[target_feature(enable = "avx2,fma")]
    pub(crate) unsafe fn tanh_mut(xs: &mut [f32]) {
        let two = _mm256_set1_ps(2.0);
        let one = _mm256_set1_ps(1.0);
        let n = xs.len();
        let p = xs.as_mut_ptr();
        let mut i = 0;
        while i + LANES <= n {
            let s = sigmoid_v(_mm256_mul_ps(two, _mm256_loadu_ps(p.add(i))));
            _mm256_storeu_ps(p.add(i), _mm256_fmsub_ps(two, s, one));
            i += LANES;
        }
        if i < n {
            let mask = lane_mask(n - i);
            let s = sigmoid_v(_mm256_mul_ps(two, _mm256_maskload_ps(p.add(i), mask)));
            _mm256_maskstore_ps(p.add(i), mask, _mm256_fmsub_ps(two, s, one));
        }
    }
}
