//! Scalar math and a thin sgemm wrapper.
//!
//! `exp` is a branch-free polynomial so elementwise loops vectorize; it gives
//! identical results with and without the `std` feature.

use alloc::vec;
use alloc::vec::Vec;

const LOG2E: f32 = core::f32::consts::LOG2_E;
const LN2_HI: f32 = 0.693_145_75;
const LN2_LO: f32 = 1.428_606_8e-6;
const ROUND_MAGIC: f32 = 12_582_912.0; // 1.5 * 2^23

/// `e^x`, relative error below 2e-7 over the finite range.
#[inline(always)]
pub fn exp(x: f32) -> f32 {
    let x = x.clamp(-87.3, 88.3);
    let n = (x * LOG2E + ROUND_MAGIC) - ROUND_MAGIC;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    p * f32::from_bits(((n as i32 + 127) << 23) as u32)
}

#[inline(always)]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + exp(-x))
}

#[inline(always)]
pub fn tanh(x: f32) -> f32 {
    2.0 * sigmoid(2.0 * x) - 1.0
}

#[inline]
pub fn sqrt(x: f32) -> f32 {
    libm::sqrtf(x)
}

#[inline]
pub fn ln(x: f32) -> f32 {
    libm::logf(x)
}

/// Maximum with eight independent lanes; `-inf` for an empty slice.
#[inline]
pub fn lane_max(xs: &[f32]) -> f32 {
    let mut acc = [f32::NEG_INFINITY; 8];
    let chunks = xs.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a = if v > *a { v } else { *a };
        }
    }
    let mut m = acc.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    for &v in tail {
        m = m.max(v);
    }
    m
}

/// Sum with eight independent accumulators (vectorizes; fixed order).
#[inline]
pub fn lane_sum(xs: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = xs.chunks_exact(8);
    let rest = chunks.remainder();
    for c in chunks {
        for l in 0..8 {
            acc[l] += c[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for &v in rest {
        s += v;
    }
    s
}

/// Dot product with eight independent accumulators.
#[inline]
pub fn lane_dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `C = alpha * A·B + beta * C` for row/column-strided operands.
///
/// A is `m×k`, B is `k×n`, C is `m×n`. Strides are in elements and must be
/// non-negative; bounds are checked before entering the kernel.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * rsc + j * csc] *= beta;
            }
        }
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: A out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: B out of bounds");
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm: C out of bounds");
    if rsb == 1 && csb != 1 && m >= 4 {
        // The kernel packs column-major B far slower than row-major B; a
        // blocked copy costs k*n moves against 2*m*k*n flops.
        let bt = transpose_to_row_major(b, k, n, csb);
        return gemm(m, k, n, alpha, a, (rsa, csa), &bt, (n, 1), beta, c, (rsc, csc));
    }
    // SAFETY: every index the kernel touches was bounds-checked above, and C
    // is borrowed mutably so it cannot alias A or B.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Copies a column-major `k×n` matrix (column stride `ld`) into row-major order.
fn transpose_to_row_major(b: &[f32], k: usize, n: usize, ld: usize) -> Vec<f32> {
    const TILE: usize = 32;
    let mut out = vec![0.0f32; k * n];
    for j0 in (0..n).step_by(TILE) {
        for p0 in (0..k).step_by(TILE) {
            for j in j0..(j0 + TILE).min(n) {
                let col = &b[j * ld..];
                for p in p0..(p0 + TILE).min(k) {
                    out[p * n + j] = col[p];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposed_operand() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.5, -1.0, 2.0, 0.0, 1.0]; // stored 2x3, used as B^T (3x2)
        let mut c = [0.0f32; 4];
        gemm(2, 3, 2, 1.0, &a, (3, 1), &b, (1, 3), 0.0, &mut c, (2, 1));
        // row0: [1,2,3]·[1,0.5,-1] = -1 ; [1,2,3]·[2,0,1] = 5
        // row1: [4,5,6]·[1,0.5,-1] = 0.5 ; [4,5,6]·[2,0,1] = 14
        assert_eq!(c, [-1.0, 5.0, 0.5, 14.0]);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(100.0), 1.0);
        assert!(sigmoid(-100.0) >= 0.0 && sigmoid(-100.0) < 1e-37);
    }

    #[test]
    fn exp_matches_libm() {
        let mut x = -80.0f32;
        while x < 80.0 {
            let (a, b) = (exp(x), libm::expf(x));
            assert!(((a - b) / b).abs() < 4e-7, "exp({x}) = {a}, libm {b}");
            x += 0.0137;
        }
        assert!(exp(f32::NAN).is_nan());
    }

    #[test]
    fn tanh_close_to_libm() {
        for i in -400..400 {
            let x = i as f32 * 0.02;
            assert!((tanh(x) - libm::tanhf(x)).abs() < 1e-6);
        }
    }

    #[test]
    fn lane_reductions_match_naive() {
        let xs: alloc::vec::Vec<f32> = (0..37).map(|i| i as f32 * 0.25).collect();
        assert_eq!(lane_sum(&xs), xs.iter().sum::<f32>());
        assert_eq!(lane_dot(&xs, &xs), xs.iter().map(|v| v * v).sum::<f32>());
    }
}
