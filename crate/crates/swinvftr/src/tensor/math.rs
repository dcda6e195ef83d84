//! Raw numeric kernels shared by the tape ops.
//!
//! All kernels are deterministic under rayon: parallel tasks own disjoint
//! output slices and each output element is accumulated by exactly one task in
//! a fixed order, so results are bit-identical across runs and thread counts.

use rayon::prelude::*;

/// GELU tanh approximation constant sqrt(2/pi).
pub const SQRT_2_OVER_PI: f32 = 0.797_884_56;
const GELU_CUBIC: f32 = 0.044_715;

/// Below this many multiply-adds a kernel runs serially; rayon overhead
/// dominates for tiny shapes.
const PAR_THRESHOLD: usize = 32_768;

pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

pub fn gelu_grad(x: f32) -> f32 {
    let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}

/// C = op(A) * op(B) with optional accumulation into `c`.
///
/// Layouts (row-major): `op(A)` is `m x k`, `op(B)` is `k x n`, `c` is `m x n`.
/// `ta`/`tb` select whether the stored buffer is the transpose of the operand.
pub fn gemm(
    c: &mut [f32],
    a: &[f32],
    b: &[f32],
    m: usize,
    n: usize,
    k: usize,
    ta: bool,
    tb: bool,
    accumulate: bool,
) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    if !accumulate {
        c.fill(0.0);
    }
    let work = m * n * k;
    let row_task = |i: usize, c_row: &mut [f32]| match (ta, tb) {
        (false, false) => {
            // C[i,:] += sum_p A[i,p] * B[p,:]
            for p in 0..k {
                let av = a[i * k + p];
                if av != 0.0 {
                    let b_row = &b[p * n..(p + 1) * n];
                    for (cv, bv) in c_row.iter_mut().zip(b_row) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            // C[i,j] += dot(A[i,:], B[j,:])
            let a_row = &a[i * k..(i + 1) * k];
            for (j, cv) in c_row.iter_mut().enumerate() {
                let b_row = &b[j * k..(j + 1) * k];
                let mut acc = 0.0f32;
                for (av, bv) in a_row.iter().zip(b_row) {
                    acc += av * bv;
                }
                *cv += acc;
            }
        }
        (true, false) => {
            // A stored k x m: C[i,:] += sum_p A[p,i] * B[p,:]
            for p in 0..k {
                let av = a[p * m + i];
                if av != 0.0 {
                    let b_row = &b[p * n..(p + 1) * n];
                    for (cv, bv) in c_row.iter_mut().zip(b_row) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (true, true) => {
            for (j, cv) in c_row.iter_mut().enumerate() {
                let mut acc = 0.0f32;
                for p in 0..k {
                    acc += a[p * m + i] * b[j * k + p];
                }
                *cv += acc;
            }
        }
    };
    if work < PAR_THRESHOLD || m < 2 {
        for (i, c_row) in c.chunks_exact_mut(n).enumerate() {
            row_task(i, c_row);
        }
    } else {
        c.par_chunks_exact_mut(n)
            .enumerate()
            .for_each(|(i, c_row)| row_task(i, c_row));
    }
}

/// Batched gemm over leading dimension: a `[bt, m, k]`, b `[bt, k, n]`
/// (shapes before the transpose flags are applied).
#[allow(clippy::too_many_arguments)]
pub fn bmm(
    c: &mut [f32],
    a: &[f32],
    b: &[f32],
    batch: usize,
    m: usize,
    n: usize,
    k: usize,
    ta: bool,
    tb: bool,
    accumulate: bool,
) {
    let (ca, cb, cc) = (m * k, k * n, m * n);
    let work = batch * m * n * k;
    let task = |bi: usize, c_b: &mut [f32]| {
        gemm(
            c_b,
            &a[bi * ca..(bi + 1) * ca],
            &b[bi * cb..(bi + 1) * cb],
            m,
            n,
            k,
            ta,
            tb,
            accumulate,
        );
    };
    if work < PAR_THRESHOLD || batch < 2 {
        for (bi, c_b) in c.chunks_exact_mut(cc).enumerate() {
            task(bi, c_b);
        }
    } else {
        c.par_chunks_exact_mut(cc)
            .enumerate()
            .for_each(|(bi, c_b)| task(bi, c_b));
    }
}

/// Softmax along `axis` of a tensor with the given shape, max-subtracted.
pub fn softmax(data: &[f32], shape: &[usize], axis: usize) -> Vec<f32> {
    let axis_len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0f32; data.len()];
    let lane = |out_chunk: &mut [f32], src: &[f32]| {
        for i in 0..inner {
            let at = |j: usize| j * inner + i;
            let mut max = f32::NEG_INFINITY;
            for j in 0..axis_len {
                max = max.max(src[at(j)]);
            }
            let mut sum = 0.0f64;
            for j in 0..axis_len {
                let e = (src[at(j)] - max).exp();
                out_chunk[at(j)] = e;
                sum += e as f64;
            }
            let inv = (1.0 / sum) as f32;
            for j in 0..axis_len {
                out_chunk[at(j)] *= inv;
            }
        }
    };
    let chunk = axis_len * inner;
    if data.len() < PAR_THRESHOLD || outer < 2 {
        for (o, out_chunk) in out.chunks_exact_mut(chunk).enumerate() {
            lane(out_chunk, &data[o * chunk..(o + 1) * chunk]);
        }
    } else {
        out.par_chunks_exact_mut(chunk)
            .enumerate()
            .for_each(|(o, out_chunk)| {
                lane(out_chunk, &data[o * chunk..(o + 1) * chunk]);
            });
    }
    out
}

/// Backward of softmax: ds_j = s_j * (g_j - sum_i g_i s_i), per lane.
pub fn softmax_backward(
    out: &[f32],
    grad_out: &[f32],
    shape: &[usize],
    axis: usize,
) -> Vec<f32> {
    let axis_len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut dx = vec![0.0f32; out.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut dot = 0.0f64;
            for j in 0..axis_len {
                let idx = base + j * inner;
                dot += (grad_out[idx] as f64) * (out[idx] as f64);
            }
            for j in 0..axis_len {
                let idx = base + j * inner;
                dx[idx] = out[idx] * (grad_out[idx] - dot as f32);
            }
        }
    }
    dx
}

/// Per-lane mean and inverse stddev over groups of `len` contiguous values.
/// Two-pass in f64.
pub fn mean_invstd(slice: &[f32], eps: f32) -> (f32, f32) {
    let n = slice.len() as f64;
    let mut sum = 0.0f64;
    for &v in slice {
        sum += v as f64;
    }
    let mean = sum / n;
    let mut var = 0.0f64;
    for &v in slice {
        let d = v as f64 - mean;
        var += d * d;
    }
    var /= n;
    let inv_std = 1.0 / (var + eps as f64).sqrt();
    (mean as f32, inv_std as f32)
}

/// Normalization backward for one lane sharing a single mean/var:
/// dx = inv_std/n * (n*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat)).
pub fn norm_lane_backward(
    x: &[f32],
    dxhat: &[f32],
    mean: f32,
    inv_std: f32,
    dx: &mut [f32],
) {
    let n = x.len() as f64;
    let mut sum_dxhat = 0.0f64;
    let mut sum_dxhat_xhat = 0.0f64;
    for (&xv, &dv) in x.iter().zip(dxhat) {
        let xhat = ((xv - mean) * inv_std) as f64;
        sum_dxhat += dv as f64;
        sum_dxhat_xhat += dv as f64 * xhat;
    }
    for ((&xv, &dv), out) in x.iter().zip(dxhat).zip(dx.iter_mut()) {
        let xhat = ((xv - mean) * inv_std) as f64;
        let v = (inv_std as f64 / n) * (n * dv as f64 - sum_dxhat - xhat * sum_dxhat_xhat);
        *out += v as f32;
    }
}

/// Sum of an f32 slice accumulated in f64.
pub fn sum_f64(data: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for &v in data {
        acc += v as f64;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_gemm(
        a: &[f32],
        b: &[f32],
        m: usize,
        n: usize,
        k: usize,
        ta: bool,
        tb: bool,
    ) -> Vec<f32> {
        let mut c = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    let av = if ta { a[p * m + i] } else { a[i * k + p] };
                    let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                    acc += av * bv;
                }
                c[i * n + j] = acc;
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_all_flag_combinations() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (m, n, k) = (5, 7, 4);
        for &(ta, tb) in &[(false, false), (false, true), (true, false), (true, true)] {
            let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut c = vec![0.0f32; m * n];
            gemm(&mut c, &a, &b, m, n, k, ta, tb, false);
            let expect = naive_gemm(&a, &b, m, n, k, ta, tb);
            for (x, y) in c.iter().zip(&expect) {
                assert!((x - y).abs() < 1e-5, "{x} vs {y} ({ta},{tb})");
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let x = vec![0.3, -1.0, 2.5, 0.0, 0.0, 0.0];
        let s = softmax(&x, &[2, 3], 1);
        assert!((s[0] + s[1] + s[2] - 1.0).abs() < 1e-6);
        assert!((s[3] + s[4] + s[5] - 1.0).abs() < 1e-6);
        let shifted: Vec<f32> = x.iter().map(|v| v + 1000.0).collect();
        let s2 = softmax(&shifted, &[2, 3], 1);
        for (a, b) in s.iter().zip(&s2) {
            assert!((a - b).abs() < 1e-6);
            assert!(a.is_finite());
        }
    }

    #[test]
    fn gelu_zero_and_symmetry() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_192).abs() < 1e-5);
        // derivative at 0 is 0.5
        assert!((gelu_grad(0.0) - 0.5).abs() < 1e-7);
    }
}
