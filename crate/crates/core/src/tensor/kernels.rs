//! Raw numeric kernels behind the graph ops. Matrix products go through
//! `matrixmultiply::dgemm`; larger products are split into column blocks that
//! rayon may run in parallel. Every output element is produced by exactly one
//! sequential inner reduction, so results are identical for any thread count.

use rayon::prelude::*;

const PAR_FLOP_THRESHOLD: usize = 1 << 22;
const PAR_COL_BLOCK: usize = 512;

/// C[m,n] = A[m,k] * B[k,n] + beta * C
pub fn mm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    gemm_blocked(m, k, n, a, k, 1, b, n, 1, c, beta);
}

/// C[m,n] = A^T * B + beta * C, with A supplied in [k,m] layout.
pub fn mm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    gemm_blocked(m, k, n, a, 1, m, b, n, 1, c, beta);
}

/// C[m,n] = A * B^T + beta * C, with B supplied in [n,k] layout.
pub fn mm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    gemm_blocked(m, k, n, a, k, 1, b, 1, k, c, beta);
}

#[allow(clippy::too_many_arguments)]
fn gemm_blocked(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        } else if beta != 1.0 {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    let flops = m * k * n;
    if flops >= PAR_FLOP_THRESHOLD && n >= 2 * PAR_COL_BLOCK {
        // Column blocks of C are disjoint; each block is one sequential dgemm.
        let blocks: Vec<(usize, usize)> = (0..n)
            .step_by(PAR_COL_BLOCK)
            .map(|j0| (j0, (j0 + PAR_COL_BLOCK).min(n)))
            .collect();
        // SAFETY: blocks index disjoint column ranges of C.
        let c_ptr = c.as_mut_ptr() as usize;
        blocks.par_iter().for_each(|&(j0, j1)| {
            let c_ptr = c_ptr as *mut f64;
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    j1 - j0,
                    1.0,
                    a.as_ptr(),
                    rsa as isize,
                    csa as isize,
                    b.as_ptr().add(j0 * csb),
                    rsb as isize,
                    csb as isize,
                    beta,
                    c_ptr.add(j0),
                    n as isize,
                    1,
                );
            }
        });
    } else {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// Unfold one item for conv: col[(ci*k + kk)*l_out + t] = x[ci, t*stride + kk - pad_l],
/// zero where the tap falls outside [0, l_in).
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &[f64],
    ci: usize,
    l_in: usize,
    k: usize,
    stride: usize,
    pad_l: usize,
    l_out: usize,
    col: &mut [f64],
) {
    debug_assert_eq!(x.len(), ci * l_in);
    debug_assert_eq!(col.len(), ci * k * l_out);
    for c in 0..ci {
        let xrow = &x[c * l_in..(c + 1) * l_in];
        for kk in 0..k {
            let crow = &mut col[(c * k + kk) * l_out..(c * k + kk + 1) * l_out];
            for (t, slot) in crow.iter_mut().enumerate() {
                let pos = t * stride + kk;
                *slot = if pos >= pad_l && pos - pad_l < l_in {
                    xrow[pos - pad_l]
                } else {
                    0.0
                };
            }
        }
    }
}

/// Scatter-add the col gradient back onto the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn col2im_add(
    dcol: &[f64],
    ci: usize,
    l_in: usize,
    k: usize,
    stride: usize,
    pad_l: usize,
    l_out: usize,
    dx: &mut [f64],
) {
    debug_assert_eq!(dx.len(), ci * l_in);
    for c in 0..ci {
        let xrow = &mut dx[c * l_in..(c + 1) * l_in];
        for kk in 0..k {
            let crow = &dcol[(c * k + kk) * l_out..(c * k + kk + 1) * l_out];
            for (t, &g) in crow.iter().enumerate() {
                let pos = t * stride + kk;
                if pos >= pad_l && pos - pad_l < l_in {
                    xrow[pos - pad_l] += g;
                }
            }
        }
    }
}

/// Stable softmax over contiguous rows of width `n`.
pub fn softmax_rows(x: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(x.len() % n, 0);
    for (xr, or) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in or.iter_mut().zip(xr) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        or.iter_mut().for_each(|o| *o *= inv);
    }
}

/// Stable log-softmax over contiguous rows of width `n`.
pub fn log_softmax_rows(x: &[f64], n: usize, out: &mut [f64]) {
    for (xr, or) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in xr {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = v - lse;
        }
    }
}

pub fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Chebyshev polynomial of the first kind T_m(c).
pub fn chebyshev_t(m: u32, c: f64) -> f64 {
    match m {
        0 => 1.0,
        1 => c,
        _ => {
            let (mut prev, mut cur) = (1.0, c);
            for _ in 2..=m {
                let next = 2.0 * c * cur - prev;
                prev = cur;
                cur = next;
            }
            cur
        }
    }
}

/// Chebyshev polynomial of the second kind U_m(c).
pub fn chebyshev_u(m: u32, c: f64) -> f64 {
    match m {
        0 => 1.0,
        1 => 2.0 * c,
        _ => {
            let (mut prev, mut cur) = (1.0, 2.0 * c);
            for _ in 2..=m {
                let next = 2.0 * c * cur - prev;
                prev = cur;
                cur = next;
            }
            cur
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_mm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                for j in 0..n {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (7, 5, 9);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.3 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * 0.1 + 1.0).collect();
        let want = naive_mm(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        mm_nn(m, k, n, &a, &b, &mut c, 0.0);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // A^T variant: store A as [k,m].
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c2 = vec![0.0; m * n];
        mm_tn(m, k, n, &at, &b, &mut c2, 0.0);
        for (x, y) in c2.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // B^T variant: store B as [n,k].
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c3 = vec![0.0; m * n];
        mm_nt(m, k, n, &a, &bt, &mut c3, 0.0);
        for (x, y) in c3.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_beta_accumulates() {
        let a = [1.0, 2.0];
        let b = [3.0, 4.0];
        let mut c = vec![10.0];
        mm_nn(1, 2, 1, &a, &b, &mut c, 1.0);
        assert_eq!(c[0], 10.0 + 11.0);
    }

    #[test]
    fn im2col_col2im_roundtrip_shapes() {
        // x = [1,2,3,4], k=2, stride=2, no pad -> columns [[1,3],[2,4]]
        let x = [1.0, 2.0, 3.0, 4.0];
        let mut col = vec![0.0; 2 * 2];
        im2col(&x, 1, 4, 2, 2, 0, 2, &mut col);
        assert_eq!(col, vec![1.0, 3.0, 2.0, 4.0]);

        let mut dx = vec![0.0; 4];
        col2im_add(&col, 1, 4, 2, 2, 0, 2, &mut dx);
        assert_eq!(dx, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = [1.0, 2.0, 3.0, -5.0, 0.0, 5.0];
        let mut out = vec![0.0; 6];
        softmax_rows(&x, 3, &mut out);
        for row in out.chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn chebyshev_identities() {
        // T_2(c) = 2c^2 - 1, U_1(c) = 2c
        for &c in &[-0.9, -0.3, 0.0, 0.4, 1.0] {
            assert!((chebyshev_t(2, c) - (2.0 * c * c - 1.0)).abs() < 1e-12);
            assert!((chebyshev_u(1, c) - 2.0 * c).abs() < 1e-12);
            // T_4(c) = 8c^4 - 8c^2 + 1
            let t4 = 8.0 * c.powi(4) - 8.0 * c * c + 1.0;
            assert!((chebyshev_t(4, c) - t4).abs() < 1e-12);
        }
    }
}
