//! Matrix kernels with `f64` accumulation.
//!
//! Every output row is reduced in a fixed order regardless of how rows are
//! distributed over threads, so results are bit-identical between serial and
//! parallel execution.

use rayon::prelude::*;

const COL_BLOCK: usize = 256;
const PAR_THRESHOLD: usize = 1 << 18;

fn gemm_rows(a: &[f32], b: &[f32], k: usize, n: usize, out: &mut [f64]) {
    let rows = out.len() / n;
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + COL_BLOCK).min(n);
        for i in 0..rows {
            let acc = &mut out[i * n + j0..i * n + j1];
            let arow = &a[i * k..(i + 1) * k];
            for (kk, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let av = av as f64;
                let brow = &b[kk * n + j0..kk * n + j1];
                for (o, &bv) in acc.iter_mut().zip(brow) {
                    *o += av * bv as f64;
                }
            }
        }
        j0 = j1;
    }
}

/// `out += A·B` with `A: [m,k]`, `B: [k,n]`, `out: [m,n]`.
pub(crate) fn gemm_acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        let rows_per = (m / rayon::current_num_threads().max(1)).clamp(1, 64);
        out.par_chunks_mut(rows_per * n)
            .zip(a.par_chunks(rows_per * k))
            .for_each(|(o, a_rows)| gemm_rows(a_rows, b, k, n, o));
    } else {
        gemm_rows(a, b, k, n, out);
    }
}

/// `A·B` rounded to `f32`.
pub(crate) fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; m * n];
    gemm_acc(a, b, m, k, n, &mut acc);
    acc.into_iter().map(|v| v as f32).collect()
}

/// `A·Bᵀ` with `B: [n,k]`.
pub(crate) fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let bt = transpose(b, n, k);
    matmul(a, &bt, m, k, n)
}

/// `Aᵀ·B` with `A: [k,m]`.
pub(crate) fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let at = transpose(a, k, m);
    matmul(&at, b, m, k, n)
}

pub(crate) fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f64;
                for kk in 0..k {
                    s += a[i * k + kk] as f64 * b[kk * n + j] as f64;
                }
                out[i * n + j] = s as f32;
            }
        }
        out
    }

    #[test]
    fn blocked_matches_naive_across_block_edges() {
        let (m, k, n) = (70, 33, 600);
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 7 % 13) as f32 - 6.0) * 0.1).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 5 % 11) as f32 - 5.0) * 0.1).collect();
        let got = matmul(&a, &b, m, k, n);
        let want = naive(&a, &b, m, k, n);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-6 * w.abs().max(1.0));
        }
    }

    #[test]
    fn transposed_variants() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // [2,3]
        let b = [1.0, 0.0, 1.0, 2.0, 1.0, 0.0]; // [2,3] as Bᵀ source
        assert_eq!(matmul_nt(&a, &b, 2, 3, 2), vec![4.0, 4.0, 10.0, 13.0]);
        // Aᵀ·B with A = [2,3] treated as [k=2, m=3], B = [2,3]
        let got = matmul_tn(&a, &b, 3, 2, 3);
        assert_eq!(got, vec![9.0, 4.0, 1.0, 12.0, 5.0, 2.0, 15.0, 6.0, 3.0]);
    }
}
