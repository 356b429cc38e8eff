//! Dense matrix products. Each output element is accumulated in a fixed
//! order regardless of how rows are distributed over threads, so results
//! are bit-identical for any thread count.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Below this many multiply-adds the rayon dispatch costs more than it saves.
const PARALLEL_THRESHOLD: usize = 1 << 16;

fn parallel(work: usize, rows: usize) -> bool {
    work >= PARALLEL_THRESHOLD && rows > 1 && rayon::current_num_threads() > 1
}

/// `c_row += sum_p a_row[p] * b[p, :]`, `p` ascending.
#[inline]
fn axpy_rows<S: Scalar>(c_row: &mut [S], a_row: &[S], b: &[S], n: usize) {
    for (p, &a_ip) in a_row.iter().enumerate() {
        if a_ip == S::zero() {
            continue;
        }
        let b_row = &b[p * n..p * n + c_row.len()];
        for j in 0..c_row.len() {
            c_row[j] += a_ip * b_row[j];
        }
    }
}

fn transpose<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut t = vec![S::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = x[i * cols + j];
        }
    }
    t
}

/// `c[m,n] = a[m,k] * b[k,n]`
pub(crate) fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    let row = |(i, c_row): (usize, &mut [S])| axpy_rows(c_row, &a[i * k..(i + 1) * k], b, n);
    if parallel(m * k * n, m) {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    c
}

/// `c[m,k] = g[m,n] * b[k,n]^T`
pub(crate) fn matmul_bt<S: Scalar>(g: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let bt = transpose(b, k, n);
    matmul(g, &bt, m, n, k)
}

/// `c[k,n] = a[m,k]^T * g[m,n]`
pub(crate) fn matmul_at<S: Scalar>(a: &[S], g: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let at = transpose(a, m, k);
    matmul(&at, g, k, m, n)
}
