//! Small dense linear-algebra kernels: norms, LU factorization, and
//! deterministic parallel matrix products.
//!
//! Matrix products chunk the output rows (or the reduction dimension) into
//! fixed-size blocks and combine partial results in block order, so results
//! are bit-identical no matter how many worker threads run.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{numeric_err, Result};

/// Row-chunk size for the parallel GEMM helpers. Fixed so that outputs do
/// not depend on the thread count.
const ROW_CHUNK: usize = 512;

pub fn identity(n: usize) -> Array2<f64> {
    Array2::eye(n)
}

/// Maximum absolute column sum.
pub fn one_norm(a: &ArrayView2<f64>) -> f64 {
    let mut best = 0.0f64;
    for col in a.columns() {
        let s: f64 = col.iter().map(|v| v.abs()).sum();
        best = best.max(s);
    }
    best
}

/// Maximum absolute entry.
pub fn max_abs(a: &ArrayView2<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Frobenius norm.
pub fn fro_norm(a: &ArrayView2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `C = A · B`, chunking rows of `A` across the thread pool when `A` is tall.
pub fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    assert_eq!(
        a.ncols(),
        b.nrows(),
        "matmul shape mismatch: ({}, {}) x ({}, {})",
        a.nrows(),
        a.ncols(),
        b.nrows(),
        b.ncols()
    );
    let m = a.nrows();
    if m <= ROW_CHUNK {
        return a.dot(&b);
    }
    let mut out = Array2::zeros((m, b.ncols()));
    let row_blocks: Vec<(usize, Array2<f64>)> = (0..m)
        .step_by(ROW_CHUNK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| {
            let stop = (start + ROW_CHUNK).min(m);
            (start, a.slice(s![start..stop, ..]).dot(&b))
        })
        .collect();
    for (start, block) in row_blocks {
        let stop = start + block.nrows();
        out.slice_mut(s![start..stop, ..]).assign(&block);
    }
    out
}

/// `C = Aᵀ · B` where the shared (reduction) dimension is the row count.
///
/// Partial products over row blocks are summed in block order, keeping the
/// reduction deterministic under any thread schedule.
pub fn matmul_tn(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    assert_eq!(
        a.nrows(),
        b.nrows(),
        "matmul_tn shape mismatch: ({}, {})ᵀ x ({}, {})",
        a.nrows(),
        a.ncols(),
        b.nrows(),
        b.ncols()
    );
    let n = a.nrows();
    if n <= ROW_CHUNK {
        return a.t().dot(&b);
    }
    let partials: Vec<Array2<f64>> = (0..n)
        .step_by(ROW_CHUNK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| {
            let stop = (start + ROW_CHUNK).min(n);
            a.slice(s![start..stop, ..])
                .t()
                .dot(&b.slice(s![start..stop, ..]))
        })
        .collect();
    let mut out = Array2::zeros((a.ncols(), b.ncols()));
    for p in partials {
        out += &p;
    }
    out
}

/// LU factorization with partial pivoting, stored packed (L below the
/// diagonal with unit diagonal implied, U on and above).
pub struct LuFactors {
    lu: Array2<f64>,
    pivots: Vec<usize>,
    sign: f64,
}

pub fn lu_factor(a: &ArrayView2<f64>) -> Result<LuFactors> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "lu_factor requires a square matrix");
    let mut lu = a.to_owned();
    let mut pivots = vec![0usize; n];
    let mut sign = 1.0;
    for k in 0..n {
        let mut p = k;
        let mut best = lu[[k, k]].abs();
        for i in (k + 1)..n {
            let v = lu[[i, k]].abs();
            if v > best {
                best = v;
                p = i;
            }
        }
        if best == 0.0 || !best.is_finite() {
            return Err(numeric_err(format!(
                "singular or non-finite pivot at column {k}"
            )));
        }
        pivots[k] = p;
        if p != k {
            sign = -sign;
            for j in 0..n {
                lu.swap([k, j], [p, j]);
            }
        }
        let pivot = lu[[k, k]];
        for i in (k + 1)..n {
            let factor = lu[[i, k]] / pivot;
            lu[[i, k]] = factor;
            for j in (k + 1)..n {
                lu[[i, j]] -= factor * lu[[k, j]];
            }
        }
    }
    Ok(LuFactors { lu, pivots, sign })
}

impl LuFactors {
    /// Solve `A · X = B` for `X` (B has one column per right-hand side).
    pub fn solve_matrix(&self, b: &ArrayView2<f64>) -> Array2<f64> {
        let n = self.lu.nrows();
        assert_eq!(b.nrows(), n, "rhs row count must match factor size");
        let mut x = b.to_owned();
        for k in 0..n {
            let p = self.pivots[k];
            if p != k {
                for j in 0..x.ncols() {
                    x.swap([k, j], [p, j]);
                }
            }
        }
        // forward substitution (unit lower triangle)
        for k in 0..n {
            for i in (k + 1)..n {
                let f = self.lu[[i, k]];
                if f != 0.0 {
                    let row_k = x.row(k).to_owned();
                    let mut row_i = x.row_mut(i);
                    row_i.zip_mut_with(&row_k, |xi, xk| *xi -= f * xk);
                }
            }
        }
        // back substitution
        for k in (0..n).rev() {
            let d = self.lu[[k, k]];
            x.row_mut(k).mapv_inplace(|v| v / d);
            for i in 0..k {
                let f = self.lu[[i, k]];
                if f != 0.0 {
                    let row_k = x.row(k).to_owned();
                    let mut row_i = x.row_mut(i);
                    row_i.zip_mut_with(&row_k, |xi, xk| *xi -= f * xk);
                }
            }
        }
        x
    }

    pub fn det(&self) -> f64 {
        let n = self.lu.nrows();
        let mut d = self.sign;
        for k in 0..n {
            d *= self.lu[[k, k]];
        }
        d
    }
}

/// Determinant via LU with partial pivoting.
pub fn det(a: &ArrayView2<f64>) -> Result<f64> {
    if a.iter().all(|v| *v == 0.0) && a.nrows() > 0 {
        return Ok(0.0);
    }
    match lu_factor(a) {
        Ok(f) => Ok(f.det()),
        // an exactly singular matrix has determinant zero
        Err(_) => Ok(0.0),
    }
}

/// Apply independent 2x2 rotation blocks to interleaved pairs of `x`:
/// `(x0, x1) -> (x0·cos - x1·sin, x0·sin + x1·cos)` per block.
pub(crate) fn rotate_pairs_into(cos: &[f64], sin: &[f64], x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(x.len(), 2 * cos.len());
    debug_assert_eq!(x.len(), out.len());
    for i in 0..cos.len() {
        let (a, b) = (x[2 * i], x[2 * i + 1]);
        out[2 * i] = a * cos[i] - b * sin[i];
        out[2 * i + 1] = a * sin[i] + b * cos[i];
    }
}

/// In-place variant of [`rotate_pairs_into`].
pub(crate) fn rotate_pairs_inplace(cos: &[f64], sin: &[f64], x: &mut [f64]) {
    debug_assert_eq!(x.len(), 2 * cos.len());
    for i in 0..cos.len() {
        let (a, b) = (x[2 * i], x[2 * i + 1]);
        x[2 * i] = a * cos[i] - b * sin[i];
        x[2 * i + 1] = a * sin[i] + b * cos[i];
    }
}

/// Elementwise map over a standard-layout matrix, row blocks fanned across
/// the pool. Purely elementwise, so chunking cannot change results.
pub(crate) fn par_map(a: &ArrayView2<f64>, f: impl Fn(f64) -> f64 + Sync) -> Array2<f64> {
    let (rows, cols) = a.dim();
    let mut out = Array2::zeros((rows, cols));
    let src = a.as_standard_layout();
    let src_slice = src.as_slice().expect("standard layout");
    out.as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(ROW_CHUNK * cols.max(1))
        .zip(src_slice.par_chunks(ROW_CHUNK * cols.max(1)))
        .for_each(|(dst, src)| {
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d = f(*s);
            }
        });
    out
}

pub fn l2_norm(x: &Array1<f64>) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Mean over axis 0 with each column treated independently.
pub fn column_mean(a: &ArrayView2<f64>) -> Array1<f64> {
    a.mean_axis(Axis(0)).expect("non-empty input")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn lu_solves_small_system() {
        let a = array![[4.0, 2.0], [1.0, 3.0]];
        let b = array![[10.0], [10.0]];
        let f = lu_factor(&a.view()).unwrap();
        let x = f.solve_matrix(&b.view());
        assert_abs_diff_eq!(x[[0, 0]], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(x[[1, 0]], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn det_matches_closed_form() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        assert_abs_diff_eq!(det(&a.view()).unwrap(), -2.0, epsilon = 1e-12);
        let z = Array2::<f64>::zeros((3, 3));
        assert_eq!(det(&z.view()).unwrap(), 0.0);
    }

    #[test]
    fn parallel_matmul_matches_dot() {
        let m = 1200;
        let a = Array2::from_shape_fn((m, 17), |(i, j)| ((i * 31 + j * 7) % 13) as f64 - 6.0);
        let b = Array2::from_shape_fn((17, 9), |(i, j)| ((i * 5 + j * 11) % 7) as f64 * 0.5);
        let c1 = matmul(a.view(), b.view());
        let c2 = a.dot(&b);
        assert_eq!(c1, c2);
        let d1 = matmul_tn(a.view(), a.view());
        let d2 = a.t().dot(&a);
        assert_abs_diff_eq!(max_abs(&(&d1 - &d2).view()), 0.0, epsilon = 1e-9);
    }
}
