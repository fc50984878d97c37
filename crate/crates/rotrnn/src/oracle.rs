//! Slow dense reference implementations.
//!
//! Everything here materializes matrices that the production code
//! deliberately never builds. These functions exist so that tests and the
//! acceptance suite can check the fast structured kernels against an
//! independent code path; do not call them from anything performance
//! sensitive.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};

use crate::error::Result;
use crate::layer::{gamma_of, xi_of, HeadParams, RotRNNLayerParams};
use crate::rotor::{make_p, RotationFactor};

/// Dense block-diagonal rotation `Θ(k·θ)`.
pub fn dense_theta(thetas: &ArrayView1<f64>, k: f64) -> Array2<f64> {
    let n = 2 * thetas.len();
    let mut out = Array2::zeros((n, n));
    for (i, t) in thetas.iter().enumerate() {
        let (sin, cos) = (k * t).sin_cos();
        out[[2 * i, 2 * i]] = cos;
        out[[2 * i, 2 * i + 1]] = -sin;
        out[[2 * i + 1, 2 * i]] = sin;
        out[[2 * i + 1, 2 * i + 1]] = cos;
    }
    out
}

/// Dense rotation `A = P·Θ·Pᵀ` from a factored representation.
pub fn dense_rotation(rf: &RotationFactor) -> Array2<f64> {
    let theta = dense_theta(&rf.thetas().view(), 1.0);
    rf.p().dot(&theta).dot(&rf.p().t())
}

/// Dense rotation assembled directly from head parameters.
pub fn dense_head_rotation(head: &HeadParams) -> Result<Array2<f64>> {
    let p = make_p(&head.m.view())?;
    let theta = dense_theta(&head.thetas.view(), 1.0);
    Ok(p.dot(&theta).dot(&p.t()))
}

/// Naive dense recurrence `x_t = γ·A·x_{t-1} + ξ·B·u_t` with `A` assembled
/// explicitly. Independent of both the scan path and the convolutional path.
pub fn dense_head_recurrence(head: &HeadParams, u: &ArrayView2<f64>, c: f64) -> Result<Array2<f64>> {
    head.validate()?;
    let a = dense_head_rotation(head)?;
    let gamma = gamma_of(head.gamma_log);
    let xi = xi_of(head, c)?;
    let t_len = u.nrows();
    let d_h = head.d_h();
    let mut states = Array2::zeros((t_len, d_h));
    let mut x = Array1::zeros(d_h);
    for t in 0..t_len {
        let drive = head.b.dot(&u.row(t)) * xi;
        x = a.dot(&x) * gamma + &drive;
        states.row_mut(t).assign(&x);
    }
    Ok(states)
}

/// Single big block-diagonal recurrence over all heads: assembles
/// `A = blockdiag(γ⁽ʰ⁾A⁽ʰ⁾)` and the stacked, normalized input matrix, runs
/// the dense recurrence, then applies the output mixing and skip.
///
/// Returns `(outputs (T, D_u), concatenated states (T, D_x))`.
pub fn dense_block_layer_forward(
    params: &RotRNNLayerParams,
    u: &ArrayView2<f64>,
    c: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    params.validate()?;
    let d_x = params.d_x();
    let d_h = params.d_h();
    let t_len = u.nrows();

    let mut big_a = Array2::zeros((d_x, d_x));
    let mut big_b = Array2::zeros((d_x, params.d_u()));
    for (h, head) in params.heads.iter().enumerate() {
        let a = dense_head_rotation(head)?;
        let gamma = gamma_of(head.gamma_log);
        let xi = xi_of(head, c)?;
        let lo = h * d_h;
        let hi = lo + d_h;
        big_a.slice_mut(s![lo..hi, lo..hi]).assign(&(&a * gamma));
        big_b.slice_mut(s![lo..hi, ..]).assign(&(&head.b * xi));
    }

    let mut states = Array2::zeros((t_len, d_x));
    let mut x = Array1::zeros(d_x);
    for t in 0..t_len {
        x = big_a.dot(&x) + big_b.dot(&u.row(t));
        states.row_mut(t).assign(&x);
    }

    let mut y = states.dot(&params.c_out.t());
    for t in 0..t_len {
        let skip = &params.d_skip * &u.row(t);
        let mut row = y.row_mut(t);
        row += &skip;
    }
    Ok((y, states))
}
