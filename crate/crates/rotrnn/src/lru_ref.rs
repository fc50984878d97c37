//! Reference diagonal complex linear recurrent layer (LRU-style) and the
//! exact embedding of two-dimensional rotation heads into it.
//!
//! The recurrence is `x̃_t = Λ·x̃_{t-1} + B̃·u_t` with `Λ = diag(ν_j e^{iθ_j})`
//! and `y_t = Re(C̃·x̃_t) + d ⊙ u_t`. Complex numbers are stored as explicit
//! real/imaginary parts, which makes the 2x2-block correspondence with a
//! rotation head literal: a head with decay `γ`, angle `θ` and basis `P`
//! maps onto the conjugate eigenvalue pair `γ·e^{±iθ}` with input/output
//! matrices conjugated by the unitary that diagonalizes a 2D rotation.
//!
//! This module is a reference for analysis and testing, not a tuned
//! trainable baseline.

use ndarray::{s, Array1, Array2, ArrayView2};

use crate::error::{contract_err, dim_err, Result};
use crate::layer::{gamma_of, xi_of, RotRNNLayerParams};
use crate::linalg::matmul;
use crate::rotor::make_p;

const SQRT_HALF: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Diagonal complex linear RNN parameters.
#[derive(Debug, Clone)]
pub struct LRUParams {
    /// Eigenvalue magnitudes `ν_j ∈ (0, 1)`.
    pub nus: Array1<f64>,
    /// Eigenvalue phases `θ_j` (radians, unconstrained).
    pub thetas: Array1<f64>,
    /// Input matrix `B̃`, real and imaginary parts, `(N, D_u)`.
    pub b_re: Array2<f64>,
    pub b_im: Array2<f64>,
    /// Output matrix `C̃`, real and imaginary parts, `(D_y, N)`.
    pub c_re: Array2<f64>,
    pub c_im: Array2<f64>,
    /// Real elementwise skip, length `D_y` (= `D_u` here).
    pub d: Array1<f64>,
}

impl LRUParams {
    pub fn n_modes(&self) -> usize {
        self.nus.len()
    }

    pub fn d_u(&self) -> usize {
        self.b_re.ncols()
    }

    pub fn d_y(&self) -> usize {
        self.c_re.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.nus.len();
        if self.thetas.len() != n {
            return Err(dim_err("one phase per eigenvalue required"));
        }
        if self.b_re.dim() != self.b_im.dim() || self.b_re.nrows() != n {
            return Err(dim_err("input matrix parts must be (N, D_u)"));
        }
        if self.c_re.dim() != self.c_im.dim() || self.c_re.ncols() != n {
            return Err(dim_err("output matrix parts must be (D_y, N)"));
        }
        if self.d.len() != self.c_re.nrows() {
            return Err(dim_err("skip length must match the output dimension"));
        }
        if !self.nus.iter().all(|v| (0.0..1.0).contains(v)) {
            return Err(contract_err("eigenvalue magnitudes must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Forward pass plus the largest absolute imaginary residue of `C̃·x̃_t`
/// before the real part is taken. With exact conjugate-pair structure the
/// residue vanishes up to roundoff.
pub fn lru_forward_detailed(params: &LRUParams, u: &ArrayView2<f64>) -> Result<(Array2<f64>, f64)> {
    params.validate()?;
    if u.ncols() != params.d_u() {
        return Err(dim_err(format!(
            "input width {} does not match B̃ width {}",
            u.ncols(),
            params.d_u()
        )));
    }
    let t_len = u.nrows();
    let n = params.n_modes();

    // drive_t = B̃ u_t for all t
    let drive_re = matmul(*u, params.b_re.t());
    let drive_im = matmul(*u, params.b_im.t());

    let cos: Vec<f64> = params
        .nus
        .iter()
        .zip(params.thetas.iter())
        .map(|(v, t)| v * t.cos())
        .collect();
    let sin: Vec<f64> = params
        .nus
        .iter()
        .zip(params.thetas.iter())
        .map(|(v, t)| v * t.sin())
        .collect();

    let mut states_re = Array2::zeros((t_len, n));
    let mut states_im = Array2::zeros((t_len, n));
    let mut re = vec![0.0f64; n];
    let mut im = vec![0.0f64; n];
    for t in 0..t_len {
        for j in 0..n {
            let (r, i) = (re[j], im[j]);
            re[j] = cos[j] * r - sin[j] * i + drive_re[[t, j]];
            im[j] = sin[j] * r + cos[j] * i + drive_im[[t, j]];
        }
        for j in 0..n {
            states_re[[t, j]] = re[j];
            states_im[[t, j]] = im[j];
        }
    }

    // Re(C̃ x̃) = C_re·re - C_im·im; Im(C̃ x̃) = C_re·im + C_im·re
    let mut y = matmul(states_re.view(), params.c_re.t()) - matmul(states_im.view(), params.c_im.t());
    let imag = matmul(states_im.view(), params.c_re.t()) + matmul(states_re.view(), params.c_im.t());
    let max_imag = imag.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    for (mut row, u_row) in y.rows_mut().into_iter().zip(u.rows()) {
        for j in 0..params.d.len() {
            row[j] += params.d[j] * u_row[j];
        }
    }
    Ok((y, max_imag))
}

/// Diagonal complex recurrence with real output `y_t = Re(C̃x̃_t) + d ⊙ u_t`.
pub fn lru_forward(params: &LRUParams, u: &ArrayView2<f64>) -> Result<Array2<f64>> {
    lru_forward_detailed(params, u).map(|(y, _)| y)
}

/// Rescale row `k` of `B̃` by `sqrt(1 - ν_k²)`, the normalization that makes
/// the expected squared state norm converge (as `t → ∞`) under white noise.
pub fn lru_gamma_normalize(params: &LRUParams) -> Result<LRUParams> {
    params.validate()?;
    if !params.nus.iter().all(|v| *v < 1.0) {
        return Err(contract_err("normalization requires ν < 1"));
    }
    let mut out = params.clone();
    for (k, nu) in params.nus.iter().enumerate() {
        let scale = (1.0 - nu * nu).sqrt();
        out.b_re.row_mut(k).mapv_inplace(|v| v * scale);
        out.b_im.row_mut(k).mapv_inplace(|v| v * scale);
    }
    Ok(out)
}

/// Exact embedding of a layer whose heads all have `D_h = 2` into the
/// diagonal complex form.
///
/// Head `h` with decay `γ`, angle `θ` and orthogonal basis `P` becomes the
/// conjugate eigenvalue pair `γ·e^{±iθ}`. Writing `W = ξ·Pᵀ·B` and
/// `C_h = C[:, 2h..2h+2]·P`, the rotation block diagonalizes as
/// `R(θ) = Q·diag(e^{iθ}, e^{-iθ})·Q*` with unitary `Q = [[1, 1], [-i, i]]/√2`,
/// so the embedded rows/columns are `B̃ = Q*·W` and `C̃ = C_h·Q`.
///
/// Returns the LRU parameters together with the block-diagonal orthogonal
/// basis matrix assembled from the per-head `P`.
pub fn embed_rotrnn_as_lru(
    layer: &RotRNNLayerParams,
    c: f64,
) -> Result<(LRUParams, Array2<f64>)> {
    layer.validate()?;
    if layer.d_h() != 2 {
        return Err(contract_err(format!(
            "embedding requires head dimension 2, got {}",
            layer.d_h()
        )));
    }
    let n_heads = layer.n_heads();
    let n = 2 * n_heads;
    let d_u = layer.d_u();

    let mut nus = Array1::zeros(n);
    let mut thetas = Array1::zeros(n);
    let mut b_re = Array2::zeros((n, d_u));
    let mut b_im = Array2::zeros((n, d_u));
    let mut c_re = Array2::zeros((d_u, n));
    let mut c_im = Array2::zeros((d_u, n));
    let mut basis = Array2::zeros((n, n));

    for (h, head) in layer.heads.iter().enumerate() {
        let gamma = gamma_of(head.gamma_log);
        let xi = xi_of(head, c)?;
        let theta = head.thetas[0];
        let p = make_p(&head.m.view())?;

        let w = p.t().dot(&head.b) * xi; // (2, D_u)
        let c_cols = layer.c_out.slice(s![.., 2 * h..2 * h + 2]).dot(&p); // (D_u, 2)

        let j0 = 2 * h;
        let j1 = 2 * h + 1;
        nus[j0] = gamma;
        nus[j1] = gamma;
        thetas[j0] = theta;
        thetas[j1] = -theta;

        // B̃ rows: (w₀ ± i·w₁)/√2
        for k in 0..d_u {
            b_re[[j0, k]] = SQRT_HALF * w[[0, k]];
            b_im[[j0, k]] = SQRT_HALF * w[[1, k]];
            b_re[[j1, k]] = SQRT_HALF * w[[0, k]];
            b_im[[j1, k]] = -SQRT_HALF * w[[1, k]];
        }
        // C̃ columns: (c₀ ∓ i·c₁)/√2
        for r in 0..d_u {
            c_re[[r, j0]] = SQRT_HALF * c_cols[[r, 0]];
            c_im[[r, j0]] = -SQRT_HALF * c_cols[[r, 1]];
            c_re[[r, j1]] = SQRT_HALF * c_cols[[r, 0]];
            c_im[[r, j1]] = SQRT_HALF * c_cols[[r, 1]];
        }
        basis.slice_mut(s![j0..=j1, j0..=j1]).assign(&p);
    }

    let params = LRUParams {
        nus,
        thetas,
        b_re,
        b_im,
        c_re,
        c_im,
        d: layer.d_skip.clone(),
    };
    params.validate()?;
    Ok((params, basis))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::{layer_forward, HeadParams, SequenceBatch};
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn single_mode(nu: f64, theta: f64) -> LRUParams {
        LRUParams {
            nus: array![nu],
            thetas: array![theta],
            b_re: array![[1.0, 0.5]],
            b_im: array![[0.0, 0.0]],
            c_re: array![[1.0], [0.0]],
            c_im: array![[0.0], [0.0]],
            d: array![0.0, 0.0],
        }
    }

    fn random_d2_layer(rng: &mut ChaCha8Rng, n_heads: usize, d_u: usize) -> RotRNNLayerParams {
        RotRNNLayerParams {
            heads: (0..n_heads)
                .map(|_| HeadParams {
                    m: Array2::from_shape_fn((2, 2), |_| rng.gen_range(-1.0..1.0)),
                    thetas: array![rng.gen_range(-2.0..2.0)],
                    gamma_log: rng.gen_range(-2.0..0.5),
                    b: Array2::from_shape_fn((2, d_u), |_| rng.gen_range(-1.0..1.0)),
                })
                .collect(),
            c_out: Array2::from_shape_fn((d_u, 2 * n_heads), |_| rng.gen_range(-0.5..0.5)),
            d_skip: Array1::from_shape_fn(d_u, |_| rng.gen_range(-1.0..1.0)),
        }
    }

    #[test]
    fn real_mode_two_step_closed_form() {
        let nu = 0.7;
        let p = single_mode(nu, 0.0);
        let u = array![[1.0, 2.0], [3.0, -1.0]];
        let (y, _) = lru_forward_detailed(&p, &u.view()).unwrap();
        // x̃_1 = B̃u_1, x̃_2 = ν·B̃u_1 + B̃u_2; y picks the real part via C̃
        let bu1 = 1.0 * 1.0 + 0.5 * 2.0;
        let bu2 = 1.0 * 3.0 + 0.5 * (-1.0);
        assert_abs_diff_eq!(y[[0, 0]], bu1, epsilon = 1e-12);
        assert_abs_diff_eq!(y[[1, 0]], nu * bu1 + bu2, epsilon = 1e-12);
    }

    #[test]
    fn vanishing_magnitude_is_memoryless() {
        let p = single_mode(1e-12, 1.3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = Array2::from_shape_fn((8, 2), |_| rng.gen_range(-1.0..1.0));
        let (y, _) = lru_forward_detailed(&p, &u.view()).unwrap();
        for t in 0..8 {
            let bu = 1.0 * u[[t, 0]] + 0.5 * u[[t, 1]];
            assert_abs_diff_eq!(y[[t, 0]], bu, epsilon = 1e-9);
        }
    }

    #[test]
    fn forward_matches_unrolled_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 6;
        let d_u = 4;
        let params = LRUParams {
            nus: Array1::from_shape_fn(n, |_| rng.gen_range(0.1..0.95)),
            thetas: Array1::from_shape_fn(n, |_| rng.gen_range(-3.0..3.0)),
            b_re: Array2::from_shape_fn((n, d_u), |_| rng.gen_range(-1.0..1.0)),
            b_im: Array2::from_shape_fn((n, d_u), |_| rng.gen_range(-1.0..1.0)),
            c_re: Array2::from_shape_fn((d_u, n), |_| rng.gen_range(-1.0..1.0)),
            c_im: Array2::from_shape_fn((d_u, n), |_| rng.gen_range(-1.0..1.0)),
            d: Array1::from_shape_fn(d_u, |_| rng.gen_range(-1.0..1.0)),
        };
        let t_len = 64;
        let u = Array2::from_shape_fn((t_len, d_u), |_| rng.gen_range(-1.0..1.0));
        let (y, _) = lru_forward_detailed(&params, &u.view()).unwrap();

        // x̃_t = Σ_k Λ^{t-k} B̃ u_k evaluated mode by mode
        for t in 0..t_len {
            let mut out = params.d.clone() * &u.row(t);
            for j in 0..n {
                let (mut sr, mut si) = (0.0f64, 0.0f64);
                for k in 0..=t {
                    let pw = (t - k) as f64;
                    let mag = params.nus[j].powf(pw);
                    let ang = params.thetas[j] * pw;
                    let (lr, li) = (mag * ang.cos(), mag * ang.sin());
                    let (br, bi) = (
                        params.b_re.row(j).dot(&u.row(k)),
                        params.b_im.row(j).dot(&u.row(k)),
                    );
                    sr += lr * br - li * bi;
                    si += lr * bi + li * br;
                }
                for r in 0..d_u {
                    out[r] += params.c_re[[r, j]] * sr - params.c_im[[r, j]] * si;
                }
            }
            for r in 0..d_u {
                assert!((y[[t, r]] - out[r]).abs() < 1e-9, "t={t} r={r}");
            }
        }
    }

    #[test]
    fn gamma_normalize_scales_rows() {
        let mut p = single_mode(0.6, 0.0);
        p.b_im = array![[0.5, -0.25]];
        let out = lru_gamma_normalize(&p).unwrap();
        assert_abs_diff_eq!(out.b_re[[0, 0]], 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(out.b_im[[0, 0]], 0.4, epsilon = 1e-12);
        // ν = 0: scale 1
        let p0 = single_mode(0.0, 0.0);
        let out0 = lru_gamma_normalize(&p0).unwrap();
        assert_eq!(out0.b_re, p0.b_re);
    }

    #[test]
    fn normalized_state_norm_converges_to_mode_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 16;
        let d_u = 8;
        // unit-norm complex rows before normalization
        let mut b_re = Array2::from_shape_fn((n, d_u), |_| rng.gen_range(-1.0..1.0));
        let mut b_im = Array2::from_shape_fn((n, d_u), |_| rng.gen_range(-1.0..1.0));
        for j in 0..n {
            let norm = (b_re.row(j).iter().map(|v| v * v).sum::<f64>()
                + b_im.row(j).iter().map(|v| v * v).sum::<f64>())
            .sqrt();
            b_re.row_mut(j).mapv_inplace(|v| v / norm);
            b_im.row_mut(j).mapv_inplace(|v| v / norm);
        }
        let params = LRUParams {
            nus: Array1::from_shape_fn(n, |_| rng.gen_range(0.2..0.95)),
            thetas: Array1::from_shape_fn(n, |_| rng.gen_range(-3.0..3.0)),
            b_re,
            b_im,
            c_re: Array2::zeros((1, n)),
            c_im: Array2::zeros((1, n)),
            d: Array1::zeros(1),
        };
        let normed = lru_gamma_normalize(&params).unwrap();

        let t_len = 256;
        let batch = 512;
        let mut acc = 0.0f64;
        for s in 0..batch {
            let mut r = ChaCha8Rng::seed_from_u64(100);
            r.set_stream(s as u64);
            let u = Array2::from_shape_fn((t_len, d_u), |_| r.sample(StandardNormal));
            let drive_re = u.dot(&normed.b_re.t());
            let drive_im = u.dot(&normed.b_im.t());
            let mut re = vec![0.0f64; n];
            let mut im = vec![0.0f64; n];
            for t in 0..t_len {
                for j in 0..n {
                    let (cr, sr) = (
                        normed.nus[j] * normed.thetas[j].cos(),
                        normed.nus[j] * normed.thetas[j].sin(),
                    );
                    let (a, b) = (re[j], im[j]);
                    re[j] = cr * a - sr * b + drive_re[[t, j]];
                    im[j] = sr * a + cr * b + drive_im[[t, j]];
                }
            }
            acc += re.iter().map(|v| v * v).sum::<f64>() + im.iter().map(|v| v * v).sum::<f64>();
        }
        let mean = acc / batch as f64;
        let rel = (mean - n as f64).abs() / n as f64;
        assert!(rel < 0.10, "mean ‖x̃‖² = {mean}, expected ≈ {n}, rel {rel}");
    }

    #[test]
    fn embedding_real_diagonal_case() {
        // single head, P = I, θ = 0: embedded LRU has real λ = γ
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d_u = 3;
        let mut layer = random_d2_layer(&mut rng, 1, d_u);
        layer.heads[0].m = Array2::zeros((2, 2));
        layer.heads[0].thetas = array![0.0];
        let (lru, basis) = embed_rotrnn_as_lru(&layer, 1.0).unwrap();
        assert_eq!(lru.thetas, array![0.0, 0.0]);
        let gamma = gamma_of(layer.heads[0].gamma_log);
        assert_abs_diff_eq!(lru.nus[0], gamma, epsilon = 1e-15);
        assert_eq!(basis, Array2::eye(2));

        let u = Array2::from_shape_fn((16, d_u), |_| rng.gen_range(-1.0..1.0));
        let batch = SequenceBatch::new(
            u.clone().insert_axis(ndarray::Axis(0)),
            None,
        )
        .unwrap();
        let rot = layer_forward(&layer, &batch, false, 1.0).unwrap();
        let (lru_y, _) = lru_forward_detailed(&lru, &u.view()).unwrap();
        let rot_y = rot.y.index_axis(ndarray::Axis(0), 0);
        for t in 0..16 {
            for r in 0..d_u {
                assert!((rot_y[[t, r]] - lru_y[[t, r]]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn embedding_matches_multi_head_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d_u = 5;
        let layer = random_d2_layer(&mut rng, 8, d_u);
        let (lru, _) = embed_rotrnn_as_lru(&layer, 1.0).unwrap();

        let t_len = 128;
        let u = Array2::from_shape_fn((t_len, d_u), |_| rng.gen_range(-1.0..1.0));
        let batch = SequenceBatch::new(u.clone().insert_axis(ndarray::Axis(0)), None).unwrap();
        let rot = layer_forward(&layer, &batch, false, 1.0).unwrap();
        let (lru_y, max_imag) = lru_forward_detailed(&lru, &u.view()).unwrap();
        let rot_y = rot.y.index_axis(ndarray::Axis(0), 0);
        let mut worst = 0.0f64;
        for t in 0..t_len {
            for r in 0..d_u {
                worst = worst.max((rot_y[[t, r]] - lru_y[[t, r]]).abs());
            }
        }
        assert!(worst < 1e-8, "max output mismatch {worst}");
        assert!(max_imag < 1e-9, "imaginary residue {max_imag}");
    }

    #[test]
    fn embedding_zero_input_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let layer = random_d2_layer(&mut rng, 2, 3);
        let (lru, _) = embed_rotrnn_as_lru(&layer, 1.0).unwrap();
        let u = Array2::zeros((9, 3));
        let batch = SequenceBatch::new(u.clone().insert_axis(ndarray::Axis(0)), None).unwrap();
        let rot = layer_forward(&layer, &batch, false, 1.0).unwrap();
        let (lru_y, _) = lru_forward_detailed(&lru, &u.view()).unwrap();
        assert_eq!(lru_y, Array2::zeros((9, 3)));
        assert_eq!(rot.y, Array3::zeros((1, 9, 3)));

        // D_h != 2 must be rejected
        let wide = crate::layer::init_layer(0, 3, 8, 2, 0.5, 0.9, 1.0).unwrap();
        assert!(embed_rotrnn_as_lru(&wide, 1.0).is_err());
    }
}
