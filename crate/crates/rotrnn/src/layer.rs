//! The rotation-recurrent layer.
//!
//! Per head, the hidden state follows
//!
//! ```text
//! x_t = γ·A·x_{t-1} + ξ·B·u_t,   A = P·Θ(θ)·Pᵀ ∈ SO(D_h)
//! ```
//!
//! with decay `γ = exp(-exp(γ_log)) ∈ (0, 1)` and the input matrix rescaled
//! by `ξ = sqrt((1 - c·γ²) / trace(BᵀB))`. Because `A` preserves norms, this
//! choice pins the stationary expected squared state norm to `c` under
//! white-noise inputs, while keeping the effective input weighting a pure
//! power of `γ` (no extra exponential forgetting).
//!
//! The forward pass works in the rotated basis: project the driving terms
//! with `Pᵀ`, scan the `(γ, θ, v_t)` elements, and project back with `P`.
//! Head states are concatenated and mixed by `C`, plus an elementwise skip.

use ndarray::{s, Array1, Array2, Array3, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{config_err, contract_err, dim_err, Result};
use crate::linalg::matmul;
use crate::rotor::{make_p, theta_apply};
use crate::scan::scan_fixed_rotation;

/// Default normalization target `c` for the stationary squared state norm.
pub const DEFAULT_NORM_C: f64 = 1.0;

/// Learnable parameters of one recurrent head.
#[derive(Debug, Clone)]
pub struct HeadParams {
    /// Unconstrained weights behind the orthogonal factor `P = exp(m - mᵀ)`.
    pub m: Array2<f64>,
    /// Rotation angles, one per 2x2 block (`D_h / 2` of them).
    pub thetas: Array1<f64>,
    /// Unconstrained reparameterization of the decay `γ`.
    pub gamma_log: f64,
    /// Input matrix, `(D_h, D_u)`.
    pub b: Array2<f64>,
}

impl HeadParams {
    pub fn d_h(&self) -> usize {
        self.m.nrows()
    }

    pub fn d_u(&self) -> usize {
        self.b.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let d_h = self.m.nrows();
        if self.m.ncols() != d_h {
            return Err(dim_err("head weight matrix m must be square"));
        }
        if d_h < 2 || d_h % 2 != 0 {
            return Err(dim_err(format!(
                "head dimension must be even and >= 2, got {d_h}"
            )));
        }
        if self.thetas.len() != d_h / 2 {
            return Err(dim_err(format!(
                "expected {} angles, got {}",
                d_h / 2,
                self.thetas.len()
            )));
        }
        if self.b.nrows() != d_h {
            return Err(dim_err(format!(
                "input matrix must have {} rows, got {}",
                d_h,
                self.b.nrows()
            )));
        }
        let finite = self.m.iter().all(|v| v.is_finite())
            && self.thetas.iter().all(|v| v.is_finite())
            && self.gamma_log.is_finite()
            && self.b.iter().all(|v| v.is_finite());
        if !finite {
            return Err(contract_err("head parameters contain non-finite values"));
        }
        Ok(())
    }
}

/// Full layer: `H` heads plus output mixing and elementwise skip.
#[derive(Debug, Clone)]
pub struct RotRNNLayerParams {
    pub heads: Vec<HeadParams>,
    /// Output mixing, `(D_u, D_x)` with `D_x = H · D_h`.
    pub c_out: Array2<f64>,
    /// Elementwise skip applied to the input, length `D_u`.
    pub d_skip: Array1<f64>,
}

impl RotRNNLayerParams {
    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn d_h(&self) -> usize {
        self.heads.first().map(|h| h.d_h()).unwrap_or(0)
    }

    pub fn d_x(&self) -> usize {
        self.n_heads() * self.d_h()
    }

    pub fn d_u(&self) -> usize {
        self.c_out.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads.is_empty() {
            return Err(dim_err("layer needs at least one head"));
        }
        let d_h = self.heads[0].d_h();
        let d_u = self.heads[0].d_u();
        for head in &self.heads {
            head.validate()?;
            if head.d_h() != d_h || head.d_u() != d_u {
                return Err(dim_err("all heads must share one shape"));
            }
        }
        let d_x = d_h * self.heads.len();
        if self.c_out.ncols() != d_x {
            return Err(dim_err(format!(
                "output mixing must have {} columns, got {}",
                d_x,
                self.c_out.ncols()
            )));
        }
        if self.c_out.nrows() != d_u {
            return Err(dim_err(format!(
                "output mixing must have {} rows, got {}",
                d_u,
                self.c_out.nrows()
            )));
        }
        if self.d_skip.len() != d_u {
            return Err(dim_err(format!(
                "skip vector must have length {}, got {}",
                d_u,
                self.d_skip.len()
            )));
        }
        Ok(())
    }
}

/// A batch of real-valued input sequences, shape `(batch, T, D_u)`.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    pub data: Array3<f64>,
    /// Valid lengths per sequence; `None` means every sequence runs full `T`.
    pub lengths: Option<Vec<usize>>,
}

impl SequenceBatch {
    pub fn new(data: Array3<f64>, lengths: Option<Vec<usize>>) -> Result<Self> {
        let (batch, t_len, _) = data.dim();
        if t_len == 0 {
            return Err(dim_err("sequence length must be >= 1"));
        }
        if let Some(ls) = &lengths {
            if ls.len() != batch {
                return Err(dim_err("one length per sequence required"));
            }
            if ls.iter().any(|&l| l == 0 || l > t_len) {
                return Err(dim_err("valid lengths must lie in 1..=T"));
            }
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(contract_err("batch contains non-finite values"));
        }
        Ok(Self { data, lengths })
    }

    pub fn batch(&self) -> usize {
        self.data.dim().0
    }

    pub fn t_len(&self) -> usize {
        self.data.dim().1
    }

    pub fn d_u(&self) -> usize {
        self.data.dim().2
    }
}

/// Decay reparameterization `γ = exp(-exp(γ_log)) ∈ (0, 1)`.
pub fn gamma_of(gamma_log: f64) -> f64 {
    (-gamma_log.exp()).exp()
}

/// Input rescaling `ξ = sqrt((1 - c·γ²) / trace(BᵀB))`, the coefficient that
/// pins `trace((ξB)ᵀ(ξB)) = 1 - c·γ²`.
pub fn xi_of(head: &HeadParams, c: f64) -> Result<f64> {
    let trace: f64 = head.b.iter().map(|v| v * v).sum();
    if trace <= 0.0 {
        return Err(crate::error::numeric_err(
            "trace(BᵀB) is zero; cannot normalize a zero input matrix",
        ));
    }
    let gamma = gamma_of(head.gamma_log);
    let cg2 = c * gamma * gamma;
    if cg2 >= 1.0 {
        return Err(contract_err(format!(
            "c·γ² = {cg2} must be < 1 for the normalization to exist"
        )));
    }
    Ok(((1.0 - cg2) / trace).sqrt())
}

/// Batched head forward over stacked sequences. `u_flat` has `batch · T`
/// rows grouped sequence-major; every sequence has length `seq_len`.
pub(crate) fn head_forward_batched(
    head: &HeadParams,
    u_flat: &ArrayView2<f64>,
    seq_len: usize,
    c: f64,
) -> Result<Array2<f64>> {
    head.validate()?;
    if u_flat.ncols() != head.d_u() {
        return Err(dim_err(format!(
            "input width {} does not match head input dim {}",
            u_flat.ncols(),
            head.d_u()
        )));
    }
    let rows = u_flat.nrows();
    if seq_len == 0 || rows % seq_len != 0 {
        return Err(dim_err(format!(
            "row count {rows} is not a multiple of the sequence length {seq_len}"
        )));
    }
    let gamma = gamma_of(head.gamma_log);
    let xi = xi_of(head, c)?;
    let p = make_p(&head.m.view())?;

    let mut w = matmul(*u_flat, head.b.t());
    w.mapv_inplace(|v| v * xi);
    let v = matmul(w.view(), p.view());

    let d_h = head.d_h();
    let mut xhat = Array2::zeros((rows, d_h));
    let n_seqs = rows / seq_len;
    {
        let v_ref = &v;
        let chunks: Vec<(usize, Array2<f64>)> = (0..n_seqs)
            .into_par_iter()
            .map(|i| {
                let lo = i * seq_len;
                let states = scan_fixed_rotation(
                    gamma,
                    &head.thetas,
                    &v_ref.slice(s![lo..lo + seq_len, ..]),
                );
                (lo, states)
            })
            .collect();
        for (lo, states) in chunks {
            xhat.slice_mut(s![lo..lo + seq_len, ..]).assign(&states);
        }
    }
    Ok(matmul(xhat.view(), p.t()))
}

/// Head states for a single sequence `u` of shape `(T, D_u)`; returns
/// `(T, D_h)`. Equivalent to `x_t = ξ · Σ_{k≤t} γ^{t-k} A^{t-k} B u_k` with
/// `x_0 = 0`.
pub fn head_forward(head: &HeadParams, u: &ArrayView2<f64>, c: f64) -> Result<Array2<f64>> {
    head_forward_batched(head, u, u.nrows(), c)
}

/// Per-head pieces of a whole-layer forward cache.
pub(crate) struct LayerHeadCache {
    pub p: Array2<f64>,
    pub gamma: f64,
    pub xi: f64,
    pub trace_btb: f64,
    /// Scanned states in the rotated basis, `(rows, D_h)`.
    pub xhat: Array2<f64>,
}

/// Whole-layer forward cache over flattened `(batch · T, D_u)` rows.
pub(crate) struct LayerForwardCache {
    pub heads: Vec<LayerHeadCache>,
    /// Column-stacked driving terms: block `h` holds `ξ_h·B_h·u_t`.
    pub w_all: Array2<f64>,
    /// Concatenated head states, `(rows, D_x)`.
    pub xcat: Array2<f64>,
}

/// Whole-layer recurrence with the per-head input projections fused into
/// one stacked GEMM. Returns `(y, xcat, cache)`.
pub(crate) fn rot_layer_forward(
    rot: &RotRNNLayerParams,
    u_flat: &ArrayView2<f64>,
    seq_len: usize,
    c: f64,
    want_cache: bool,
) -> Result<(Array2<f64>, Array2<f64>, Option<LayerForwardCache>)> {
    rot.validate()?;
    let d_u = rot.d_u();
    if u_flat.ncols() != d_u {
        return Err(dim_err(format!(
            "input width {} does not match layer width {d_u}",
            u_flat.ncols()
        )));
    }
    let rows = u_flat.nrows();
    if seq_len == 0 || rows % seq_len != 0 {
        return Err(dim_err(format!(
            "row count {rows} is not a multiple of the sequence length {seq_len}"
        )));
    }
    let d_h = rot.d_h();
    let d_x = rot.d_x();
    let n_seqs = rows / seq_len;

    // stack ξ_h·B_h into one (D_x, D_u) matrix: one GEMM for all heads
    let mut b_stack = Array2::zeros((d_x, d_u));
    let mut head_meta = Vec::with_capacity(rot.heads.len());
    for (h, head) in rot.heads.iter().enumerate() {
        let gamma = gamma_of(head.gamma_log);
        let xi = xi_of(head, c)?;
        let trace_btb: f64 = head.b.iter().map(|v| v * v).sum();
        b_stack
            .slice_mut(s![h * d_h..(h + 1) * d_h, ..])
            .assign(&(&head.b * xi));
        head_meta.push((gamma, xi, trace_btb));
    }
    let w_all = matmul(*u_flat, b_stack.t());

    let mut xcat = Array2::zeros((rows, d_x));
    let mut head_caches = Vec::with_capacity(rot.heads.len());
    for (h, head) in rot.heads.iter().enumerate() {
        let (gamma, xi, trace_btb) = head_meta[h];
        let p = make_p(&head.m.view())?;
        let w_h = w_all.slice(s![.., h * d_h..(h + 1) * d_h]);
        let v = matmul(w_h, p.view());
        let mut xhat = Array2::zeros((rows, d_h));
        {
            let v_ref = &v;
            let chunks: Vec<(usize, Array2<f64>)> = (0..n_seqs)
                .into_par_iter()
                .map(|i| {
                    let lo = i * seq_len;
                    let states = scan_fixed_rotation(
                        gamma,
                        &head.thetas,
                        &v_ref.slice(s![lo..lo + seq_len, ..]),
                    );
                    (lo, states)
                })
                .collect();
            for (lo, states) in chunks {
                xhat.slice_mut(s![lo..lo + seq_len, ..]).assign(&states);
            }
        }
        let x = matmul(xhat.view(), p.t());
        xcat.slice_mut(s![.., h * d_h..(h + 1) * d_h]).assign(&x);
        head_caches.push(LayerHeadCache {
            p,
            gamma,
            xi,
            trace_btb,
            xhat,
        });
    }

    let mut y = matmul(xcat.view(), rot.c_out.t());
    {
        let y_slice = y.as_slice_mut().expect("layout");
        let u_std = u_flat.as_standard_layout();
        let u_slice = u_std.as_slice().expect("layout");
        let skip = rot.d_skip.as_slice().expect("layout");
        for (y_row, u_row) in y_slice.chunks_exact_mut(d_u).zip(u_slice.chunks_exact(d_u)) {
            for j in 0..d_u {
                y_row[j] += skip[j] * u_row[j];
            }
        }
    }

    let cache = want_cache.then(|| LayerForwardCache {
        heads: head_caches,
        w_all,
        xcat: xcat.clone(),
    });
    Ok((y, xcat, cache))
}

/// Direct O(T²) evaluation of the unrolled convolutional form; test oracle
/// for [`head_forward`], sharing only the angle-power primitive.
pub fn conv_forward(head: &HeadParams, u: &ArrayView2<f64>, c: f64) -> Result<Array2<f64>> {
    head.validate()?;
    if u.ncols() != head.d_u() {
        return Err(dim_err("input width does not match head input dim"));
    }
    let t_len = u.nrows();
    let gamma = gamma_of(head.gamma_log);
    let xi = xi_of(head, c)?;
    let p = make_p(&head.m.view())?;
    let d_h = head.d_h();

    // precompute Pᵀ·B·u_k for every k
    let mut projected = Vec::with_capacity(t_len);
    for k in 0..t_len {
        let bu = head.b.dot(&u.row(k));
        projected.push(p.t().dot(&bu));
    }

    let mut states = Array2::zeros((t_len, d_h));
    for t in 0..t_len {
        let mut acc = Array1::<f64>::zeros(d_h);
        for (k, proj) in projected.iter().enumerate().take(t + 1) {
            let power = (t - k) as f64;
            let rotated = theta_apply(&head.thetas.view(), power, &proj.view())?;
            acc += &(rotated * gamma.powf(power));
        }
        let x_t = p.dot(&acc) * xi;
        states.row_mut(t).assign(&x_t);
    }
    Ok(states)
}

/// Output of [`layer_forward`].
pub struct LayerOutput {
    /// Mixed outputs, `(batch, T, D_u)`.
    pub y: Array3<f64>,
    /// Concatenated per-head hidden states `(batch, T, D_x)` when requested.
    pub states: Option<Array3<f64>>,
}

/// Full layer forward: per-head recurrence, head-major concatenation,
/// output mixing `y_t = C·x_t + d ⊙ u_t`.
pub fn layer_forward(
    params: &RotRNNLayerParams,
    batch: &SequenceBatch,
    capture_states: bool,
    c: f64,
) -> Result<LayerOutput> {
    if batch.d_u() != params.d_u() {
        return Err(dim_err(format!(
            "batch width {} does not match layer width {}",
            batch.d_u(),
            params.d_u()
        )));
    }
    let (b, t_len, d_u) = batch.data.dim();
    let rows = b * t_len;
    let u_flat = batch
        .data
        .view()
        .into_shape_with_order((rows, d_u))
        .expect("standard layout");

    let (y, xcat, _) = rot_layer_forward(params, &u_flat, t_len, c, false)?;
    let y3 = y.into_shape_with_order((b, t_len, d_u)).expect("shape");
    let states = capture_states
        .then(|| xcat.into_shape_with_order((b, t_len, params.d_x())).expect("shape"));
    Ok(LayerOutput { y: y3, states })
}

/// `γ_log` giving `γ² = u·(γ_max² - γ_min²) + γ_min²` for `u ∈ [0, 1]`, so
/// that squared decays are uniform over the init range.
pub fn gamma_log_from_uniform(u: f64, gamma_min: f64, gamma_max: f64) -> f64 {
    let v = u * (gamma_max * gamma_max - gamma_min * gamma_min) + gamma_min * gamma_min;
    (-0.5 * v.ln()).ln()
}

/// Randomly initialized layer parameters.
///
/// `b` and `c_out` are Glorot-normal (std `1/sqrt(fan_in)`), `m` and the
/// skip are standard normal, angles are uniform on `[0, theta_max]`, and
/// `γ²` is uniform on `[gamma_min², gamma_max²]`.
pub fn init_layer(
    seed: u64,
    d_u: usize,
    d_x: usize,
    n_heads: usize,
    gamma_min: f64,
    gamma_max: f64,
    theta_max: f64,
) -> Result<RotRNNLayerParams> {
    if !(0.0 < gamma_min && gamma_min < gamma_max && gamma_max < 1.0) {
        return Err(config_err(format!(
            "need 0 < gamma_min < gamma_max < 1, got [{gamma_min}, {gamma_max}]"
        )));
    }
    if !(theta_max > 0.0 && theta_max <= 2.0 * std::f64::consts::PI) {
        return Err(config_err(format!(
            "theta_max must lie in (0, 2π], got {theta_max}"
        )));
    }
    if n_heads == 0 || d_x % n_heads != 0 {
        return Err(config_err(format!(
            "state dim {d_x} must divide evenly into {n_heads} heads"
        )));
    }
    let d_h = d_x / n_heads;
    if d_h < 2 || d_h % 2 != 0 {
        return Err(config_err(format!(
            "head dimension {d_h} must be even and >= 2"
        )));
    }
    if d_u == 0 {
        return Err(config_err("input dimension must be >= 1"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    }

    let mut heads = Vec::with_capacity(n_heads);
    for _ in 0..n_heads {
        let m = Array2::from_shape_simple_fn((d_h, d_h), || normal(&mut rng, 1.0));
        let b_std = 1.0 / (d_u as f64).sqrt();
        let b = Array2::from_shape_simple_fn((d_h, d_u), || normal(&mut rng, b_std));
        let thetas = Array1::from_shape_simple_fn(d_h / 2, || rng.gen_range(0.0..=theta_max));
        let u: f64 = rng.gen_range(0.0..1.0);
        heads.push(HeadParams {
            m,
            b,
            thetas,
            gamma_log: gamma_log_from_uniform(u, gamma_min, gamma_max),
        });
    }
    let c_std = 1.0 / (d_x as f64).sqrt();
    let c_out = Array2::from_shape_simple_fn((d_u, d_x), || normal(&mut rng, c_std));
    let d_skip = Array1::from_shape_simple_fn(d_u, || normal(&mut rng, 1.0));

    let params = RotRNNLayerParams {
        heads,
        c_out,
        d_skip,
    };
    params.validate()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_head(rng: &mut ChaCha8Rng, d_h: usize, d_u: usize) -> HeadParams {
        HeadParams {
            m: Array2::from_shape_fn((d_h, d_h), |_| rng.gen_range(-1.0..1.0)),
            thetas: Array1::from_shape_fn(d_h / 2, |_| rng.gen_range(-2.0..2.0)),
            gamma_log: rng.gen_range(-2.0..0.5),
            b: Array2::from_shape_fn((d_h, d_u), |_| rng.gen_range(-1.0..1.0)),
        }
    }

    fn random_layer(rng: &mut ChaCha8Rng, n_heads: usize, d_h: usize, d_u: usize) -> RotRNNLayerParams {
        RotRNNLayerParams {
            heads: (0..n_heads).map(|_| random_head(rng, d_h, d_u)).collect(),
            c_out: Array2::from_shape_fn((d_u, n_heads * d_h), |_| rng.gen_range(-0.5..0.5)),
            d_skip: Array1::from_shape_fn(d_u, |_| rng.gen_range(-1.0..1.0)),
        }
    }

    fn max_abs_diff(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn gamma_of_known_values() {
        assert_abs_diff_eq!(gamma_of(0.0), (-1.0f64).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(gamma_of(2f64.ln().ln()), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(gamma_of(-10.0), (-(-10.0f64).exp()).exp(), epsilon = 1e-12);
        assert!((gamma_of(-10.0) - 0.999_954_6).abs() < 1e-6);
    }

    #[test]
    fn xi_of_closed_forms() {
        // γ = 0 is not reachable exactly; drive γ_log so γ ≈ 0
        let mut head = HeadParams {
            m: Array2::zeros((2, 2)),
            thetas: Array1::zeros(1),
            gamma_log: 10.0, // γ = exp(-e^10) ≈ 0
            b: array![[1.0, 0.0], [0.0, 0.0]],
        };
        assert_abs_diff_eq!(xi_of(&head, 1.0).unwrap(), 1.0, epsilon = 1e-12);

        // γ = 0.5, trace = 4: ξ = sqrt((1 - 0.25) / 4)
        head.gamma_log = 2f64.ln().ln();
        head.b = array![[2.0, 0.0], [0.0, 0.0]];
        assert_abs_diff_eq!(
            xi_of(&head, 1.0).unwrap(),
            (0.1875f64).sqrt(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn xi_defining_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..16 {
            let head = random_head(&mut rng, 4, 3);
            let xi = xi_of(&head, 1.0).unwrap();
            let gamma = gamma_of(head.gamma_log);
            let scaled_trace: f64 = head.b.iter().map(|v| (xi * v) * (xi * v)).sum();
            assert_abs_diff_eq!(scaled_trace, 1.0 - gamma * gamma, epsilon = 1e-12);
        }
    }

    #[test]
    fn xi_error_cases() {
        let mut head = HeadParams {
            m: Array2::zeros((2, 2)),
            thetas: Array1::zeros(1),
            gamma_log: 0.0,
            b: Array2::zeros((2, 2)),
        };
        assert!(xi_of(&head, 1.0).is_err());
        head.b = array![[1.0, 0.0], [0.0, 1.0]];
        // c·γ² >= 1 with large c
        assert!(xi_of(&head, 1e9).is_err());
    }

    #[test]
    fn head_forward_t1_rotation_cancels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = random_head(&mut rng, 6, 4);
        let u = Array2::from_shape_fn((1, 4), |_| rng.gen_range(-1.0..1.0));
        let x = head_forward(&head, &u.view(), 1.0).unwrap();
        let xi = xi_of(&head, 1.0).unwrap();
        let expected = head.b.dot(&u.row(0)) * xi;
        for j in 0..6 {
            assert_abs_diff_eq!(x[[0, j]], expected[j], epsilon = 1e-12);
        }
    }

    #[test]
    fn head_forward_decay_only_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut head = random_head(&mut rng, 4, 3);
        head.m = Array2::zeros((4, 4)); // P = I
        head.thetas = Array1::zeros(2); // Θ = I, so A = I
        let u = Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0));
        let x = head_forward(&head, &u.view(), 1.0).unwrap();
        let gamma = gamma_of(head.gamma_log);
        let xi = xi_of(&head, 1.0).unwrap();
        let expected = head.b.dot(&u.row(0)) * (gamma * xi) + head.b.dot(&u.row(1)) * xi;
        for j in 0..4 {
            assert_abs_diff_eq!(x[[1, j]], expected[j], epsilon = 1e-12);
        }
    }

    #[test]
    fn head_forward_matches_conv_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = random_head(&mut rng, 8, 5);
        let u = Array2::from_shape_fn((256, 5), |_| rng.gen_range(-1.0..1.0));
        let fast = head_forward(&head, &u.view(), 1.0).unwrap();
        let slow = conv_forward(&head, &u.view(), 1.0).unwrap();
        let err = max_abs_diff(&fast.view(), &slow.view());
        assert!(err < 1e-8, "max err {err}");
    }

    #[test]
    fn conv_forward_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head = random_head(&mut rng, 4, 3);
        let u = Array2::from_shape_fn((1, 3), |_| rng.gen_range(-1.0..1.0));
        let a = head_forward(&head, &u.view(), 1.0).unwrap();
        let b = conv_forward(&head, &u.view(), 1.0).unwrap();
        assert!(max_abs_diff(&a.view(), &b.view()) < 1e-12);

        let zero = Array2::zeros((7, 3));
        let x = conv_forward(&head, &zero.view(), 1.0).unwrap();
        assert_eq!(x, Array2::zeros((7, 4)));
    }

    #[test]
    fn conv_matches_dense_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let head = random_head(&mut rng, 6, 4);
        let u = Array2::from_shape_fn((64, 4), |_| rng.gen_range(-1.0..1.0));
        let conv = conv_forward(&head, &u.view(), 1.0).unwrap();
        let dense = oracle::dense_head_recurrence(&head, &u.view(), 1.0).unwrap();
        let err = max_abs_diff(&conv.view(), &dense.view());
        assert!(err < 1e-9, "max err {err}");
    }

    #[test]
    fn layer_forward_zero_input_and_single_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = random_layer(&mut rng, 2, 4, 3);
        let batch = SequenceBatch::new(Array3::zeros((2, 5, 3)), None).unwrap();
        let out = layer_forward(&params, &batch, false, 1.0).unwrap();
        assert_eq!(out.y, Array3::zeros((2, 5, 3)));

        let single = random_layer(&mut rng, 1, 4, 3);
        let data = Array3::from_shape_fn((1, 9, 3), |_| rng.gen_range(-1.0..1.0));
        let batch = SequenceBatch::new(data.clone(), None).unwrap();
        let out = layer_forward(&single, &batch, false, 1.0).unwrap();
        let u = data.index_axis(ndarray::Axis(0), 0).to_owned();
        let states = head_forward(&single.heads[0], &u.view(), 1.0).unwrap();
        let mut expected = states.dot(&single.c_out.t());
        for t in 0..9 {
            let skip = &single.d_skip * &u.row(t);
            let mut row = expected.row_mut(t);
            row += &skip;
        }
        let got = out.y.index_axis(ndarray::Axis(0), 0).to_owned();
        assert!(max_abs_diff(&got.view(), &expected.view()) < 1e-12);
    }

    #[test]
    fn layer_forward_matches_block_diagonal_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = random_layer(&mut rng, 4, 8, 6);
        let data = Array3::from_shape_fn((1, 128, 6), |_| rng.gen_range(-1.0..1.0));
        let batch = SequenceBatch::new(data.clone(), None).unwrap();
        let out = layer_forward(&params, &batch, true, 1.0).unwrap();
        let u = data.index_axis(ndarray::Axis(0), 0).to_owned();
        let (y_ref, states_ref) = oracle::dense_block_layer_forward(&params, &u.view(), 1.0).unwrap();
        let y = out.y.index_axis(ndarray::Axis(0), 0).to_owned();
        let err = max_abs_diff(&y.view(), &y_ref.view());
        assert!(err < 1e-8, "output err {err}");
        let states = out.states.unwrap().index_axis(ndarray::Axis(0), 0).to_owned();
        let err = max_abs_diff(&states.view(), &states_ref.view());
        assert!(err < 1e-8, "state err {err}");
    }

    #[test]
    fn linearity_in_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let head = random_head(&mut rng, 6, 4);
        let u = Array2::from_shape_fn((32, 4), |_| rng.gen_range(-1.0..1.0));
        let doubled = &u * 2.0;
        let x1 = head_forward(&head, &u.view(), 1.0).unwrap();
        let x2 = head_forward(&head, &doubled.view(), 1.0).unwrap();
        let err = max_abs_diff(&(&x1 * 2.0).view(), &x2.view());
        assert!(err < 1e-10, "max err {err}");
    }

    #[test]
    fn input_weights_decay_as_pure_gamma_power() {
        // one-hot input at position k: the coefficient magnitude on u_k at
        // time t must be ξ·γ^(t-k) exactly (rotations preserve norm)
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let head = random_head(&mut rng, 4, 1);
        let gamma = gamma_of(head.gamma_log);
        let xi = xi_of(&head, 1.0).unwrap();
        let b_col_norm = head.b.column(0).iter().map(|v| v * v).sum::<f64>().sqrt();
        let t_len = 12;
        let k = 3;
        let mut u = Array2::zeros((t_len, 1));
        u[[k, 0]] = 1.0;
        let x = head_forward(&head, &u.view(), 1.0).unwrap();
        for t in k..t_len {
            let norm = x.row(t).iter().map(|v| v * v).sum::<f64>().sqrt();
            let expected = xi * gamma.powi((t - k) as i32) * b_col_norm;
            assert_abs_diff_eq!(norm, expected, epsilon = 1e-10);
        }
    }

    #[test]
    fn norm_law_white_noise() {
        // lighter version of the acceptance probe: γ = 0.9, D_h = 32
        let d_h = 32;
        let d_u = 16;
        let t_len = 128;
        let batch = 2048;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut head = random_head(&mut rng, d_h, d_u);
        head.gamma_log = (-(0.9f64).ln()).ln();
        let gamma = gamma_of(head.gamma_log);
        assert_abs_diff_eq!(gamma, 0.9, epsilon = 1e-12);

        let mut sums = vec![0.0f64; t_len];
        let data: Vec<Array2<f64>> = (0..batch)
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(999);
                r.set_stream(i as u64);
                Array2::from_shape_fn((t_len, d_u), |_| r.sample(StandardNormal))
            })
            .collect();
        for u in &data {
            let x = head_forward(&head, &u.view(), 1.0).unwrap();
            for t in 0..t_len {
                sums[t] += x.row(t).iter().map(|v| v * v).sum::<f64>();
            }
        }
        for (t, s) in sums.iter().enumerate() {
            let empirical = s / batch as f64;
            let analytic = 1.0 - gamma.powi(2 * (t as i32 + 1));
            let rel = (empirical - analytic).abs() / analytic;
            assert!(
                rel < 0.05,
                "t = {t}: empirical {empirical}, analytic {analytic}, rel {rel}"
            );
        }
    }

    #[test]
    fn init_layer_endpoints_and_ranges() {
        assert_abs_diff_eq!(
            gamma_of(gamma_log_from_uniform(0.0, 0.5, 0.999)),
            0.5,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            gamma_of(gamma_log_from_uniform(1.0, 0.5, 0.999)),
            0.999,
            epsilon = 1e-12
        );

        let params = init_layer(42, 8, 32, 4, 0.5, 0.999, std::f64::consts::PI / 100.0).unwrap();
        assert_eq!(params.n_heads(), 4);
        assert_eq!(params.d_h(), 8);
        for head in &params.heads {
            let g = gamma_of(head.gamma_log);
            assert!((0.5..=0.999).contains(&g), "γ = {g} out of range");
            for t in head.thetas.iter() {
                assert!((0.0..=std::f64::consts::PI / 100.0).contains(t));
            }
        }
    }

    #[test]
    fn init_layer_rejects_bad_config() {
        assert!(init_layer(0, 8, 32, 4, 0.9, 0.5, 1.0).is_err()); // min > max
        assert!(init_layer(0, 8, 32, 4, 0.5, 0.9, 0.0).is_err()); // theta_max = 0
        assert!(init_layer(0, 8, 30, 4, 0.5, 0.9, 1.0).is_err()); // 30 % 4 != 0
        assert!(init_layer(0, 8, 4, 4, 0.5, 0.9, 1.0).is_err()); // D_h = 1
    }

    #[test]
    fn determinism_given_seed() {
        let a = init_layer(7, 4, 16, 2, 0.5, 0.9, 1.0).unwrap();
        let b = init_layer(7, 4, 16, 2, 0.5, 0.9, 1.0).unwrap();
        assert_eq!(a.heads[0].m, b.heads[0].m);
        assert_eq!(a.heads[1].gamma_log, b.heads[1].gamma_log);
        assert_eq!(a.c_out, b.c_out);
    }
}
