//! Rotation-matrix algebra.
//!
//! A rotation `A ∈ SO(N)` is never stored densely on the hot path. It is
//! represented either implicitly as `exp(M - Mᵀ)` of an unconstrained weight
//! matrix, or factored as `A = P·Θ·Pᵀ` where `P` is orthogonal and `Θ` is a
//! block-diagonal matrix of 2x2 rotation blocks with angles `θ_i`. Powers
//! then reduce to `A^k = P·Θ(kθ)·Pᵀ`, and applying `Θ` to a vector is an
//! O(n) interleaved multiply (`theta_apply`).

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{contract_err, dim_err, Result};
use crate::linalg::{self, lu_factor, rotate_pairs_into};

/// Orthogonality defect tolerance (Frobenius) for a stored rotation factor.
pub const ORTHO_TOL: f64 = 1e-8;
/// Determinant tolerance for a stored rotation factor.
pub const DET_TOL: f64 = 1e-6;
/// Max-entry tolerance when checking that an `expm` input is skew-symmetric.
pub const SKEW_TOL: f64 = 1e-12;

/// Padé order-13 numerator/denominator coefficients (Higham 2005).
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

/// 1-norm threshold above which the argument is scaled before the order-13
/// Padé approximant is applied.
const THETA13: f64 = 5.371920351148152;

fn check_square(m: &ArrayView2<f64>, what: &str) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(dim_err(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(m.nrows())
}

/// `S = M - Mᵀ`, built by mirroring the upper triangle so that `Sᵀ = -S`
/// holds exactly in floating point.
pub fn skew(m: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = check_square(m, "skew input")?;
    let mut s = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let v = m[[i, j]] - m[[j, i]];
            s[[i, j]] = v;
            s[[j, i]] = -v;
        }
    }
    Ok(s)
}

fn is_skew(s: &ArrayView2<f64>) -> bool {
    let n = s.nrows();
    for i in 0..n {
        if s[[i, i]].abs() > SKEW_TOL {
            return false;
        }
        for j in (i + 1)..n {
            if (s[[i, j]] + s[[j, i]]).abs() > SKEW_TOL {
                return false;
            }
        }
    }
    true
}

/// Matrix exponential of a general square matrix: scaling-and-squaring with
/// a fixed order-13 Padé approximant.
pub(crate) fn expm_unchecked(a: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = check_square(a, "expm input")?;
    if n == 0 {
        return Ok(Array2::zeros((0, 0)));
    }
    let norm = linalg::one_norm(a);
    if !norm.is_finite() {
        return Err(contract_err("expm input has non-finite entries"));
    }
    let squarings = if norm > THETA13 {
        (norm / THETA13).log2().ceil() as u32
    } else {
        0
    };
    let scaled = a.mapv(|v| v / f64::powi(2.0, squarings as i32));

    let eye = linalg::identity(n);
    let a2 = scaled.dot(&scaled);
    let a4 = a2.dot(&a2);
    let a6 = a2.dot(&a4);

    let w1 = &a6 * PADE13[13] + &a4 * PADE13[11] + &a2 * PADE13[9];
    let w2 = a6.dot(&w1) + &a6 * PADE13[7] + &a4 * PADE13[5] + &a2 * PADE13[3] + &eye * PADE13[1];
    let u = scaled.dot(&w2);
    let z1 = &a6 * PADE13[12] + &a4 * PADE13[10] + &a2 * PADE13[8];
    let v = a6.dot(&z1) + &a6 * PADE13[6] + &a4 * PADE13[4] + &a2 * PADE13[2] + &eye * PADE13[0];

    let denom = &v - &u;
    let numer = &v + &u;
    let factors = lu_factor(&denom.view())?;
    let mut r = factors.solve_matrix(&numer.view());
    for _ in 0..squarings {
        r = r.dot(&r);
    }
    Ok(r)
}

/// Matrix exponential of a skew-symmetric matrix; the result lies in SO(N).
pub fn expm(s: &ArrayView2<f64>) -> Result<Array2<f64>> {
    check_square(s, "expm input")?;
    if !is_skew(s) {
        return Err(contract_err(
            "expm requires a skew-symmetric input (‖S + Sᵀ‖_∞ ≤ 1e-12)",
        ));
    }
    expm_unchecked(s)
}

/// `exp(S)` together with the directional (Fréchet) derivative `L(S, E)`,
/// computed from the block-triangular augmented exponential
/// `exp([[S, E], [0, S]]) = [[exp(S), L(S, E)], [0, exp(S)]]`.
pub fn expm_frechet(s: &ArrayView2<f64>, e: &ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    let n = check_square(s, "expm_frechet input")?;
    if e.nrows() != n || e.ncols() != n {
        return Err(dim_err(format!(
            "perturbation direction must be {n}x{n}, got {}x{}",
            e.nrows(),
            e.ncols()
        )));
    }
    if !is_skew(s) {
        return Err(contract_err("expm_frechet requires a skew-symmetric base point"));
    }
    let mut aug = Array2::zeros((2 * n, 2 * n));
    aug.slice_mut(s![..n, ..n]).assign(s);
    aug.slice_mut(s![..n, n..]).assign(e);
    aug.slice_mut(s![n.., n..]).assign(s);
    let big = expm_unchecked(&aug.view())?;
    let exp_s = big.slice(s![..n, ..n]).to_owned();
    let frechet = big.slice(s![..n, n..]).to_owned();
    Ok((exp_s, frechet))
}

/// `P = exp(M - Mᵀ)` for an unconstrained even-dimensional weight matrix.
pub fn make_p(m: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = check_square(m, "make_p input")?;
    if n % 2 != 0 {
        return Err(dim_err(format!("make_p requires an even dimension, got {n}")));
    }
    expm(&skew(m)?.view())
}

/// A rotation `A = P·Θ(θ)·Pᵀ`, stored as the orthogonal factor and the
/// block angles without ever materializing `A`.
#[derive(Debug, Clone)]
pub struct RotationFactor {
    p: Array2<f64>,
    thetas: Array1<f64>,
}

impl RotationFactor {
    /// Validates orthogonality, determinant and shape before storing.
    pub fn new(p: Array2<f64>, thetas: Array1<f64>) -> Result<Self> {
        let n = check_square(&p.view(), "rotation factor P")?;
        if n % 2 != 0 {
            return Err(dim_err(format!("rotation factor dimension must be even, got {n}")));
        }
        if thetas.len() != n / 2 {
            return Err(dim_err(format!(
                "expected {} angles for dimension {n}, got {}",
                n / 2,
                thetas.len()
            )));
        }
        let gram = p.t().dot(&p);
        let defect = linalg::fro_norm(&(&gram - &linalg::identity(n)).view());
        if defect > ORTHO_TOL {
            return Err(contract_err(format!(
                "P is not orthogonal: ‖PᵀP - I‖_F = {defect:.3e}"
            )));
        }
        let d = linalg::det(&p.view())?;
        if (d - 1.0).abs() > DET_TOL {
            return Err(contract_err(format!("det(P) = {d} is not 1")));
        }
        Ok(Self { p, thetas })
    }

    /// Builds the factor from an unconstrained weight matrix via `make_p`.
    pub fn from_weights(m: &ArrayView2<f64>, thetas: Array1<f64>) -> Result<Self> {
        Self::new(make_p(m)?, thetas)
    }

    pub fn dim(&self) -> usize {
        self.p.nrows()
    }

    pub fn p(&self) -> &Array2<f64> {
        &self.p
    }

    pub fn thetas(&self) -> &Array1<f64> {
        &self.thetas
    }
}

/// Apply the block-diagonal rotation `Θ(k·θ)` to `x` in O(n), using the
/// interleaved cosine/sine form. `k = 1` is a plain application; general `k`
/// realizes the power `Θ^k`.
pub fn theta_apply(thetas: &ArrayView1<f64>, k: f64, x: &ArrayView1<f64>) -> Result<Array1<f64>> {
    if x.len() != 2 * thetas.len() {
        return Err(dim_err(format!(
            "state length {} does not match 2x{} angles",
            x.len(),
            thetas.len()
        )));
    }
    let cos: Vec<f64> = thetas.iter().map(|t| (k * t).cos()).collect();
    let sin: Vec<f64> = thetas.iter().map(|t| (k * t).sin()).collect();
    let xs = x.as_standard_layout();
    let mut out = Array1::zeros(x.len());
    rotate_pairs_into(
        &cos,
        &sin,
        xs.as_slice().expect("contiguous"),
        out.as_slice_mut().expect("contiguous"),
    );
    Ok(out)
}

/// Apply the full rotation `A·x = P·Θ(θ)·Pᵀ·x`.
pub fn rotate(rf: &RotationFactor, x: &ArrayView1<f64>) -> Result<Array1<f64>> {
    if x.len() != rf.dim() {
        return Err(dim_err(format!(
            "vector length {} does not match rotation dimension {}",
            x.len(),
            rf.dim()
        )));
    }
    let projected = rf.p.t().dot(x);
    let rotated = theta_apply(&rf.thetas.view(), 1.0, &projected.view())?;
    Ok(rf.p.dot(&rotated))
}
