//! Associative scan over the rotation-decay monoid.
//!
//! An element carries `(γ-accumulator, θ-accumulator, state)`. The binary
//! operation is
//!
//! ```text
//! (γa, θa, sa) ∘ (γb, θb, sb) = (γa·γb, θa + θb, γb·Θ(θb)·sa + sb)
//! ```
//!
//! which is associative, has identity `(1, 0, 0)`, and whose inclusive
//! prefix scan over per-timestep elements `(γ, θ, v_t)` produces exactly the
//! recurrence `x_t = γ·Θ(θ)·x_{t-1} + v_t` in the rotated basis.
//!
//! Two execution strategies are provided: a plain left fold and a chunked
//! two-pass parallel scan (per-chunk local scans, sequential combine of
//! chunk totals, parallel broadcast), guaranteed to agree within roundoff.

use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;

use crate::error::{dim_err, Error, Result};
use crate::linalg::{rotate_pairs_inplace, rotate_pairs_into};

/// One element of the rotation-decay monoid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanElement {
    /// Accumulated decay; stays in (0, 1] for layer inputs.
    pub gamma_acc: f64,
    /// Accumulated rotation angles, one per 2x2 block.
    pub theta_acc: Array1<f64>,
    /// Carried state vector of length `2 · theta_acc.len()`.
    pub state: Array1<f64>,
}

impl ScanElement {
    pub fn new(gamma_acc: f64, theta_acc: Array1<f64>, state: Array1<f64>) -> Result<Self> {
        if state.len() != 2 * theta_acc.len() {
            return Err(dim_err(format!(
                "state length {} must be twice the angle count {}",
                state.len(),
                theta_acc.len()
            )));
        }
        Ok(Self {
            gamma_acc,
            theta_acc,
            state,
        })
    }

    /// Two-sided identity `(1, 0, 0)` for a given state dimension.
    pub fn identity(state_dim: usize) -> Result<Self> {
        if state_dim % 2 != 0 {
            return Err(dim_err(format!("state dimension {state_dim} must be even")));
        }
        Ok(Self {
            gamma_acc: 1.0,
            theta_acc: Array1::zeros(state_dim / 2),
            state: Array1::zeros(state_dim),
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state.len()
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.state.len() == other.state.len() && self.theta_acc.len() == other.theta_acc.len()
    }
}

fn combine_into(a: &ScanElement, b: &ScanElement, out: &mut ScanElement) {
    let half = b.theta_acc.len();
    let b_theta = b.theta_acc.as_slice().expect("contiguous");
    let a_state = a.state.as_slice().expect("contiguous");
    {
        let out_state = out.state.as_slice_mut().expect("contiguous");
        for i in 0..half {
            let (sin, cos) = b_theta[i].sin_cos();
            let (x0, x1) = (a_state[2 * i], a_state[2 * i + 1]);
            out_state[2 * i] = b.gamma_acc * (x0 * cos - x1 * sin) + b.state[2 * i];
            out_state[2 * i + 1] = b.gamma_acc * (x0 * sin + x1 * cos) + b.state[2 * i + 1];
        }
    }
    out.gamma_acc = a.gamma_acc * b.gamma_acc;
    for i in 0..half {
        out.theta_acc[i] = a.theta_acc[i] + b.theta_acc[i];
    }
}

/// Binary operation of the monoid: `combine(a, b)` applies `b` after `a`.
pub fn combine(a: &ScanElement, b: &ScanElement) -> Result<ScanElement> {
    if !a.same_shape(b) {
        return Err(dim_err(format!(
            "scan element shapes disagree: state {} vs {}",
            a.state.len(),
            b.state.len()
        )));
    }
    let mut out = b.clone();
    combine_into(a, b, &mut out);
    Ok(out)
}

/// `b ← combine(a, b)` without allocating; arithmetic order matches
/// [`combine`] exactly. Used by the broadcast pass of the parallel scan,
/// where the left operand is one fixed chunk prefix.
fn combine_prefix_inplace(a: &ScanElement, b: &mut ScanElement) {
    let half = b.theta_acc.len();
    let a_state = a.state.as_slice().expect("contiguous");
    let gamma_b = b.gamma_acc;
    {
        let b_theta = b.theta_acc.as_slice().expect("contiguous");
        let b_state = b.state.as_slice_mut().expect("contiguous");
        for i in 0..half {
            let (sin, cos) = b_theta[i].sin_cos();
            let (x0, x1) = (a_state[2 * i], a_state[2 * i + 1]);
            b_state[2 * i] = gamma_b * (x0 * cos - x1 * sin) + b_state[2 * i];
            b_state[2 * i + 1] = gamma_b * (x0 * sin + x1 * cos) + b_state[2 * i + 1];
        }
    }
    b.gamma_acc = a.gamma_acc * gamma_b;
    for i in 0..half {
        b.theta_acc[i] += a.theta_acc[i];
    }
}

fn validate_sequence(elems: &[ScanElement]) -> Result<()> {
    let first = elems
        .first()
        .ok_or_else(|| Error::Contract("scan over an empty sequence".into()))?;
    if first.state.len() != 2 * first.theta_acc.len() {
        return Err(dim_err("state length must be twice the angle count"));
    }
    for e in &elems[1..] {
        if !e.same_shape(first) {
            return Err(dim_err("scan elements must share one shape"));
        }
    }
    Ok(())
}

/// Inclusive scan of one contiguous slice; shared by both strategies so the
/// degenerate single-chunk parallel case runs bit-identical code.
fn scan_slice(elems: &[ScanElement]) -> Vec<ScanElement> {
    let mut out = Vec::with_capacity(elems.len());
    out.push(elems[0].clone());
    for (t, e) in elems.iter().enumerate().skip(1) {
        let mut next = e.clone();
        combine_into(&out[t - 1], e, &mut next);
        out.push(next);
    }
    out
}

/// Inclusive prefix scan: `out[t] = out[t-1] ∘ elems[t]`, `out[0] = elems[0]`.
pub fn sequential_scan(elems: &[ScanElement]) -> Result<Vec<ScanElement>> {
    validate_sequence(elems)?;
    Ok(scan_slice(elems))
}

/// Chunked two-pass parallel prefix scan.
///
/// Chunks are scanned locally in parallel, chunk totals are combined
/// sequentially, and every chunk after the first is then shifted by its
/// prefix in a second parallel pass. Output equals [`sequential_scan`] up to
/// floating-point reassociation; with `chunk >= elems.len()` the single
/// chunk runs the identical code path and the result is bitwise equal.
pub fn parallel_scan(elems: &[ScanElement], chunk: usize) -> Result<Vec<ScanElement>> {
    if chunk == 0 {
        return Err(Error::Contract("chunk size must be >= 1".into()));
    }
    validate_sequence(elems)?;

    let mut locals: Vec<Vec<ScanElement>> =
        elems.par_chunks(chunk).map(scan_slice).collect();
    if locals.len() == 1 {
        return Ok(locals.pop().expect("one chunk"));
    }

    // prefix[i] = total of chunks 0..=i
    let mut prefixes: Vec<ScanElement> = Vec::with_capacity(locals.len());
    for local in &locals {
        let total = local.last().expect("chunks are non-empty");
        let next = match prefixes.last() {
            None => total.clone(),
            Some(prev) => {
                let mut next = total.clone();
                combine_into(prev, total, &mut next);
                next
            }
        };
        prefixes.push(next);
    }

    locals
        .par_iter_mut()
        .enumerate()
        .skip(1)
        .for_each(|(i, local)| {
            let prefix = &prefixes[i - 1];
            for e in local.iter_mut() {
                combine_prefix_inplace(prefix, e);
            }
        });

    Ok(locals.into_iter().flatten().collect())
}

/// Fast path for the layer: every element shares one `(γ, θ)`, so the scan
/// collapses to `x_t = γ·Θ(θ)·x_{t-1} + v_t` with the block cosines and
/// sines hoisted out of the loop. Rows of `drive` are the `v_t`.
pub(crate) fn scan_fixed_rotation(
    gamma: f64,
    thetas: &Array1<f64>,
    drive: &ArrayView2<f64>,
) -> Array2<f64> {
    let t_len = drive.nrows();
    let d = drive.ncols();
    debug_assert_eq!(d, 2 * thetas.len());
    let cos: Vec<f64> = thetas.iter().map(|t| t.cos() * gamma).collect();
    let sin: Vec<f64> = thetas.iter().map(|t| t.sin() * gamma).collect();
    let mut out = Array2::zeros((t_len, d));
    let mut carry = vec![0.0f64; d];
    let mut rotated = vec![0.0f64; d];
    for t in 0..t_len {
        rotate_pairs_into(&cos, &sin, &carry, &mut rotated);
        let row = drive.row(t);
        for j in 0..d {
            carry[j] = rotated[j] + row[j];
        }
        out.row_mut(t)
            .assign(&ndarray::ArrayView1::from_shape(d, &carry).expect("shape"));
    }
    out
}

/// Reverse-time adjoint of [`scan_fixed_rotation`]: given upstream
/// cotangents per row, accumulates `g_t = d_t + γ·Θ(θ)ᵀ·g_{t+1}`.
pub(crate) fn scan_fixed_rotation_adjoint(
    gamma: f64,
    thetas: &Array1<f64>,
    upstream: &ArrayView2<f64>,
) -> Array2<f64> {
    let t_len = upstream.nrows();
    let d = upstream.ncols();
    debug_assert_eq!(d, 2 * thetas.len());
    // Θ(θ)ᵀ = Θ(-θ)
    let cos: Vec<f64> = thetas.iter().map(|t| t.cos() * gamma).collect();
    let sin: Vec<f64> = thetas.iter().map(|t| -t.sin() * gamma).collect();
    let mut out = Array2::zeros((t_len, d));
    let mut carry = vec![0.0f64; d];
    for t in (0..t_len).rev() {
        rotate_pairs_inplace(&cos, &sin, &mut carry);
        let row = upstream.row(t);
        for j in 0..d {
            carry[j] += row[j];
        }
        out.row_mut(t)
            .assign(&ndarray::ArrayView1::from_shape(d, &carry).expect("shape"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_element(rng: &mut ChaCha8Rng, half: usize) -> ScanElement {
        ScanElement::new(
            rng.gen_range(0.05..1.0),
            Array1::from_shape_fn(half, |_| rng.gen_range(-3.0..3.0)),
            Array1::from_shape_fn(2 * half, |_| rng.gen_range(-1.0..1.0)),
        )
        .unwrap()
    }

    fn max_field_diff(a: &ScanElement, b: &ScanElement) -> f64 {
        let mut m = (a.gamma_acc - b.gamma_acc).abs();
        for (x, y) in a.theta_acc.iter().zip(b.theta_acc.iter()) {
            m = m.max((x - y).abs());
        }
        for (x, y) in a.state.iter().zip(b.state.iter()) {
            m = m.max((x - y).abs());
        }
        m
    }

    #[test]
    fn identity_is_two_sided() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = random_element(&mut rng, 3);
        let id = ScanElement::identity(6).unwrap();
        assert!(max_field_diff(&combine(&id, &e).unwrap(), &e) < 1e-15);
        assert!(max_field_diff(&combine(&e, &id).unwrap(), &e) < 1e-15);
    }

    #[test]
    fn pure_decay_closed_form() {
        let a = ScanElement::new(0.25, array![0.0], array![1.0, 2.0]).unwrap();
        let b = ScanElement::new(0.5, array![0.0], array![10.0, 20.0]).unwrap();
        let c = combine(&a, &b).unwrap();
        assert_eq!(c.gamma_acc, 0.125);
        assert_eq!(c.state, array![10.5, 21.0]);
    }

    #[test]
    fn combine_rejects_shape_mismatch() {
        let a = ScanElement::identity(4).unwrap();
        let b = ScanElement::identity(6).unwrap();
        assert!(combine(&a, &b).is_err());
    }

    #[test]
    fn sequential_scan_single_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = random_element(&mut rng, 2);
        let out = sequential_scan(std::slice::from_ref(&e)).unwrap();
        assert_eq!(out.len(), 1);
        assert!(max_field_diff(&out[0], &e) < 1e-15);

        let ids = vec![ScanElement::identity(4).unwrap(); 5];
        let out = sequential_scan(&ids).unwrap();
        for o in out {
            assert!(max_field_diff(&o, &ids[0]) < 1e-15);
        }
    }

    #[test]
    fn sequential_scan_geometric_sum() {
        // γ = 0.5, v_t = 1 per step: states 1, 1.5, 1.75
        let elems: Vec<ScanElement> = (0..3)
            .map(|_| ScanElement::new(0.5, array![0.0], array![1.0, 1.0]).unwrap())
            .collect();
        let out = sequential_scan(&elems).unwrap();
        assert_eq!(out[0].state[0], 1.0);
        assert_eq!(out[1].state[0], 1.5);
        assert_eq!(out[2].state[0], 1.75);
    }

    #[test]
    fn empty_scan_is_an_error() {
        assert!(sequential_scan(&[]).is_err());
        assert!(parallel_scan(&[], 4).is_err());
    }

    #[test]
    fn parallel_degenerate_chunk_is_bitwise_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let elems: Vec<ScanElement> = (0..33).map(|_| random_element(&mut rng, 4)).collect();
        let seq = sequential_scan(&elems).unwrap();
        let par = parallel_scan(&elems, elems.len()).unwrap();
        assert_eq!(seq, par);
        let par_big = parallel_scan(&elems, 1000).unwrap();
        assert_eq!(seq, par_big);
    }

    #[test]
    fn parallel_matches_sequential_various_chunks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let elems: Vec<ScanElement> = (0..257).map(|_| random_element(&mut rng, 3)).collect();
        let seq = sequential_scan(&elems).unwrap();
        for chunk in [1usize, 2, 7, 64, 256] {
            let par = parallel_scan(&elems, chunk).unwrap();
            let worst = seq
                .iter()
                .zip(par.iter())
                .map(|(a, b)| max_field_diff(a, b))
                .fold(0.0f64, f64::max);
            assert!(worst < 1e-9, "chunk {chunk}: max diff {worst}");
        }
    }

    #[test]
    fn parallel_large_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let elems: Vec<ScanElement> = (0..1024).map(|_| random_element(&mut rng, 16)).collect();
        let seq = sequential_scan(&elems).unwrap();
        let par = parallel_scan(&elems, 64).unwrap();
        let worst = seq
            .iter()
            .zip(par.iter())
            .map(|(a, b)| max_field_diff(a, b))
            .fold(0.0f64, f64::max);
        assert!(worst < 1e-9, "max diff {worst}");
    }

    #[test]
    fn gamma_accumulator_is_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let elems: Vec<ScanElement> = (0..64).map(|_| random_element(&mut rng, 2)).collect();
        let out = sequential_scan(&elems).unwrap();
        let mut prod = 1.0;
        for (e, o) in elems.iter().zip(out.iter()) {
            prod *= e.gamma_acc;
            assert!((o.gamma_acc - prod).abs() < 1e-12);
        }
    }

    #[test]
    fn fixed_rotation_path_matches_generic_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let half = 4;
        let gamma = 0.83;
        let thetas = Array1::from_shape_fn(half, |_| rng.gen_range(-2.0..2.0));
        let t_len = 40;
        let drive =
            Array2::from_shape_fn((t_len, 2 * half), |_| rng.gen_range(-1.0..1.0));
        let elems: Vec<ScanElement> = (0..t_len)
            .map(|t| ScanElement::new(gamma, thetas.clone(), drive.row(t).to_owned()).unwrap())
            .collect();
        let generic = sequential_scan(&elems).unwrap();
        let fast = scan_fixed_rotation(gamma, &thetas, &drive.view());
        for t in 0..t_len {
            for j in 0..2 * half {
                assert!((generic[t].state[j] - fast[[t, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adjoint_matches_transposed_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let half = 3;
        let gamma = 0.6;
        let thetas = Array1::from_shape_fn(half, |_| rng.gen_range(-2.0..2.0));
        let t_len = 9;
        let upstream =
            Array2::from_shape_fn((t_len, 2 * half), |_| rng.gen_range(-1.0..1.0));
        let fast = scan_fixed_rotation_adjoint(gamma, &thetas, &upstream.view());
        // reference: g_t = u_t + γ Θᵀ g_{t+1}
        let neg = thetas.mapv(|v| -v);
        let mut g = Array1::<f64>::zeros(2 * half);
        for t in (0..t_len).rev() {
            let rotated =
                crate::rotor::theta_apply(&neg.view(), 1.0, &g.view()).unwrap() * gamma;
            g = rotated + &upstream.row(t);
            for j in 0..2 * half {
                assert!((fast[[t, j]] - g[j]).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn prop_combine_associative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_element(&mut rng, 3);
            let b = random_element(&mut rng, 3);
            let c = random_element(&mut rng, 3);
            let left = combine(&combine(&a, &b).unwrap(), &c).unwrap();
            let right = combine(&a, &combine(&b, &c).unwrap()).unwrap();
            prop_assert!(max_field_diff(&left, &right) < 1e-10);
        }

        #[test]
        fn prop_parallel_equals_sequential(seed in any::<u64>(), t_len in 1usize..260, chunk in 1usize..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let elems: Vec<ScanElement> = (0..t_len).map(|_| random_element(&mut rng, 2)).collect();
            let seq = sequential_scan(&elems).unwrap();
            let par = parallel_scan(&elems, chunk).unwrap();
            let worst = seq.iter().zip(par.iter()).map(|(a, b)| max_field_diff(a, b)).fold(0.0f64, f64::max);
            prop_assert!(worst < 1e-9);
        }
    }
}
