//! Gradient verification runner used by the `check-grads` subcommand.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use rotrnn::grad::{directional_derivative_check, finite_diff_check};
use rotrnn::model::{init_model, LossTarget, ModelBatch, ModelDims, ModelInput};

pub const FD_STEP: f64 = 1e-5;
pub const FD_BOUND: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub t_len: usize,
    pub d_h: usize,
    pub max_rel_err: f64,
    pub directional_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub cases: Vec<GradCheckCase>,
    pub max_rel_err: f64,
}

/// Finite-difference check over small models spanning `T ∈ {4, 16}` and
/// `D_h ∈ {4, 8}`. Token batches cycle the vocabulary so every embedding
/// row carries real gradient signal.
pub fn grad_check_suite(seed: u64) -> Result<GradCheckReport> {
    let vocab = 5usize;
    let mut report = GradCheckReport {
        cases: Vec::new(),
        max_rel_err: 0.0,
    };
    for (t_len, d_h) in [(4usize, 4usize), (4, 8), (16, 4), (16, 8)] {
        let dims = ModelDims {
            in_dim: vocab,
            token_input: true,
            d_u: 6,
            d_x: 2 * d_h,
            n_heads: 2,
            n_blocks: 2,
            num_classes: 3,
            gamma_min: 0.4,
            gamma_max: 0.9,
            theta_max: 1.5,
        };
        let params = init_model(seed ^ (t_len as u64) << 8 ^ d_h as u64, &dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(977));
        let batch_size = 3usize;
        let tokens = Array2::from_shape_fn((batch_size, t_len), |(i, j)| {
            (i * t_len + j + rng.gen_range(0..vocab)) % vocab
        });
        let labels: Vec<usize> = (0..batch_size).map(|_| rng.gen_range(0..3)).collect();
        let batch = ModelBatch::new(ModelInput::Tokens(tokens), None)?;
        let target = LossTarget::Pooled { labels: &labels };

        let fd = finite_diff_check(&params, &batch, &target, FD_STEP)?;
        let dir = directional_derivative_check(&params, &batch, &target, FD_STEP, seed)?;
        report.max_rel_err = report.max_rel_err.max(fd.max_rel_err).max(dir);
        report.cases.push(GradCheckCase {
            t_len,
            d_h,
            max_rel_err: fd.max_rel_err,
            directional_rel_err: dir,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_for_one_seed() {
        let report = grad_check_suite(1).unwrap();
        assert!(
            report.max_rel_err < FD_BOUND,
            "max rel err {}",
            report.max_rel_err
        );
        assert_eq!(report.cases.len(), 4);
    }
}
