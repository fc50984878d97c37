//! Deterministic synthetic datasets.
//!
//! Every sample is a pure function of `(spec, global index)`: the generator
//! seeds one RNG stream per sample, so regeneration is exact and splits are
//! disjoint by construction (validation owns indices `[0, val)`, test owns
//! `[val, val + test)`, training owns everything above).
//!
//! Token layouts:
//!
//! - **copy**: `[pattern of K symbols][blanks][marker][K output slots]` with
//!   symbols `0..V`, blank `V`, marker `V + 1`. The pattern occupies
//!   positions `0..K`, the marker sits at `T - K - 1`, and the model must
//!   emit symbol `k` at position `T - K + k`. Labels are the K pattern
//!   symbols; loss and accuracy are evaluated at the output positions only.
//! - **majority**: two signal classes (tokens 0 and 1) scattered at an odd
//!   number of positions inside noise tokens `2..2+noise_vocab`; the label
//!   is the majority signal class. An odd count makes ties impossible.

use ndarray::{Array2, Array3};
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{config_err, Result};
use crate::layer::SequenceBatch;
use crate::model::{ModelBatch, ModelInput};

/// Which synthetic task to generate.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskKind {
    /// I.i.d. standard-normal feature sequences (no labels); the input
    /// distribution assumed by the norm law.
    WhiteNoise { dim: usize },
    /// Long-range recall: reproduce a K-symbol pattern after a delay.
    Copy { vocab: usize, pattern_len: usize },
    /// Majority vote over signal tokens scattered in noise.
    Majority { signal_count: usize, noise_vocab: usize },
}

/// Task geometry plus the seed and split sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub t_len: usize,
    pub seed: u64,
    pub val_size: usize,
    pub test_size: usize,
}

/// Dataset split; train is unbounded, val/test are fixed index ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Labels attached to a generated batch.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskLabels {
    None,
    /// One class per sequence.
    Class(Vec<usize>),
    /// One class per (sequence, output position).
    Seq(Array2<usize>),
}

/// A generated batch: model input plus labels.
#[derive(Debug, Clone)]
pub struct TaskBatch {
    pub input: ModelBatch,
    pub labels: TaskLabels,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.t_len == 0 {
            return Err(config_err("sequence length must be >= 1"));
        }
        match &self.kind {
            TaskKind::WhiteNoise { dim } => {
                if *dim == 0 {
                    return Err(config_err("white-noise dimension must be >= 1"));
                }
            }
            TaskKind::Copy { vocab, pattern_len } => {
                if *vocab < 2 {
                    return Err(config_err("copy task needs at least 2 symbols"));
                }
                if *pattern_len == 0 {
                    return Err(config_err("copy pattern must be non-empty"));
                }
                // pattern + at least the marker + K output slots
                if self.t_len < 2 * pattern_len + 1 {
                    return Err(config_err(format!(
                        "copy geometry invalid: need T >= 2K+1 = {}, got {}",
                        2 * pattern_len + 1,
                        self.t_len
                    )));
                }
            }
            TaskKind::Majority {
                signal_count,
                noise_vocab,
            } => {
                if *signal_count == 0 || signal_count % 2 == 0 {
                    return Err(config_err(
                        "majority needs an odd, positive signal count (ties rejected)",
                    ));
                }
                if *signal_count > self.t_len {
                    return Err(config_err("more signal tokens than timesteps"));
                }
                if *noise_vocab == 0 && *signal_count < self.t_len {
                    return Err(config_err(
                        "non-signal positions need a noise alphabet",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Total token alphabet size seen by the encoder.
    pub fn vocab_size(&self) -> Result<usize> {
        match &self.kind {
            TaskKind::WhiteNoise { .. } => Err(config_err("white noise has no vocabulary")),
            TaskKind::Copy { vocab, .. } => Ok(vocab + 2), // + blank + marker
            TaskKind::Majority { noise_vocab, .. } => Ok(2 + noise_vocab),
        }
    }

    pub fn num_classes(&self) -> Result<usize> {
        match &self.kind {
            TaskKind::WhiteNoise { .. } => Err(config_err("white noise has no labels")),
            TaskKind::Copy { vocab, .. } => Ok(*vocab),
            TaskKind::Majority { .. } => Ok(2),
        }
    }

    /// Timesteps at which the copy task reads the model output.
    pub fn output_positions(&self) -> Result<Vec<usize>> {
        match &self.kind {
            TaskKind::Copy { pattern_len, .. } => {
                Ok(((self.t_len - pattern_len)..self.t_len).collect())
            }
            _ => Err(config_err("only the copy task has output positions")),
        }
    }

    /// First global sample index owned by a split.
    pub fn split_base(&self, split: Split) -> usize {
        match split {
            Split::Val => 0,
            Split::Test => self.val_size,
            Split::Train => self.val_size + self.test_size,
        }
    }

    /// Number of samples in a split (`None`: unbounded training stream).
    pub fn split_len(&self, split: Split) -> Option<usize> {
        match split {
            Split::Val => Some(self.val_size),
            Split::Test => Some(self.test_size),
            Split::Train => None,
        }
    }

    fn sample_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }
}

/// Standard-normal feature sequences for the given global indices.
pub fn gen_white_noise(spec: &TaskSpec, start: usize, count: usize) -> Result<SequenceBatch> {
    spec.validate()?;
    let dim = match &spec.kind {
        TaskKind::WhiteNoise { dim } => *dim,
        _ => return Err(config_err("spec is not a white-noise task")),
    };
    let mut data = Array3::zeros((count, spec.t_len, dim));
    for i in 0..count {
        let mut rng = spec.sample_rng(start + i);
        for t in 0..spec.t_len {
            for d in 0..dim {
                data[[i, t, d]] = rng.sample(StandardNormal);
            }
        }
    }
    SequenceBatch::new(data, None)
}

/// Copy-task batches: token sequences plus the `(count, K)` pattern labels.
pub fn gen_copy_task(spec: &TaskSpec, start: usize, count: usize) -> Result<(ModelBatch, Array2<usize>)> {
    spec.validate()?;
    let (vocab, k) = match &spec.kind {
        TaskKind::Copy { vocab, pattern_len } => (*vocab, *pattern_len),
        _ => return Err(config_err("spec is not a copy task")),
    };
    let t_len = spec.t_len;
    let blank = vocab;
    let marker = vocab + 1;
    let mut tokens = Array2::from_elem((count, t_len), blank);
    let mut labels = Array2::zeros((count, k));
    for i in 0..count {
        let mut rng = spec.sample_rng(start + i);
        for j in 0..k {
            let sym = rng.gen_range(0..vocab);
            tokens[[i, j]] = sym;
            labels[[i, j]] = sym;
        }
        tokens[[i, t_len - k - 1]] = marker;
    }
    Ok((ModelBatch::new(ModelInput::Tokens(tokens), None)?, labels))
}

/// Majority batches: token sequences plus one binary label per sequence.
pub fn gen_majority(spec: &TaskSpec, start: usize, count: usize) -> Result<(ModelBatch, Vec<usize>)> {
    spec.validate()?;
    let (signal_count, noise_vocab) = match &spec.kind {
        TaskKind::Majority {
            signal_count,
            noise_vocab,
        } => (*signal_count, *noise_vocab),
        _ => return Err(config_err("spec is not a majority task")),
    };
    let t_len = spec.t_len;
    let mut tokens = Array2::zeros((count, t_len));
    let mut labels = Vec::with_capacity(count);
    let all_positions: Vec<usize> = (0..t_len).collect();
    for i in 0..count {
        let mut rng = spec.sample_rng(start + i);
        for t in 0..t_len {
            tokens[[i, t]] = 2 + if noise_vocab > 0 { rng.gen_range(0..noise_vocab) } else { 0 };
        }
        let mut positions = all_positions.clone();
        positions.partial_shuffle(&mut rng, signal_count);
        let mut ones = 0usize;
        for &p in positions.iter().take(signal_count) {
            let class = rng.gen_range(0..2usize);
            tokens[[i, p]] = class;
            ones += class;
        }
        labels.push(if 2 * ones > signal_count { 1 } else { 0 });
    }
    Ok((ModelBatch::new(ModelInput::Tokens(tokens), None)?, labels))
}

/// Generate the `batch_idx`-th batch of a split. Bounded splits reject
/// requests past their end; the training stream is infinite.
pub fn gen_batch(
    spec: &TaskSpec,
    split: Split,
    batch_idx: usize,
    batch_size: usize,
) -> Result<TaskBatch> {
    let start = spec.split_base(split) + batch_idx * batch_size;
    if let Some(len) = spec.split_len(split) {
        if batch_idx * batch_size + batch_size > len {
            return Err(config_err(format!(
                "batch {batch_idx} x {batch_size} exceeds split of {len} samples"
            )));
        }
    }
    match &spec.kind {
        TaskKind::WhiteNoise { .. } => {
            let batch = gen_white_noise(spec, start, batch_size)?;
            Ok(TaskBatch {
                input: ModelBatch::new(ModelInput::Features(batch.data), batch.lengths)?,
                labels: TaskLabels::None,
            })
        }
        TaskKind::Copy { .. } => {
            let (input, labels) = gen_copy_task(spec, start, batch_size)?;
            Ok(TaskBatch {
                input,
                labels: TaskLabels::Seq(labels),
            })
        }
        TaskKind::Majority { .. } => {
            let (input, labels) = gen_majority(spec, start, batch_size)?;
            Ok(TaskBatch {
                input,
                labels: TaskLabels::Class(labels),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelInput;

    fn copy_spec(vocab: usize, k: usize, t: usize) -> TaskSpec {
        TaskSpec {
            kind: TaskKind::Copy {
                vocab,
                pattern_len: k,
            },
            t_len: t,
            seed: 7,
            val_size: 8,
            test_size: 8,
        }
    }

    fn tokens_of(batch: &ModelBatch) -> &Array2<usize> {
        match &batch.input {
            ModelInput::Tokens(t) => t,
            _ => panic!("expected tokens"),
        }
    }

    #[test]
    fn white_noise_deterministic_and_standard() {
        let spec = TaskSpec {
            kind: TaskKind::WhiteNoise { dim: 4 },
            t_len: 50,
            seed: 3,
            val_size: 0,
            test_size: 0,
        };
        let a = gen_white_noise(&spec, 10, 8).unwrap();
        let b = gen_white_noise(&spec, 10, 8).unwrap();
        assert_eq!(a.data, b.data);

        // law of large numbers over >= 1e6 entries
        let big = gen_white_noise(&spec, 0, 5000).unwrap();
        let n = big.data.len() as f64;
        assert!(n >= 1e6);
        let mean: f64 = big.data.iter().sum::<f64>() / n;
        let var: f64 = big.data.iter().map(|v| v * v).sum::<f64>() / n - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn copy_smallest_instance_layout() {
        // K = 1, T = 4: [symbol, blank, marker, blank]
        let spec = copy_spec(3, 1, 4);
        let (batch, labels) = gen_copy_task(&spec, 0, 4).unwrap();
        let tokens = tokens_of(&batch);
        for i in 0..4 {
            let sym = tokens[[i, 0]];
            assert!(sym < 3);
            assert_eq!(labels[[i, 0]], sym);
            assert_eq!(tokens[[i, 1]], 3); // blank
            assert_eq!(tokens[[i, 2]], 4); // marker
            assert_eq!(tokens[[i, 3]], 3); // output slot carries blank input
        }
        assert_eq!(spec.output_positions().unwrap(), vec![3]);
    }

    #[test]
    fn copy_layout_general() {
        let spec = copy_spec(8, 10, 256);
        let (batch, labels) = gen_copy_task(&spec, 100, 3).unwrap();
        let tokens = tokens_of(&batch);
        for i in 0..3 {
            for j in 0..10 {
                assert!(tokens[[i, j]] < 8);
                assert_eq!(tokens[[i, j]], labels[[i, j]]);
            }
            for t in 10..245 {
                assert_eq!(tokens[[i, t]], 8, "blank expected at {t}");
            }
            assert_eq!(tokens[[i, 245]], 9, "marker at T-K-1");
            for t in 246..256 {
                assert_eq!(tokens[[i, t]], 8);
            }
        }
        assert_eq!(
            spec.output_positions().unwrap(),
            (246..256).collect::<Vec<_>>()
        );
    }

    #[test]
    fn copy_deterministic_golden_batch() {
        let spec = TaskSpec {
            kind: TaskKind::Copy {
                vocab: 8,
                pattern_len: 10,
            },
            t_len: 256,
            seed: 12345,
            val_size: 0,
            test_size: 0,
        };
        let (batch, labels) = gen_copy_task(&spec, 0, 2).unwrap();
        let tokens = tokens_of(&batch);
        // golden values pinned from the first validated build
        let first_pattern: Vec<usize> = (0..10).map(|j| tokens[[0, j]]).collect();
        assert_eq!(first_pattern, vec![0, 6, 1, 3, 2, 0, 2, 5, 5, 3]);
        let second_pattern: Vec<usize> = (0..10).map(|j| labels[[1, j]]).collect();
        assert_eq!(second_pattern, vec![5, 3, 1, 3, 1, 1, 7, 2, 1, 6]);

        let again = gen_copy_task(&spec, 0, 2).unwrap();
        assert_eq!(tokens, tokens_of(&again.0));
    }

    #[test]
    fn copy_symbol_positions_are_balanced() {
        let spec = copy_spec(4, 3, 10);
        let n = 100_000usize;
        let (_, labels) = gen_copy_task(&spec, 0, n).unwrap();
        for j in 0..3 {
            let mut counts = [0usize; 4];
            for i in 0..n {
                counts[labels[[i, j]]] += 1;
            }
            for c in counts {
                let freq = c as f64 / n as f64;
                assert!(
                    (freq - 0.25).abs() < 0.02 * 0.25 + 0.005,
                    "position {j}: freq {freq}"
                );
            }
        }
    }

    #[test]
    fn copy_rejects_bad_geometry() {
        assert!(copy_spec(8, 10, 20).validate().is_err()); // T < 2K+1
        assert!(copy_spec(1, 2, 10).validate().is_err()); // vocab too small
        assert!(copy_spec(8, 0, 10).validate().is_err()); // empty pattern
    }

    #[test]
    fn majority_degenerate_cases() {
        let spec = TaskSpec {
            kind: TaskKind::Majority {
                signal_count: 1,
                noise_vocab: 3,
            },
            t_len: 12,
            seed: 5,
            val_size: 0,
            test_size: 0,
        };
        let (batch, labels) = gen_majority(&spec, 0, 64).unwrap();
        let tokens = tokens_of(&batch);
        for i in 0..64 {
            // single signal token: the label is its class
            let signals: Vec<usize> = (0..12)
                .map(|t| tokens[[i, t]])
                .filter(|&tok| tok < 2)
                .collect();
            assert_eq!(signals.len(), 1);
            assert_eq!(labels[i], signals[0]);
        }
    }

    #[test]
    fn majority_brute_force_labeler_agrees() {
        let spec = TaskSpec {
            kind: TaskKind::Majority {
                signal_count: 7,
                noise_vocab: 4,
            },
            t_len: 32,
            seed: 11,
            val_size: 0,
            test_size: 0,
        };
        let n = 10_000usize;
        let (batch, labels) = gen_majority(&spec, 0, n).unwrap();
        let tokens = tokens_of(&batch);
        for i in 0..n {
            let mut counts = [0usize; 2];
            for t in 0..32 {
                let tok = tokens[[i, t]];
                if tok < 2 {
                    counts[tok] += 1;
                }
            }
            assert_eq!(counts[0] + counts[1], 7);
            let expected = usize::from(counts[1] > counts[0]);
            assert_eq!(labels[i], expected, "sample {i}");
        }
    }

    #[test]
    fn majority_rejects_tie_capable_geometry() {
        let even = TaskSpec {
            kind: TaskKind::Majority {
                signal_count: 4,
                noise_vocab: 2,
            },
            t_len: 10,
            seed: 0,
            val_size: 0,
            test_size: 0,
        };
        assert!(even.validate().is_err());
    }

    #[test]
    fn splits_are_disjoint_index_ranges() {
        let spec = copy_spec(4, 2, 8);
        assert_eq!(spec.split_base(Split::Val), 0);
        assert_eq!(spec.split_base(Split::Test), 8);
        assert_eq!(spec.split_base(Split::Train), 16);
        assert_eq!(spec.split_len(Split::Val), Some(8));
        assert_eq!(spec.split_len(Split::Train), None);

        // same index → same sample regardless of which call produced it
        let (a, _) = gen_copy_task(&spec, 16, 4).unwrap();
        let b = gen_batch(&spec, Split::Train, 0, 4).unwrap();
        assert_eq!(tokens_of(&a), tokens_of(&b.input));

        // bounded splits reject overruns
        assert!(gen_batch(&spec, Split::Val, 2, 5).is_err());
    }
}
