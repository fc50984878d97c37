//! Training loop, evaluation and norm telemetry.
//!
//! One orchestrating thread drives data generation, forward/backward and
//! the optimizer; the numeric kernels fan out internally. Every source of
//! randomness derives from the config seed, and metric records contain only
//! deterministic fields, so a rerun with the same config is bit-identical.

use std::path::Path;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;

use crate::checkpoint::save_checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{config_err, numeric_err, HarnessError, Result};
use crate::metrics::{bucket_head_norms, stationary_norm, MetricRecord, MetricsWriter};
use rand::SeedableRng;
use rotrnn::grad::{adam_step, backward_with_options, OptimState};
use rotrnn::layer::{layer_forward, SequenceBatch, DEFAULT_NORM_C};
use rotrnn::model::{
    apply_bn_update, eval_loss_running, init_model, model_eval_forward, LossTarget, ModelBatch,
    ModelDims, ModelParams,
};
use rotrnn::tasks::{gen_batch, gen_white_noise, Split, TaskBatch, TaskKind, TaskLabels, TaskSpec};

const DROPOUT_SEED_SALT: u64 = 0x5eed_d20f_0u64;

/// Model shape derived from a training config.
pub fn model_dims(cfg: &ExperimentConfig) -> Result<ModelDims> {
    let spec = cfg.task_spec();
    let (in_dim, num_classes) = match spec.kind {
        TaskKind::WhiteNoise { .. } => {
            return Err(config_err(
                "white-noise task has no labels and cannot be trained; use probe-norms",
            ))
        }
        _ => (spec.vocab_size()?, spec.num_classes()?),
    };
    Ok(ModelDims {
        in_dim,
        token_input: true,
        d_u: cfg.model.d_u,
        d_x: cfg.model.d_x,
        n_heads: cfg.model.heads,
        n_blocks: cfg.model.layers,
        num_classes,
        gamma_min: cfg.init.gamma_min,
        gamma_max: cfg.init.gamma_max,
        theta_max: cfg.init.theta_max,
    })
}

fn loss_target<'a>(
    spec: &TaskSpec,
    positions: &'a [usize],
    labels: &'a TaskLabels,
) -> Result<LossTarget<'a>> {
    match labels {
        TaskLabels::Class(labels) => Ok(LossTarget::Pooled { labels }),
        TaskLabels::Seq(labels) => {
            let _ = spec;
            Ok(LossTarget::Positions { positions, labels })
        }
        TaskLabels::None => Err(config_err("task produced no labels")),
    }
}

/// Mean loss/accuracy over the given number of batches of a split, in
/// evaluation mode (running batch-norm statistics).
pub fn evaluate(
    params: &ModelParams,
    cfg: &ExperimentConfig,
    split: Split,
    n_batches: usize,
) -> Result<(f64, f64)> {
    let spec = cfg.task_spec();
    let positions = match spec.kind {
        TaskKind::Copy { .. } => spec.output_positions()?,
        _ => Vec::new(),
    };
    let mut loss_sum = 0.0;
    let mut acc_sum = 0.0;
    for idx in 0..n_batches {
        let batch = gen_batch(&spec, split, idx, cfg.optimizer.batch)?;
        let target = loss_target(&spec, &positions, &batch.labels)?;
        let (loss, acc) = eval_loss_running(params, &batch.input, &target)?;
        loss_sum += loss;
        acc_sum += acc;
    }
    Ok((loss_sum / n_batches as f64, acc_sum / n_batches as f64))
}

/// Probe-based norm telemetry: drive each layer's recurrent core with a
/// fixed standard-normal batch (the distribution under which the
/// normalization pins the state scale) and bucket the per-head norms.
/// This measures the trained parameters' normalization directly,
/// independent of task input statistics.
pub fn layer_norm_buckets_probe(
    params: &ModelParams,
    cfg: &ExperimentConfig,
    probe: &SequenceBatch,
) -> Result<Vec<Vec<f64>>> {
    let t_len = probe.t_len();
    let mut out = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let fwd = layer_forward(&block.rot, probe, true, DEFAULT_NORM_C)?;
        let states = fwd.states.expect("states requested");
        let rows = probe.batch() * t_len;
        let flat = states
            .view()
            .into_shape_with_order((rows, block.rot.d_x()))
            .expect("standard layout");
        out.push(bucket_head_norms(&flat, t_len, cfg.model.heads));
    }
    Ok(out)
}

/// White-noise probe batch used for the norm telemetry, fixed across a run.
pub fn norm_probe_batch(cfg: &ExperimentConfig) -> Result<SequenceBatch> {
    let spec = TaskSpec {
        kind: TaskKind::WhiteNoise { dim: cfg.model.d_u },
        t_len: cfg.task_spec().t_len,
        seed: cfg.seed ^ 0x6e6f_726d,
        val_size: 0,
        test_size: 0,
    };
    Ok(gen_white_noise(&spec, 0, 32)?)
}

/// Task-data norm telemetry on a fixed validation batch (for comparison
/// plots; the probe statistic above is the primary one).
pub fn layer_norm_buckets_data(
    params: &ModelParams,
    cfg: &ExperimentConfig,
    batch: &ModelBatch,
) -> Result<Vec<Vec<f64>>> {
    let fwd = model_eval_forward(params, batch, true)?;
    let t_len = batch.input.t_len();
    Ok(fwd
        .states
        .iter()
        .map(|s| bucket_head_norms(&s.view(), t_len, cfg.model.heads))
        .collect())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps_run: u64,
    pub best_val_acc: f64,
    pub final_val_acc: f64,
    /// First step at which validation accuracy reached the target.
    pub reached_target_at: Option<u64>,
    /// Stationary-window per-layer norms observed at each eval, flattened
    /// as (step, layer, value).
    pub norm_history: Vec<(u64, usize, f64)>,
}

fn dump_param_norms(params: &ModelParams, writer: &mut MetricsWriter) {
    let names = params.learnable_leaf_names();
    let mut idx = 0usize;
    params.visit_learnable(&mut |_, slice| {
        let norm = slice.iter().map(|v| v * v).sum::<f64>().sqrt();
        let line = format!("diagnostic leaf {} l2 {:.6e}", names[idx], norm);
        let _ = writer.log_line(&line);
        eprintln!("{line}");
        idx += 1;
    });
}

/// Run training per the config, writing `metrics.jsonl`, `norms.csv`,
/// `run.log`, a resolved `config.json`, and `best/` + `final/` checkpoints
/// under `out_dir`.
pub fn run_train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let spec = cfg.task_spec();
    let dims = model_dims(cfg)?;
    let config_hash = cfg.hash();

    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.json"), cfg.to_json_pretty())?;
    let mut writer = MetricsWriter::create(out_dir)?;

    let mut params = init_model(cfg.seed, &dims)?;
    let mut opt = OptimState::new(&params);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DROPOUT_SEED_SALT);

    let positions = match spec.kind {
        TaskKind::Copy { .. } => spec.output_positions()?,
        _ => Vec::new(),
    };
    // fixed batches for norm telemetry
    let norm_batch = gen_batch(&spec, Split::Val, 0, cfg.optimizer.batch)?;
    let probe_batch = norm_probe_batch(cfg)?;

    let start = Instant::now();
    let mut outcome = TrainOutcome {
        steps_run: 0,
        best_val_acc: f64::NEG_INFINITY,
        final_val_acc: f64::NAN,
        reached_target_at: None,
        norm_history: Vec::new(),
    };

    let run_eval = |params: &ModelParams,
                        step: u64,
                        train_loss: f64,
                        train_acc: f64,
                        outcome: &mut TrainOutcome,
                        writer: &mut MetricsWriter|
     -> Result<f64> {
        let (val_loss, val_acc) = evaluate(params, cfg, Split::Val, cfg.eval_batches)?;
        let buckets = layer_norm_buckets_probe(params, cfg, &probe_batch)?;
        writer.record_norms(step, &buckets)?;
        let data_buckets = layer_norm_buckets_data(params, cfg, &norm_batch.input)?;
        writer.record_norms_data(step, &data_buckets)?;
        let layer_norms: Vec<f64> = buckets.iter().map(|b| stationary_norm(b)).collect();
        for (layer, value) in layer_norms.iter().enumerate() {
            outcome.norm_history.push((step, layer, *value));
        }
        writer.record(&MetricRecord {
            step,
            train_loss,
            train_acc,
            val_acc: Some(val_acc),
            val_loss: Some(val_loss),
            layer_norms: Some(layer_norms),
            wall_ms: start.elapsed().as_millis(),
        })?;
        outcome.final_val_acc = val_acc;
        Ok(val_acc)
    };

    if cfg.optimizer.iters == 0 {
        save_checkpoint(&out_dir.join("final"), &params, &config_hash)?;
        writer.flush()?;
        return Ok(outcome);
    }

    // baseline record before the first update
    {
        let batch = gen_batch(&spec, Split::Train, 0, cfg.optimizer.batch)?;
        let target = loss_target(&spec, &positions, &batch.labels)?;
        let (loss0, acc0) = rotrnn::grad::eval_loss(&params, &batch.input, &target)?;
        let val_acc = run_eval(&params, 0, loss0, acc0, &mut outcome, &mut writer)?;
        if val_acc > outcome.best_val_acc {
            outcome.best_val_acc = val_acc;
            save_checkpoint(&out_dir.join("best"), &params, &config_hash)?;
        }
    }

    for step in 1..=cfg.optimizer.iters {
        let batch_idx = (step - 1) as usize;
        let TaskBatch { input, labels } = gen_batch(&spec, Split::Train, batch_idx, cfg.optimizer.batch)?;
        let target = loss_target(&spec, &positions, &labels)?;

        let backward_result = backward_with_options(
            &params,
            &input,
            &target,
            cfg.optimizer.dropout,
            Some(&mut dropout_rng),
            false,
        );
        let out = match backward_result {
            Ok(out) => out,
            Err(rotrnn::Error::Numeric(msg)) => {
                let line = format!("abort at step {step}: {msg}");
                let _ = writer.log_line(&line);
                eprintln!("{line}");
                dump_param_norms(&params, &mut writer);
                writer.flush()?;
                return Err(numeric_err(format!("training aborted: {msg}")));
            }
            Err(e) => return Err(HarnessError::from(e)),
        };
        for (block, stats) in params.blocks.iter_mut().zip(out.bn_stats.iter()) {
            apply_bn_update(&mut block.bn, stats);
        }

        let mut grads = out.grads;
        if let Some(max_norm) = cfg.optimizer.grad_clip {
            grads.clip_global_norm(max_norm);
        }
        let factor = cfg.lr_factor(step - 1);
        adam_step(
            &mut opt,
            &mut params,
            &grads,
            cfg.optimizer.glr * factor,
            cfg.optimizer.lr * factor,
            cfg.optimizer.weight_decay,
        )?;
        outcome.steps_run = step;

        let log_now = step % cfg.log_interval == 0 || step == cfg.optimizer.iters;
        let eval_now = step % cfg.eval_interval == 0 || step == cfg.optimizer.iters;
        if eval_now {
            let val_acc = run_eval(&params, step, out.loss, out.accuracy, &mut outcome, &mut writer)?;
            if val_acc > outcome.best_val_acc {
                outcome.best_val_acc = val_acc;
                save_checkpoint(&out_dir.join("best"), &params, &config_hash)?;
            }
            if let Some(target_acc) = cfg.target_val_acc {
                if val_acc >= target_acc && outcome.reached_target_at.is_none() {
                    outcome.reached_target_at = Some(step);
                    let _ = writer.log_line(&format!(
                        "target accuracy {target_acc} reached at step {step}"
                    ));
                    break;
                }
            }
        } else if log_now {
            writer.record(&MetricRecord {
                step,
                train_loss: out.loss,
                train_acc: out.accuracy,
                val_acc: None,
                val_loss: None,
                layer_norms: None,
                wall_ms: start.elapsed().as_millis(),
            })?;
        }
    }

    save_checkpoint(&out_dir.join("final"), &params, &config_hash)?;
    writer.flush()?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TaskConfig;

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.task = TaskConfig::Majority {
            t: 12,
            signal_count: 3,
            noise_vocab: 3,
            val_size: 32,
            test_size: 32,
        };
        cfg.model.d_u = 8;
        cfg.model.d_x = 8;
        cfg.model.layers = 1;
        cfg.model.heads = 2;
        cfg.optimizer.batch = 8;
        cfg.optimizer.iters = 6;
        cfg.optimizer.warmup = 2;
        cfg.log_interval = 2;
        cfg.eval_interval = 3;
        cfg.eval_batches = 2;
        cfg
    }

    #[test]
    fn train_writes_artifacts_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        run_train(&cfg, &out_a).unwrap();
        run_train(&cfg, &out_b).unwrap();

        let metrics_a = std::fs::read(out_a.join("metrics.jsonl")).unwrap();
        let metrics_b = std::fs::read(out_b.join("metrics.jsonl")).unwrap();
        assert!(!metrics_a.is_empty());
        assert_eq!(metrics_a, metrics_b);

        let norms_a = std::fs::read(out_a.join("norms.csv")).unwrap();
        let norms_b = std::fs::read(out_b.join("norms.csv")).unwrap();
        assert_eq!(norms_a, norms_b);
        assert!(out_a.join("final/manifest.json").exists());
        assert!(out_a.join("best/manifest.json").exists());
    }

    #[test]
    fn zero_iters_writes_initial_checkpoint_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.optimizer.iters = 0;
        let outcome = run_train(&cfg, dir.path()).unwrap();
        assert_eq!(outcome.steps_run, 0);
        assert!(dir.path().join("final/manifest.json").exists());
        assert!(!dir.path().join("best").exists());
        let metrics = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        assert!(metrics.is_empty());
    }

    #[test]
    fn white_noise_is_not_trainable() {
        let mut cfg = tiny_config();
        cfg.task = TaskConfig::WhiteNoise {
            t: 8,
            dim: 4,
            val_size: 8,
            test_size: 8,
        };
        let dir = tempfile::tempdir().unwrap();
        let err = run_train(&cfg, dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }
}
