//! Experiment configuration: JSON with exhaustive validation.
//!
//! Unknown keys are rejected so typos cannot silently fall back to
//! defaults. The default values follow the ListOps-style row of the tuned
//! hyperparameter table: model dim 128, state dim 256 over 32 heads,
//! global and recurrent learning rates 1e-3, batch 32, weight decay 0.05,
//! γ initialized with squared magnitude uniform on [0.5², 0.999²] and
//! angles on [0, π/100].

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, Result};
use rotrnn::tasks::{TaskKind, TaskSpec};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    WhiteNoise {
        t: usize,
        dim: usize,
        #[serde(default = "default_split_size")]
        val_size: usize,
        #[serde(default = "default_split_size")]
        test_size: usize,
    },
    Copy {
        t: usize,
        vocab: usize,
        pattern_len: usize,
        #[serde(default = "default_split_size")]
        val_size: usize,
        #[serde(default = "default_split_size")]
        test_size: usize,
    },
    Majority {
        t: usize,
        signal_count: usize,
        noise_vocab: usize,
        #[serde(default = "default_split_size")]
        val_size: usize,
        #[serde(default = "default_split_size")]
        test_size: usize,
    },
}

fn default_split_size() -> usize {
    512
}

impl TaskConfig {
    pub fn to_spec(&self, seed: u64) -> TaskSpec {
        match self {
            TaskConfig::WhiteNoise {
                t,
                dim,
                val_size,
                test_size,
            } => TaskSpec {
                kind: TaskKind::WhiteNoise { dim: *dim },
                t_len: *t,
                seed,
                val_size: *val_size,
                test_size: *test_size,
            },
            TaskConfig::Copy {
                t,
                vocab,
                pattern_len,
                val_size,
                test_size,
            } => TaskSpec {
                kind: TaskKind::Copy {
                    vocab: *vocab,
                    pattern_len: *pattern_len,
                },
                t_len: *t,
                seed,
                val_size: *val_size,
                test_size: *test_size,
            },
            TaskConfig::Majority {
                t,
                signal_count,
                noise_vocab,
                val_size,
                test_size,
            } => TaskSpec {
                kind: TaskKind::Majority {
                    signal_count: *signal_count,
                    noise_vocab: *noise_vocab,
                },
                t_len: *t,
                seed,
                val_size: *val_size,
                test_size: *test_size,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Model (channel) dimension D_u.
    pub d_u: usize,
    /// Recurrent state dimension D_x, split across heads.
    pub d_x: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_u: 128,
            d_x: 256,
            layers: 6,
            heads: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    None,
    Cosine,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Global learning rate (everything except recurrent-layer leaves).
    pub glr: f64,
    /// Recurrent-layer learning rate (m, thetas, gamma_log, b).
    pub lr: f64,
    pub batch: usize,
    pub weight_decay: f64,
    pub dropout: f64,
    pub iters: u64,
    #[serde(default = "default_warmup")]
    pub warmup: u64,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    /// Global-norm gradient clip; absent means off.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

fn default_warmup() -> u64 {
    1000
}

fn default_schedule() -> Schedule {
    Schedule::Cosine
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            glr: 1e-3,
            lr: 1e-3,
            batch: 32,
            weight_decay: 0.05,
            dropout: 0.0,
            iters: 80_000,
            warmup: default_warmup(),
            schedule: default_schedule(),
            grad_clip: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub theta_max: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            gamma_min: 0.5,
            gamma_max: 0.999,
            theta_max: std::f64::consts::PI / 100.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: TaskConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default = "default_log_interval")]
    pub log_interval: u64,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: u64,
    #[serde(default = "default_eval_batches")]
    pub eval_batches: usize,
    /// Stop once validation accuracy reaches this value (optional).
    #[serde(default)]
    pub target_val_acc: Option<f64>,
}

fn default_log_interval() -> u64 {
    50
}

fn default_eval_interval() -> u64 {
    250
}

fn default_eval_batches() -> usize {
    4
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: TaskConfig::Copy {
                t: 256,
                vocab: 8,
                pattern_len: 10,
                val_size: 512,
                test_size: 512,
            },
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            init: InitConfig::default(),
            log_interval: default_log_interval(),
            eval_interval: default_eval_interval(),
            eval_batches: default_eval_batches(),
            target_val_acc: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(json).map_err(|e| config_err(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn task_spec(&self) -> TaskSpec {
        self.task.to_spec(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.task_spec().validate()?;
        let m = &self.model;
        if m.layers == 0 {
            return Err(config_err("need at least one layer"));
        }
        if m.heads == 0 || m.d_x % m.heads != 0 {
            return Err(config_err(format!(
                "d_x = {} must divide into {} heads",
                m.d_x, m.heads
            )));
        }
        let d_h = m.d_x / m.heads;
        if d_h < 2 || d_h % 2 != 0 {
            return Err(config_err(format!(
                "head dimension {d_h} must be even and >= 2"
            )));
        }
        let o = &self.optimizer;
        if o.batch == 0 {
            return Err(config_err("batch size must be >= 1"));
        }
        if !(o.glr > 0.0 && o.lr > 0.0) {
            return Err(config_err("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&o.dropout) {
            return Err(config_err("dropout must lie in [0, 1)"));
        }
        if o.weight_decay < 0.0 {
            return Err(config_err("weight decay must be non-negative"));
        }
        let i = &self.init;
        if !(0.0 < i.gamma_min && i.gamma_min < i.gamma_max && i.gamma_max < 1.0) {
            return Err(config_err(format!(
                "need 0 < gamma_min < gamma_max < 1, got [{}, {}]",
                i.gamma_min, i.gamma_max
            )));
        }
        if !(i.theta_max > 0.0 && i.theta_max <= 2.0 * std::f64::consts::PI) {
            return Err(config_err("theta_max must lie in (0, 2π]"));
        }
        if self.log_interval == 0 || self.eval_interval == 0 {
            return Err(config_err("log/eval intervals must be >= 1"));
        }
        if self.eval_batches == 0 {
            return Err(config_err("need at least one eval batch"));
        }
        if let Some(t) = self.target_val_acc {
            if !(0.0..=1.0).contains(&t) {
                return Err(config_err("target accuracy must lie in [0, 1]"));
            }
        }
        // split sizes must cover the eval batches
        let spec = self.task_spec();
        if let Some(val) = spec.split_len(rotrnn::tasks::Split::Val) {
            if self.eval_batches * self.optimizer.batch > val {
                return Err(config_err(format!(
                    "eval needs {} samples but the validation split has {val}",
                    self.eval_batches * self.optimizer.batch
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization, stamped into
    /// checkpoints to detect config/parameter mismatches.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Learning-rate multiplier at a step: linear warmup, then the chosen
    /// decay (cosine to zero at `iters`).
    pub fn lr_factor(&self, step: u64) -> f64 {
        let o = &self.optimizer;
        let warmup = o.warmup.min(o.iters);
        if warmup > 0 && step < warmup {
            return (step + 1) as f64 / warmup as f64;
        }
        match o.schedule {
            Schedule::None => 1.0,
            Schedule::Cosine => {
                if o.iters <= warmup {
                    return 1.0;
                }
                let progress = (step - warmup) as f64 / (o.iters - warmup) as f64;
                0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
            }
        }
    }
}
