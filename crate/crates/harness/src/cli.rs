//! Command-line interface.
//!
//! Exit codes: 0 success, 1 configuration/usage error, 2 numeric failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::bench::bench_scan;
use crate::checkpoint::load_checkpoint;
use crate::checks::{grad_check_suite, FD_BOUND};
use crate::config::ExperimentConfig;
use crate::error::{numeric_err, HarnessError, Result};
use crate::probes::{lru_norm_trajectory, norm_probe};
use crate::train::{evaluate, model_dims, run_train};
use rotrnn::model::init_model;
use rotrnn::tasks::Split;

#[derive(Parser, Debug)]
#[command(
    name = "rotrnn",
    about = "Rotation-recurrent sequence model: training, evaluation and diagnostics",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train per a JSON config, writing metrics and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// val | test
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        batches: Option<usize>,
    },
    /// Monte-Carlo check of the hidden-state norm law for one decay value.
    ProbeNorms {
        #[arg(long, default_value_t = 0.9)]
        gamma: f64,
        #[arg(long, default_value_t = 512)]
        t: usize,
        #[arg(long, default_value_t = 8192)]
        batch: usize,
        #[arg(long, default_value_t = 32)]
        d_h: usize,
        #[arg(long, default_value_t = 8)]
        d_u: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the per-timestep CSV here (otherwise stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference verification of the hand-written gradients.
    CheckGrads {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sequential vs parallel scan throughput.
    BenchScan {
        #[arg(long, default_value_t = 4096)]
        t: usize,
        #[arg(long, default_value_t = 32)]
        d_h: usize,
        #[arg(long)]
        chunk: Option<usize>,
        #[arg(long, default_value_t = 7)]
        reps: usize,
    },
    /// Print (or write) the default configuration.
    ExportConfig {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out, seed } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let outcome = run_train(&cfg, &out)?;
            println!(
                "trained {} steps; best val acc {:.4}; final val acc {:.4}",
                outcome.steps_run, outcome.best_val_acc, outcome.final_val_acc
            );
            Ok(())
        }
        Command::Eval {
            config,
            checkpoint,
            split,
            batches,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let split = match split.as_str() {
                "val" => Split::Val,
                "test" => Split::Test,
                other => {
                    return Err(HarnessError::Config(format!(
                        "unknown split '{other}' (expected val or test)"
                    )))
                }
            };
            let dims = model_dims(&cfg)?;
            let mut params = init_model(cfg.seed, &dims)?;
            load_checkpoint(&checkpoint, &mut params, Some(&cfg.hash()))?;
            let n_batches = batches.unwrap_or(cfg.eval_batches);
            let (loss, acc) = evaluate(&params, &cfg, split, n_batches)?;
            println!("{{\"loss\": {loss}, \"accuracy\": {acc}}}");
            Ok(())
        }
        Command::ProbeNorms {
            gamma,
            t,
            batch,
            d_h,
            d_u,
            seed,
            out,
        } => {
            let result = norm_probe(gamma, d_h, d_u, t, batch, seed)?;
            // contrast trajectory: γ-normalized diagonal recurrence, which
            // only approaches its stationary norm as t grows
            let lru = lru_norm_trajectory(gamma.max(0.6), d_h, d_u, t, batch.min(2048), seed)?;
            let mut csv = String::from("t,empirical,analytic,lru_empirical,lru_expected\n");
            for (i, (e, a)) in result
                .empirical
                .iter()
                .zip(result.analytic.iter())
                .enumerate()
            {
                csv.push_str(&format!(
                    "{},{e},{a},{},{}\n",
                    i + 1,
                    lru.empirical[i],
                    lru.expected[i]
                ));
            }
            match out {
                Some(path) => std::fs::write(path, csv)?,
                None => print!("{csv}"),
            }
            println!(
                "gamma {} max relative deviation {:.4e}",
                result.gamma, result.max_rel_dev
            );
            if result.max_rel_dev >= 0.05 {
                return Err(numeric_err(format!(
                    "norm law violated: max relative deviation {:.4e} >= 5%",
                    result.max_rel_dev
                )));
            }
            Ok(())
        }
        Command::CheckGrads { seed } => {
            let report = grad_check_suite(seed)?;
            for case in &report.cases {
                println!(
                    "T={:<3} D_h={:<2} max rel err {:.3e} (directional {:.3e})",
                    case.t_len, case.d_h, case.max_rel_err, case.directional_rel_err
                );
            }
            println!("max relative error: {:.6e}", report.max_rel_err);
            if report.max_rel_err >= FD_BOUND {
                return Err(numeric_err(format!(
                    "gradient check failed: {:.3e} >= {FD_BOUND:.0e}",
                    report.max_rel_err
                )));
            }
            Ok(())
        }
        Command::BenchScan {
            t,
            d_h,
            chunk,
            reps,
        } => {
            let report = bench_scan(t, d_h, chunk, reps)?;
            println!(
                "T={} D_h={} chunk={} threads={}",
                report.t_len, report.d_h, report.chunk, report.threads
            );
            println!(
                "sequential: {:.3e} elems/s\nparallel:   {:.3e} elems/s\nspeedup:    {:.2}x",
                report.sequential_elems_per_sec,
                report.parallel_elems_per_sec,
                report.speedup()
            );
            if report.t_len >= 4096
                && report.threads >= 2
                && report.parallel_elems_per_sec < report.sequential_elems_per_sec
            {
                return Err(numeric_err(
                    "parallel scan slower than sequential at T >= 4096 on >= 2 threads",
                ));
            }
            Ok(())
        }
        Command::ExportConfig { out } => {
            let cfg = ExperimentConfig::default();
            let json = cfg.to_json_pretty();
            match out {
                Some(path) => std::fs::write(path, json)?,
                None => println!("{json}"),
            }
            Ok(())
        }
    }
}

/// Parse and execute; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through the error path with status 0
            if e.use_stderr() {
                eprint!("{e}");
                return 1;
            }
            print!("{e}");
            return 0;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
