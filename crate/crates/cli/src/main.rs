mod output;
mod runs;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use twassl_core::config::RunConfig;
use twassl_core::verify::{run_suite, Suite, SweepReport};

use crate::output::{prepare_out_dir, write};
use crate::runs::{cmd_ablate, cmd_eval, cmd_train, parse_metric, Axis, EvalRequest, Split};

/// Tree-Wasserstein self-supervised learning: oracle sweeps, training,
/// evaluation and ablations.
#[derive(Debug, Parser)]
#[command(name = "twassl", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed; replaces the config's seed list.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an oracle sweep; exits non-zero if any case fails.
    Verify {
        /// twd-lp, rtwd-tv, jd-bound, pinsker, sinkhorn, gradcheck, dct-orth or all.
        suite: String,
        /// Trials per case (suite default when omitted).
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Train one run per seed and aggregate.
    Train,
    /// KNN accuracy of a checkpoint.
    Eval {
        /// Checkpoint manifest (.json).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of neighbours.
        #[arg(long)]
        k: Option<usize>,
        /// auto, twd, tv or cosine.
        #[arg(long, value_parser = parse_metric)]
        metric: Option<twassl_core::config::EvalMetric>,
        /// Query split: test or train.
        #[arg(long, default_value = "test")]
        split: Split,
        /// Score the initialization instead of the trained weights.
        #[arg(long)]
        untrained: bool,
    },
    /// Grid of runs over one axis.
    Ablate {
        /// lambda_jd, knn_k or head.
        #[arg(long)]
        axis: Axis,
        /// Comma-separated values (axis default when omitted).
        #[arg(long)]
        values: Option<String>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let path = common.config.as_deref().context("--config PATH is required")?;
    let mut cfg = RunConfig::from_path(path).with_context(|| format!("in {}", path.display()))?;
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    cfg.resolve().with_context(|| format!("invalid config {}", path.display()))?;
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: Option<&RunConfig>) -> Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .or_else(|| cfg.and_then(|c| c.output_dir.clone()))
        .context("no output directory: pass --out DIR or set output_dir in the config")?;
    prepare_out_dir(&dir, common.force)
}

fn verify(common: &Common, suite: &str, trials: Option<usize>) -> Result<bool> {
    let suites: Vec<Suite> = if suite == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![suite.parse()?]
    };
    let out = match &common.out {
        Some(_) => Some(out_dir(common, None)?),
        None => None,
    };
    let seed = common.seed.unwrap_or(1);
    let reports: Vec<SweepReport> = suites
        .par_iter()
        .map(|&s| run_suite(s, trials.unwrap_or(s.default_trials()), seed))
        .collect::<Result<_, _>>()?;
    let mut summary = String::new();
    for r in &reports {
        let line = r.summary();
        println!("{line}");
        summary.push_str(&line);
        summary.push('\n');
        if let Some(dir) = &out {
            let mut buf = Vec::new();
            r.write_csv(&mut buf)?;
            write(dir, &format!("verify_{}.csv", r.suite), &buf)?;
        }
    }
    if let Some(dir) = &out {
        write(dir, "verify_summary.txt", summary.as_bytes())?;
    }
    Ok(reports.iter().all(SweepReport::passed))
}

fn eval(common: &Common, checkpoint: &Path, k: Option<usize>, metric: Option<twassl_core::config::EvalMetric>, split: Split, untrained: bool) -> Result<bool> {
    let config = match &common.config {
        Some(_) => Some(load_config(common)?),
        None => None,
    };
    let res = cmd_eval(EvalRequest {
        checkpoint,
        config,
        k,
        metric,
        split,
        seed: common.seed,
        untrained,
    })?;
    println!("accuracy {:.6} (K={}, metric {}, split {})", res.accuracy, res.k, res.metric, res.split);
    if common.out.is_some() {
        let dir = out_dir(common, None)?;
        let line = serde_json::to_string(&res)? + "\n";
        write(&dir, "eval.jsonl", line.as_bytes())?;
    }
    Ok(true)
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.common.jobs {
        if n == 0 {
            bail!("--jobs must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot size the worker pool")?;
    }
    let common = &cli.common;
    match &cli.command {
        Command::Verify { suite, trials } => verify(common, suite, *trials),
        Command::Train => {
            let cfg = load_config(common)?;
            let out = out_dir(common, Some(&cfg))?;
            cmd_train(&cfg, &out)
        }
        Command::Eval {
            checkpoint,
            k,
            metric,
            split,
            untrained,
        } => eval(common, checkpoint, *k, *metric, *split, *untrained),
        Command::Ablate { axis, values } => {
            let cfg = load_config(common)?;
            let out = out_dir(common, Some(&cfg))?;
            cmd_ablate(&cfg, *axis, values.as_deref(), &out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
