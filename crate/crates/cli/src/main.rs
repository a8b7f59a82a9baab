mod commands;
mod config;
mod output;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use commands::{Ctx, Method, Policy, ProfileArgs, StabilityArgs};
use config::{Aggregation, Estimator, Kernel, Overrides, RunConfig, Scope};

const SCHEMA_HELP: &str = "\
Wire formats (JSON Schema, under schemas/ in the source tree):
  schemas/bundle.schema.json        input bundles, one JSON object per line
  schemas/calibration.schema.json   calibrate output, flag --calibration input
  schemas/decision.schema.json      decisions.jsonl lines
  schemas/report.schema.json        evaluate report.json
CSV outputs: trajectories.csv (id,temperature,mmd2,smoothed) and
baseline-<method>.csv (id,method,score,threshold,flagged).

Exit status: 0 on success, 1 on a fatal error, 2 when some input records
were rejected (outputs cover the remaining records; see <command>.run.json).";

#[derive(Debug, Parser)]
#[command(name = "mmd-flagger", version, about = "Flag hallucinated translations from MMD-vs-temperature trajectories")]
#[command(after_long_help = SCHEMA_HELP)]
struct Cli {
    /// Directory for every output file.
    #[arg(long, global = true, env = "MMD_FLAGGER_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,
    /// TOML file with defaults for the run options below; flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(flatten)]
    run: RunFlags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunFlags {
    #[arg(long, global = true, value_enum)]
    aggregation: Option<Aggregation>,
    #[arg(long, global = true, value_enum)]
    kernel: Option<Kernel>,
    /// Bandwidth percentile of pairwise calibration distances [default: 25].
    #[arg(long, global = true)]
    percentile: Option<f64>,
    #[arg(long, global = true, value_enum)]
    estimator: Option<Estimator>,
    /// Minimum-temperature threshold of the flag rule [default: 0.11].
    #[arg(long, global = true)]
    tau0: Option<f64>,
    /// Moving-average window applied to trajectories before the argmin.
    #[arg(long, global = true)]
    smooth: Option<usize>,
    /// Baseline threshold percentile [default: 40].
    #[arg(long, global = true)]
    threshold_percentile: Option<f64>,
    #[arg(long, global = true, value_enum)]
    scope: Option<Scope>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap on calibration vectors before pairwise distances; 0 for no cap [default: 10000].
    #[arg(long, global = true)]
    max_vectors: Option<usize>,
}

impl From<RunFlags> for Overrides {
    fn from(f: RunFlags) -> Self {
        Overrides {
            aggregation: f.aggregation,
            kernel: f.kernel,
            percentile: f.percentile,
            estimator: f.estimator,
            tau0: f.tau0,
            smooth: f.smooth,
            threshold_percentile: f.threshold_percentile,
            scope: f.scope,
            seed: f.seed,
            max_vectors: f.max_vectors,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fix the kernel bandwidth and t_max from correct bundles.
    Calibrate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "lfan")]
        label_policy: Policy,
    },
    /// Compute trajectories and flag each bundle.
    Flag {
        #[arg(long)]
        input: PathBuf,
        /// Required for the gaussian kernel or concat aggregation.
        #[arg(long)]
        calibration: Option<PathBuf>,
    },
    /// Score bundles with a reference detector.
    Baseline {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
    },
    /// Recall, precision, per-label counts and ROC against bundle labels.
    Evaluate {
        /// Bundles carrying the ground-truth labels.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
        decisions: Option<PathBuf>,
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "lfan")]
        label_policy: Policy,
        /// Add one report per language pair.
        #[arg(long)]
        by_lang_pair: bool,
    },
    /// Generate synthetic bundles.
    Synth {
        #[arg(long, default_value_t = 0)]
        correct: usize,
        #[arg(long, default_value_t = 0)]
        hallucination: usize,
        #[command(flatten)]
        profile: ProfileArgs,
    },
    /// Recall mean and variance across repetitions at several sample sizes.
    Stability {
        #[command(flatten)]
        study: StabilityArgs,
        #[command(flatten)]
        profile: ProfileArgs,
    },
    /// Render a trajectory CSV as an SVG line chart.
    Plot {
        #[arg(long)]
        input: PathBuf,
    },
}

fn run(cli: Cli) -> Result<u8> {
    let config = RunConfig::resolve(cli.run.into(), cli.config.as_deref())?;
    let ctx = Ctx {
        out_dir: &cli.out_dir,
        config: &config,
    };
    match &cli.command {
        Command::Calibrate { input, label_policy } => commands::calibrate_cmd(&ctx, input, *label_policy),
        Command::Flag { input, calibration } => commands::flag_cmd(&ctx, input, calibration.as_deref()),
        Command::Baseline { input, method } => commands::baseline_cmd(&ctx, input, *method),
        Command::Evaluate {
            input,
            decisions,
            baseline,
            label_policy,
            by_lang_pair,
        } => commands::evaluate_cmd(&ctx, input, decisions.as_deref(), baseline.as_deref(), *label_policy, *by_lang_pair),
        Command::Synth {
            correct,
            hallucination,
            profile,
        } => commands::synth_cmd(&ctx, *correct, *hallucination, profile),
        Command::Stability { study, profile } => commands::stability_cmd(&ctx, study, profile),
        Command::Plot { input } => commands::plot_cmd(&ctx, input),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers.unwrap_or(0))
        .build()
        .context("building worker pool")
        .and_then(|pool| pool.install(|| run(cli)));
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
