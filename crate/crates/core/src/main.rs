use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use devialab::config::{ConfigError, RunConfig};
use devialab::pipeline;
use devialab::reweight::alpha_weights;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "devialab", version, about = "Deterministic multi-cue anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a config file.
    GenData {
        config: PathBuf,
        out_dir: PathBuf,
    },
    /// Train a model on a generated dataset.
    Train {
        config: PathBuf,
        data_dir: PathBuf,
        run_dir: PathBuf,
    },
    /// Score the test split; writes scores.csv into the run directory.
    Score {
        run_dir: PathBuf,
        data_dir: PathBuf,
    },
    /// Emit per-image heatmaps and predicted masks for the test split.
    Localize {
        run_dir: PathBuf,
        data_dir: PathBuf,
    },
    /// Evaluate a run; writes report.json and histogram.csv.
    Eval {
        run_dir: PathBuf,
        data_dir: PathBuf,
    },
    /// Full contamination sweep: per-epsilon dataset, training and report.
    Sweep {
        config: PathBuf,
        out_dir: PathBuf,
        /// Comma-separated contamination rates, e.g. 0.05,0.10,0.15,0.20
        #[arg(long, value_delimiter = ',', required = true)]
        epsilons: Vec<f64>,
    },
    /// Print the reweighting of a loss vector as CSV.
    WeightsDemo(WeightsDemoArgs),
}

#[derive(Args)]
struct WeightsDemoArgs {
    /// Comma-separated per-sample losses.
    #[arg(long, value_delimiter = ',', required = true)]
    losses: Vec<f64>,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
}

/// True for errors the caller can fix on the command line (bad config
/// schema or values); these exit with status 2 like clap's usage errors.
fn is_usage_error(err: &anyhow::Error) -> bool {
    err.downcast_ref::<ConfigError>().is_some()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out_dir } => {
            let cfg = RunConfig::load(&config)?;
            pipeline::run_gen_data(&cfg, &out_dir)?;
            println!("dataset written to {}", out_dir.display());
        }
        Command::Train { config, data_dir, run_dir } => {
            let cfg = RunConfig::load(&config)?;
            let (artifacts, _) = pipeline::run_train(&cfg, &data_dir, &run_dir)?;
            println!("checkpoint written to {}", artifacts.checkpoint.display());
        }
        Command::Score { run_dir, data_dir } => {
            let rows = pipeline::run_score(&run_dir, &data_dir)?;
            println!("scored {} test images -> {}", rows.len(), run_dir.join("scores.csv").display());
        }
        Command::Localize { run_dir, data_dir } => {
            pipeline::run_localize(&run_dir, &data_dir)?;
            println!("heatmaps written to {}", run_dir.join("heatmaps").display());
        }
        Command::Eval { run_dir, data_dir } => {
            let report = pipeline::run_eval(&run_dir, &data_dir)?;
            let s = &report.per_epsilon[0];
            println!(
                "auroc={:.4} auprc={:.4} pixel_auroc={:.4}",
                s.auroc, s.auprc, s.pixel_auroc
            );
        }
        Command::Sweep { config, out_dir, epsilons } => {
            let cfg = RunConfig::load(&config)?;
            let report = pipeline::run_sweep(&cfg, &out_dir, &epsilons)?;
            for s in &report.per_epsilon {
                println!("epsilon={:.2} auroc={:.4} pixel_auroc={:.4}", s.epsilon, s.auroc, s.pixel_auroc);
            }
        }
        Command::WeightsDemo(args) => {
            let w = alpha_weights(&args.losses, args.alpha, args.lambda)?.into_vec();
            print!("{}", pipeline::weights_table_csv(&args.losses, &w));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            if is_usage_error(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
