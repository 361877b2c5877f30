use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use murk::cli::{self, CliError, EstimatorOverrides, RunConfig};
use murk::estimator::EstimatorMode;

#[derive(Parser)]
#[command(
    name = "murk",
    version,
    about = "Sliding-window stereo + sonar + IMU odometry on synthetic underwater scenarios"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario, estimate its trajectory, and write an artifact
    /// directory (estimate.txt, groundtruth.txt, metrics.csv, run.json,
    /// scenario.toml).
    Run(RunArgs),
    /// Merge the metrics.csv of several run directories into a ranked table
    /// on stdout plus one plot-ready CSV.
    Compare(CompareArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario TOML file.
    #[arg(long)]
    scenario: PathBuf,
    /// Sensor suite: full | vi | sonar-inertial.
    #[arg(long)]
    mode: String,
    /// Keep weighted sonar residuals but never seed or anchor poses from
    /// sonar odometry.
    #[arg(long)]
    disable_sonar_prior: bool,
    /// Compose the sonar pose prior in its raw sonar-frame form instead of
    /// conjugating it back into the body frame.
    #[arg(long)]
    eq21_as_printed: bool,
    /// Override the scenario's default seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory, created if absent. Relative paths land under
    /// $MURK_OUT_ROOT when that is set.
    #[arg(long)]
    out: PathBuf,
    /// Override the sliding-window length.
    #[arg(long)]
    window_size: Option<usize>,
    /// Override the feature count below which a frame counts as degraded.
    #[arg(long)]
    degraded_threshold: Option<usize>,
    /// Override the sonar residual weight applied while degraded.
    #[arg(long)]
    degraded_weight: Option<f64>,
    /// Override the solver iteration cap.
    #[arg(long)]
    max_iterations: Option<usize>,
}

#[derive(Args)]
struct CompareArgs {
    /// Run directories, each holding a metrics.csv.
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
    /// Merged CSV destination (default: comparison.csv, re-rooted under
    /// $MURK_OUT_ROOT when that is set).
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.error_record());
            ExitCode::from(err.exit_code().clamp(1, 255) as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(args) => {
            let mode: EstimatorMode = args.mode.parse().map_err(CliError::Config)?;
            let config = RunConfig {
                scenario: args.scenario,
                mode,
                disable_sonar_prior: args.disable_sonar_prior,
                eq21_as_printed: args.eq21_as_printed,
                seed: args.seed,
                out_dir: args.out,
                overrides: EstimatorOverrides {
                    window_size: args.window_size,
                    degraded_feature_threshold: args.degraded_threshold,
                    degraded_sonar_weight: args.degraded_weight,
                    max_iterations: args.max_iterations,
                },
            };
            let artifacts = cli::run(&config)?;
            println!("run_id       {}", artifacts.record.run_id);
            println!("mode         {}", artifacts.record.mode);
            println!("seed         {}", artifacts.record.seed);
            println!("ate_rmse_m   {:.6}", artifacts.ate_rmse_m);
            println!("rot_rmse_deg {:.6}", artifacts.rot_rmse_deg);
            println!("artifacts    {}", artifacts.out_dir.display());
            Ok(())
        }
        Command::Compare(args) => {
            let comparison = cli::compare(&args.dirs)?;
            print!("{}", comparison.table());
            let csv_path = cli::resolve_output_path(
                args.csv.as_deref().unwrap_or_else(|| "comparison.csv".as_ref()),
            );
            if let Some(parent) = csv_path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|source| CliError::Io {
                    path: parent.display().to_string(),
                    source,
                })?;
            }
            std::fs::write(&csv_path, comparison.csv()).map_err(|source| CliError::Io {
                path: csv_path.display().to_string(),
                source,
            })?;
            println!("csv {}", csv_path.display());
            Ok(())
        }
    }
}
