//! Batch pipeline behind the `murk` binary.
//!
//! `run` wires simulator -> estimator -> evaluation for one scenario and
//! leaves a self-describing artifact directory behind; `compare` merges the
//! metrics of several such directories into one ranked table plus a
//! plot-ready CSV.
//!
//! Artifact directory layout, one directory per run:
//!
//! - `estimate.txt` / `groundtruth.txt`: one sample per line,
//!   `timestamp tx ty tz qx qy qz qw`, space-separated ASCII decimal,
//!   timestamps in seconds.
//! - `metrics.csv`: header `run_id,mode,ate_rmse_m,rot_rmse_deg,t0_err,...`,
//!   one data row; the `tN_err` columns are consecutive
//!   [`METRIC_INTERVAL_SECONDS`]-second relative-translation errors.
//! - `scenario.toml`: verbatim copy of the scenario file the run consumed.
//! - `run.json`: config echo, resolved seed and code version. Re-running
//!   with the recorded settings against the copied scenario regenerates the
//!   directory byte for byte; no wall-clock state is recorded anywhere.
//!
//! Exit codes surfaced through [`CliError::exit_code`]: 2 for configuration
//! errors, 3 for scenario errors, 4 for solver failures, 1 otherwise.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{
    Estimator, EstimatorConfig, EstimatorError, EstimatorMode, FrameInput, FrameSummary,
};
use crate::eval::{
    ate_rmse, interval_translation_errors, rotation_rmse_deg, Alignment, EvalError,
    IntervalError, Trajectory,
};
use crate::sim::{correspondence_provider, generate, provider_seed, Scenario, ScenarioError};

/// Length of one relative-error interval in `metrics.csv`, seconds. Short
/// enough to localize drift inside a single degradation window.
pub const METRIC_INTERVAL_SECONDS: f64 = 5.0;

/// Environment variable that re-roots relative output paths (run
/// directories and the default comparison CSV location). It never affects
/// inputs.
pub const OUT_ROOT_ENV: &str = "MURK_OUT_ROOT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("missing metrics.csv in {0}")]
    MissingMetrics(String),
    #[error("{path}: {message}")]
    MalformedMetrics { path: String, message: String },
}

impl CliError {
    /// Process exit status: 2 config, 3 scenario, 4 solver, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Estimator(EstimatorError::Config(_)) => 2,
            CliError::Scenario(_) => 3,
            CliError::Estimator(_) => 4,
            _ => 1,
        }
    }

    /// One-line JSON error record for standard error.
    pub fn error_record(&self) -> String {
        let kind = match self {
            CliError::Config(_) | CliError::Estimator(EstimatorError::Config(_)) => "config",
            CliError::Scenario(_) => "scenario",
            CliError::Estimator(_) => "solver",
            CliError::Eval(_) => "evaluation",
            CliError::Io { .. } => "io",
            CliError::MissingMetrics(_) | CliError::MalformedMetrics { .. } => "metrics",
        };
        serde_json::json!({
            "error": kind,
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        })
        .to_string()
    }
}

/// Optional knob overrides applied on top of the scenario-derived estimator
/// configuration; recorded in `run.json` so overridden runs stay
/// regenerable.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EstimatorOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degraded_feature_threshold: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degraded_sonar_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
}

impl EstimatorOverrides {
    fn apply(&self, config: &mut EstimatorConfig) {
        if let Some(n) = self.window_size {
            config.window_size = n;
        }
        if let Some(n) = self.degraded_feature_threshold {
            config.degraded_feature_threshold = n;
        }
        if let Some(w) = self.degraded_sonar_weight {
            config.degraded_sonar_weight = w;
        }
        if let Some(n) = self.max_iterations {
            config.solver.max_iterations = n;
        }
    }

    fn is_empty(&self) -> bool {
        *self == EstimatorOverrides::default()
    }
}

/// Everything one `run` invocation needs.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub scenario: PathBuf,
    pub mode: EstimatorMode,
    /// Keep the weighted sonar residuals but never seed or anchor poses
    /// from sonar odometry.
    pub disable_sonar_prior: bool,
    /// Compose the sonar pose prior in its raw sonar-frame form instead of
    /// conjugating it back into the body frame (the `--eq21-as-printed`
    /// CLI switch).
    pub eq21_as_printed: bool,
    /// Overrides the scenario's default seed when set.
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub overrides: EstimatorOverrides,
}

/// `run.json` contents: the config echo that makes an artifact directory
/// exactly regenerable (`run --scenario <dir>/scenario.toml --mode <mode>
/// --seed <seed> ... --out <fresh dir>`).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    /// Name of the scenario copy inside the run directory.
    pub scenario_file: String,
    pub scenario_name: String,
    pub mode: String,
    /// Seed the run actually used, overrides already resolved.
    pub seed: u64,
    pub disable_sonar_prior: bool,
    pub eq21_as_printed: bool,
    #[serde(default, skip_serializing_if = "EstimatorOverrides::is_empty")]
    pub overrides: EstimatorOverrides,
    /// Code version the artifacts were produced with.
    pub version: String,
}

/// In-memory results of a finished run, artifacts already on disk.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub record: RunRecord,
    pub ate_rmse_m: f64,
    pub rot_rmse_deg: f64,
    pub intervals: Vec<IntervalError>,
    pub summaries: Vec<FrameSummary>,
}

/// Raw pipeline output before any file is written.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub estimate: Trajectory,
    pub ground_truth: Trajectory,
    pub summaries: Vec<FrameSummary>,
}

/// Streams one generated scenario through a fresh estimator.
///
/// The correspondence seam lives here: each incoming ping is matched against
/// the estimator's current sonar keyframe with a deterministic per-pair
/// seed, so replaying the same `(scenario, config, seed)` triple reproduces
/// the exact correspondence sets regardless of when keyframes were promoted.
pub fn run_pipeline(
    scenario: &Scenario,
    config: &EstimatorConfig,
    seed: u64,
) -> Result<PipelineOutput, EstimatorError> {
    let sim = generate(scenario, seed);
    let mut estimator = Estimator::new(config.clone())?;
    let mut summaries = Vec::with_capacity(sim.bundles.len());
    for bundle in &sim.bundles {
        let sonar_pairs = match (&bundle.sonar, estimator.sonar_keyframe()) {
            (Some(ping), Some(keyframe)) if keyframe.frame_id != ping.frame_id => {
                let pair_seed = provider_seed(seed, keyframe.frame_id, ping.frame_id);
                let (set, _) = correspondence_provider(
                    ping,
                    keyframe,
                    scenario.outlier_fraction,
                    &scenario.sonar,
                    pair_seed,
                );
                Some(set)
            }
            _ => None,
        };
        summaries.push(estimator.process(FrameInput {
            frame_id: bundle.frame_id,
            timestamp: bundle.timestamp,
            camera: bundle.camera.clone(),
            sonar: bundle.sonar.clone(),
            sonar_pairs,
            imu: bundle.imu.clone(),
        })?);
    }
    Ok(PipelineOutput {
        estimate: estimator.trajectory().clone(),
        ground_truth: sim.ground_truth,
        summaries,
    })
}

/// Executes a run end to end and writes the artifact directory.
pub fn run(config: &RunConfig) -> Result<RunArtifacts, CliError> {
    if config.out_dir.as_os_str().is_empty() {
        return Err(CliError::Config("output directory must not be empty".into()));
    }
    let scenario_text =
        std::fs::read_to_string(&config.scenario).map_err(|source| ScenarioError::Io {
            path: config.scenario.display().to_string(),
            source,
        })?;
    let scenario = Scenario::from_toml_str(&scenario_text)?;
    let seed = config.seed.unwrap_or(scenario.seed);

    let mut est_config = EstimatorConfig::for_scenario(&scenario, config.mode);
    est_config.sonar_prior_enabled = !config.disable_sonar_prior;
    est_config.prior_as_printed = config.eq21_as_printed;
    config.overrides.apply(&mut est_config);
    est_config.validate()?;

    let output = run_pipeline(&scenario, &est_config, seed)?;

    let out_dir = resolve_output_path(&config.out_dir);
    std::fs::create_dir_all(&out_dir).map_err(io_at(&out_dir))?;
    let run_id = run_id_of(&out_dir);

    let estimate_path = out_dir.join("estimate.txt");
    output
        .estimate
        .save(&estimate_path)
        .map_err(io_at(&estimate_path))?;
    let truth_path = out_dir.join("groundtruth.txt");
    output
        .ground_truth
        .save(&truth_path)
        .map_err(io_at(&truth_path))?;

    let ate_rmse_m = ate_rmse(&output.estimate, &output.ground_truth, Alignment::None)?;
    let rot_rmse_deg = rotation_rmse_deg(&output.estimate, &output.ground_truth, Alignment::None)?;
    let intervals =
        interval_translation_errors(&output.estimate, &output.ground_truth, METRIC_INTERVAL_SECONDS)?;

    let metrics = RunMetrics {
        run_id: run_id.clone(),
        mode: config.mode.to_string(),
        ate_rmse_m,
        rot_rmse_deg,
        interval_errors: intervals.iter().map(|e| e.error).collect(),
    };
    let metrics_path = out_dir.join("metrics.csv");
    std::fs::write(&metrics_path, metrics.to_csv()).map_err(io_at(&metrics_path))?;

    let copy_path = out_dir.join("scenario.toml");
    std::fs::write(&copy_path, &scenario_text).map_err(io_at(&copy_path))?;

    let record = RunRecord {
        run_id,
        scenario_file: "scenario.toml".into(),
        scenario_name: scenario.name.clone(),
        mode: config.mode.to_string(),
        seed,
        disable_sonar_prior: config.disable_sonar_prior,
        eq21_as_printed: config.eq21_as_printed,
        overrides: config.overrides,
        version: env!("CARGO_PKG_VERSION").into(),
    };
    let record_path = out_dir.join("run.json");
    let mut json = serde_json::to_string_pretty(&record).expect("run record serializes");
    json.push('\n');
    std::fs::write(&record_path, json).map_err(io_at(&record_path))?;

    Ok(RunArtifacts {
        out_dir,
        record,
        ate_rmse_m,
        rot_rmse_deg,
        intervals,
        summaries: output.summaries,
    })
}

/// One parsed `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub run_id: String,
    pub mode: String,
    pub ate_rmse_m: f64,
    pub rot_rmse_deg: f64,
    /// Consecutive relative-translation errors, one per metric interval.
    pub interval_errors: Vec<f64>,
}

impl RunMetrics {
    /// Serializes as the fixed header plus one row. Floats use Rust's
    /// shortest round-trip formatting, so rewriting a parsed file is
    /// byte-stable.
    pub fn to_csv(&self) -> String {
        let mut header = String::from("run_id,mode,ate_rmse_m,rot_rmse_deg");
        let mut row = format!(
            "{},{},{},{}",
            self.run_id, self.mode, self.ate_rmse_m, self.rot_rmse_deg
        );
        for (idx, err) in self.interval_errors.iter().enumerate() {
            header.push_str(&format!(",t{idx}_err"));
            row.push_str(&format!(",{err}"));
        }
        format!("{header}\n{row}\n")
    }

    /// Parses a `metrics.csv` produced by [`RunMetrics::to_csv`].
    pub fn from_csv(text: &str, path: &Path) -> Result<RunMetrics, CliError> {
        let bad = |message: String| CliError::MalformedMetrics {
            path: path.display().to_string(),
            message,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let row = lines.next().ok_or_else(|| bad("missing data row".into()))?;
        let names: Vec<&str> = header.split(',').collect();
        let fields: Vec<&str> = row.split(',').collect();
        if names.len() != fields.len() {
            return Err(bad(format!(
                "header has {} columns but the row has {}",
                names.len(),
                fields.len()
            )));
        }
        let expect = ["run_id", "mode", "ate_rmse_m", "rot_rmse_deg"];
        if names.len() < expect.len() || names[..expect.len()] != expect {
            return Err(bad(format!("unexpected header {header:?}")));
        }
        let number = |name: &str, text: &str| {
            f64::from_str(text).map_err(|_| bad(format!("column {name}: bad number {text:?}")))
        };
        let mut interval_errors = Vec::new();
        for (name, field) in names.iter().zip(&fields).skip(expect.len()) {
            interval_errors.push(number(name, field)?);
        }
        Ok(RunMetrics {
            run_id: fields[0].to_string(),
            mode: fields[1].to_string(),
            ate_rmse_m: number("ate_rmse_m", fields[2])?,
            rot_rmse_deg: number("rot_rmse_deg", fields[3])?,
            interval_errors,
        })
    }
}

/// Reads the metrics of one run directory.
pub fn load_metrics(dir: &Path) -> Result<RunMetrics, CliError> {
    let path = dir.join("metrics.csv");
    if !path.is_file() {
        return Err(CliError::MissingMetrics(dir.display().to_string()));
    }
    let text = std::fs::read_to_string(&path).map_err(io_at(&path))?;
    RunMetrics::from_csv(&text, &path)
}

/// Metric rows of several runs, ranked best-first by absolute error.
#[derive(Clone, Debug)]
pub struct Comparison {
    pub rows: Vec<RunMetrics>,
}

impl Comparison {
    /// Space-aligned summary table for standard output.
    pub fn table(&self) -> String {
        let headers = ["run_id", "mode", "ate_rmse_m", "rot_rmse_deg"];
        let cells: Vec<[String; 4]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.run_id.clone(),
                    r.mode.clone(),
                    format!("{:.6}", r.ate_rmse_m),
                    format!("{:.6}", r.rot_rmse_deg),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..headers.len())
            .map(|c| {
                cells
                    .iter()
                    .map(|row| row[c].len())
                    .chain([headers[c].len()])
                    .max()
                    .unwrap()
            })
            .collect();
        let mut out = String::new();
        let mut push_row = |fields: [&str; 4]| {
            for (c, field) in fields.iter().enumerate() {
                if c > 0 {
                    out.push_str("  ");
                }
                // Left-align text, right-align numbers.
                if c < 2 {
                    out.push_str(&format!("{field:<width$}", width = widths[c]));
                } else {
                    out.push_str(&format!("{field:>width$}", width = widths[c]));
                }
            }
            while out.ends_with(' ') {
                out.pop();
            }
            out.push('\n');
        };
        push_row(headers);
        for row in &cells {
            push_row([&row[0], &row[1], &row[2], &row[3]]);
        }
        out
    }

    /// Merged CSV with the union of every run's interval columns; runs
    /// shorter than the widest leave their trailing cells empty.
    pub fn csv(&self) -> String {
        let max_intervals = self
            .rows
            .iter()
            .map(|r| r.interval_errors.len())
            .max()
            .unwrap_or(0);
        let mut out = String::from("run_id,mode,ate_rmse_m,rot_rmse_deg");
        for idx in 0..max_intervals {
            out.push_str(&format!(",t{idx}_err"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}",
                row.run_id, row.mode, row.ate_rmse_m, row.rot_rmse_deg
            ));
            for idx in 0..max_intervals {
                out.push(',');
                if let Some(err) = row.interval_errors.get(idx) {
                    out.push_str(&format!("{err}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Loads every directory's metrics and ranks them by `ate_rmse_m`
/// (ties broken by run id so the order is total).
pub fn compare(dirs: &[PathBuf]) -> Result<Comparison, CliError> {
    if dirs.is_empty() {
        return Err(CliError::Config("compare needs at least one run directory".into()));
    }
    let mut rows = dirs.iter().map(|d| load_metrics(d)).collect::<Result<Vec<_>, _>>()?;
    rows.sort_by(|a, b| {
        a.ate_rmse_m
            .total_cmp(&b.ate_rmse_m)
            .then_with(|| a.run_id.cmp(&b.run_id))
    });
    Ok(Comparison { rows })
}

/// Re-roots a relative path under [`OUT_ROOT_ENV`] when that is set.
pub fn resolve_output_path(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn run_id_of(out_dir: &Path) -> String {
    out_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `rows` of per-frame diagnostics next to the other artifacts;
/// used by examples that want a plottable degradation timeline.
pub fn write_frame_log(path: &Path, summaries: &[FrameSummary]) -> Result<(), CliError> {
    let file = std::fs::File::create(path).map_err(io_at(path))?;
    let mut out = std::io::BufWriter::new(file);
    let emit = (|| {
        writeln!(
            out,
            "frame_id,timestamp,tracked_features,degraded,sonar_weight,solve_iterations"
        )?;
        for s in summaries {
            let weight = s.sonar.as_ref().map_or(String::new(), |s| format!("{}", s.weight));
            let iters = s.solve.as_ref().map_or(String::new(), |r| format!("{}", r.iterations));
            writeln!(
                out,
                "{},{},{},{},{},{}",
                s.frame_id, s.timestamp, s.tracked_features, s.degraded, weight, iters
            )?;
        }
        out.flush()
    })();
    emit.map_err(io_at(path))
}

/// Convenience for tests and examples: per-mode ATE over a set of seeds on
/// one scenario, sharing the generated worlds across modes.
pub fn ate_by_seed(
    scenario: &Scenario,
    modes: &[EstimatorMode],
    seeds: &[u64],
    configure: impl Fn(&mut EstimatorConfig),
) -> Result<BTreeMap<(String, u64), f64>, CliError> {
    let mut results = BTreeMap::new();
    for &seed in seeds {
        for &mode in modes {
            let mut config = EstimatorConfig::for_scenario(scenario, mode);
            configure(&mut config);
            config.validate()?;
            let output = run_pipeline(scenario, &config, seed)?;
            let ate = ate_rmse(&output.estimate, &output.ground_truth, Alignment::None)?;
            results.insert((mode.to_string(), seed), ate);
        }
    }
    Ok(results)
}
