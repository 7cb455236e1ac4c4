//! The `gridtune` command line: tune, sweep, report and demo.

use std::fs::{self, File};
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use gridtune::analysis::{
    best_so_far, compare, coverage, exhaustive_sweep, pairplot_export, write_comparison_csv,
    write_coverage_csv, write_pairplot_csv, write_trajectory_csv, AnalysisError, TuningReport,
    DEFAULT_SWEEP_LIMIT,
};
use gridtune::harness::{SurfaceKind, SyntheticEvaluator, SyntheticSurface};
use gridtune::history::{write_jsonl_line, History};
use gridtune::study::{load_study, resnet50_space, EngineConfig, StudyConfig};
use gridtune::tuner::tune;
use gridtune::{Configuration, SearchSpace};

#[derive(Debug, Parser)]
#[command(name = "gridtune", version, about = "Integer-grid autotuner for workload parameters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a tuning session described by a study file.
    Tune {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the study's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the study's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate every grid point of a study with engine `exhaustive`.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SWEEP_LIMIT)]
        limit: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare saved histories over one search space.
    Report {
        /// A search space file, or a study file whose space is used.
        #[arg(long)]
        space: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        history: Vec<PathBuf>,
        /// Also write comparison.csv and coverage-<label>.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tune a synthetic surface over the ResNet50 space and print the report.
    Demo {
        #[arg(long)]
        surface: String,
        #[arg(long)]
        engine: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = gridtune::tuner::DEFAULT_MAX_ITERATIONS)]
        iterations: u64,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("no successful evaluations")]
    NoOkEvaluations,
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: io::Error,
    },
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Tune(#[from] gridtune::tuner::TuneError),
}

impl CliError {
    /// 0 success, 1 configuration or runtime error, 2 nothing measured.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::NoOkEvaluations => 2,
            _ => 1,
        }
    }
}

fn config_err(e: impl ToString) -> CliError {
    CliError::Config(e.to_string())
}

fn io_err(context: impl AsRef<Path>) -> impl FnOnce(io::Error) -> CliError {
    let context = context.as_ref().display().to_string();
    move |source| CliError::Io { context, source }
}

/// Runs one command, writing human output to `out`. Returns the exit code.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let result = match cli.command {
        Command::Tune { config, out: dir, seed } => cmd_tune(&config, dir, seed, out),
        Command::Sweep { config, limit, out: dir } => cmd_sweep(&config, limit, dir, out),
        Command::Report { space, history, out: dir } => cmd_report(&space, &history, dir.as_deref(), out),
        Command::Demo {
            surface,
            engine,
            seed,
            iterations,
        } => cmd_demo(&surface, &engine, seed, iterations, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "gridtune: {e}");
            e.exit_code()
        }
    }
}

/// Writes `bytes` to `dir/name` via a temporary file and a rename.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = dir.join(format!(".{name}.tmp"));
    let dest = dir.join(name);
    let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, &dest).map_err(io_err(&dest))
}

fn csv_bytes(write: impl FnOnce(&mut Vec<u8>) -> Result<(), AnalysisError>) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    Ok(buf)
}

fn load(path: &Path) -> Result<StudyConfig, CliError> {
    load_study(path).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

/// Writes report.json and the three CSV exports for a finished session.
pub fn write_artifacts(dir: &Path, history: &History, space: &SearchSpace, report: &TuningReport) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    write_atomic(dir, "report.json", format!("{json}\n").as_bytes())?;
    write_atomic(dir, "coverage.csv", &csv_bytes(|b| write_coverage_csv(b, &report.coverage))?)?;
    let trajectory = best_so_far(history)?;
    write_atomic(dir, "trajectory.csv", &csv_bytes(|b| write_trajectory_csv(b, &trajectory))?)?;
    let pairs = pairplot_export(history, space)?;
    write_atomic(dir, "pairplot.csv", &csv_bytes(|b| write_pairplot_csv(b, &pairs))?)?;
    Ok(())
}

fn cmd_tune(config: &Path, dir: Option<PathBuf>, seed: Option<u64>, out: &mut dyn Write) -> Result<(), CliError> {
    let mut study = load(config)?;
    if let Some(dir) = dir {
        study.output_dir = dir;
    }
    if let Some(seed) = seed {
        study.seed = seed;
    }
    let mut engine = study
        .engine
        .build()
        .ok_or_else(|| config_err("engine `exhaustive` is run with `gridtune sweep`"))?;
    let mut evaluator = study.build_evaluator().map_err(config_err)?;

    let dir = study.output_dir.clone();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let history_path = dir.join("history.jsonl");
    let mut sink = File::create(&history_path).map_err(io_err(&history_path))?;
    let outcome = tune(
        &study.space,
        &mut engine,
        &mut evaluator,
        study.max_iterations,
        study.seed,
        |e| {
            let mut line = Vec::new();
            write_jsonl_line(&mut line, e).map_err(io::Error::other)?;
            sink.write_all(&line)?;
            sink.flush()
        },
    )?;
    sink.sync_all().map_err(io_err(&history_path))?;

    let history = outcome.history;
    if history.ok_count() == 0 {
        return Err(CliError::NoOkEvaluations);
    }
    let report = TuningReport::from_history(&history, &study.space, study.engine.name(), study.seed)?;
    write_artifacts(&dir, &history, &study.space, &report)?;
    let _ = writeln!(
        out,
        "{}: best {} at {} after {} evaluations ({} ok), mean span coverage {:.1}%",
        report.engine,
        report.best_value,
        report.best_config,
        report.total_evaluations,
        report.ok_evaluations,
        report.mean_span_pct()
    );
    let _ = writeln!(out, "artifacts in {}", dir.display());
    Ok(())
}

/// Contents of sweep.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub grid_size: u64,
    pub evaluations: u64,
    pub ok_evaluations: u64,
    pub best_config: Configuration,
    pub best_value: f64,
}

fn cmd_sweep(config: &Path, limit: u64, dir: Option<PathBuf>, out: &mut dyn Write) -> Result<(), CliError> {
    let mut study = load(config)?;
    if study.engine != EngineConfig::Exhaustive {
        return Err(config_err(format!(
            "sweep needs engine `exhaustive`, the study selects `{}`",
            study.engine.name()
        )));
    }
    if let Some(dir) = dir {
        study.output_dir = dir;
    }
    let mut evaluator = study.build_evaluator().map_err(config_err)?;
    let (history, best) = match exhaustive_sweep(&study.space, &mut evaluator, limit) {
        Err(e @ AnalysisError::GridTooLarge { .. }) => return Err(config_err(e)),
        Err(AnalysisError::EmptyHistory) => return Err(CliError::NoOkEvaluations),
        other => other?,
    };
    let dir = study.output_dir;
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write_atomic(&dir, "history.jsonl", history.to_jsonl().as_bytes())?;
    let report = SweepReport {
        grid_size: study.space.grid_size(),
        evaluations: history.len() as u64,
        ok_evaluations: history.ok_count() as u64,
        best_value: history.lookup(&best).and_then(|e| e.value).expect("best is ok"),
        best_config: best,
    };
    let json = serde_json::to_string_pretty(&report).expect("sweep report serializes");
    write_atomic(&dir, "sweep.json", format!("{json}\n").as_bytes())?;
    let _ = writeln!(
        out,
        "swept {} points: best {} at {}",
        report.evaluations, report.best_value, report.best_config
    );
    Ok(())
}

/// Reads a search space from either a bare space file or a study file.
pub fn load_space(path: &Path) -> Result<SearchSpace, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    if let Some(space) = value.get_mut("space") {
        value = space.take();
    }
    serde_json::from_value(value).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

/// Display label for a history file: its stem, or the parent directory's
/// name for files called `history.jsonl`.
pub fn history_label(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if stem == "history" {
        if let Some(parent) = path.parent().and_then(|p| p.file_name()) {
            return parent.to_string_lossy().into_owned();
        }
    }
    stem
}

fn cmd_report(space: &Path, paths: &[PathBuf], dir: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let space = load_space(space)?;
    let mut loaded = Vec::with_capacity(paths.len());
    for path in paths {
        let file = File::open(path).map_err(io_err(path))?;
        let history = History::read_jsonl(BufReader::new(file))
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        if history.ok_count() == 0 {
            return Err(config_err(format!("{}: no successful evaluations", path.display())));
        }
        let mut label = history_label(path);
        let taken = loaded.iter().filter(|(l, _): &&(String, History)| l.starts_with(&label)).count();
        if taken > 0 {
            label = format!("{label}-{}", taken + 1);
        }
        loaded.push((label, history));
    }
    let named: Vec<(String, &History)> = loaded.iter().map(|(l, h)| (l.clone(), h)).collect();
    let rows = compare(&named, &space).map_err(config_err)?;

    let table = csv_bytes(|b| write_comparison_csv(b, &rows))?;
    out.write_all(&table).map_err(io_err("stdout"))?;
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_atomic(dir, "comparison.csv", &table)?;
    }
    for (label, history) in &named {
        let rows = coverage(history, &space)?;
        let csv = csv_bytes(|b| write_coverage_csv(b, &rows))?;
        let _ = writeln!(out, "\ncoverage: {label}");
        out.write_all(&csv).map_err(io_err("stdout"))?;
        if let Some(dir) = dir {
            write_atomic(dir, &format!("coverage-{label}.csv"), &csv)?;
        }
    }
    Ok(())
}

fn cmd_demo(surface: &str, engine: &str, seed: u64, iterations: u64, out: &mut dyn Write) -> Result<(), CliError> {
    let kind: SurfaceKind = surface.parse().map_err(config_err)?;
    let engine_config = EngineConfig::from_name(engine).ok_or_else(|| {
        config_err(format!("unknown engine `{engine}` (expected bo, ga, nms or random)"))
    })?;
    let mut engine = engine_config
        .build()
        .ok_or_else(|| config_err("engine `exhaustive` is run with `gridtune sweep`"))?;
    if iterations == 0 {
        return Err(config_err("iterations must be at least 1"));
    }
    let space = resnet50_space();
    let mut evaluator = SyntheticEvaluator::new(SyntheticSurface::new(kind), &space).map_err(config_err)?;
    let outcome = tune(&space, &mut engine, &mut evaluator, iterations, seed, |_| Ok(()))?;
    let report = TuningReport::from_history(&outcome.history, &space, engine_config.name(), seed)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    writeln!(out, "{json}").map_err(io_err("stdout"))
}
