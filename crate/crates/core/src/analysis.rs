//! Post-hoc analysis of tuning histories: range coverage, best-so-far
//! trajectories, pairwise scatter data, exhaustive sweeps, and engine
//! comparison tables.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::{Evaluator, HarnessError};
use crate::history::{History, HistoryError};
use crate::space::{Configuration, SearchSpace};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("history has no ok evaluations")]
    EmptyHistory,
    #[error("grid of {grid_size} points exceeds the sweep limit of {limit}")]
    GridTooLarge { grid_size: u64, limit: u64 },
    #[error("history does not match the search space: {0}")]
    SpaceMismatch(String),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    History(#[from] HistoryError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Sampled versus tunable range of one parameter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub param: String,
    pub sampled_min: i64,
    pub sampled_max: i64,
    pub tunable_min: i64,
    pub tunable_max: i64,
    /// `floor(100 * sampled span / tunable span)`; 100 for a single-point range.
    pub span_pct: u32,
    /// `floor(100 * distinct sampled values / grid points)`.
    pub point_pct: u32,
}

/// Truncated percentage of the tunable span covered by the sampled span.
pub fn span_pct(sampled_min: i64, sampled_max: i64, tunable_min: i64, tunable_max: i64) -> u32 {
    let tunable = tunable_max as i128 - tunable_min as i128;
    if tunable <= 0 {
        return 100;
    }
    let sampled = sampled_max as i128 - sampled_min as i128;
    (100 * sampled / tunable) as u32
}

fn ok_configs<'a>(history: &'a History, space: &'a SearchSpace) -> Result<Vec<&'a Configuration>, AnalysisError> {
    let configs: Vec<_> = history.ok_entries().map(|e| &e.config).collect();
    if configs.is_empty() {
        return Err(AnalysisError::EmptyHistory);
    }
    for c in &configs {
        space
            .check(c)
            .map_err(|e| AnalysisError::SpaceMismatch(e.to_string()))?;
    }
    Ok(configs)
}

/// Per-parameter coverage over the ok entries.
pub fn coverage(history: &History, space: &SearchSpace) -> Result<Vec<CoverageRow>, AnalysisError> {
    let configs = ok_configs(history, space)?;
    Ok(space
        .params()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let values: BTreeSet<i64> = configs.iter().map(|c| c.values()[i]).collect();
            let lo = *values.first().unwrap();
            let hi = *values.last().unwrap();
            CoverageRow {
                param: p.name.clone(),
                sampled_min: lo,
                sampled_max: hi,
                tunable_min: p.min,
                tunable_max: p.max,
                span_pct: span_pct(lo, hi, p.min, p.max),
                point_pct: (100 * values.len() as u64 / p.point_count()) as u32,
            }
        })
        .collect())
}

pub fn mean_span_pct(rows: &[CoverageRow]) -> f64 {
    rows.iter().map(|r| r.span_pct as f64).sum::<f64>() / rows.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub iteration: u64,
    pub best_so_far: f64,
}

/// Running maximum of ok values in iteration order.
pub fn best_so_far(history: &History) -> Result<Vec<TrajectoryPoint>, AnalysisError> {
    let mut best = f64::NEG_INFINITY;
    let points: Vec<_> = history
        .ok_entries()
        .map(|e| {
            best = best.max(e.value.unwrap());
            TrajectoryPoint {
                iteration: e.iteration,
                best_so_far: best,
            }
        })
        .collect();
    if points.is_empty() {
        return Err(AnalysisError::EmptyHistory);
    }
    Ok(points)
}

/// One point of a pairwise scatter plot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub param_a: String,
    pub value_a: i64,
    pub param_b: String,
    pub value_b: i64,
    pub metric: f64,
}

/// One row per ok entry and unordered parameter pair.
pub fn pairplot_export(history: &History, space: &SearchSpace) -> Result<Vec<PairRow>, AnalysisError> {
    ok_configs(history, space)?;
    let params = space.params();
    let mut rows = Vec::new();
    for e in history.ok_entries() {
        let v = e.config.values();
        for a in 0..params.len() {
            for b in a + 1..params.len() {
                rows.push(PairRow {
                    param_a: params[a].name.clone(),
                    value_a: v[a],
                    param_b: params[b].name.clone(),
                    value_b: v[b],
                    metric: e.value.unwrap(),
                });
            }
        }
    }
    Ok(rows)
}

/// Default cap on exhaustive sweeps.
pub const DEFAULT_SWEEP_LIMIT: u64 = 100_000;

/// Evaluates every grid point once in lexicographic order. Returns the full
/// history and the best configuration (lexicographically smallest on ties).
pub fn exhaustive_sweep<V: Evaluator + ?Sized>(
    space: &SearchSpace,
    evaluator: &mut V,
    limit: u64,
) -> Result<(History, Configuration), AnalysisError> {
    if space.grid_size() > limit {
        return Err(AnalysisError::GridTooLarge {
            grid_size: space.grid_size(),
            limit,
        });
    }
    let mut history = History::new();
    for config in space.iter_grid() {
        let e = evaluator.evaluate(space, &config, history.next_iteration())?;
        history.record(e)?;
    }
    // `best` keeps the earliest entry on ties, which is the smallest vector here.
    let best = history.best().ok_or(AnalysisError::EmptyHistory)?.config.clone();
    Ok((history, best))
}

/// Summary of one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningReport {
    pub engine: String,
    pub seed: u64,
    pub best_config: Configuration,
    pub best_value: f64,
    pub total_evaluations: u64,
    pub ok_evaluations: u64,
    pub total_wall_time_s: f64,
    pub trajectory: Vec<TrajectoryPoint>,
    pub coverage: Vec<CoverageRow>,
}

impl TuningReport {
    pub fn from_history(
        history: &History,
        space: &SearchSpace,
        engine: &str,
        seed: u64,
    ) -> Result<Self, AnalysisError> {
        let trajectory = best_so_far(history)?;
        let coverage = coverage(history, space)?;
        let best = history.best().ok_or(AnalysisError::EmptyHistory)?;
        Ok(Self {
            engine: engine.to_string(),
            seed,
            best_config: best.config.clone(),
            best_value: best.value.unwrap(),
            total_evaluations: history.len() as u64,
            ok_evaluations: history.ok_count() as u64,
            total_wall_time_s: history.entries().iter().map(|e| e.wall_time_s).sum(),
            trajectory,
            coverage,
        })
    }

    pub fn mean_span_pct(&self) -> f64 {
        mean_span_pct(&self.coverage)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub engine: String,
    pub best_value: f64,
    /// 1-based count of evaluations until the first value within 1% of the
    /// engine's own best.
    pub iterations_to_best: u64,
    pub mean_span_pct: f64,
    pub evaluations: u64,
}

/// One comparison row per named history.
pub fn compare(
    histories: &[(String, &History)],
    space: &SearchSpace,
) -> Result<Vec<ComparisonRow>, AnalysisError> {
    histories
        .iter()
        .map(|(name, h)| {
            let best = h.best().ok_or(AnalysisError::EmptyHistory)?.value.unwrap();
            let threshold = best - 0.01 * best.abs();
            let reached = h
                .entries()
                .iter()
                .position(|e| e.ok_value().is_some_and(|v| v >= threshold))
                .expect("best entry qualifies") as u64
                + 1;
            Ok(ComparisonRow {
                engine: name.clone(),
                best_value: best,
                iterations_to_best: reached,
                mean_span_pct: mean_span_pct(&coverage(h, space)?),
                evaluations: h.len() as u64,
            })
        })
        .collect()
}

fn write_rows<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

fn write_header_only<W: Write>(out: W, header: &[&str]) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_coverage_csv<W: Write>(out: W, rows: &[CoverageRow]) -> Result<(), AnalysisError> {
    write_rows(out, rows)
}

pub fn write_trajectory_csv<W: Write>(out: W, rows: &[TrajectoryPoint]) -> Result<(), AnalysisError> {
    write_rows(out, rows)
}

/// Pairplot rows; a one-parameter space still gets the header line.
pub fn write_pairplot_csv<W: Write>(out: W, rows: &[PairRow]) -> Result<(), AnalysisError> {
    if rows.is_empty() {
        return write_header_only(out, &["param_a", "value_a", "param_b", "value_b", "metric"]);
    }
    write_rows(out, rows)
}

pub fn write_comparison_csv<W: Write>(out: W, rows: &[ComparisonRow]) -> Result<(), AnalysisError> {
    write_rows(out, rows)
}
