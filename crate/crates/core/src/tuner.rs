//! The sequential propose/evaluate/observe loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::engine::{Engine, EngineError};
use crate::harness::{evaluate_with_cache, Evaluator, HarnessError};
use crate::history::{Evaluation, History};
use crate::space::SearchSpace;

/// Default cap on workload evaluations per session.
pub const DEFAULT_MAX_ITERATIONS: u64 = 50;

/// Proposals answered from history in a row before the engine is declared stuck.
const MAX_CONSECUTIVE_CACHE_HITS: u64 = 100_000;

#[derive(Debug, Error)]
pub enum TuneError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("recording evaluation: {0}")]
    Sink(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    BudgetExhausted,
    SpaceExhausted,
}

#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub history: History,
    pub stop: StopReason,
    /// Proposals served from history without running the workload.
    pub cache_hits: u64,
}

/// Runs one tuning session.
///
/// Each workload evaluation (ok or not) consumes one iteration; proposals
/// that hit an ok entry in history are answered from it for free. `on_record`
/// sees every new evaluation right after it is recorded.
pub fn tune<E, V, F>(
    space: &SearchSpace,
    engine: &mut E,
    evaluator: &mut V,
    max_iterations: u64,
    seed: u64,
    mut on_record: F,
) -> Result<TuneOutcome, TuneError>
where
    E: Engine + ?Sized,
    V: Evaluator + ?Sized,
    F: FnMut(&Evaluation) -> std::io::Result<()>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = History::new();
    let mut cache_hits = 0;
    let mut streak = 0;
    let stop = loop {
        if history.len() as u64 >= max_iterations {
            break StopReason::BudgetExhausted;
        }
        let config = match engine.propose(&history, space, &mut rng) {
            Ok(c) => c,
            Err(EngineError::SpaceExhausted) => break StopReason::SpaceExhausted,
            Err(e) => return Err(e.into()),
        };
        debug_assert!(space.contains(&config), "engine proposed off-grid {config}");
        let served = evaluate_with_cache(&mut history, space, &config, evaluator)?;
        if served.cached {
            cache_hits += 1;
            streak += 1;
            if streak >= MAX_CONSECUTIVE_CACHE_HITS {
                return Err(EngineError::Stuck(streak).into());
            }
        } else {
            streak = 0;
            on_record(&served.evaluation)?;
        }
        engine.observe(&served.evaluation);
    };
    Ok(TuneOutcome {
        history,
        stop,
        cache_hits,
    })
}
