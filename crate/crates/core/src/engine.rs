//! The propose/observe contract shared by every search engine, plus the
//! uniform-random baseline.

use rand::{Rng, RngCore};
use thiserror::Error;

use crate::gp::GpError;
use crate::history::{Evaluation, History};
use crate::space::{Configuration, SearchSpace};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("every grid point already has an ok evaluation")]
    SpaceExhausted,
    #[error("iteration budget of {0} evaluations reached")]
    BudgetExhausted(u64),
    #[error("requested {requested} distinct points from a grid of {grid_size}")]
    SpaceTooSmall { requested: u64, grid_size: u64 },
    #[error("need at least two ok evaluations, have {0}")]
    InsufficientHistory(usize),
    #[error("surrogate model: {0}")]
    Surrogate(#[from] GpError),
    #[error("engine made {0} consecutive proposals without a new evaluation")]
    Stuck(u64),
}

/// A search strategy driven one proposal at a time.
///
/// Callers alternate strictly: every `propose` is followed by exactly one
/// `observe` carrying the evaluation of the proposed configuration (served
/// from history when it was already measured).
pub trait Engine {
    fn name(&self) -> &'static str;

    fn propose(
        &mut self,
        history: &History,
        space: &SearchSpace,
        rng: &mut dyn RngCore,
    ) -> Result<Configuration, EngineError>;

    fn observe(&mut self, evaluation: &Evaluation);
}

impl<E: Engine + ?Sized> Engine for Box<E> {
    fn name(&self) -> &'static str {
        (**self).name()
    }

    fn propose(
        &mut self,
        history: &History,
        space: &SearchSpace,
        rng: &mut dyn RngCore,
    ) -> Result<Configuration, EngineError> {
        (**self).propose(history, space, rng)
    }

    fn observe(&mut self, evaluation: &Evaluation) {
        (**self).observe(evaluation)
    }
}

pub(crate) fn ensure_unexhausted(history: &History, space: &SearchSpace) -> Result<(), EngineError> {
    if history.ok_count() as u64 >= space.grid_size() {
        Err(EngineError::SpaceExhausted)
    } else {
        Ok(())
    }
}

const ENUMERATE_LIMIT: u64 = 1 << 16;
const REJECTION_TRIES: usize = 4096;

/// A uniformly random configuration without an ok evaluation, or `None`
/// when the grid is exhausted.
pub fn random_unevaluated(
    space: &SearchSpace,
    history: &History,
    rng: &mut dyn RngCore,
) -> Option<Configuration> {
    let remaining = space.grid_size() - (history.ok_count() as u64).min(space.grid_size());
    if remaining == 0 {
        return None;
    }
    if space.grid_size() <= ENUMERATE_LIMIT {
        let pick = rng.gen_range(0..remaining);
        return space
            .iter_grid()
            .filter(|c| !history.contains_ok(c))
            .nth(pick as usize);
    }
    for _ in 0..REJECTION_TRIES {
        let c = space.random_config(rng);
        if !history.contains_ok(&c) {
            return Some(c);
        }
    }
    // Nearly full huge grid: scan forward from a random index.
    let start = rng.gen_range(0..space.grid_size());
    (0..space.grid_size())
        .map(|k| space.config_at((start + k) % space.grid_size()))
        .find(|c| !history.contains_ok(c))
}

/// Uniform random search over unevaluated grid points.
#[derive(Debug, Default, Clone)]
pub struct RandomEngine;

impl RandomEngine {
    pub fn new() -> Self {
        Self
    }
}

impl Engine for RandomEngine {
    fn name(&self) -> &'static str {
        "random"
    }

    fn propose(
        &mut self,
        history: &History,
        space: &SearchSpace,
        rng: &mut dyn RngCore,
    ) -> Result<Configuration, EngineError> {
        ensure_unexhausted(history, space)?;
        random_unevaluated(space, history, rng).ok_or(EngineError::SpaceExhausted)
    }

    fn observe(&mut self, _evaluation: &Evaluation) {}
}
