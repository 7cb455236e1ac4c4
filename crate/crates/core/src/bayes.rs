//! Bayesian optimization: a random initial design, then a Gaussian-process
//! surrogate scored with an optimistic-improvement acquisition over a
//! candidate set of grid points.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::engine::{ensure_unexhausted, random_unevaluated, Engine, EngineError};
use crate::gp::{default_hyper_grid, select_hypers, GpHyper, GpModel};
use crate::history::{Evaluation, History};
use crate::space::{Configuration, SearchSpace};

const RESAMPLE_ROUNDS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoParams {
    /// Weight on the predictive standard deviation.
    pub alpha: f64,
    /// Offset added to the incumbent before measuring improvement.
    pub epsilon: f64,
    /// Random initial design size; `None` means `max(5, d + 1)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_budget: Option<usize>,
    pub candidate_budget: usize,
    /// Observations between hyperparameter re-selections.
    pub refit_period: usize,
}

impl Default for BoParams {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            epsilon: 0.0,
            init_budget: None,
            candidate_budget: 2048,
            refit_period: 5,
        }
    }
}

impl BoParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err("alpha must be a non-negative number".into());
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err("epsilon must be a non-negative number".into());
        }
        if self.init_budget == Some(0) {
            return Err("init_budget must be at least 1".into());
        }
        if self.candidate_budget == 0 {
            return Err("candidate_budget must be at least 1".into());
        }
        if self.refit_period == 0 {
            return Err("refit_period must be at least 1".into());
        }
        Ok(())
    }

    pub fn init_budget_for(&self, dim: usize) -> usize {
        self.init_budget.unwrap_or_else(|| (dim + 1).max(5))
    }
}

/// `k` distinct uniformly random grid points.
pub fn initial_design(
    space: &SearchSpace,
    k: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<Configuration>, EngineError> {
    let grid_size = space.grid_size();
    if k as u64 > grid_size {
        return Err(EngineError::SpaceTooSmall {
            requested: k as u64,
            grid_size,
        });
    }
    if grid_size <= usize::MAX as u64 && grid_size <= 1 << 24 {
        return Ok(sample(rng, grid_size as usize, k)
            .into_iter()
            .map(|i| space.config_at(i as u64))
            .collect());
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let c = space.random_config(rng);
        if seen.insert(c.clone()) {
            out.push(c);
        }
    }
    Ok(out)
}

/// Optimistic improvement of a candidate over the incumbent:
/// `(mean + alpha * stddev) - (best_y + epsilon)`.
pub fn smsego_gain(mean: f64, stddev: f64, best_y: f64, alpha: f64, epsilon: f64) -> f64 {
    (mean + alpha * stddev) - (best_y + epsilon)
}

/// A scored candidate from the most recent acquisition step.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub config: Configuration,
    pub gain: f64,
}

#[derive(Debug, Clone)]
pub struct BayesEngine {
    params: BoParams,
    design: Option<Vec<Configuration>>,
    hyper: Option<GpHyper>,
    hyper_selected_at: usize,
    pending: Option<Configuration>,
    last_candidates: Vec<ScoredCandidate>,
}

impl BayesEngine {
    pub fn new(params: BoParams) -> Self {
        Self {
            params,
            design: None,
            hyper: None,
            hyper_selected_at: 0,
            pending: None,
            last_candidates: Vec::new(),
        }
    }

    pub fn params(&self) -> &BoParams {
        &self.params
    }

    /// Hyperparameters currently in use by the surrogate.
    pub fn hyper(&self) -> Option<&GpHyper> {
        self.hyper.as_ref()
    }

    /// Candidates scored for the latest model-based proposal, in
    /// lexicographic order. Empty while the initial design runs.
    pub fn last_candidates(&self) -> &[ScoredCandidate] {
        &self.last_candidates
    }

    pub fn pending(&self) -> Option<&Configuration> {
        self.pending.as_ref()
    }

    fn training_set(history: &History, space: &SearchSpace) -> (Vec<Vec<f64>>, Vec<f64>) {
        history
            .ok_entries()
            .map(|e| {
                let u = space
                    .normalize(&e.config)
                    .expect("history holds on-grid configurations");
                (u, e.value.expect("ok entries carry a value"))
            })
            .unzip()
    }

    fn surrogate(&mut self, history: &History, space: &SearchSpace) -> Result<GpModel, EngineError> {
        let (u, y) = Self::training_set(history, space);
        let n = y.len();
        let stale = self.hyper.is_none() || n >= self.hyper_selected_at + self.params.refit_period;
        if stale {
            self.hyper = Some(select_hypers(&u, &y, &default_hyper_grid(space.dim()))?);
            self.hyper_selected_at = n;
        }
        let hyper = self.hyper.as_ref().unwrap();
        match GpModel::fit(&u, &y, hyper) {
            Ok(m) => Ok(m),
            Err(_) => {
                let h = select_hypers(&u, &y, &default_hyper_grid(space.dim()))?;
                self.hyper_selected_at = n;
                let m = GpModel::fit(&u, &y, &h)?;
                self.hyper = Some(h);
                Ok(m)
            }
        }
    }

    fn sample_candidates(
        &self,
        space: &SearchSpace,
        history: &History,
        incumbent: &Configuration,
        rng: &mut dyn RngCore,
    ) -> BTreeSet<Configuration> {
        let mut set = BTreeSet::new();
        for _ in 0..self.params.candidate_budget {
            set.insert(space.random_config(rng));
        }
        set.extend(space.neighbors(incumbent));
        set.retain(|c| !history.contains_ok(c));
        set
    }

    fn propose_from_model(
        &mut self,
        history: &History,
        space: &SearchSpace,
        rng: &mut dyn RngCore,
    ) -> Result<Configuration, EngineError> {
        let model = self.surrogate(history, space)?;
        let incumbent = history.best().expect("initial design produced ok entries");
        let best_y = incumbent.value.unwrap();

        let candidates: BTreeSet<Configuration> =
            if space.grid_size() <= self.params.candidate_budget as u64 {
                space
                    .iter_grid()
                    .filter(|c| !history.contains_ok(c))
                    .collect()
            } else {
                let mut set = BTreeSet::new();
                for _ in 0..RESAMPLE_ROUNDS {
                    set = self.sample_candidates(space, history, &incumbent.config, rng);
                    if !set.is_empty() {
                        break;
                    }
                }
                if set.is_empty() {
                    self.last_candidates.clear();
                    return random_unevaluated(space, history, rng).ok_or(EngineError::SpaceExhausted);
                }
                set
            };
        if candidates.is_empty() {
            return Err(EngineError::SpaceExhausted);
        }

        self.last_candidates.clear();
        let mut best: Option<(f64, &Configuration)> = None;
        for c in &candidates {
            let u = space.normalize(c).expect("candidates are on-grid");
            let (mean, var) = model.predict(&u)?;
            let mut gain = smsego_gain(mean, var.sqrt(), best_y, self.params.alpha, self.params.epsilon);
            if gain.is_nan() {
                gain = f64::NEG_INFINITY;
            }
            self.last_candidates.push(ScoredCandidate {
                config: c.clone(),
                gain,
            });
            // Candidates iterate in lexicographic order, so a strict
            // comparison keeps the smallest vector on ties.
            if best.is_none_or(|(g, _)| gain > g) {
                best = Some((gain, c));
            }
        }
        Ok(best.expect("candidate set is non-empty").1.clone())
    }
}

impl Default for BayesEngine {
    fn default() -> Self {
        Self::new(BoParams::default())
    }
}

impl Engine for BayesEngine {
    fn name(&self) -> &'static str {
        "bo"
    }

    fn propose(
        &mut self,
        history: &History,
        space: &SearchSpace,
        rng: &mut dyn RngCore,
    ) -> Result<Configuration, EngineError> {
        ensure_unexhausted(history, space)?;
        let init_budget = self.params.init_budget_for(space.dim());
        let proposal = if history.ok_count() < init_budget {
            if self.design.is_none() {
                let k = (init_budget as u64).min(space.grid_size()) as usize;
                self.design = Some(initial_design(space, k, rng)?);
            }
            let next = self
                .design
                .as_ref()
                .unwrap()
                .iter()
                .find(|c| !history.contains_ok(c))
                .cloned();
            self.last_candidates.clear();
            match next {
                Some(c) => c,
                None => random_unevaluated(space, history, rng).ok_or(EngineError::SpaceExhausted)?,
            }
        } else {
            self.propose_from_model(history, space, rng)?
        };
        self.pending = Some(proposal.clone());
        Ok(proposal)
    }

    fn observe(&mut self, _evaluation: &Evaluation) {
        self.pending = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::history::Aggregation;
    use crate::space::{Binding, ParameterSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn line(n: i64) -> SearchSpace {
        SearchSpace::new(vec![ParameterSpec::new("x", 0, n - 1, 1, Binding::Both)]).unwrap()
    }

    #[test]
    fn gain_formula() {
        assert_eq!(smsego_gain(3.0, 0.0, 3.0, 2.0, 0.0), 0.0);
        assert_eq!(smsego_gain(3.0, 1.0, 3.0, 2.0, 0.0), 2.0);
        assert!(smsego_gain(0.0, 1.1, 0.0, 0.5, 0.0) > smsego_gain(0.0, 1.0, 0.0, 0.5, 0.0));
        assert_eq!(smsego_gain(1.0, 5.0, 1.0, 0.0, 0.25), -0.25);
    }

    #[test]
    fn initial_design_sizes() {
        let s = line(7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let full = initial_design(&s, 7, &mut rng).unwrap();
        let set: BTreeSet<_> = full.into_iter().collect();
        assert_eq!(set, s.iter_grid().collect());
        assert_eq!(initial_design(&s, 1, &mut rng).unwrap().len(), 1);
        assert!(matches!(
            initial_design(&s, 8, &mut rng),
            Err(EngineError::SpaceTooSmall { .. })
        ));
        assert_eq!(BoParams::default().init_budget_for(5), 6);
        assert_eq!(BoParams::default().init_budget_for(1), 5);
    }

    #[test]
    fn empty_history_proposes_first_design_point() {
        let s = line(21);
        let mut e = BayesEngine::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = e.propose(&History::new(), &s, &mut rng).unwrap();
        let design = initial_design(&s, 5, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(c, design[0]);
        assert_eq!(e.pending(), Some(&c));
    }

    #[test]
    fn last_unevaluated_point_is_forced() {
        let s = line(9);
        let mut h = History::new();
        for (i, c) in s.iter_grid().filter(|c| c.values()[0] != 6).enumerate() {
            let y = -((c.values()[0] - 3) as f64).powi(2);
            h.record(Evaluation::ok(i as u64 + 1, c, vec![y], Aggregation::Median, 0.0))
                .unwrap();
        }
        let mut e = BayesEngine::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(e.propose(&h, &s, &mut rng).unwrap().values(), &[6]);
    }

    #[test]
    fn proposal_maximizes_logged_acquisition() {
        let s = line(30);
        let mut h = History::new();
        for (i, x) in [0, 7, 15, 22, 29].into_iter().enumerate() {
            let y = (x as f64 / 5.0).sin();
            h.record(Evaluation::ok(i as u64 + 1, vec![x].into(), vec![y], Aggregation::Median, 0.0))
                .unwrap();
        }
        let mut e = BayesEngine::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = e.propose(&h, &s, &mut rng).unwrap();
        let cands = e.last_candidates();
        assert_eq!(cands.len(), 25);
        let top = cands.iter().map(|s| s.gain).fold(f64::NEG_INFINITY, f64::max);
        let first_top = cands.iter().find(|s| s.gain == top).unwrap();
        assert_eq!(first_top.config, c);
        assert!(!h.contains_ok(&c));
    }
}
