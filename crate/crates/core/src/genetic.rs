//! History-driven genetic search: breed the two fittest measured
//! configurations with single-cut crossover, then mutate genes to uniform
//! random grid values.

use std::fmt;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::engine::{ensure_unexhausted, random_unevaluated, Engine, EngineError};
use crate::history::{Evaluation, History};
use crate::space::{Configuration, SearchSpace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaParams {
    /// Per-gene probability of replacement by a random grid value.
    pub mutation_rate: f64,
    /// Random configurations measured before breeding; `None` means `max(4, d)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed_pool: Option<usize>,
    /// Re-mutation attempts when a child was already measured.
    pub max_retries: usize,
}

impl Default for GaParams {
    fn default() -> Self {
        Self {
            mutation_rate: 0.1,
            seed_pool: None,
            max_retries: 8,
        }
    }
}

impl GaParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err("mutation_rate must lie in [0, 1]".into());
        }
        if matches!(self.seed_pool, Some(n) if n < 2) {
            return Err("seed_pool must be at least 2".into());
        }
        if self.max_retries == 0 {
            return Err("max_retries must be at least 1".into());
        }
        Ok(())
    }

    pub fn seed_pool_for(&self, dim: usize) -> usize {
        self.seed_pool.unwrap_or_else(|| dim.max(4))
    }
}

/// Fitness of a measured configuration; higher is fitter.
pub type Fitness = Box<dyn Fn(&Configuration, f64) -> f64 + Send>;

/// The raw metric.
pub fn metric_fitness() -> Fitness {
    Box::new(|_, y| y)
}

/// The two ok entries of highest fitness, fittest first. Equal fitness
/// favours the earlier iteration.
pub fn select_parents(
    history: &History,
    fitness: &dyn Fn(&Configuration, f64) -> f64,
) -> Result<(Configuration, Configuration), EngineError> {
    let mut scored: Vec<(f64, &Evaluation)> = history
        .ok_entries()
        .map(|e| (fitness(&e.config, e.value.unwrap()), e))
        .collect();
    if scored.len() < 2 {
        return Err(EngineError::InsufficientHistory(scored.len()));
    }
    // Stable sort keeps history (iteration) order among equals.
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok((scored[0].1.config.clone(), scored[1].1.config.clone()))
}

/// Single-cut crossover at `cut` (1..d): `p1[..cut] ++ p2[cut..]`.
pub fn crossover_at(p1: &Configuration, p2: &Configuration, cut: usize) -> Configuration {
    assert_eq!(p1.len(), p2.len());
    let mut child = p1.values()[..cut].to_vec();
    child.extend_from_slice(&p2.values()[cut..]);
    Configuration::new(child)
}

/// Single-cut crossover with a uniform cut point; with one gene, picks a
/// parent at random.
pub fn crossover(p1: &Configuration, p2: &Configuration, rng: &mut dyn RngCore) -> Configuration {
    let d = p1.len();
    if d < 2 {
        return if rng.gen_bool(0.5) { p1.clone() } else { p2.clone() };
    }
    crossover_at(p1, p2, rng.gen_range(1..d))
}

/// Replaces each gene with probability `rate` by a uniform grid value.
pub fn mutate(
    child: &Configuration,
    space: &SearchSpace,
    rate: f64,
    rng: &mut dyn RngCore,
) -> Configuration {
    Configuration::new(
        child
            .values()
            .iter()
            .zip(space.params())
            .map(|(&v, p)| {
                if rate > 0.0 && rng.gen_bool(rate) {
                    p.random_value(rng)
                } else {
                    v
                }
            })
            .collect(),
    )
}

pub struct GeneticEngine {
    params: GaParams,
    fitness: Fitness,
}

impl fmt::Debug for GeneticEngine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GeneticEngine")
            .field("params", &self.params)
            .finish_non_exhaustive()
    }
}

impl GeneticEngine {
    pub fn new(params: GaParams) -> Self {
        Self {
            params,
            fitness: metric_fitness(),
        }
    }

    pub fn with_fitness(mut self, fitness: Fitness) -> Self {
        self.fitness = fitness;
        self
    }

    pub fn params(&self) -> &GaParams {
        &self.params
    }
}

impl Default for GeneticEngine {
    fn default() -> Self {
        Self::new(GaParams::default())
    }
}

impl Engine for GeneticEngine {
    fn name(&self) -> &'static str {
        "ga"
    }

    fn propose(
        &mut self,
        history: &History,
        space: &SearchSpace,
        rng: &mut dyn RngCore,
    ) -> Result<Configuration, EngineError> {
        ensure_unexhausted(history, space)?;
        if history.ok_count() < self.params.seed_pool_for(space.dim()) {
            return random_unevaluated(space, history, rng).ok_or(EngineError::SpaceExhausted);
        }
        let (p1, p2) = select_parents(history, &*self.fitness)?;
        let child = crossover(&p1, &p2, rng);
        let mut candidate = mutate(&child, space, self.params.mutation_rate, rng);
        let mut retries = 0;
        while history.contains_ok(&candidate) && retries < self.params.max_retries {
            candidate = mutate(&child, space, self.params.mutation_rate, rng);
            retries += 1;
        }
        if history.contains_ok(&candidate) {
            return random_unevaluated(space, history, rng).ok_or(EngineError::SpaceExhausted);
        }
        Ok(candidate)
    }

    fn observe(&mut self, _evaluation: &Evaluation) {}
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::history::Aggregation;
    use crate::space::{Binding, ParameterSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn cfg(v: &[i64]) -> Configuration {
        Configuration::new(v.to_vec())
    }

    fn history(points: &[(&[i64], f64)]) -> History {
        let mut h = History::new();
        for (i, (c, y)) in points.iter().enumerate() {
            h.record(Evaluation::ok(i as u64 + 1, cfg(c), vec![*y], Aggregation::Median, 0.0))
                .unwrap();
        }
        h
    }

    #[test]
    fn parents_are_the_two_fittest() {
        let h = history(&[(&[1], 10.0), (&[2], 30.0), (&[3], 20.0)]);
        let (a, b) = select_parents(&h, &|_, y| y).unwrap();
        assert_eq!((a, b), (cfg(&[2]), cfg(&[3])));

        let tie = history(&[(&[5], 1.0), (&[6], 7.0), (&[7], 7.0)]);
        let (a, b) = select_parents(&tie, &|_, y| y).unwrap();
        assert_eq!((a, b), (cfg(&[6]), cfg(&[7])));

        let one = history(&[(&[1], 1.0)]);
        assert!(matches!(
            select_parents(&one, &|_, y| y),
            Err(EngineError::InsufficientHistory(1))
        ));
    }

    #[test]
    fn custom_fitness_reorders_parents() {
        let h = history(&[(&[1], 10.0), (&[2], 30.0), (&[3], 20.0)]);
        let (a, b) = select_parents(&h, &|_, y| -y).unwrap();
        assert_eq!((a, b), (cfg(&[1]), cfg(&[3])));
    }

    #[test]
    fn crossover_examples() {
        let p1 = cfg(&[1, 2, 3, 4]);
        let p2 = cfg(&[5, 6, 7, 8]);
        assert_eq!(crossover_at(&p1, &p2, 2), cfg(&[1, 2, 7, 8]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            assert_eq!(crossover(&p1, &p1, &mut rng), p1);
            let child = crossover(&p1, &p2, &mut rng);
            for (i, v) in child.values().iter().enumerate() {
                assert!(*v == p1.values()[i] || *v == p2.values()[i]);
            }
        }
    }

    #[test]
    fn one_gene_crossover_picks_either_parent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seen: BTreeSet<_> = (0..64)
            .map(|_| crossover(&cfg(&[1]), &cfg(&[2]), &mut rng))
            .collect();
        assert_eq!(seen.len(), 2);
    }

    #[test]
    fn rate_zero_children_are_exactly_single_cut_recombinations() {
        let p1 = cfg(&[1, 2, 3, 4]);
        let p2 = cfg(&[5, 6, 7, 8]);
        let expected: BTreeSet<_> = (1..4).map(|c| crossover_at(&p1, &p2, c)).collect();
        let s = SearchSpace::new(
            (0..4)
                .map(|i| ParameterSpec::new(format!("g{i}"), 0, 9, 1, Binding::Both))
                .collect(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let seen: BTreeSet<_> = (0..500)
            .map(|_| mutate(&crossover(&p1, &p2, &mut rng), &s, 0.0, &mut rng))
            .collect();
        assert_eq!(seen, expected);
    }

    #[test]
    fn mutation_rates() {
        let s = SearchSpace::new(vec![ParameterSpec::new("x", 1, 4, 1, Binding::Both)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        assert_eq!(mutate(&cfg(&[3]), &s, 0.0, &mut rng), cfg(&[3]));

        let mut counts = [0usize; 4];
        let trials = 10_000;
        for _ in 0..trials {
            let m = mutate(&cfg(&[3]), &s, 1.0, &mut rng);
            assert!(s.contains(&m));
            counts[(m.values()[0] - 1) as usize] += 1;
        }
        let expected = trials as f64 / 4.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 16.27, "chi2 = {chi2}");
        for c in counts {
            assert!((c as f64 / trials as f64 - 0.25).abs() <= 0.02);
        }
    }

    #[test]
    fn seed_phase_and_exhaustion() {
        let s = SearchSpace::new(vec![ParameterSpec::new("x", 0, 1, 1, Binding::Both)]).unwrap();
        let mut e = GeneticEngine::new(GaParams {
            seed_pool: Some(4),
            ..GaParams::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let first = e.propose(&History::new(), &s, &mut rng).unwrap();
        assert!(s.contains(&first));
        let full = history(&[(&[0], 1.0), (&[1], 2.0)]);
        assert!(matches!(
            e.propose(&full, &s, &mut rng),
            Err(EngineError::SpaceExhausted)
        ));
    }

    #[test]
    fn bred_child_is_never_a_measured_point() {
        let s = SearchSpace::new(vec![
            ParameterSpec::new("a", 0, 2, 1, Binding::Both),
            ParameterSpec::new("b", 0, 2, 1, Binding::Both),
        ])
        .unwrap();
        let h = history(&[(&[0, 0], 1.0), (&[1, 1], 5.0), (&[2, 2], 4.0), (&[1, 2], 3.0)]);
        let mut e = GeneticEngine::new(GaParams {
            seed_pool: Some(2),
            mutation_rate: 0.0,
            max_retries: 1,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let c = e.propose(&h, &s, &mut rng).unwrap();
            assert!(!h.contains_ok(&c));
        }
    }
}
