//! Engines against objectives whose maximizers are known by enumeration.

use gridtune::bayes::{smsego_gain, BayesEngine, BoParams};
use gridtune::harness::{synthetic_eval, SurfaceKind, SyntheticEvaluator, SyntheticSurface};
use gridtune::neldermead::{init_simplex, NelderMeadEngine, NmsParams};
use gridtune::study::{parse_study, PRESETS};
use gridtune::{tune, Binding, Configuration, Engine, Evaluation, History, ParameterSpec, SearchSpace};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grid(dims: &[(i64, i64, i64)]) -> SearchSpace {
    SearchSpace::new(
        dims.iter()
            .enumerate()
            .map(|(i, &(lo, hi, step))| ParameterSpec::new(format!("p{i}"), lo, hi, step, Binding::CommandArg))
            .collect(),
    )
    .unwrap()
}

/// Every maximizer of `surface` on `space`, by brute force.
fn maximizers(surface: &SyntheticSurface, space: &SearchSpace) -> (f64, Vec<Configuration>) {
    let scored: Vec<(Configuration, f64)> = space
        .iter_grid()
        .map(|c| {
            let v = synthetic_eval(surface, space, &c, 0).unwrap();
            (c, v)
        })
        .collect();
    let best = scored.iter().map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
    let arg = scored.into_iter().filter(|(_, v)| *v == best).map(|(c, _)| c).collect();
    (best, arg)
}

fn run<E: Engine>(space: &SearchSpace, engine: &mut E, surface: &SyntheticSurface, budget: u64, seed: u64) -> History {
    let mut ev = SyntheticEvaluator::new(surface.clone(), space).unwrap();
    tune(space, engine, &mut ev, budget, seed, |_| Ok(())).unwrap().history
}

#[test]
fn nms_reaches_quadratic_maximizer() {
    let space = grid(&[(0, 20, 1), (0, 20, 1)]);
    let surface = SyntheticSurface::new(SurfaceKind::Quadratic).with_target(vec![13, 7]);
    let (_, arg) = maximizers(&surface, &space);
    assert_eq!(arg, vec![Configuration::from(vec![13, 7])]);
    for seed in 0..10 {
        let h = run(&space, &mut NelderMeadEngine::default(), &surface, 200, seed);
        let near = h.ok_entries().any(|e| {
            e.config
                .values()
                .iter()
                .zip(arg[0].values())
                .all(|(a, b)| (a - b).abs() <= 1)
        });
        assert!(near, "seed {seed}: no evaluation within one step of {}", arg[0]);
    }
}

#[test]
fn bo_finds_one_dimensional_maximizer() {
    let space = grid(&[(0, 20, 1)]);
    let surface = SyntheticSurface::new(SurfaceKind::Quadratic).with_target(vec![13]);
    let (best, _) = maximizers(&surface, &space);
    let hits = (0..10)
        .filter(|&seed| {
            let h = run(&space, &mut BayesEngine::new(BoParams::default()), &surface, 15, seed);
            h.best().unwrap().value == Some(best)
        })
        .count();
    assert!(hits >= 9, "maximizer found in {hits}/10 seeds");
}

#[test]
fn bo_never_repeats_and_maximizes_gain() {
    let space = grid(&[(0, 30, 1), (0, 30, 1)]);
    let surface = SyntheticSurface::new(SurfaceKind::Quadratic).with_noise(0.5, 3);
    let mut engine = BayesEngine::new(BoParams::default());
    let mut ev = SyntheticEvaluator::new(surface, &space).unwrap();
    let mut history = History::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..25 {
        let c = engine.propose(&history, &space, &mut rng).unwrap();
        assert!(!history.contains_ok(&c), "{c} proposed twice");
        let scored = engine.last_candidates();
        if !scored.is_empty() {
            let top = scored.iter().map(|s| s.gain).fold(f64::NEG_INFINITY, f64::max);
            let chosen = scored.iter().find(|s| s.config == c).expect("proposal is a candidate");
            assert_eq!(chosen.gain, top);
        }
        let e = gridtune::Evaluator::evaluate(&mut ev, &space, &c, history.next_iteration()).unwrap();
        history.record(e.clone()).unwrap();
        engine.observe(&e);
    }
}

#[test]
fn gain_examples() {
    assert_eq!(smsego_gain(3.0, 0.0, 3.0, 2.0, 0.0), 0.0);
    assert_eq!(smsego_gain(3.0, 1.0, 3.0, 2.0, 0.0), 2.0);
    assert!(smsego_gain(0.0, 1.1, 0.0, 2.0, 0.0) > smsego_gain(0.0, 1.0, 0.0, 2.0, 0.0));
}

/// Every vertex of the initial simplex lands on its own grid point, for every
/// start value of every preset parameter with at least four levels.
#[test]
fn preset_simplices_have_distinct_vertices() {
    for (name, text) in PRESETS {
        let space = parse_study(text).unwrap().space;
        let mins: Vec<i64> = space.params().iter().map(|p| p.min).collect();
        for (i, p) in space.params().iter().enumerate() {
            if p.point_count() < 4 {
                continue;
            }
            for k in 0..p.point_count() {
                let mut start = mins.clone();
                start[i] = p.value_at(k);
                let start = Configuration::from(start);
                let snapped: Vec<Configuration> =
                    init_simplex(&space, &start).iter().map(|u| space.snap(u)).collect();
                // Vertex j moves only coordinate j - 1, so distinctness from
                // the start vertex along i is what can fail.
                assert_ne!(snapped[i + 1], snapped[0], "{name}: {} at {}", p.name, p.value_at(k));
            }
        }
    }
}

#[test]
fn two_level_dimension_can_collapse() {
    // Documented limit of the +0.25 offset: one step of a two-point range is 1.0.
    let space = grid(&[(32, 64, 32)]);
    let v = init_simplex(&space, &vec![32].into());
    assert_eq!(space.snap(&v[0]), space.snap(&v[1]));
}

#[test]
fn nms_restarts_instead_of_stalling() {
    let space = grid(&[(0, 3, 1), (0, 3, 1)]);
    let surface = SyntheticSurface::new(SurfaceKind::Plateau);
    let mut engine = NelderMeadEngine::new(NmsParams::default());
    let h = run(&space, &mut engine, &surface, 16, 2);
    assert_eq!(h.len(), 16);
}

#[test]
fn failed_evaluations_are_not_cached() {
    struct Flaky(u32);
    impl gridtune::Evaluator for Flaky {
        fn evaluate(
            &mut self,
            _: &SearchSpace,
            c: &Configuration,
            iteration: u64,
        ) -> Result<Evaluation, gridtune::harness::HarnessError> {
            self.0 += 1;
            Ok(if self.0 % 2 == 1 {
                Evaluation::unsuccessful(iteration, c.clone(), gridtune::Status::Failed, vec![], 0.0)
            } else {
                Evaluation::ok(iteration, c.clone(), vec![1.0], Default::default(), 0.0)
            })
        }
    }
    let space = grid(&[(0, 1, 1)]);
    let mut ev = Flaky(0);
    let out = tune(&space, &mut gridtune::engine::RandomEngine, &mut ev, 10, 0, |_| Ok(())).unwrap();
    // Both points end up measured ok; failures in between cost budget.
    assert_eq!(out.history.ok_count(), 2);
    assert!(out.history.len() > 2);
}
