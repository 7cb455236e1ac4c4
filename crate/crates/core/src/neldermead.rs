//! Nelder-Mead simplex search run as a propose/observe state machine.
//!
//! The simplex lives in the continuous unit cube. Points are clamped to the
//! cube and snapped to the grid only when proposed, and the snapped point's
//! measured value drives every acceptance decision. Already-measured points
//! are answered from history, so a round may advance without spending budget.
//! When a whole round is served from history and the simplex has collapsed
//! below one grid step in every dimension, the engine restarts from a fresh
//! random simplex.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::engine::{ensure_unexhausted, Engine, EngineError};
use crate::history::{Evaluation, History};
use crate::space::{Configuration, SearchSpace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NmsParams {
    pub reflect: f64,
    pub expand: f64,
    pub contract: f64,
    pub shrink: f64,
    /// Offset of each initial vertex from the start point, in unit-cube units.
    pub initial_step: f64,
    /// Restart from a random simplex after a stalled round.
    pub restart: bool,
}

impl Default for NmsParams {
    fn default() -> Self {
        Self {
            reflect: 1.0,
            expand: 2.0,
            contract: 0.5,
            shrink: 0.5,
            initial_step: 0.25,
            restart: true,
        }
    }
}

impl NmsParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.reflect > 0.0 && self.reflect.is_finite()) {
            return Err("reflect must be positive".into());
        }
        if !(self.expand > self.reflect && self.expand.is_finite()) {
            return Err("expand must exceed reflect".into());
        }
        if !(self.contract > 0.0 && self.contract < 1.0) {
            return Err("contract must lie in (0, 1)".into());
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err("shrink must lie in (0, 1)".into());
        }
        if !(self.initial_step > 0.0 && self.initial_step <= 1.0) {
            return Err("initial_step must lie in (0, 1]".into());
        }
        Ok(())
    }
}

/// Start point plus one vertex per dimension, displaced by `step` along that
/// dimension (or by `-step` when `+step` would leave the cube).
pub fn init_simplex_with_step(space: &SearchSpace, start: &Configuration, step: f64) -> Vec<Vec<f64>> {
    let origin = space
        .normalize(start)
        .expect("simplex start must be on the grid");
    let mut vertices = Vec::with_capacity(space.dim() + 1);
    vertices.push(origin.clone());
    for i in 0..space.dim() {
        let mut v = origin.clone();
        v[i] = if v[i] + step > 1.0 { v[i] - step } else { v[i] + step };
        vertices.push(v);
    }
    vertices
}

pub fn init_simplex(space: &SearchSpace, start: &Configuration) -> Vec<Vec<f64>> {
    init_simplex_with_step(space, start, NmsParams::default().initial_step)
}

/// Per-coordinate arithmetic mean.
pub fn centroid(points: &[Vec<f64>]) -> Vec<f64> {
    assert!(!points.is_empty());
    let mut c = vec![0.0; points[0].len()];
    for p in points {
        for (a, b) in c.iter_mut().zip(p) {
            *a += b;
        }
    }
    let n = points.len() as f64;
    c.iter_mut().for_each(|a| *a /= n);
    c
}

/// `centroid + t * (centroid - worst)`, clamped to the unit cube.
fn along(centroid: &[f64], worst: &[f64], t: f64) -> Vec<f64> {
    centroid
        .iter()
        .zip(worst)
        .map(|(c, w)| (c + t * (c - w)).clamp(0.0, 1.0))
        .collect()
}

pub fn reflect(centroid: &[f64], worst: &[f64], coef: f64) -> Vec<f64> {
    along(centroid, worst, coef)
}

pub fn expand(centroid: &[f64], worst: &[f64], coef: f64) -> Vec<f64> {
    along(centroid, worst, coef)
}

pub fn contract_outside(centroid: &[f64], worst: &[f64], coef: f64) -> Vec<f64> {
    along(centroid, worst, coef)
}

pub fn contract_inside(centroid: &[f64], worst: &[f64], coef: f64) -> Vec<f64> {
    along(centroid, worst, -coef)
}

#[derive(Debug, Clone, PartialEq)]
struct Vertex {
    point: Vec<f64>,
    value: f64,
}

#[derive(Debug, Clone)]
enum Step {
    Build { points: Vec<Vec<f64>>, next: usize },
    Reflect { xr: Vec<f64> },
    Expand { reflected: Vertex, xe: Vec<f64> },
    ContractOutside { reflected: Vertex, xc: Vec<f64> },
    ContractInside { xc: Vec<f64>, reflected: f64 },
    Shrink { next: usize },
}

/// How a round ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    Reflected,
    Expanded,
    /// Expansion tried and lost to the reflected point.
    ExpansionRejected,
    ContractedOutside,
    ContractedInside,
    Shrunk,
    Restarted,
}

/// Values seen when a round was resolved. `trial` is the expansion or
/// contraction value when one was measured.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundRecord {
    pub action: Move,
    pub best: f64,
    pub second_worst: f64,
    pub worst: f64,
    pub reflected: f64,
    pub trial: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct NelderMeadEngine {
    params: NmsParams,
    start: Option<Configuration>,
    vertices: Vec<Vertex>,
    centroid: Vec<f64>,
    step: Option<Step>,
    pending: Option<Vec<f64>>,
    round_all_cached: bool,
    restarts: usize,
    log: Vec<RoundRecord>,
    grid_steps: Vec<f64>,
}

impl NelderMeadEngine {
    pub fn new(params: NmsParams) -> Self {
        Self {
            params,
            start: None,
            vertices: Vec::new(),
            centroid: Vec::new(),
            step: None,
            pending: None,
            round_all_cached: true,
            restarts: 0,
            log: Vec::new(),
            grid_steps: Vec::new(),
        }
    }

    /// Fixes the first simplex's start point instead of drawing it at random.
    pub fn with_start(mut self, start: Configuration) -> Self {
        self.start = Some(start);
        self
    }

    pub fn restarts(&self) -> usize {
        self.restarts
    }

    pub fn rounds(&self) -> &[RoundRecord] {
        &self.log
    }

    /// Current vertices as `(point, value)`, best first as of the last round start.
    pub fn vertices(&self) -> Vec<(Vec<f64>, f64)> {
        self.vertices
            .iter()
            .map(|v| (v.point.clone(), v.value))
            .collect()
    }

    pub fn best_value(&self) -> Option<f64> {
        self.vertices
            .iter()
            .map(|v| v.value)
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
    }

    fn dim(&self) -> usize {
        self.grid_steps.len()
    }

    fn begin_simplex(&mut self, space: &SearchSpace, rng: &mut dyn RngCore) {
        let start = self
            .start
            .take()
            .unwrap_or_else(|| space.random_config(rng));
        let points = init_simplex_with_step(space, &start, self.params.initial_step);
        self.vertices.clear();
        self.round_all_cached = true;
        self.step = Some(Step::Build { points, next: 0 });
    }

    fn target(&self) -> &[f64] {
        match self.step.as_ref().expect("active step") {
            Step::Build { points, next } => &points[*next],
            Step::Reflect { xr } => xr,
            Step::Expand { xe, .. } => xe,
            Step::ContractOutside { xc, .. } | Step::ContractInside { xc, .. } => xc,
            Step::Shrink { next } => &self.vertices[*next].point,
        }
    }

    /// Simplex narrower than one grid step along every dimension.
    fn collapsed(&self) -> bool {
        (0..self.dim()).all(|i| {
            let (lo, hi) = self
                .vertices
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    (lo.min(v.point[i]), hi.max(v.point[i]))
                });
            hi - lo < self.grid_steps[i]
        })
    }

    fn record(&mut self, action: Move, reflected: f64, trial: Option<f64>) {
        let d = self.dim();
        self.log.push(RoundRecord {
            action,
            best: self.vertices[0].value,
            second_worst: self.vertices[d.saturating_sub(1)].value,
            worst: self.vertices[d].value,
            reflected,
            trial,
        });
    }

    fn start_round(&mut self) {
        if self.params.restart && self.round_all_cached && !self.vertices.is_empty() && self.collapsed() {
            self.log.push(RoundRecord {
                action: Move::Restarted,
                best: self.vertices[0].value,
                second_worst: f64::NAN,
                worst: f64::NAN,
                reflected: f64::NAN,
                trial: None,
            });
            self.restarts += 1;
            self.vertices.clear();
            self.step = None;
            return;
        }
        self.round_all_cached = true;
        // Best first; stable so older vertices win ties.
        self.vertices.sort_by(|a, b| b.value.total_cmp(&a.value));
        let d = self.dim();
        let kept: Vec<Vec<f64>> = self.vertices[..d].iter().map(|v| v.point.clone()).collect();
        self.centroid = centroid(&kept);
        let xr = reflect(&self.centroid, &self.vertices[d].point, self.params.reflect);
        self.step = Some(Step::Reflect { xr });
    }

    fn replace_worst(&mut self, v: Vertex) {
        let d = self.dim();
        self.vertices[d] = v;
    }

    fn begin_shrink(&mut self) {
        let best = self.vertices[0].point.clone();
        let sigma = self.params.shrink;
        for v in self.vertices.iter_mut().skip(1) {
            for (x, b) in v.point.iter_mut().zip(&best) {
                *x = b + sigma * (*x - b);
            }
        }
        self.step = Some(Step::Shrink { next: 1 });
    }

    fn advance(&mut self, point: Vec<f64>, value: f64) {
        let d = self.dim();
        let step = self.step.take().expect("observe follows propose");
        match step {
            Step::Build { points, next } => {
                self.vertices.push(Vertex { point, value });
                if next + 1 < points.len() {
                    self.step = Some(Step::Build {
                        points,
                        next: next + 1,
                    });
                } else {
                    self.start_round();
                }
            }
            Step::Reflect { xr } => {
                let fr = value;
                let reflected = Vertex { point: xr, value: fr };
                let best = self.vertices[0].value;
                let second_worst = self.vertices[d - 1].value;
                let worst = self.vertices[d].value;
                let xw = self.vertices[d].point.clone();
                if fr > best {
                    let xe = expand(&self.centroid, &xw, self.params.expand);
                    self.step = Some(Step::Expand { reflected, xe });
                } else if fr > second_worst {
                    self.record(Move::Reflected, fr, None);
                    self.replace_worst(reflected);
                    self.start_round();
                } else if fr > worst {
                    let xc = contract_outside(&self.centroid, &xw, self.params.contract);
                    self.step = Some(Step::ContractOutside { reflected, xc });
                } else {
                    let xc = contract_inside(&self.centroid, &xw, self.params.contract);
                    self.step = Some(Step::ContractInside { xc, reflected: fr });
                }
            }
            Step::Expand { reflected, xe } => {
                let fr = reflected.value;
                if value > fr {
                    self.record(Move::Expanded, fr, Some(value));
                    self.replace_worst(Vertex { point: xe, value });
                } else {
                    self.record(Move::ExpansionRejected, fr, Some(value));
                    self.replace_worst(reflected);
                }
                self.start_round();
            }
            Step::ContractOutside { reflected, xc } => {
                let fr = reflected.value;
                if value >= fr {
                    self.record(Move::ContractedOutside, fr, Some(value));
                    self.replace_worst(Vertex { point: xc, value });
                    self.start_round();
                } else {
                    self.record(Move::Shrunk, fr, Some(value));
                    self.begin_shrink();
                }
            }
            Step::ContractInside { xc, reflected: fr } => {
                if value > self.vertices[d].value {
                    self.record(Move::ContractedInside, fr, Some(value));
                    self.replace_worst(Vertex { point: xc, value });
                    self.start_round();
                } else {
                    self.record(Move::Shrunk, fr, Some(value));
                    self.begin_shrink();
                }
            }
            Step::Shrink { next } => {
                self.vertices[next].value = value;
                if next < d {
                    self.step = Some(Step::Shrink { next: next + 1 });
                } else {
                    self.start_round();
                }
            }
        }
    }
}

impl Default for NelderMeadEngine {
    fn default() -> Self {
        Self::new(NmsParams::default())
    }
}

impl Engine for NelderMeadEngine {
    fn name(&self) -> &'static str {
        "nms"
    }

    fn propose(
        &mut self,
        history: &History,
        space: &SearchSpace,
        rng: &mut dyn RngCore,
    ) -> Result<Configuration, EngineError> {
        ensure_unexhausted(history, space)?;
        if self.grid_steps.len() != space.dim() {
            self.grid_steps = space
                .params()
                .iter()
                .map(|p| match p.point_count() {
                    1 => f64::INFINITY,
                    n => 1.0 / (n - 1) as f64,
                })
                .collect();
        }
        if self.step.is_none() {
            self.begin_simplex(space, rng);
        }
        let point = self.target().to_vec();
        let config = space.snap(&point);
        if !history.contains_ok(&config) {
            self.round_all_cached = false;
        }
        self.pending = Some(point);
        Ok(config)
    }

    fn observe(&mut self, evaluation: &Evaluation) {
        let Some(point) = self.pending.take() else {
            return;
        };
        // Failed measurements rank below everything.
        let value = evaluation.ok_value().unwrap_or(f64::NEG_INFINITY);
        self.advance(point, value);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::history::Aggregation;
    use crate::space::{Binding, ParameterSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(d: usize, max: i64) -> SearchSpace {
        SearchSpace::new(
            (0..d)
                .map(|i| ParameterSpec::new(format!("p{i}"), 0, max, 1, Binding::Both))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn simplex_construction() {
        let s = grid(2, 20);
        let v = init_simplex(&s, &vec![0, 0].into());
        assert_eq!(v, vec![vec![0.0, 0.0], vec![0.25, 0.0], vec![0.0, 0.25]]);
        let v = init_simplex(&s, &vec![20, 20].into());
        assert_eq!(v, vec![vec![1.0, 1.0], vec![0.75, 1.0], vec![1.0, 0.75]]);
    }

    #[test]
    fn centroid_examples() {
        assert_eq!(centroid(&[vec![0.0, 0.0], vec![1.0, 1.0]]), vec![0.5, 0.5]);
        assert_eq!(centroid(&[vec![0.3]]), vec![0.3]);
        let a = centroid(&[vec![0.1, 0.9], vec![0.4, 0.2], vec![0.7, 0.7]]);
        let b = centroid(&[vec![0.7, 0.7], vec![0.1, 0.9], vec![0.4, 0.2]]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn moves() {
        let c = [0.4, 0.4];
        let w = [0.0, 0.0];
        assert_eq!(reflect(&c, &w, 1.0), vec![0.8, 0.8]);
        assert_eq!(expand(&c, &w, 2.0), vec![1.0, 1.0]);
        let oc = contract_outside(&c, &w, 0.5);
        assert!((oc[0] - 0.6).abs() < 1e-15 && (oc[1] - 0.6).abs() < 1e-15);
        let ic = contract_inside(&c, &w, 0.5);
        assert!((ic[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn building_phase_proposes_initial_vertices() {
        let s = grid(5, 40);
        let start = Configuration::new(vec![10, 20, 30, 40, 0]);
        let mut e = NelderMeadEngine::default().with_start(start.clone());
        let expected: Vec<Configuration> = init_simplex(&s, &start).iter().map(|u| s.snap(u)).collect();
        let mut h = History::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (i, want) in expected.iter().enumerate() {
            let c = e.propose(&h, &s, &mut rng).unwrap();
            assert_eq!(&c, want);
            let ev = Evaluation::ok(i as u64 + 1, c, vec![i as f64], Aggregation::Median, 0.0);
            h.record(ev.clone()).unwrap();
            e.observe(&ev);
        }
        assert_eq!(e.vertices().len(), 6);
    }

    fn drive(
        e: &mut NelderMeadEngine,
        s: &SearchSpace,
        f: impl Fn(&Configuration) -> f64,
        budget: usize,
        seed: u64,
    ) -> History {
        let mut h = History::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut guard = 0;
        while h.len() < budget {
            guard += 1;
            assert!(guard < 100_000, "engine spins on cache hits");
            let c = match e.propose(&h, s, &mut rng) {
                Ok(c) => c,
                Err(EngineError::SpaceExhausted) => break,
                Err(err) => panic!("{err}"),
            };
            let ev = match h.lookup(&c) {
                Some(hit) => hit.clone(),
                None => {
                    let ev = Evaluation::ok(h.next_iteration(), c.clone(), vec![f(&c)], Aggregation::Median, 0.0);
                    h.record(ev.clone()).unwrap();
                    ev
                }
            };
            e.observe(&ev);
        }
        h
    }

    #[test]
    fn classic_acceptance_rules_hold() {
        let s = grid(3, 30);
        let mut e = NelderMeadEngine::default();
        let f = |c: &Configuration| {
            -c.values()
                .iter()
                .zip([7, 22, 13])
                .map(|(v, t)| ((v - t) as f64).powi(2))
                .sum::<f64>()
        };
        drive(&mut e, &s, f, 120, 3);
        assert!(!e.rounds().is_empty());
        for r in e.rounds() {
            match r.action {
                Move::Reflected => assert!(r.reflected <= r.best && r.reflected > r.second_worst),
                Move::Expanded => assert!(r.reflected > r.best && r.trial.unwrap() > r.reflected),
                Move::ExpansionRejected => {
                    assert!(r.reflected > r.best && r.trial.unwrap() <= r.reflected)
                }
                Move::ContractedOutside => {
                    assert!(r.reflected <= r.second_worst && r.reflected > r.worst);
                    assert!(r.trial.unwrap() >= r.reflected);
                }
                Move::ContractedInside => {
                    assert!(r.reflected <= r.worst && r.trial.unwrap() > r.worst)
                }
                Move::Shrunk | Move::Restarted => {}
            }
        }
    }

    #[test]
    fn best_vertex_monotone_on_fine_concave_grid() {
        let s = grid(2, 1_000_000);
        let mut e = NelderMeadEngine::default().with_start(vec![100_000, 900_000].into());
        let f = |c: &Configuration| {
            let x = c.values()[0] as f64 / 1e6 - 0.6;
            let y = c.values()[1] as f64 / 1e6 - 0.3;
            -(x * x + 2.0 * y * y)
        };
        let mut h = History::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut last_best = f64::NEG_INFINITY;
        let mut restarts = 0;
        for _ in 0..150 {
            let c = e.propose(&h, &s, &mut rng).unwrap();
            let ev = match h.lookup(&c) {
                Some(hit) => hit.clone(),
                None => {
                    let ev = Evaluation::ok(h.next_iteration(), c.clone(), vec![f(&c)], Aggregation::Median, 0.0);
                    h.record(ev.clone()).unwrap();
                    ev
                }
            };
            e.observe(&ev);
            if e.restarts() > restarts {
                // Only a simplex that has converged onto the optimum may stall.
                assert!(last_best > -1e-9, "restarted at {last_best}");
                restarts = e.restarts();
                last_best = f64::NEG_INFINITY;
            }
            if e.vertices().len() == 3 {
                let b = e.best_value().unwrap();
                assert!(b >= last_best, "{b} < {last_best}");
                last_best = b;
            }
        }
        assert!(h.best().unwrap().value.unwrap() > -1e-3);
    }

    #[test]
    fn stalled_simplex_restarts() {
        // A 3-point line: the simplex collapses immediately and every round
        // becomes a cache hit.
        let s = grid(1, 2);
        let mut e = NelderMeadEngine::default();
        let h = drive(&mut e, &s, |c| -(c.values()[0] as f64 - 1.0).powi(2), 3, 1);
        assert_eq!(h.ok_count(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(e.propose(&h, &s, &mut rng), Err(EngineError::SpaceExhausted)));
    }

    #[test]
    fn failed_measurement_ranks_last() {
        let s = grid(1, 10);
        let mut e = NelderMeadEngine::default().with_start(vec![5].into());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = History::new();
        let c = e.propose(&h, &s, &mut rng).unwrap();
        e.observe(&Evaluation::unsuccessful(1, c, crate::history::Status::Failed, vec![], 0.0));
        let c2 = e.propose(&h, &s, &mut rng).unwrap();
        e.observe(&Evaluation::ok(2, c2.clone(), vec![1.0], Aggregation::Median, 0.0));
        let v = e.vertices();
        assert_eq!(v[0].1, 1.0);
        assert_eq!(v[1].1, f64::NEG_INFINITY);
    }
}
