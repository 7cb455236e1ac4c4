//! Turning configurations into measurements: subprocess workloads that print
//! their metric, deterministic synthetic surfaces, and the history cache in
//! front of both.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::OnceLock;
use std::thread;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use wait_timeout::ChildExt;

use crate::history::{Aggregation, Evaluation, History, HistoryError, Status};
use crate::space::{Configuration, SearchSpace, SpaceError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("template references undeclared parameter `{0}`")]
    UnknownPlaceholder(String),
    #[error("parameter `{0}` is not bound by the workload template")]
    MissingBinding(String),
    #[error("metric pattern: {0}")]
    BadPattern(String),
    #[error("invalid workload: {0}")]
    InvalidWorkload(&'static str),
    #[error("invalid synthetic surface: {0}")]
    InvalidSurface(String),
    #[error("surface needs parameter `{0}`, which the space does not declare")]
    UnboundParameter(String),
    #[error("failed to launch `{program}`: {source}")]
    Spawn {
        program: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    History(#[from] HistoryError),
}

/// Anything that can measure a configuration.
pub trait Evaluator {
    fn evaluate(
        &mut self,
        space: &SearchSpace,
        config: &Configuration,
        iteration: u64,
    ) -> Result<Evaluation, HarnessError>;
}

impl<E: Evaluator + ?Sized> Evaluator for Box<E> {
    fn evaluate(
        &mut self,
        space: &SearchSpace,
        config: &Configuration,
        iteration: u64,
    ) -> Result<Evaluation, HarnessError> {
        (**self).evaluate(space, config, iteration)
    }
}

/// Wraps a plain objective function; every call is one ok repeat.
pub struct FnEvaluator<F> {
    objective: F,
    calls: u64,
}

impl<F: FnMut(&Configuration) -> f64> FnEvaluator<F> {
    pub fn new(objective: F) -> Self {
        Self {
            objective,
            calls: 0,
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls
    }
}

impl<F: FnMut(&Configuration) -> f64> Evaluator for FnEvaluator<F> {
    fn evaluate(
        &mut self,
        space: &SearchSpace,
        config: &Configuration,
        iteration: u64,
    ) -> Result<Evaluation, HarnessError> {
        space.check(config)?;
        self.calls += 1;
        let y = (self.objective)(config);
        Ok(Evaluation::ok(
            iteration,
            config.clone(),
            vec![y],
            Aggregation::Median,
            0.0,
        ))
    }
}

/// Result of [`evaluate_with_cache`].
#[derive(Debug, Clone, PartialEq)]
pub struct Served {
    pub evaluation: Evaluation,
    pub cached: bool,
}

/// Serves `config` from history when it already has an ok evaluation;
/// otherwise measures it and records the result. Failures are recorded but
/// never served from cache.
pub fn evaluate_with_cache<E: Evaluator + ?Sized>(
    history: &mut History,
    space: &SearchSpace,
    config: &Configuration,
    evaluator: &mut E,
) -> Result<Served, HarnessError> {
    if let Some(hit) = history.lookup(config) {
        return Ok(Served {
            evaluation: hit.clone(),
            cached: true,
        });
    }
    let evaluation = evaluator.evaluate(space, config, history.next_iteration())?;
    history.record(evaluation.clone())?;
    Ok(Served {
        evaluation,
        cached: false,
    })
}

// ---------------------------------------------------------------------------
// Subprocess workloads

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").unwrap())
}

fn default_repeats() -> u32 {
    1
}

fn default_timeout() -> f64 {
    3600.0
}

/// A command line plus environment, templated on parameter names as `{name}`,
/// and a regular expression that pulls the metric out of the process output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub command: Vec<String>,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    pub metric_pattern: String,
    #[serde(default = "default_repeats")]
    pub repeats: u32,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub working_dir: Option<PathBuf>,
}

impl WorkloadSpec {
    fn placeholders(text: &str) -> impl Iterator<Item = &str> {
        placeholder_re()
            .captures_iter(text)
            .map(|c| c.get(1).unwrap().as_str())
    }

    pub fn compile_pattern(&self) -> Result<Regex, HarnessError> {
        let re = Regex::new(&self.metric_pattern).map_err(|e| HarnessError::BadPattern(e.to_string()))?;
        if re.captures_len() != 2 {
            return Err(HarnessError::BadPattern(format!(
                "expected exactly one capture group, found {}",
                re.captures_len() - 1
            )));
        }
        Ok(re)
    }

    pub fn validate(&self, space: &SearchSpace) -> Result<(), HarnessError> {
        if self.command.is_empty() || self.command[0].is_empty() {
            return Err(HarnessError::InvalidWorkload("command is empty"));
        }
        if self.repeats == 0 {
            return Err(HarnessError::InvalidWorkload("repeats must be at least 1"));
        }
        if !(self.timeout_s.is_finite() && self.timeout_s > 0.0) {
            return Err(HarnessError::InvalidWorkload("timeout_s must be positive"));
        }
        self.compile_pattern()?;

        let declared: BTreeSet<&str> = space.params().iter().map(|p| p.name.as_str()).collect();
        let in_command: BTreeSet<&str> = self
            .command
            .iter()
            .flat_map(|a| Self::placeholders(a))
            .collect();
        let in_env: BTreeSet<&str> = self
            .env
            .iter()
            .flat_map(|(k, v)| Self::placeholders(k).chain(Self::placeholders(v)))
            .collect();
        if let Some(unknown) = in_command.union(&in_env).find(|n| !declared.contains(*n)) {
            return Err(HarnessError::UnknownPlaceholder(unknown.to_string()));
        }
        for p in space.params() {
            let name = p.name.as_str();
            if (p.binding.uses_command() && !in_command.contains(name))
                || (p.binding.uses_env() && !in_env.contains(name))
            {
                return Err(HarnessError::MissingBinding(p.name.clone()));
            }
        }
        Ok(())
    }
}

/// A rendered command ready to launch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub argv: Vec<String>,
    pub env: BTreeMap<String, String>,
}

/// Substitutes every `{name}` placeholder with the decimal parameter value.
pub fn render(
    workload: &WorkloadSpec,
    space: &SearchSpace,
    config: &Configuration,
) -> Result<Rendered, HarnessError> {
    space.check(config)?;
    let lookup: BTreeMap<&str, i64> = space
        .params()
        .iter()
        .map(|p| p.name.as_str())
        .zip(config.values().iter().copied())
        .collect();
    let subst = |text: &str| -> Result<String, HarnessError> {
        let mut out = String::with_capacity(text.len());
        let mut last = 0;
        for caps in placeholder_re().captures_iter(text) {
            let whole = caps.get(0).unwrap();
            let name = caps.get(1).unwrap().as_str();
            let value = lookup
                .get(name)
                .ok_or_else(|| HarnessError::UnknownPlaceholder(name.to_string()))?;
            out.push_str(&text[last..whole.start()]);
            out.push_str(&value.to_string());
            last = whole.end();
        }
        out.push_str(&text[last..]);
        Ok(out)
    };
    let argv = workload
        .command
        .iter()
        .map(|a| subst(a))
        .collect::<Result<Vec<_>, _>>()?;
    let env = workload
        .env
        .iter()
        .map(|(k, v)| Ok((subst(k)?, subst(v)?)))
        .collect::<Result<BTreeMap<_, _>, HarnessError>>()?;
    Ok(Rendered { argv, env })
}

/// Outcome of one process launch.
#[derive(Debug)]
struct RunOutput {
    output: String,
    success: bool,
    timed_out: bool,
}

#[cfg(unix)]
fn kill_tree(child: &mut Child) {
    // The child leads its own process group; take the whole group down.
    unsafe {
        libc::kill(-(child.id() as libc::pid_t), libc::SIGKILL);
    }
    let _ = child.kill();
}

#[cfg(not(unix))]
fn kill_tree(child: &mut Child) {
    let _ = child.kill();
}

fn run_once(rendered: &Rendered, working_dir: Option<&PathBuf>, timeout: Duration) -> Result<RunOutput, HarnessError> {
    let (mut reader, writer) = std::io::pipe()?;
    let mut cmd = Command::new(&rendered.argv[0]);
    cmd.args(&rendered.argv[1..])
        .envs(&rendered.env)
        .stdin(Stdio::null())
        .stdout(writer.try_clone()?)
        .stderr(writer);
    if let Some(dir) = working_dir {
        cmd.current_dir(dir);
    }
    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        cmd.process_group(0);
    }
    let mut child = cmd.spawn().map_err(|source| HarnessError::Spawn {
        program: rendered.argv[0].clone(),
        source,
    })?;
    // Release our copies of the write end so the reader sees EOF.
    drop(cmd);

    let collector = thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = reader.read_to_end(&mut buf);
        buf
    });

    let (success, timed_out) = match child.wait_timeout(timeout)? {
        Some(status) => (status.success(), false),
        None => {
            kill_tree(&mut child);
            child.wait()?;
            (false, true)
        }
    };
    // Reap stragglers left behind in the group so the pipe closes.
    kill_tree(&mut child);
    let bytes = collector.join().unwrap_or_default();
    Ok(RunOutput {
        output: String::from_utf8_lossy(&bytes).into_owned(),
        success,
        timed_out,
    })
}

/// Parses the capture group of the last match of `pattern` in `output`.
pub fn extract_metric(pattern: &Regex, output: &str) -> Option<f64> {
    let caps = pattern.captures_iter(output).last()?;
    let value: f64 = caps.get(1)?.as_str().trim().parse().ok()?;
    value.is_finite().then_some(value)
}

/// Launches the workload `repeats` times in sequence and aggregates the
/// metric. Any timeout, nonzero exit, or missing metric marks the whole
/// evaluation unsuccessful.
pub fn run_evaluation(
    workload: &WorkloadSpec,
    space: &SearchSpace,
    config: &Configuration,
    iteration: u64,
) -> Result<Evaluation, HarnessError> {
    let rendered = render(workload, space, config)?;
    let pattern = workload.compile_pattern()?;
    let timeout = Duration::from_secs_f64(workload.timeout_s);
    let started = Instant::now();
    let mut repeats = Vec::with_capacity(workload.repeats as usize);
    for _ in 0..workload.repeats {
        let run = run_once(&rendered, workload.working_dir.as_ref(), timeout)?;
        let status = if run.timed_out {
            Some(Status::Timeout)
        } else if !run.success {
            Some(Status::Failed)
        } else {
            match extract_metric(&pattern, &run.output) {
                Some(v) => {
                    repeats.push(v);
                    None
                }
                None => Some(Status::Failed),
            }
        };
        if let Some(status) = status {
            return Ok(Evaluation::unsuccessful(
                iteration,
                config.clone(),
                status,
                repeats,
                started.elapsed().as_secs_f64(),
            ));
        }
    }
    Ok(Evaluation::ok(
        iteration,
        config.clone(),
        repeats,
        workload.aggregation,
        started.elapsed().as_secs_f64(),
    ))
}

/// Runs a [`WorkloadSpec`] as a subprocess for every evaluation.
#[derive(Debug, Clone)]
pub struct WorkloadEvaluator {
    workload: WorkloadSpec,
}

impl WorkloadEvaluator {
    pub fn new(workload: WorkloadSpec, space: &SearchSpace) -> Result<Self, HarnessError> {
        workload.validate(space)?;
        Ok(Self { workload })
    }
}

impl Evaluator for WorkloadEvaluator {
    fn evaluate(
        &mut self,
        space: &SearchSpace,
        config: &Configuration,
        iteration: u64,
    ) -> Result<Evaluation, HarnessError> {
        run_evaluation(&self.workload, space, config, iteration)
    }
}

// ---------------------------------------------------------------------------
// Synthetic surfaces

pub const INTER_OP: &str = "inter_op_parallelism_threads";
pub const INTRA_OP: &str = "intra_op_parallelism_threads";
pub const BATCH_SIZE: &str = "batch_size";
pub const KMP_BLOCKTIME: &str = "KMP_BLOCKTIME";
pub const OMP_NUM_THREADS: &str = "OMP_NUM_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurfaceKind {
    /// Throughput-shaped surface over the five threading parameters.
    ResnetLike,
    /// `-sum_i (v_i - t_i)^2`.
    Quadratic,
    /// `sum_i v_i`.
    SeparableSum,
    /// Sum of per-dimension quartile indices; one strict top cell.
    Plateau,
}

impl SurfaceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SurfaceKind::ResnetLike => "resnet-like",
            SurfaceKind::Quadratic => "quadratic",
            SurfaceKind::SeparableSum => "separable-sum",
            SurfaceKind::Plateau => "plateau",
        }
    }
}

impl std::str::FromStr for SurfaceKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| HarnessError::InvalidSurface(format!("unknown surface `{s}`")))
    }
}

/// A closed-form objective with optional seeded Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSurface {
    pub name: SurfaceKind,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub noise_seed: u64,
    /// Quadratic peak; defaults to the grid point nearest the centre.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec<i64>>,
    #[serde(default = "default_repeats")]
    pub repeats: u32,
    #[serde(default)]
    pub aggregation: Aggregation,
}

impl SyntheticSurface {
    pub fn new(name: SurfaceKind) -> Self {
        Self {
            name,
            noise_std: 0.0,
            noise_seed: 0,
            target: None,
            repeats: 1,
            aggregation: Aggregation::Median,
        }
    }

    pub fn with_target(mut self, target: Vec<i64>) -> Self {
        self.target = Some(target);
        self
    }

    pub fn with_noise(mut self, std: f64, seed: u64) -> Self {
        self.noise_std = std;
        self.noise_seed = seed;
        self
    }

    pub fn validate(&self, space: &SearchSpace) -> Result<(), HarnessError> {
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(HarnessError::InvalidSurface("noise_std must be non-negative".into()));
        }
        if self.repeats == 0 {
            return Err(HarnessError::InvalidSurface("repeats must be at least 1".into()));
        }
        match self.name {
            SurfaceKind::ResnetLike => {
                ResnetBinding::resolve(space)?;
            }
            SurfaceKind::Quadratic => {
                if let Some(t) = &self.target {
                    space
                        .check(&Configuration::new(t.clone()))
                        .map_err(|e| HarnessError::InvalidSurface(format!("target: {e}")))?;
                }
            }
            SurfaceKind::SeparableSum | SurfaceKind::Plateau => {}
        }
        if self.target.is_some() && self.name != SurfaceKind::Quadratic {
            return Err(HarnessError::InvalidSurface(
                "target only applies to the quadratic surface".into(),
            ));
        }
        Ok(())
    }

    pub fn quadratic_target(&self, space: &SearchSpace) -> Vec<i64> {
        match &self.target {
            Some(t) => t.clone(),
            None => space.snap(&vec![0.5; space.dim()]).into_values(),
        }
    }
}

/// Positions of the five named parameters inside a space.
#[derive(Debug, Clone, Copy)]
struct ResnetBinding {
    inter: usize,
    batch: usize,
    kmp: usize,
    omp: usize,
}

impl ResnetBinding {
    fn resolve(space: &SearchSpace) -> Result<Self, HarnessError> {
        let find = |name: &str| {
            space
                .params()
                .iter()
                .position(|p| p.name.eq_ignore_ascii_case(name))
                .ok_or_else(|| HarnessError::UnboundParameter(name.to_string()))
        };
        find(INTRA_OP)?;
        Ok(Self {
            inter: find(INTER_OP)?,
            batch: find(BATCH_SIZE)?,
            kmp: find(KMP_BLOCKTIME)?,
            omp: find(OMP_NUM_THREADS)?,
        })
    }
}

/// The noise-free resnet-like closed form. Intra-op threads do not enter.
pub fn resnet_like(inter: i64, omp: i64, kmp: i64, batch: i64) -> f64 {
    let omp = omp as f64;
    100.0
        * (omp / (omp + 14.0))
        * (1.0 - kmp as f64 / 800.0)
        * (1.0 + batch as f64 / 8192.0)
        * (1.0 - 0.01 * (inter as f64 - 1.0))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn noise_key(seed: u64, config: &Configuration, repeat_index: u32) -> u64 {
    let mut h = splitmix64(seed);
    for &v in config.values() {
        h = splitmix64(h ^ v as u64);
    }
    splitmix64(h ^ repeat_index as u64)
}

/// Value of `surface` at `config` for the given repeat. Pure in its arguments.
pub fn synthetic_eval(
    surface: &SyntheticSurface,
    space: &SearchSpace,
    config: &Configuration,
    repeat_index: u32,
) -> Result<f64, HarnessError> {
    space.check(config)?;
    let v = config.values();
    let clean = match surface.name {
        SurfaceKind::ResnetLike => {
            let b = ResnetBinding::resolve(space)?;
            resnet_like(v[b.inter], v[b.omp], v[b.kmp], v[b.batch])
        }
        SurfaceKind::Quadratic => {
            let t = surface.quadratic_target(space);
            if t.len() != v.len() {
                return Err(HarnessError::InvalidSurface("target dimension mismatch".into()));
            }
            // Subtracting from zero keeps the optimum at +0 rather than -0.
            0.0 - v
                .iter()
                .zip(&t)
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
        }
        SurfaceKind::SeparableSum => v.iter().map(|&x| x as f64).sum(),
        SurfaceKind::Plateau => space
            .params()
            .iter()
            .zip(v)
            .map(|(p, &x)| (p.normalize(x) * 4.0).floor().min(3.0))
            .sum(),
    };
    if surface.noise_std == 0.0 {
        return Ok(clean);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise_key(surface.noise_seed, config, repeat_index));
    let z: f64 = StandardNormal.sample(&mut rng);
    Ok(clean + surface.noise_std * z)
}

/// Evaluates a [`SyntheticSurface`]; wall time is reported as zero so runs
/// stay bit-reproducible.
#[derive(Debug, Clone)]
pub struct SyntheticEvaluator {
    surface: SyntheticSurface,
    calls: u64,
}

impl SyntheticEvaluator {
    pub fn new(surface: SyntheticSurface, space: &SearchSpace) -> Result<Self, HarnessError> {
        surface.validate(space)?;
        Ok(Self { surface, calls: 0 })
    }

    pub fn calls(&self) -> u64 {
        self.calls
    }
}

impl Evaluator for SyntheticEvaluator {
    fn evaluate(
        &mut self,
        space: &SearchSpace,
        config: &Configuration,
        iteration: u64,
    ) -> Result<Evaluation, HarnessError> {
        self.calls += 1;
        let repeats = (0..self.surface.repeats)
            .map(|r| synthetic_eval(&self.surface, space, config, r))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Evaluation::ok(
            iteration,
            config.clone(),
            repeats,
            self.surface.aggregation,
            0.0,
        ))
    }
}
