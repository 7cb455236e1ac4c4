//! Study files: the JSON document that names a search space, an objective
//! (subprocess workload or synthetic surface), an engine and its settings.
//! Also hosts the shipped presets.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::bayes::{BayesEngine, BoParams};
use crate::engine::{Engine, RandomEngine};
use crate::genetic::{GaParams, GeneticEngine};
use crate::harness::{Evaluator, SyntheticEvaluator, SyntheticSurface, WorkloadEvaluator, WorkloadSpec};
use crate::neldermead::{NelderMeadEngine, NmsParams};
use crate::space::SearchSpace;
use crate::tuner::DEFAULT_MAX_ITERATIONS;

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("study file line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("study field `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl StudyError {
    fn field(field: &str, message: impl ToString) -> Self {
        StudyError::Validation {
            field: field.to_string(),
            message: message.to_string(),
        }
    }

    /// The offending field of a validation error.
    pub fn field_name(&self) -> Option<&str> {
        match self {
            StudyError::Validation { field, .. } => Some(field),
            _ => None,
        }
    }
}

/// Engine selection with its parameter block, tagged by `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EngineConfig {
    Bo(BoParams),
    Ga(GaParams),
    Nms(NmsParams),
    Random,
    Exhaustive,
}

impl EngineConfig {
    pub fn name(&self) -> &'static str {
        match self {
            EngineConfig::Bo(_) => "bo",
            EngineConfig::Ga(_) => "ga",
            EngineConfig::Nms(_) => "nms",
            EngineConfig::Random => "random",
            EngineConfig::Exhaustive => "exhaustive",
        }
    }

    /// Default parameters for an engine named on the command line.
    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "bo" => EngineConfig::Bo(BoParams::default()),
            "ga" => EngineConfig::Ga(GaParams::default()),
            "nms" => EngineConfig::Nms(NmsParams::default()),
            "random" => EngineConfig::Random,
            "exhaustive" => EngineConfig::Exhaustive,
            _ => return None,
        })
    }

    fn validate(&self) -> Result<(), String> {
        match self {
            EngineConfig::Bo(p) => p.validate(),
            EngineConfig::Ga(p) => p.validate(),
            EngineConfig::Nms(p) => p.validate(),
            EngineConfig::Random | EngineConfig::Exhaustive => Ok(()),
        }
    }

    /// A fresh engine instance; `None` for the exhaustive sweep, which is
    /// not a propose/observe engine.
    pub fn build(&self) -> Option<Box<dyn Engine + Send>> {
        Some(match self {
            EngineConfig::Bo(p) => Box::new(BayesEngine::new(p.clone())),
            EngineConfig::Ga(p) => Box::new(GeneticEngine::new(p.clone())),
            EngineConfig::Nms(p) => Box::new(NelderMeadEngine::new(p.clone())),
            EngineConfig::Random => Box::new(RandomEngine::new()),
            EngineConfig::Exhaustive => return None,
        })
    }
}

/// What gets measured.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    Workload(WorkloadSpec),
    Synthetic(SyntheticSurface),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub space: SearchSpace,
    pub objective: Objective,
    pub engine: EngineConfig,
    pub max_iterations: u64,
    pub seed: u64,
    pub output_dir: PathBuf,
}

const KNOWN_KEYS: [&str; 7] = [
    "space",
    "workload",
    "synthetic",
    "engine",
    "max_iterations",
    "seed",
    "output_dir",
];

fn default_output_dir() -> PathBuf {
    PathBuf::from("gridtune-out")
}

fn take<T: for<'de> Deserialize<'de>>(obj: &mut Map<String, Value>, key: &str) -> Result<Option<T>, StudyError> {
    match obj.remove(key) {
        None => Ok(None),
        Some(v) => serde_json::from_value(v)
            .map(Some)
            .map_err(|e| StudyError::field(key, e)),
    }
}

/// Parses and fully validates a study document.
pub fn parse_study(text: &str) -> Result<StudyConfig, StudyError> {
    let value: Value = serde_json::from_str(text).map_err(|e| StudyError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let Value::Object(mut obj) = value else {
        return Err(StudyError::field("<root>", "study must be a JSON object"));
    };
    if let Some(unknown) = obj.keys().find(|k| !KNOWN_KEYS.contains(&k.as_str())) {
        return Err(StudyError::field(unknown, "unknown key"));
    }

    let space: SearchSpace = take(&mut obj, "space")?.ok_or_else(|| StudyError::field("space", "missing"))?;
    let engine: EngineConfig =
        take(&mut obj, "engine")?.ok_or_else(|| StudyError::field("engine", "missing"))?;
    engine
        .validate()
        .map_err(|m| StudyError::field("engine", m))?;

    let workload: Option<WorkloadSpec> = take(&mut obj, "workload")?;
    let synthetic: Option<SyntheticSurface> = take(&mut obj, "synthetic")?;
    let objective = match (workload, synthetic) {
        (Some(w), None) => {
            w.validate(&space).map_err(|e| StudyError::field("workload", e))?;
            Objective::Workload(w)
        }
        (None, Some(s)) => {
            s.validate(&space).map_err(|e| StudyError::field("synthetic", e))?;
            Objective::Synthetic(s)
        }
        (Some(_), Some(_)) => {
            return Err(StudyError::field(
                "workload",
                "exactly one of `workload` and `synthetic` may be given",
            ))
        }
        (None, None) => {
            return Err(StudyError::field(
                "workload",
                "one of `workload` or `synthetic` is required",
            ))
        }
    };

    let max_iterations: u64 = take(&mut obj, "max_iterations")?.unwrap_or(DEFAULT_MAX_ITERATIONS);
    if max_iterations == 0 {
        return Err(StudyError::field("max_iterations", "must be at least 1"));
    }
    let seed: u64 = take(&mut obj, "seed")?.unwrap_or(0);
    let output_dir: PathBuf = take(&mut obj, "output_dir")?.unwrap_or_else(default_output_dir);

    Ok(StudyConfig {
        space,
        objective,
        engine,
        max_iterations,
        seed,
        output_dir,
    })
}

pub fn load_study(path: &std::path::Path) -> Result<StudyConfig, StudyError> {
    parse_study(&std::fs::read_to_string(path)?)
}

#[derive(Serialize)]
struct StudyOut<'a> {
    space: &'a SearchSpace,
    #[serde(skip_serializing_if = "Option::is_none")]
    workload: Option<&'a WorkloadSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    synthetic: Option<&'a SyntheticSurface>,
    engine: &'a EngineConfig,
    max_iterations: u64,
    seed: u64,
    output_dir: &'a PathBuf,
}

impl StudyConfig {
    pub fn to_json(&self) -> String {
        let (workload, synthetic) = match &self.objective {
            Objective::Workload(w) => (Some(w), None),
            Objective::Synthetic(s) => (None, Some(s)),
        };
        serde_json::to_string_pretty(&StudyOut {
            space: &self.space,
            workload,
            synthetic,
            engine: &self.engine,
            max_iterations: self.max_iterations,
            seed: self.seed,
            output_dir: &self.output_dir,
        })
        .expect("study serializes")
    }

    pub fn build_evaluator(&self) -> Result<Box<dyn Evaluator + Send>, StudyError> {
        Ok(match &self.objective {
            Objective::Workload(w) => Box::new(
                WorkloadEvaluator::new(w.clone(), &self.space).map_err(|e| StudyError::field("workload", e))?,
            ),
            Objective::Synthetic(s) => Box::new(
                SyntheticEvaluator::new(s.clone(), &self.space)
                    .map_err(|e| StudyError::field("synthetic", e))?,
            ),
        })
    }
}

/// Shipped study presets, by file name.
pub const PRESETS: [(&str, &str); 6] = [
    ("ssd-mobilenet-fp32.json", include_str!("../presets/ssd-mobilenet-fp32.json")),
    ("resnet50-int8.json", include_str!("../presets/resnet50-int8.json")),
    ("transformer-lt-fp32.json", include_str!("../presets/transformer-lt-fp32.json")),
    ("bert-fp32.json", include_str!("../presets/bert-fp32.json")),
    ("ncf-fp32.json", include_str!("../presets/ncf-fp32.json")),
    ("resnet50-int8-sweep.json", include_str!("../presets/resnet50-int8-sweep.json")),
];

/// A preset by file name, with or without the `.json` suffix.
pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name || n.trim_end_matches(".json") == name)
        .map(|(_, text)| *text)
}

/// The ResNet50-INT8 search space.
pub fn resnet50_space() -> SearchSpace {
    parse_study(preset("resnet50-int8").unwrap())
        .expect("shipped preset is valid")
        .space
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::SurfaceKind;

    fn minimal() -> Value {
        serde_json::json!({
            "space": {"params": [{"name": "x", "min": 0, "max": 10, "step": 1, "binding": "command-arg"}]},
            "synthetic": {"name": "quadratic"},
            "engine": {"kind": "bo", "alpha": 1.5},
        })
    }

    #[test]
    fn defaults_fill_in() {
        let s = parse_study(&minimal().to_string()).unwrap();
        assert_eq!(s.max_iterations, 50);
        assert_eq!(s.seed, 0);
        match &s.engine {
            EngineConfig::Bo(p) => {
                assert_eq!(p.alpha, 1.5);
                assert_eq!(p.candidate_budget, 2048);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(&s.objective, Objective::Synthetic(x) if x.name == SurfaceKind::Quadratic));
    }

    #[test]
    fn missing_engine_is_named() {
        let mut v = minimal();
        v.as_object_mut().unwrap().remove("engine");
        let err = parse_study(&v.to_string()).unwrap_err();
        assert_eq!(err.field_name(), Some("engine"));
    }

    #[test]
    fn both_objectives_rejected() {
        let mut v = minimal();
        v["workload"] = serde_json::json!({"command": ["echo", "{x}"], "metric_pattern": "(\\d+)"});
        assert!(matches!(parse_study(&v.to_string()), Err(StudyError::Validation { .. })));
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v = minimal();
        v["budget"] = 3.into();
        assert_eq!(parse_study(&v.to_string()).unwrap_err().field_name(), Some("budget"));
        let mut v = minimal();
        v["engine"]["temperature"] = 3.into();
        assert_eq!(parse_study(&v.to_string()).unwrap_err().field_name(), Some("engine"));
    }

    #[test]
    fn syntax_errors_carry_position() {
        match parse_study("{\n  \"space\": ,\n}") {
            Err(StudyError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_engine_parameters_rejected() {
        let mut v = minimal();
        v["engine"] = serde_json::json!({"kind": "ga", "mutation_rate": 1.5});
        assert_eq!(parse_study(&v.to_string()).unwrap_err().field_name(), Some("engine"));
        v["engine"] = serde_json::json!({"kind": "annealing"});
        assert_eq!(parse_study(&v.to_string()).unwrap_err().field_name(), Some("engine"));
    }

    #[test]
    fn space_errors_are_named() {
        let mut v = minimal();
        v["space"]["params"][0]["step"] = 3.into();
        assert_eq!(parse_study(&v.to_string()).unwrap_err().field_name(), Some("space"));
    }

    #[test]
    fn resnet_preset_dimensions() {
        let s = parse_study(preset("resnet50-int8.json").unwrap()).unwrap();
        assert_eq!(s.space.point_counts(), vec![4, 56, 16, 21, 56]);
        assert!(matches!(s.objective, Objective::Workload(_)));
    }

    #[test]
    fn roundtrip_through_json() {
        for (name, text) in PRESETS {
            let s = parse_study(text).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(parse_study(&s.to_json()).unwrap(), s, "{name}");
        }
    }
}
