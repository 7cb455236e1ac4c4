//! Integer grid search spaces and the configurations that live on them.
//!
//! Every engine works in the unit cube `[0,1]^d`; [`SearchSpace::normalize`]
//! and [`SearchSpace::snap`] move points between the grid and the cube.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SpaceError {
    #[error("search space has no parameters")]
    Empty,
    #[error("parameter `{name}`: min {min} is greater than max {max}")]
    InvalidRange { name: String, min: i64, max: i64 },
    #[error("parameter `{name}`: step must be positive, got {step}")]
    NonPositiveStep { name: String, step: i64 },
    #[error("parameter `{name}`: range {min}..={max} is not a multiple of step {step}")]
    MisalignedStep {
        name: String,
        min: i64,
        max: i64,
        step: i64,
    },
    #[error("parameter name `{0}` is not an identifier")]
    InvalidName(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("grid size overflows a 64-bit count")]
    Overflow,
    #[error("configuration has {got} values, space has {expected} parameters")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("value {value} is off the grid of parameter `{name}`")]
    OffGrid { name: String, value: i64 },
}

/// How a parameter reaches the workload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Binding {
    EnvVar,
    CommandArg,
    Both,
}

impl Binding {
    pub fn uses_env(self) -> bool {
        matches!(self, Binding::EnvVar | Binding::Both)
    }

    pub fn uses_command(self) -> bool {
        matches!(self, Binding::CommandArg | Binding::Both)
    }
}

/// One tunable dimension: the inclusive range `min..=max` walked in `step` increments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterSpec {
    pub name: String,
    pub min: i64,
    pub max: i64,
    pub step: i64,
    pub binding: Binding,
}

impl ParameterSpec {
    pub fn new(name: impl Into<String>, min: i64, max: i64, step: i64, binding: Binding) -> Self {
        Self {
            name: name.into(),
            min,
            max,
            step,
            binding,
        }
    }

    pub fn validate(&self) -> Result<(), SpaceError> {
        let mut chars = self.name.chars();
        let ident = matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
            && chars.all(|c| c.is_ascii_alphanumeric() || c == '_');
        if !ident {
            return Err(SpaceError::InvalidName(self.name.clone()));
        }
        if self.min > self.max {
            return Err(SpaceError::InvalidRange {
                name: self.name.clone(),
                min: self.min,
                max: self.max,
            });
        }
        if self.step <= 0 {
            return Err(SpaceError::NonPositiveStep {
                name: self.name.clone(),
                step: self.step,
            });
        }
        if (self.max as i128 - self.min as i128) % self.step as i128 != 0 {
            return Err(SpaceError::MisalignedStep {
                name: self.name.clone(),
                min: self.min,
                max: self.max,
                step: self.step,
            });
        }
        Ok(())
    }

    /// Number of grid points. Assumes a validated spec.
    pub fn point_count(&self) -> u64 {
        ((self.max as i128 - self.min as i128) / self.step as i128) as u64 + 1
    }

    pub fn value_at(&self, index: u64) -> i64 {
        debug_assert!(index < self.point_count());
        (self.min as i128 + index as i128 * self.step as i128) as i64
    }

    /// Grid index of `value`, or `None` when it is out of range or misaligned.
    pub fn index_of(&self, value: i64) -> Option<u64> {
        if value < self.min || value > self.max {
            return None;
        }
        let offset = value as i128 - self.min as i128;
        if offset % self.step as i128 != 0 {
            return None;
        }
        Some((offset / self.step as i128) as u64)
    }

    pub fn contains(&self, value: i64) -> bool {
        self.index_of(value).is_some()
    }

    pub fn span(&self) -> i64 {
        self.max - self.min
    }

    pub fn normalize(&self, value: i64) -> f64 {
        if self.max > self.min {
            (value as f64 - self.min as f64) / (self.max as f64 - self.min as f64)
        } else {
            0.0
        }
    }

    /// Nearest grid value to `min + u * (max - min)`, with `u` clamped to `[0, 1]`.
    /// An exact midpoint between two grid points resolves to the lower one.
    pub fn snap(&self, u: f64) -> i64 {
        let last = self.point_count() - 1;
        if last == 0 {
            return self.min;
        }
        let u = if u.is_nan() { 0.0 } else { u.clamp(0.0, 1.0) };
        let k = u * last as f64;
        let low = k.floor();
        let index = if k - low > 0.5 { low + 1.0 } else { low };
        self.value_at((index as u64).min(last))
    }

    pub fn random_value<R: Rng + ?Sized>(&self, rng: &mut R) -> i64 {
        self.value_at(rng.gen_range(0..self.point_count()))
    }
}

/// One grid point, values in parameter declaration order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Configuration(Vec<i64>);

impl Configuration {
    pub fn new(values: Vec<i64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[i64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_values(self) -> Vec<i64> {
        self.0
    }
}

impl From<Vec<i64>> for Configuration {
    fn from(values: Vec<i64>) -> Self {
        Self(values)
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{v}")?;
        }
        f.write_str("]")
    }
}

/// The tunable grid: the Cartesian product of the parameter ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSpace", into = "RawSpace")]
pub struct SearchSpace {
    params: Vec<ParameterSpec>,
    grid_size: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpace {
    params: Vec<ParameterSpec>,
}

impl TryFrom<RawSpace> for SearchSpace {
    type Error = SpaceError;

    fn try_from(raw: RawSpace) -> Result<Self, Self::Error> {
        SearchSpace::new(raw.params)
    }
}

impl From<SearchSpace> for RawSpace {
    fn from(space: SearchSpace) -> Self {
        RawSpace {
            params: space.params,
        }
    }
}

/// Checks every per-parameter invariant and name uniqueness.
pub fn validate_space(params: &[ParameterSpec]) -> Result<(), SpaceError> {
    if params.is_empty() {
        return Err(SpaceError::Empty);
    }
    let mut seen = BTreeSet::new();
    for p in params {
        p.validate()?;
        if !seen.insert(p.name.as_str()) {
            return Err(SpaceError::DuplicateName(p.name.clone()));
        }
    }
    Ok(())
}

impl SearchSpace {
    pub fn new(params: Vec<ParameterSpec>) -> Result<Self, SpaceError> {
        validate_space(&params)?;
        let grid_size = params
            .iter()
            .try_fold(1u64, |acc, p| acc.checked_mul(p.point_count()))
            .ok_or(SpaceError::Overflow)?;
        Ok(Self { params, grid_size })
    }

    pub fn params(&self) -> &[ParameterSpec] {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    pub fn grid_size(&self) -> u64 {
        self.grid_size
    }

    pub fn param(&self, name: &str) -> Option<(usize, &ParameterSpec)> {
        self.params.iter().enumerate().find(|(_, p)| p.name == name)
    }

    pub fn point_counts(&self) -> Vec<u64> {
        self.params.iter().map(ParameterSpec::point_count).collect()
    }

    pub fn check(&self, config: &Configuration) -> Result<(), SpaceError> {
        if config.len() != self.dim() {
            return Err(SpaceError::DimensionMismatch {
                expected: self.dim(),
                got: config.len(),
            });
        }
        for (p, &v) in self.params.iter().zip(config.values()) {
            if !p.contains(v) {
                return Err(SpaceError::OffGrid {
                    name: p.name.clone(),
                    value: v,
                });
            }
        }
        Ok(())
    }

    pub fn contains(&self, config: &Configuration) -> bool {
        self.check(config).is_ok()
    }

    pub fn normalize(&self, config: &Configuration) -> Result<Vec<f64>, SpaceError> {
        self.check(config)?;
        Ok(self
            .params
            .iter()
            .zip(config.values())
            .map(|(p, &v)| p.normalize(v))
            .collect())
    }

    /// Maps a unit-cube point to the nearest grid configuration.
    ///
    /// Panics if `u` does not have one component per parameter.
    pub fn snap(&self, u: &[f64]) -> Configuration {
        assert_eq!(u.len(), self.dim(), "snap: dimension mismatch");
        Configuration(
            self.params
                .iter()
                .zip(u)
                .map(|(p, &x)| p.snap(x))
                .collect(),
        )
    }

    pub fn random_config<R: Rng + ?Sized>(&self, rng: &mut R) -> Configuration {
        Configuration(self.params.iter().map(|p| p.random_value(rng)).collect())
    }

    /// The `index`-th configuration in lexicographic order of value vectors
    /// (first parameter most significant).
    pub fn config_at(&self, mut index: u64) -> Configuration {
        assert!(index < self.grid_size, "grid index out of range");
        let mut values = vec![0; self.dim()];
        for (slot, p) in values.iter_mut().zip(&self.params).rev() {
            let n = p.point_count();
            *slot = p.value_at(index % n);
            index /= n;
        }
        Configuration(values)
    }

    /// Inverse of [`SearchSpace::config_at`] for on-grid configurations.
    pub fn index_of(&self, config: &Configuration) -> Option<u64> {
        if config.len() != self.dim() {
            return None;
        }
        let mut index = 0u64;
        for (p, &v) in self.params.iter().zip(config.values()) {
            index = index * p.point_count() + p.index_of(v)?;
        }
        Some(index)
    }

    /// Every grid point in lexicographic order.
    pub fn iter_grid(&self) -> impl Iterator<Item = Configuration> + '_ {
        (0..self.grid_size).map(move |i| self.config_at(i))
    }

    /// Grid neighbours one step away along exactly one dimension.
    pub fn neighbors(&self, config: &Configuration) -> Vec<Configuration> {
        let mut out = Vec::with_capacity(2 * self.dim());
        for (i, p) in self.params.iter().enumerate() {
            let v = config.values()[i];
            for candidate in [v - p.step, v + p.step] {
                if p.contains(candidate) {
                    let mut values = config.values().to_vec();
                    values[i] = candidate;
                    out.push(Configuration(values));
                }
            }
        }
        out
    }
}
