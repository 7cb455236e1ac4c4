//! Measurement records and the append-only evaluation history.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::space::Configuration;

#[derive(Debug, Error)]
pub enum HistoryError {
    #[error("configuration {0} already has an ok evaluation")]
    DuplicateOk(Configuration),
    #[error("iteration {got} does not follow iteration {last}")]
    NonIncreasingIteration { last: u64, got: u64 },
    #[error("inconsistent evaluation at iteration {iteration}: {reason}")]
    Inconsistent { iteration: u64, reason: &'static str },
    #[error("history line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Failed,
    Timeout,
}

/// How repeated raw measurements collapse into one metric value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Median,
    Mean,
    Max,
}

impl Aggregation {
    /// Returns `None` for an empty sample.
    pub fn apply(self, samples: &[f64]) -> Option<f64> {
        if samples.is_empty() {
            return None;
        }
        Some(match self {
            Aggregation::Mean => samples.iter().sum::<f64>() / samples.len() as f64,
            Aggregation::Max => samples.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Aggregation::Median => {
                let mut sorted = samples.to_vec();
                sorted.sort_by(f64::total_cmp);
                let mid = sorted.len() / 2;
                if sorted.len() % 2 == 1 {
                    sorted[mid]
                } else {
                    (sorted[mid - 1] + sorted[mid]) / 2.0
                }
            }
        })
    }
}

/// One measurement of one configuration.
///
/// Field order is the JSON-lines record layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Evaluation {
    pub iteration: u64,
    #[serde(rename = "values")]
    pub config: Configuration,
    pub value: Option<f64>,
    pub repeats: Vec<f64>,
    pub wall_time_s: f64,
    pub status: Status,
}

impl Evaluation {
    /// A successful evaluation; `value` is the aggregation of `repeats`.
    pub fn ok(
        iteration: u64,
        config: Configuration,
        repeats: Vec<f64>,
        aggregation: Aggregation,
        wall_time_s: f64,
    ) -> Self {
        let value = aggregation.apply(&repeats);
        assert!(value.is_some(), "ok evaluation needs at least one repeat");
        Self {
            iteration,
            config,
            value,
            repeats,
            wall_time_s,
            status: Status::Ok,
        }
    }

    pub fn unsuccessful(
        iteration: u64,
        config: Configuration,
        status: Status,
        repeats: Vec<f64>,
        wall_time_s: f64,
    ) -> Self {
        assert_ne!(status, Status::Ok);
        Self {
            iteration,
            config,
            value: None,
            repeats,
            wall_time_s,
            status,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == Status::Ok
    }

    /// The metric value of an ok evaluation.
    pub fn ok_value(&self) -> Option<f64> {
        if self.is_ok() {
            self.value
        } else {
            None
        }
    }

    fn check(&self) -> Result<(), HistoryError> {
        let reason = match (self.status, self.value) {
            (Status::Ok, None) => Some("ok status without a value"),
            (Status::Ok, Some(v)) if !v.is_finite() => Some("non-finite value"),
            (Status::Ok, Some(_)) if self.repeats.is_empty() => Some("ok status without repeats"),
            (Status::Failed | Status::Timeout, Some(_)) => Some("value on an unsuccessful evaluation"),
            _ => None,
        };
        if !(self.wall_time_s >= 0.0) {
            return Err(HistoryError::Inconsistent {
                iteration: self.iteration,
                reason: "negative wall time",
            });
        }
        match reason {
            Some(reason) => Err(HistoryError::Inconsistent {
                iteration: self.iteration,
                reason,
            }),
            None => Ok(()),
        }
    }
}

/// Append-only record of every evaluation, indexed by configuration for
/// the ok entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    entries: Vec<Evaluation>,
    index: BTreeMap<Configuration, usize>,
}

impl History {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, evaluation: Evaluation) -> Result<(), HistoryError> {
        evaluation.check()?;
        if let Some(last) = self.entries.last() {
            if evaluation.iteration <= last.iteration {
                return Err(HistoryError::NonIncreasingIteration {
                    last: last.iteration,
                    got: evaluation.iteration,
                });
            }
        }
        if evaluation.is_ok() {
            if self.index.contains_key(&evaluation.config) {
                return Err(HistoryError::DuplicateOk(evaluation.config));
            }
            self.index
                .insert(evaluation.config.clone(), self.entries.len());
        }
        self.entries.push(evaluation);
        Ok(())
    }

    /// The ok evaluation of `config`, if one was recorded.
    pub fn lookup(&self, config: &Configuration) -> Option<&Evaluation> {
        self.index.get(config).map(|&i| &self.entries[i])
    }

    pub fn contains_ok(&self, config: &Configuration) -> bool {
        self.index.contains_key(config)
    }

    pub fn entries(&self) -> &[Evaluation] {
        &self.entries
    }

    pub fn ok_entries(&self) -> impl Iterator<Item = &Evaluation> + '_ {
        self.entries.iter().filter(|e| e.is_ok())
    }

    pub fn ok_count(&self) -> usize {
        self.index.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Iteration number for the next recorded evaluation (1-based).
    pub fn next_iteration(&self) -> u64 {
        self.entries.last().map_or(1, |e| e.iteration + 1)
    }

    /// Highest ok value and its entry; ties go to the earliest entry.
    pub fn best(&self) -> Option<&Evaluation> {
        self.ok_entries().fold(None, |best: Option<&Evaluation>, e| match best {
            Some(b) if b.value >= e.value => Some(b),
            _ => Some(e),
        })
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), HistoryError> {
        for e in &self.entries {
            write_jsonl_line(&mut out, e)?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    /// Parses a JSON-lines history, re-checking every invariant. Blank lines are skipped.
    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, HistoryError> {
        let mut history = History::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: Evaluation = serde_json::from_str(&line)
                .map_err(|source| HistoryError::Parse { line: i + 1, source })?;
            history.record(e)?;
        }
        Ok(history)
    }
}

/// Writes one evaluation as a single JSON line.
pub fn write_jsonl_line<W: Write>(out: &mut W, evaluation: &Evaluation) -> Result<(), HistoryError> {
    serde_json::to_writer(&mut *out, evaluation).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ok(iteration: u64, values: Vec<i64>, v: f64) -> Evaluation {
        Evaluation::ok(iteration, values.into(), vec![v], Aggregation::Median, 0.5)
    }

    #[test]
    fn record_then_lookup() {
        let mut h = History::new();
        assert!(h.lookup(&vec![1, 2].into()).is_none());
        let e = ok(1, vec![1, 2], 3.5);
        h.record(e.clone()).unwrap();
        assert_eq!(h.lookup(&vec![1, 2].into()), Some(&e));
    }

    #[test]
    fn duplicate_ok_rejected() {
        let mut h = History::new();
        h.record(ok(1, vec![1], 1.0)).unwrap();
        assert!(matches!(
            h.record(ok(2, vec![1], 2.0)),
            Err(HistoryError::DuplicateOk(_))
        ));
        assert_eq!(h.len(), 1);
    }

    #[test]
    fn failures_do_not_block_a_later_ok() {
        let mut h = History::new();
        h.record(Evaluation::unsuccessful(1, vec![1].into(), Status::Failed, vec![], 0.1))
            .unwrap();
        assert!(h.lookup(&vec![1].into()).is_none());
        h.record(ok(2, vec![1], 2.0)).unwrap();
        assert_eq!(h.ok_count(), 1);
    }

    #[test]
    fn iterations_must_increase() {
        let mut h = History::new();
        h.record(ok(3, vec![1], 1.0)).unwrap();
        assert!(matches!(
            h.record(ok(3, vec![2], 1.0)),
            Err(HistoryError::NonIncreasingIteration { .. })
        ));
        assert_eq!(h.next_iteration(), 4);
    }

    #[test]
    fn aggregation_rules() {
        assert_eq!(Aggregation::Median.apply(&[10.0, 50.0, 12.0]), Some(12.0));
        assert_eq!(Aggregation::Median.apply(&[1.0, 2.0, 3.0, 10.0]), Some(2.5));
        assert_eq!(Aggregation::Mean.apply(&[1.0, 2.0, 6.0]), Some(3.0));
        assert_eq!(Aggregation::Max.apply(&[1.0, 7.0, 6.0]), Some(7.0));
        assert_eq!(Aggregation::Max.apply(&[]), None);
    }

    #[test]
    fn jsonl_layout_and_roundtrip() {
        let mut h = History::new();
        h.record(Evaluation::ok(
            1,
            vec![4, 28].into(),
            vec![0.1, 0.30000000000000004, 1e-17],
            Aggregation::Median,
            0.25,
        ))
        .unwrap();
        h.record(Evaluation::unsuccessful(2, vec![1, 1].into(), Status::Timeout, vec![], 3.0))
            .unwrap();
        let text = h.to_jsonl();
        let first = text.lines().next().unwrap();
        assert_eq!(
            first,
            r#"{"iteration":1,"values":[4,28],"value":0.1,"repeats":[0.1,0.30000000000000004,1e-17],"wall_time_s":0.25,"status":"ok"}"#
        );
        assert!(text.lines().nth(1).unwrap().contains(r#""value":null"#));
        let back = History::read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(back, h);
    }

    #[test]
    fn inconsistent_lines_rejected() {
        let line = r#"{"iteration":1,"values":[1],"value":null,"repeats":[1.0],"wall_time_s":0.0,"status":"ok"}"#;
        assert!(matches!(
            History::read_jsonl(line.as_bytes()),
            Err(HistoryError::Inconsistent { .. })
        ));
        assert!(matches!(
            History::read_jsonl("{not json".as_bytes()),
            Err(HistoryError::Parse { line: 1, .. })
        ));
    }
}
