//! The demonstration buffer: every evaluated design point with its
//! metrics and scalar figure of merit.
//!
//! The figure of merit folds all metrics into one maximization target:
//! each metric is divided by its scale and added with positive sign if
//! it is to be maximized, negative if minimized. Invalid evaluations
//! (failed or non-finite) carry a figure of merit of negative infinity
//! and are excluded from ranking and model training.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuit::{CircuitSpec, DesignPoint, Direction, MetricId};

/// Where an evaluation came from within a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Source {
    /// Initialization batch, before the optimization loop.
    Init,
    /// Point proposed by the surrogate's acquisition function.
    Bo,
    /// Point proposed by the advisor.
    Advisor,
}

/// One evaluated design point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub point: DesignPoint,
    pub metrics: BTreeMap<MetricId, f64>,
    /// Figure of merit; negative infinity when `valid` is false.
    pub fom: f64,
    /// Loop iteration the point was evaluated in; 0 for initialization.
    pub iteration: u32,
    pub source: Source,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FomError {
    #[error("metric {0} missing from evaluation output")]
    MissingMetric(MetricId),
    #[error("metric {0} is not finite")]
    NonFiniteMetric(MetricId),
}

/// Scalarizes a metric map against the spec's metric schemas.
///
/// Every spec metric must be present and finite. The result is the sum
/// over metrics of `value / scale`, signed positive for maximize and
/// negative for minimize.
pub fn compute_fom(
    spec: &CircuitSpec,
    metrics: &BTreeMap<MetricId, f64>,
) -> Result<f64, FomError> {
    let mut fom = 0.0;
    for m in &spec.metrics {
        let value = *metrics
            .get(&m.id)
            .ok_or_else(|| FomError::MissingMetric(m.id.clone()))?;
        if !value.is_finite() {
            return Err(FomError::NonFiniteMetric(m.id.clone()));
        }
        let signed = match m.direction {
            Direction::Maximize => 1.0,
            Direction::Minimize => -1.0,
        };
        fom += signed * value / m.scale;
    }
    Ok(fom)
}

/// True when every spec metric threshold is met by `metrics`.
pub fn meets_all_specs(spec: &CircuitSpec, metrics: &BTreeMap<MetricId, f64>) -> bool {
    spec.metrics
        .iter()
        .all(|m| metrics.get(&m.id).is_some_and(|v| m.satisfied_by(*v)))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("buffer holds no valid evaluations")]
pub struct EmptyBuffer;

/// Append-only store of evaluation records.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Buffer {
    records: Vec<EvaluationRecord>,
}

impl Buffer {
    pub fn new() -> Self {
        Buffer::default()
    }

    pub fn insert(&mut self, record: EvaluationRecord) {
        debug_assert!(
            record.valid || record.fom == f64::NEG_INFINITY,
            "invalid records must carry a FOM of negative infinity"
        );
        self.records.push(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EvaluationRecord] {
        &self.records
    }

    pub fn valid_records(&self) -> impl Iterator<Item = &EvaluationRecord> {
        self.records.iter().filter(|r| r.valid)
    }

    /// The `k` best valid records by figure of merit, descending.
    ///
    /// Ties keep insertion order (earlier record first). Asking for
    /// more records than exist returns what there is.
    pub fn top_k(&self, k: usize) -> Vec<&EvaluationRecord> {
        let mut ranked: Vec<(usize, &EvaluationRecord)> = self
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.valid)
            .collect();
        // Stable sort on descending FOM preserves insertion order among
        // equal values.
        ranked.sort_by(|(_, a), (_, b)| b.fom.partial_cmp(&a.fom).expect("valid FOMs are finite"));
        ranked.into_iter().take(k).map(|(_, r)| r).collect()
    }

    /// The single best valid record.
    pub fn best(&self) -> Result<&EvaluationRecord, EmptyBuffer> {
        self.top_k(1).first().copied().ok_or(EmptyBuffer)
    }

    /// Serializes every record as one JSON object per line, in
    /// insertion order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(&JsonlRecord::from(r)).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Parses a JSONL export produced by [`Buffer::to_jsonl`].
    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let mut buf = Buffer::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let rec: JsonlRecord = serde_json::from_str(line)?;
            buf.records.push(rec.into());
        }
        Ok(buf)
    }
}

/// Wire form of a record. JSON has no literal for infinities, so the
/// FOM of an invalid record is exported as `null`.
#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    point: DesignPoint,
    metrics: BTreeMap<MetricId, f64>,
    fom: Option<f64>,
    iteration: u32,
    source: Source,
    valid: bool,
}

impl From<&EvaluationRecord> for JsonlRecord {
    fn from(r: &EvaluationRecord) -> Self {
        JsonlRecord {
            point: r.point.clone(),
            metrics: r.metrics.clone(),
            fom: r.valid.then_some(r.fom),
            iteration: r.iteration,
            source: r.source,
            valid: r.valid,
        }
    }
}

impl From<JsonlRecord> for EvaluationRecord {
    fn from(r: JsonlRecord) -> Self {
        EvaluationRecord {
            point: r.point,
            metrics: r.metrics,
            fom: r.fom.unwrap_or(f64::NEG_INFINITY),
            iteration: r.iteration,
            source: r.source,
            valid: r.valid,
        }
    }
}
