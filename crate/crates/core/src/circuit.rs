//! Circuit vocabulary shared across the pipeline: identifiers, parameter
//! and metric schemas, and validated design points.
//!
//! A [`CircuitSpec`] is the single source of truth for what a circuit's
//! parameters and metrics are; every other module validates against it.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A case-sensitive identifier token: `[A-Za-z_][A-Za-z0-9_]*`.
///
/// Used for circuit ids, metric ids, parameter ids, and sub-structure ids.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Ident(String);

impl Ident {
    pub fn new(s: impl Into<String>) -> Result<Self, IdentError> {
        let s = s.into();
        let mut chars = s.chars();
        let valid_head = chars
            .next()
            .is_some_and(|c| c.is_ascii_alphabetic() || c == '_');
        if valid_head && chars.all(|c| c.is_ascii_alphanumeric() || c == '_') {
            Ok(Ident(s))
        } else {
            Err(IdentError(s))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Ident {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::str::FromStr for Ident {
    type Err = IdentError;
    fn from_str(s: &str) -> Result<Self, IdentError> {
        Ident::new(s)
    }
}

impl TryFrom<String> for Ident {
    type Error = IdentError;
    fn try_from(s: String) -> Result<Self, IdentError> {
        Ident::new(s)
    }
}

impl From<Ident> for String {
    fn from(id: Ident) -> String {
        id.0
    }
}

impl AsRef<str> for Ident {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid identifier {0:?}: expected [A-Za-z_][A-Za-z0-9_]*")]
pub struct IdentError(pub String);

macro_rules! ident_newtype {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(
            Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub Ident);

        impl $name {
            pub fn new(s: impl Into<String>) -> Result<Self, IdentError> {
                Ident::new(s).map($name)
            }

            pub fn as_str(&self) -> &str {
                self.0.as_str()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.fmt(f)
            }
        }

        impl std::str::FromStr for $name {
            type Err = IdentError;
            fn from_str(s: &str) -> Result<Self, IdentError> {
                $name::new(s)
            }
        }

        impl AsRef<str> for $name {
            fn as_ref(&self) -> &str {
                self.0.as_str()
            }
        }
    };
}

ident_newtype!(
    /// Name of a performance metric (e.g. `gain`, `iq`).
    MetricId
);
ident_newtype!(
    /// Name of a design parameter (e.g. `dp_w1`).
    ParamId
);
ident_newtype!(
    /// Name of a circuit sub-structure (e.g. `diffpair`).
    SubStructureId
);

/// Whether a metric counts toward the figure of merit positively
/// (maximize) or negatively (minimize).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Maximize,
    Minimize,
}

/// Schema for one performance metric.
///
/// `scale` is the normalization denominator used in the figure of merit;
/// it must be positive. [`MetricSpec::new`] defaults it to
/// `|spec_threshold|` when that is nonzero and `1.0` otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub id: MetricId,
    pub direction: Direction,
    pub spec_threshold: f64,
    pub scale: f64,
}

impl MetricSpec {
    pub fn new(id: MetricId, direction: Direction, spec_threshold: f64) -> Self {
        let scale = if spec_threshold != 0.0 {
            spec_threshold.abs()
        } else {
            1.0
        };
        MetricSpec {
            id,
            direction,
            spec_threshold,
            scale,
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        assert!(scale > 0.0, "metric scale must be positive");
        self.scale = scale;
        self
    }

    /// True when `value` meets the spec threshold in this metric's direction.
    pub fn satisfied_by(&self, value: f64) -> bool {
        match self.direction {
            Direction::Maximize => value >= self.spec_threshold,
            Direction::Minimize => value <= self.spec_threshold,
        }
    }
}

/// Schema for one design parameter: bounds, unit, and the sub-structure
/// it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub id: ParamId,
    pub lo: f64,
    pub hi: f64,
    pub unit: String,
    pub substructure: SubStructureId,
}

/// How a circuit's metrics are computed from a design point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EvaluatorBinding {
    /// Named closed-form model registered in the evaluator.
    Analytic { name: String },
    /// Named synthetic test function (e.g. `branin`).
    TestFn { name: String },
    /// Subprocess command template with `{input}` and `{output}`
    /// placeholders for the exchange file paths.
    External { command: String, timeout_s: f64 },
}

/// Complete description of a sizing problem: parameters, metrics,
/// sub-structure tags, netlist text, and the evaluator binding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitSpec {
    pub circuit_id: Ident,
    pub params: Vec<ParamSpec>,
    pub metrics: Vec<MetricSpec>,
    pub substructure_tags: Vec<SubStructureId>,
    pub netlist_text: String,
    pub binding: EvaluatorBinding,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpecError {
    #[error("parameter {0} has empty bounds: lo {1} must be below hi {2}")]
    EmptyBounds(ParamId, f64, f64),
    #[error("parameter {0} references sub-structure {1} absent from the tag set")]
    UnknownSubstructure(ParamId, SubStructureId),
    #[error("duplicate parameter id {0}")]
    DuplicateParam(ParamId),
    #[error("duplicate metric id {0}")]
    DuplicateMetric(MetricId),
    #[error("metric {0} has non-positive scale {1}")]
    BadScale(MetricId, f64),
    #[error("circuit has no parameters")]
    NoParams,
    #[error("circuit has no metrics")]
    NoMetrics,
}

impl CircuitSpec {
    pub fn new(
        circuit_id: Ident,
        params: Vec<ParamSpec>,
        metrics: Vec<MetricSpec>,
        substructure_tags: Vec<SubStructureId>,
        netlist_text: String,
        binding: EvaluatorBinding,
    ) -> Result<Self, SpecError> {
        let spec = CircuitSpec {
            circuit_id,
            params,
            metrics,
            substructure_tags,
            netlist_text,
            binding,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<(), SpecError> {
        if self.params.is_empty() {
            return Err(SpecError::NoParams);
        }
        if self.metrics.is_empty() {
            return Err(SpecError::NoMetrics);
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.params {
            if !seen.insert(&p.id) {
                return Err(SpecError::DuplicateParam(p.id.clone()));
            }
            if !(p.lo < p.hi) {
                return Err(SpecError::EmptyBounds(p.id.clone(), p.lo, p.hi));
            }
            if !self.substructure_tags.contains(&p.substructure) {
                return Err(SpecError::UnknownSubstructure(
                    p.id.clone(),
                    p.substructure.clone(),
                ));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.metrics {
            if !seen.insert(&m.id) {
                return Err(SpecError::DuplicateMetric(m.id.clone()));
            }
            if !(m.scale > 0.0) {
                return Err(SpecError::BadScale(m.id.clone(), m.scale));
            }
        }
        Ok(())
    }

    pub fn param(&self, id: &ParamId) -> Option<&ParamSpec> {
        self.params.iter().find(|p| &p.id == id)
    }

    pub fn metric(&self, id: &MetricId) -> Option<&MetricSpec> {
        self.metrics.iter().find(|m| &m.id == id)
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    /// Parameter bounds in declaration order, as `(lo, hi)` pairs.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.params.iter().map(|p| (p.lo, p.hi)).collect()
    }
}

/// One candidate sizing: a value for every parameter of one circuit.
///
/// Construction validates that the key set matches the spec's parameter
/// set exactly and that every value lies within its bounds, so holding a
/// `DesignPoint` is proof of well-formedness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DesignPoint {
    values: BTreeMap<ParamId, f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PointError {
    #[error("missing value for parameter {0}")]
    MissingParam(ParamId),
    #[error("value provided for unknown parameter {0}")]
    UnknownParam(ParamId),
    #[error("parameter {0} value {1} outside bounds [{2}, {3}]")]
    OutOfBounds(ParamId, f64, f64, f64),
    #[error("parameter {0} value is not finite")]
    NonFinite(ParamId),
}

impl DesignPoint {
    pub fn new(spec: &CircuitSpec, values: BTreeMap<ParamId, f64>) -> Result<Self, PointError> {
        for key in values.keys() {
            if spec.param(key).is_none() {
                return Err(PointError::UnknownParam(key.clone()));
            }
        }
        for p in &spec.params {
            let v = *values
                .get(&p.id)
                .ok_or_else(|| PointError::MissingParam(p.id.clone()))?;
            if !v.is_finite() {
                return Err(PointError::NonFinite(p.id.clone()));
            }
            if v < p.lo || v > p.hi {
                return Err(PointError::OutOfBounds(p.id.clone(), v, p.lo, p.hi));
            }
        }
        Ok(DesignPoint { values })
    }

    /// Builds a point from values in the spec's parameter order.
    pub fn from_vec(spec: &CircuitSpec, values: &[f64]) -> Result<Self, PointError> {
        assert_eq!(
            values.len(),
            spec.params.len(),
            "value count must match parameter count"
        );
        let map = spec
            .params
            .iter()
            .zip(values)
            .map(|(p, v)| (p.id.clone(), *v))
            .collect();
        DesignPoint::new(spec, map)
    }

    /// Builds a point from unit-cube coordinates in the spec's parameter
    /// order, mapping each `u` in [0, 1] to `lo + u * (hi - lo)`.
    pub fn from_unit(spec: &CircuitSpec, unit: &[f64]) -> Result<Self, PointError> {
        assert_eq!(unit.len(), spec.params.len());
        let vals: Vec<f64> = spec
            .params
            .iter()
            .zip(unit)
            .map(|(p, u)| p.lo + u.clamp(0.0, 1.0) * (p.hi - p.lo))
            .collect();
        DesignPoint::from_vec(spec, &vals)
    }

    pub fn get(&self, id: &ParamId) -> Option<f64> {
        self.values.get(id).copied()
    }

    pub fn values(&self) -> &BTreeMap<ParamId, f64> {
        &self.values
    }

    /// Values in the spec's parameter order.
    pub fn to_vec(&self, spec: &CircuitSpec) -> Vec<f64> {
        spec.params
            .iter()
            .map(|p| self.values[&p.id])
            .collect()
    }

    /// Unit-cube coordinates in the spec's parameter order.
    pub fn to_unit(&self, spec: &CircuitSpec) -> Vec<f64> {
        spec.params
            .iter()
            .map(|p| (self.values[&p.id] - p.lo) / (p.hi - p.lo))
            .collect()
    }
}
