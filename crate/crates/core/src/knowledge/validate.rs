//! Coherence checks of a knowledge summary against a circuit spec.
//!
//! Validation never fails hard; it reports findings. An empty report
//! means every record is consistent with the spec's vocabulary and the
//! summary's own association coverage.

use std::fmt;

use serde::Serialize;

use super::{AssocTarget, KnowledgeSummary};
use crate::circuit::{CircuitSpec, MetricId, ParamId, SubStructureId};

/// What kind of inconsistency a finding reports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE", tag = "kind")]
pub enum FindingKind {
    /// Record mentions a metric the spec does not declare.
    UnknownMetric { metric: MetricId },
    /// Record mentions a sub-structure outside the spec's tag set.
    UnknownSubstructure { substructure: SubStructureId },
    /// Influence names a parameter the spec does not declare.
    UnknownParam { param: ParamId },
    /// Influence places a known parameter in a sub-structure that is
    /// not the one the spec assigns it to.
    ParamSubstructureMismatch {
        param: ParamId,
        substructure: SubStructureId,
    },
    /// Influence about a (sub-structure, metric) pair that no
    /// association record in the same summary covers.
    OrphanInfluence {
        param: ParamId,
        metric: MetricId,
    },
}

impl fmt::Display for FindingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FindingKind::UnknownMetric { metric } => write!(f, "UNKNOWN_METRIC {metric}"),
            FindingKind::UnknownSubstructure { substructure } => {
                write!(f, "UNKNOWN_SUBSTRUCTURE {substructure}")
            }
            FindingKind::UnknownParam { param } => write!(f, "UNKNOWN_PARAM {param}"),
            FindingKind::ParamSubstructureMismatch {
                param,
                substructure,
            } => write!(f, "PARAM_SUBSTRUCTURE_MISMATCH {param} {substructure}"),
            FindingKind::OrphanInfluence { param, metric } => {
                write!(f, "ORPHAN_INFLUENCE {param} {metric}")
            }
        }
    }
}

/// One validation finding, tied to the record that triggered it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Finding {
    #[serde(flatten)]
    pub kind: FindingKind,
    /// The offending record, rendered in KS/1 syntax.
    pub record: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} in: {}", self.kind, self.record)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn len(&self) -> usize {
        self.findings.len()
    }
}

/// Checks every record of `k` against `spec`.
///
/// Finding order is deterministic: trade-offs, then associations, then
/// influences, each in canonical record order, with per-record checks
/// in a fixed sequence. The vocabulary checks (unknown metric,
/// sub-structure, or parameter, and the parameter placement check)
/// depend only on the record and the spec, so adding further records
/// never retracts them. Orphan-influence findings are the exception:
/// they are defined by the absence of a covering association, so an
/// added association can legitimately cure one.
pub fn validate_summary(k: &KnowledgeSummary, spec: &CircuitSpec) -> ValidationReport {
    let mut findings = Vec::new();

    let known_metric = |m: &MetricId| spec.metric(m).is_some();
    let known_sub = |s: &SubStructureId| spec.substructure_tags.contains(s);

    for t in k.tradeoffs() {
        let record = format!("TRADEOFF {} {}", t.metric_a(), t.metric_b());
        for m in [t.metric_a(), t.metric_b()] {
            if !known_metric(m) {
                findings.push(Finding {
                    kind: FindingKind::UnknownMetric { metric: m.clone() },
                    record: record.clone(),
                });
            }
        }
    }

    for a in k.associations() {
        let record = match a.target() {
            AssocTarget::Metric(m) => format!("ASSOC {} METRIC {}", a.substructure, m),
            AssocTarget::Tradeoff(m1, m2) => {
                format!("ASSOC {} TRADEOFF {} {}", a.substructure, m1, m2)
            }
        };
        if !known_sub(&a.substructure) {
            findings.push(Finding {
                kind: FindingKind::UnknownSubstructure {
                    substructure: a.substructure.clone(),
                },
                record: record.clone(),
            });
        }
        for m in a.target().metrics() {
            if !known_metric(m) {
                findings.push(Finding {
                    kind: FindingKind::UnknownMetric { metric: m.clone() },
                    record: record.clone(),
                });
            }
        }
    }

    for i in k.influences() {
        let record = format!(
            "INFL {} IN {} ON {} DIR {}",
            i.param,
            i.substructure,
            i.metric,
            i.direction.token()
        );
        match spec.param(&i.param) {
            None => findings.push(Finding {
                kind: FindingKind::UnknownParam {
                    param: i.param.clone(),
                },
                record: record.clone(),
            }),
            Some(p) => {
                if p.substructure != i.substructure {
                    findings.push(Finding {
                        kind: FindingKind::ParamSubstructureMismatch {
                            param: i.param.clone(),
                            substructure: i.substructure.clone(),
                        },
                        record: record.clone(),
                    });
                }
            }
        }
        if !known_sub(&i.substructure) {
            findings.push(Finding {
                kind: FindingKind::UnknownSubstructure {
                    substructure: i.substructure.clone(),
                },
                record: record.clone(),
            });
        }
        if !known_metric(&i.metric) {
            findings.push(Finding {
                kind: FindingKind::UnknownMetric {
                    metric: i.metric.clone(),
                },
                record: record.clone(),
            });
        }
        let covered = k
            .associations()
            .iter()
            .any(|a| a.substructure == i.substructure && a.target().covers(&i.metric));
        if !covered {
            findings.push(Finding {
                kind: FindingKind::OrphanInfluence {
                    param: i.param.clone(),
                    metric: i.metric.clone(),
                },
                record: record.clone(),
            });
        }
    }

    ValidationReport { findings }
}
