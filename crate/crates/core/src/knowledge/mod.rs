//! Structured knowledge summaries and the KS/1 text format.
//!
//! A summary captures three kinds of design knowledge for one circuit:
//!
//! - metric trade-offs: two metrics that compete (`TRADEOFF gain ugf`)
//! - sub-structure associations: which block controls a metric or a
//!   trade-off (`ASSOC diffpair METRIC gain`)
//! - parameter influences: the direction a parameter pushes a metric
//!   (`INFL w1 IN diffpair ON gain DIR +`)
//!
//! Summaries travel between runs as KS/1 documents, a line-oriented
//! UTF-8 format with LF line endings:
//!
//! ```text
//! KS/1
//! CIRCUIT two_stage_amp
//! # comments run to end of line
//! TRADEOFF gain ugf "compensation cap couples them"
//! ASSOC diffpair METRIC gain
//! ASSOC out_stage TRADEOFF gain ugf
//! INFL w1 IN diffpair ON gain DIR + "wider input pair"
//! ```
//!
//! Serialization is canonical: records are emitted sorted within each
//! kind, so equal summaries always produce byte-identical documents.
//! Provenance and iteration are runtime metadata and are not part of
//! the document; parsing defaults them to `Generated` / 0.

mod text;
mod validate;

pub use text::{
    parse_record_lenient, parse_summary, serialize_record, serialize_summary, ParseError, Record,
};
pub use validate::{validate_summary, Finding, FindingKind, ValidationReport};

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuit::{CircuitSpec, Ident, MetricId, ParamId, SubStructureId};

/// Direction of a parameter's influence on a metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InfluenceDirection {
    Positive,
    Negative,
    Nonmonotonic,
}

impl InfluenceDirection {
    pub fn token(self) -> &'static str {
        match self {
            InfluenceDirection::Positive => "+",
            InfluenceDirection::Negative => "-",
            InfluenceDirection::Nonmonotonic => "~",
        }
    }

    pub fn from_token(tok: &str) -> Option<Self> {
        match tok {
            "+" => Some(InfluenceDirection::Positive),
            "-" => Some(InfluenceDirection::Negative),
            "~" => Some(InfluenceDirection::Nonmonotonic),
            _ => None,
        }
    }
}

impl fmt::Display for InfluenceDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecordError {
    #[error("trade-off requires two distinct metrics, got {0} twice")]
    IdenticalMetrics(MetricId),
    #[error("note must not contain line breaks")]
    NoteHasLineBreak,
}

fn check_note(note: &str) -> Result<(), RecordError> {
    if note.contains('\n') || note.contains('\r') {
        Err(RecordError::NoteHasLineBreak)
    } else {
        Ok(())
    }
}

/// An unordered pair of competing metrics.
///
/// The pair is stored in lexicographic order regardless of construction
/// order, so `(gain, ugf)` and `(ugf, gain)` are the same record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TradeoffRecord {
    metric_a: MetricId,
    metric_b: MetricId,
    pub note: String,
}

impl TradeoffRecord {
    pub fn new(m1: MetricId, m2: MetricId, note: impl Into<String>) -> Result<Self, RecordError> {
        if m1 == m2 {
            return Err(RecordError::IdenticalMetrics(m1));
        }
        let note = note.into();
        check_note(&note)?;
        let (metric_a, metric_b) = if m1 <= m2 { (m1, m2) } else { (m2, m1) };
        Ok(TradeoffRecord {
            metric_a,
            metric_b,
            note,
        })
    }

    pub fn metric_a(&self) -> &MetricId {
        &self.metric_a
    }

    pub fn metric_b(&self) -> &MetricId {
        &self.metric_b
    }

    pub fn involves(&self, m: &MetricId) -> bool {
        &self.metric_a == m || &self.metric_b == m
    }

    fn key(&self) -> (MetricId, MetricId) {
        (self.metric_a.clone(), self.metric_b.clone())
    }
}

/// What a sub-structure association points at: a single metric or a
/// trade-off pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssocTarget {
    Metric(MetricId),
    Tradeoff(MetricId, MetricId),
}

impl AssocTarget {
    /// True when the target mentions metric `m`.
    pub fn covers(&self, m: &MetricId) -> bool {
        match self {
            AssocTarget::Metric(t) => t == m,
            AssocTarget::Tradeoff(a, b) => a == m || b == m,
        }
    }

    pub fn metrics(&self) -> Vec<&MetricId> {
        match self {
            AssocTarget::Metric(m) => vec![m],
            AssocTarget::Tradeoff(a, b) => vec![a, b],
        }
    }

    fn key(&self) -> (u8, MetricId, Option<MetricId>) {
        match self {
            AssocTarget::Metric(m) => (0, m.clone(), None),
            AssocTarget::Tradeoff(a, b) => (1, a.clone(), Some(b.clone())),
        }
    }
}

/// Links a sub-structure to a metric or trade-off it controls.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssociationRecord {
    pub substructure: SubStructureId,
    target: AssocTarget,
    pub note: String,
}

impl AssociationRecord {
    pub fn to_metric(
        substructure: SubStructureId,
        metric: MetricId,
        note: impl Into<String>,
    ) -> Result<Self, RecordError> {
        let note = note.into();
        check_note(&note)?;
        Ok(AssociationRecord {
            substructure,
            target: AssocTarget::Metric(metric),
            note,
        })
    }

    pub fn to_tradeoff(
        substructure: SubStructureId,
        m1: MetricId,
        m2: MetricId,
        note: impl Into<String>,
    ) -> Result<Self, RecordError> {
        if m1 == m2 {
            return Err(RecordError::IdenticalMetrics(m1));
        }
        let note = note.into();
        check_note(&note)?;
        let (a, b) = if m1 <= m2 { (m1, m2) } else { (m2, m1) };
        Ok(AssociationRecord {
            substructure,
            target: AssocTarget::Tradeoff(a, b),
            note,
        })
    }

    pub fn target(&self) -> &AssocTarget {
        &self.target
    }

    fn key(&self) -> (SubStructureId, (u8, MetricId, Option<MetricId>)) {
        (self.substructure.clone(), self.target.key())
    }
}

/// Records the direction a parameter (within a sub-structure) pushes a
/// metric.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfluenceRecord {
    pub param: ParamId,
    pub substructure: SubStructureId,
    pub metric: MetricId,
    pub direction: InfluenceDirection,
    pub note: String,
}

impl InfluenceRecord {
    pub fn new(
        param: ParamId,
        substructure: SubStructureId,
        metric: MetricId,
        direction: InfluenceDirection,
        note: impl Into<String>,
    ) -> Result<Self, RecordError> {
        let note = note.into();
        check_note(&note)?;
        Ok(InfluenceRecord {
            param,
            substructure,
            metric,
            direction,
            note,
        })
    }

    fn key(&self) -> (ParamId, SubStructureId, MetricId) {
        (
            self.param.clone(),
            self.substructure.clone(),
            self.metric.clone(),
        )
    }
}

/// Where a summary came from: fresh generation or a critique pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Generated,
    Refined,
}

/// A circuit's accumulated design knowledge: duplicate-free sets of
/// trade-off, association, and influence records.
///
/// Records are keyed by their structural fields (notes and influence
/// direction excluded), so a set never holds two records that disagree
/// only in annotation. Insertion keeps each set sorted by key, which
/// makes equality order-independent and serialization canonical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeSummary {
    pub circuit_id: Ident,
    tradeoffs: Vec<TradeoffRecord>,
    associations: Vec<AssociationRecord>,
    influences: Vec<InfluenceRecord>,
    pub provenance: Provenance,
    pub iteration: u32,
}

impl KnowledgeSummary {
    pub fn new(circuit_id: Ident) -> Self {
        KnowledgeSummary {
            circuit_id,
            tradeoffs: Vec::new(),
            associations: Vec::new(),
            influences: Vec::new(),
            provenance: Provenance::Generated,
            iteration: 0,
        }
    }

    pub fn tradeoffs(&self) -> &[TradeoffRecord] {
        &self.tradeoffs
    }

    pub fn associations(&self) -> &[AssociationRecord] {
        &self.associations
    }

    pub fn influences(&self) -> &[InfluenceRecord] {
        &self.influences
    }

    pub fn is_empty(&self) -> bool {
        self.tradeoffs.is_empty() && self.associations.is_empty() && self.influences.is_empty()
    }

    pub fn record_count(&self) -> usize {
        self.tradeoffs.len() + self.associations.len() + self.influences.len()
    }

    /// Inserts a trade-off record; returns false (leaving the existing
    /// record in place) when one with the same metric pair is present.
    pub fn insert_tradeoff(&mut self, rec: TradeoffRecord) -> bool {
        match self.tradeoffs.binary_search_by_key(&rec.key(), |r| r.key()) {
            Ok(_) => false,
            Err(pos) => {
                self.tradeoffs.insert(pos, rec);
                true
            }
        }
    }

    /// Inserts an association record; returns false on a duplicate
    /// (same sub-structure and target).
    pub fn insert_association(&mut self, rec: AssociationRecord) -> bool {
        match self
            .associations
            .binary_search_by_key(&rec.key(), |r| r.key())
        {
            Ok(_) => false,
            Err(pos) => {
                self.associations.insert(pos, rec);
                true
            }
        }
    }

    /// Inserts an influence record; returns false on a duplicate
    /// (same parameter, sub-structure, and metric).
    pub fn insert_influence(&mut self, rec: InfluenceRecord) -> bool {
        match self
            .influences
            .binary_search_by_key(&rec.key(), |r| r.key())
        {
            Ok(_) => false,
            Err(pos) => {
                self.influences.insert(pos, rec);
                true
            }
        }
    }

    /// True when both summaries describe the same circuit with the same
    /// record sets, ignoring provenance and iteration metadata.
    pub fn same_content(&self, other: &KnowledgeSummary) -> bool {
        self.circuit_id == other.circuit_id
            && self.tradeoffs == other.tradeoffs
            && self.associations == other.associations
            && self.influences == other.influences
    }
}

/// One reuse-library entry: a circuit spec paired with its summary.
#[derive(Debug, Clone)]
pub struct LibraryEntry {
    pub spec: CircuitSpec,
    pub summary: KnowledgeSummary,
}

/// Picks which library summaries are relevant to `current`.
///
/// Default rule: a library circuit is related when it shares at least
/// one sub-structure tag with `current`; results keep library order.
/// When `override_ids` is given it wins outright: exactly the listed
/// circuits are returned, in list order, skipping ids absent from the
/// library. Entries describing `current` itself are never returned.
pub fn select_related(
    current: &CircuitSpec,
    library: &[LibraryEntry],
    override_ids: Option<&[Ident]>,
) -> Vec<KnowledgeSummary> {
    if let Some(ids) = override_ids {
        return ids
            .iter()
            .filter(|id| **id != current.circuit_id)
            .filter_map(|id| {
                library
                    .iter()
                    .find(|e| &e.summary.circuit_id == id)
                    .map(|e| e.summary.clone())
            })
            .collect();
    }
    library
        .iter()
        .filter(|e| e.summary.circuit_id != current.circuit_id)
        .filter(|e| {
            e.spec
                .substructure_tags
                .iter()
                .any(|t| current.substructure_tags.contains(t))
        })
        .map(|e| e.summary.clone())
        .collect()
}

/// A reuse-context document handed to the advisor, with its length in
/// characters for context-window budgeting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextDocument {
    pub text: String,
}

impl ContextDocument {
    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContextError {
    #[error("no netlist registered for related circuit {0}")]
    MissingNetlist(Ident),
}

/// Concatenates the reuse context: a header for the current circuit
/// followed by one section per related circuit (its netlist, then its
/// serialized KS/1 summary), in the order given.
pub fn assemble_reuse_context(
    current: &CircuitSpec,
    related: &[KnowledgeSummary],
    netlists: &BTreeMap<Ident, String>,
) -> Result<ContextDocument, ContextError> {
    let mut text = String::new();
    text.push_str(&format!("Current circuit: {}\n", current.circuit_id));
    let tags: Vec<&str> = current
        .substructure_tags
        .iter()
        .map(|t| t.as_str())
        .collect();
    text.push_str(&format!("Sub-structures: {}\n", tags.join(", ")));
    for summary in related {
        let netlist = netlists
            .get(&summary.circuit_id)
            .ok_or_else(|| ContextError::MissingNetlist(summary.circuit_id.clone()))?;
        text.push('\n');
        text.push_str(&format!("Related circuit: {}\n", summary.circuit_id));
        text.push_str("Netlist:\n");
        text.push_str(netlist);
        if !netlist.ends_with('\n') && !netlist.is_empty() {
            text.push('\n');
        }
        text.push_str("Knowledge summary:\n");
        text.push_str(&serialize_summary(summary));
    }
    Ok(ContextDocument { text })
}
