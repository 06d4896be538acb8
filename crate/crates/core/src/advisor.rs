//! The chat-model-facing layer: prompt assembly, suggestion parsing,
//! knowledge-summary generation and critique, an HTTP chat client, and
//! a deterministic mock client for offline runs.
//!
//! Every prompt is built from five fixed sections (circuit definition,
//! design objectives, reuse context, demonstrations, task instruction)
//! so downstream parsers and the mock can rely on the layout. All text
//! is deterministic for fixed inputs; randomness lives only in seeded
//! mock policies.

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::buffer::EvaluationRecord;
use crate::circuit::{CircuitSpec, DesignPoint};
use crate::knowledge::{
    parse_record_lenient, parse_summary, serialize_record, serialize_summary, validate_summary,
    ContextDocument, InfluenceDirection, KnowledgeSummary, Provenance, Record,
};

/// Environment variable holding the chat endpoint's API key.
pub const API_KEY_ENV: &str = "USO_ADVISOR_API_KEY";

/// Which advisor a config describes: the cheap in-loop one or the
/// stronger one used once for the critique pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvisorRole {
    Working,
    Critique,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvisorConfig {
    pub endpoint: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Advisory token budget for the whole prompt, estimated at four
    /// characters per token.
    pub context_window: usize,
    pub role: AdvisorRole,
    pub timeout_s: f64,
    /// Total attempts per call, exponential backoff between them.
    pub max_retries: u32,
}

impl AdvisorConfig {
    pub fn working_default() -> Self {
        AdvisorConfig {
            endpoint: String::new(),
            model_name: "working".into(),
            temperature: 0.5,
            max_tokens: 1000,
            context_window: 16_000,
            role: AdvisorRole::Working,
            timeout_s: 30.0,
            max_retries: 3,
        }
    }

    pub fn critique_default() -> Self {
        AdvisorConfig {
            model_name: "critique".into(),
            role: AdvisorRole::Critique,
            ..AdvisorConfig::working_default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(format!("temperature {} outside [0, 2]", self.temperature));
        }
        if self.max_tokens == 0 {
            return Err("max_tokens must be at least 1".into());
        }
        if self.max_retries == 0 {
            return Err("max_retries must be at least 1".into());
        }
        if !(self.timeout_s > 0.0) {
            return Err(format!("timeout_s {} must be positive", self.timeout_s));
        }
        Ok(())
    }
}

/// What a chat call is asking for; lets clients (the mock especially)
/// answer without guessing from prose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestKind {
    Suggest { n_points: usize },
    SummaryTradeoffs,
    SummaryAssociations,
    SummaryInfluences,
    Critique,
}

impl RequestKind {
    pub fn label(self) -> &'static str {
        match self {
            RequestKind::Suggest { .. } => "suggest",
            RequestKind::SummaryTradeoffs => "summary_tradeoffs",
            RequestKind::SummaryAssociations => "summary_associations",
            RequestKind::SummaryInfluences => "summary_influences",
            RequestKind::Critique => "critique",
        }
    }
}

/// One outbound chat-completion request.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub kind: RequestKind,
    pub system: String,
    pub user: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_s: f64,
}

/// A blocking chat-completion backend. `Err` carries a transport-level
/// message and triggers the advisor's retry policy.
pub trait ChatClient: Send {
    fn complete(&self, request: &ChatRequest) -> Result<String, String>;
}

// ---------------------------------------------------------------------------
// Prompt bundles

/// Fixed prompt section order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SectionLabel {
    Definition,
    Objectives,
    Reuse,
    Demonstrations,
    Instruction,
}

impl SectionLabel {
    fn heading(self) -> &'static str {
        match self {
            SectionLabel::Definition => "Circuit definition",
            SectionLabel::Objectives => "Design objectives",
            SectionLabel::Reuse => "Reuse context",
            SectionLabel::Demonstrations => "Demonstrations",
            SectionLabel::Instruction => "Task",
        }
    }
}

/// A prompt as an ordered list of labeled sections plus the system
/// message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system: String,
    pub sections: Vec<(SectionLabel, String)>,
}

const TRUNCATION_MARKER: &str = "\n[truncated]";

impl PromptBundle {
    /// Renders the user message: each section under a `##` heading.
    pub fn user_text(&self) -> String {
        let mut out = String::new();
        for (label, text) in &self.sections {
            out.push_str("## ");
            out.push_str(label.heading());
            out.push('\n');
            out.push_str(text);
            if !text.ends_with('\n') {
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }

    fn total_chars(&self) -> usize {
        self.system.chars().count() + self.user_text().chars().count()
    }

    /// Estimated token count at four characters per token.
    pub fn estimated_tokens(&self) -> usize {
        self.total_chars().div_ceil(4)
    }

    /// Shrinks the prompt to the advisory window by cutting section
    /// tails: reuse context first, then demonstrations. Returns true
    /// when anything was cut.
    pub fn fit_to_window(&mut self, context_window_tokens: usize) -> bool {
        let target_chars = context_window_tokens.saturating_mul(4);
        let mut truncated = false;
        for label in [SectionLabel::Reuse, SectionLabel::Demonstrations] {
            let over = self.total_chars().saturating_sub(target_chars);
            if over == 0 {
                break;
            }
            if let Some((_, text)) = self.sections.iter_mut().find(|(l, _)| *l == label) {
                if truncate_tail(text, over) {
                    truncated = true;
                }
            }
        }
        truncated
    }
}

/// Cuts `excess` chars (plus room for the marker) off the tail of
/// `text`, appending the truncation marker. Returns false when there
/// was nothing to cut.
fn truncate_tail(text: &mut String, excess: usize) -> bool {
    let len = text.chars().count();
    if len == 0 || excess == 0 {
        return false;
    }
    let marker_len = TRUNCATION_MARKER.chars().count();
    let keep = len.saturating_sub(excess + marker_len);
    let byte_idx = text
        .char_indices()
        .nth(keep)
        .map(|(i, _)| i)
        .unwrap_or(text.len());
    text.truncate(byte_idx);
    text.push_str(TRUNCATION_MARKER);
    true
}

const SYSTEM_PROMPT: &str = "You are an experienced analog circuit sizing assistant. \
You reason about circuit sub-structures, performance metrics, and their trade-offs, \
and you answer exactly in the format each task requests.";

fn definition_section(spec: &CircuitSpec) -> String {
    let mut s = format!("Circuit: {}\n", spec.circuit_id);
    if spec.netlist_text.is_empty() {
        s.push_str("Netlist: (none)\n");
    } else {
        s.push_str("Netlist:\n");
        s.push_str(&spec.netlist_text);
        if !spec.netlist_text.ends_with('\n') {
            s.push('\n');
        }
    }
    s.push_str("Parameters:\n");
    for p in &spec.params {
        let unit = if p.unit.is_empty() { "-" } else { &p.unit };
        s.push_str(&format!(
            "PARAM {} RANGE {} {} UNIT {} SUB {}\n",
            p.id, p.lo, p.hi, unit, p.substructure
        ));
    }
    s
}

fn objectives_section(spec: &CircuitSpec) -> String {
    let mut s = String::new();
    for m in &spec.metrics {
        let dir = match m.direction {
            crate::circuit::Direction::Maximize => "MAXIMIZE",
            crate::circuit::Direction::Minimize => "MINIMIZE",
        };
        s.push_str(&format!(
            "OBJECTIVE {} {dir} THRESHOLD {} SCALE {}\n",
            m.id, m.spec_threshold, m.scale
        ));
    }
    s.push_str(
        "The figure of merit sums each metric divided by its scale, \
         signed positive when maximized and negative when minimized.\n",
    );
    s
}

fn demonstrations_section(demos: &[EvaluationRecord]) -> String {
    debug_assert!(
        demos.windows(2).all(|w| w[0].fom >= w[1].fom),
        "demonstrations must be sorted by FOM descending"
    );
    if demos.is_empty() {
        return "(no demonstrations yet)\n".into();
    }
    let mut s = String::new();
    for (i, d) in demos.iter().enumerate() {
        s.push_str(&format!("Example {} (FOM {}):\n", i + 1, d.fom));
        s.push_str(&format!(
            "Parameter values: {}\n",
            serde_json::to_string(&d.point).expect("point serializes")
        ));
        s.push_str(&format!(
            "Corresponding performance metrics: {}\n",
            serde_json::to_string(&d.metrics).expect("metrics serialize")
        ));
        if i + 1 < demos.len() {
            s.push('\n');
        }
    }
    s
}

fn reuse_section(reuse: &ContextDocument) -> String {
    if reuse.text.is_empty() {
        "(none)\n".into()
    } else {
        reuse.text.clone()
    }
}

/// Prompt asking for `n_points` new design points.
pub fn build_suggestion_prompt(
    spec: &CircuitSpec,
    demos: &[EvaluationRecord],
    reuse: &ContextDocument,
    n_points: usize,
) -> PromptBundle {
    assert!(n_points >= 1);
    let first_param = &spec.params[0].id;
    let plural = if n_points == 1 { "" } else { "s" };
    let instruction = format!(
        "Propose exactly {n_points} new design point{plural} that improve the figure of merit \
         while meeting every objective. Use the reuse context and demonstrations as guidance.\n\
         Respond with a JSON array of exactly {n_points} object{plural}; each object maps every \
         parameter id to a number inside its range, like [{{\"{first_param}\": 1.0, ...}}]. \
         Do not repeat demonstration points.\n"
    );
    PromptBundle {
        system: SYSTEM_PROMPT.into(),
        sections: vec![
            (SectionLabel::Definition, definition_section(spec)),
            (SectionLabel::Objectives, objectives_section(spec)),
            (SectionLabel::Reuse, reuse_section(reuse)),
            (SectionLabel::Demonstrations, demonstrations_section(demos)),
            (SectionLabel::Instruction, instruction),
        ],
    }
}

/// Prompts asking for the three knowledge-record kinds, sharing every
/// section except the instruction.
pub fn build_summary_prompts(spec: &CircuitSpec, demos: &[EvaluationRecord]) -> [PromptBundle; 3] {
    let metric_list = spec
        .metrics
        .iter()
        .map(|m| m.id.as_str())
        .collect::<Vec<_>>()
        .join(", ");
    let sub_list = spec
        .substructure_tags
        .iter()
        .map(|s| s.as_str())
        .collect::<Vec<_>>()
        .join(", ");
    let param_list = spec
        .params
        .iter()
        .map(|p| format!("{} (in {})", p.id, p.substructure))
        .collect::<Vec<_>>()
        .join(", ");

    let instructions = [
        format!(
            "Identify pairs of performance metrics that trade off against each other in this \
             circuit. Metrics: {metric_list}.\n\
             Output one record per line, exactly in this syntax:\n\
             TRADEOFF <metric_a> <metric_b> \"optional note\"\n\
             Output only record lines.\n"
        ),
        format!(
            "For each sub-structure ({sub_list}), state which performance metrics or trade-off \
             pairs it controls. Metrics: {metric_list}.\n\
             Output one record per line, exactly in this syntax:\n\
             ASSOC <substructure> METRIC <metric> \"optional note\"\n\
             ASSOC <substructure> TRADEOFF <metric_a> <metric_b> \"optional note\"\n\
             Output only record lines.\n"
        ),
        format!(
            "For each design parameter, state the direction in which increasing it moves each \
             metric it affects, through its sub-structure. Parameters: {param_list}. \
             Metrics: {metric_list}.\n\
             Output one record per line, exactly in this syntax:\n\
             INFL <param> IN <substructure> ON <metric> DIR <+|-|~> \"optional note\"\n\
             Use ~ when the effect is not monotone. Output only record lines.\n"
        ),
    ];

    instructions.map(|instruction| PromptBundle {
        system: SYSTEM_PROMPT.into(),
        sections: vec![
            (SectionLabel::Definition, definition_section(spec)),
            (SectionLabel::Objectives, objectives_section(spec)),
            (
                SectionLabel::Reuse,
                reuse_section(&ContextDocument { text: String::new() }),
            ),
            (SectionLabel::Demonstrations, demonstrations_section(demos)),
            (SectionLabel::Instruction, instruction),
        ],
    })
}

/// Prompt asking for a reviewed and corrected version of `k`.
pub fn build_critique_prompt(k: &KnowledgeSummary, spec: &CircuitSpec) -> PromptBundle {
    let instruction = format!(
        "The knowledge summary below was generated for circuit {}. Review it against the \
         circuit definition and objectives: correct wrong influence directions, drop records \
         that reference unknown names, add records that are clearly missing, and sharpen notes.\n\
         \n{}\n\
         Respond with the complete corrected summary in the same syntax, starting with the \
         KS/1 header line.\n",
        spec.circuit_id,
        serialize_summary(k)
    );
    PromptBundle {
        system: SYSTEM_PROMPT.into(),
        sections: vec![
            (SectionLabel::Definition, definition_section(spec)),
            (SectionLabel::Objectives, objectives_section(spec)),
            (
                SectionLabel::Reuse,
                reuse_section(&ContextDocument { text: String::new() }),
            ),
            (SectionLabel::Demonstrations, "(not needed for this task)\n".into()),
            (SectionLabel::Instruction, instruction),
        ],
    }
}

// ---------------------------------------------------------------------------
// Response parsing

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdvisorError {
    #[error("advisor unavailable after {attempts} attempts: {last_error}")]
    Unavailable { attempts: u32, last_error: String },
    #[error("no parseable suggestion in advisor response")]
    NoParseableSuggestion,
}

/// A design point recovered from an advisor response.
#[derive(Debug, Clone, PartialEq)]
pub struct Suggestion {
    pub point: DesignPoint,
    /// True when any coordinate was clipped to its bound.
    pub clipped: bool,
}

fn coerce_number(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
    .filter(|x| x.is_finite())
}

fn first_json_array(text: &str) -> Option<Vec<Value>> {
    for (i, b) in text.bytes().enumerate() {
        if b == b'[' {
            let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
            if let Some(Ok(Value::Array(items))) = stream.next() {
                return Some(items);
            }
        }
    }
    None
}

/// Recovers up to `n_expected` in-bounds design points from a raw
/// response: first JSON array of parameter maps wins, entries missing
/// a parameter or holding non-numerics are dropped, out-of-bounds
/// values are clipped and flagged.
pub fn parse_suggestions(
    text: &str,
    spec: &CircuitSpec,
    n_expected: usize,
) -> Result<Vec<Suggestion>, AdvisorError> {
    let items = first_json_array(text).ok_or(AdvisorError::NoParseableSuggestion)?;
    let mut out = Vec::new();
    for item in items {
        let Value::Object(map) = item else { continue };
        let mut values = BTreeMap::new();
        let mut clipped = false;
        let mut complete = true;
        for p in &spec.params {
            match map.get(p.id.as_str()).and_then(coerce_number) {
                Some(raw) => {
                    let v = raw.clamp(p.lo, p.hi);
                    if v != raw {
                        clipped = true;
                    }
                    values.insert(p.id.clone(), v);
                }
                None => {
                    complete = false;
                    break;
                }
            }
        }
        if !complete {
            continue;
        }
        let point = DesignPoint::new(spec, values).expect("clamped values are in bounds");
        out.push(Suggestion { point, clipped });
        if out.len() == n_expected {
            break;
        }
    }
    if out.is_empty() {
        Err(AdvisorError::NoParseableSuggestion)
    } else {
        Ok(out)
    }
}

/// Extracts a KS/1 document embedded in chat text: from the `KS/1`
/// header line through the last consecutive line that belongs to the
/// grammar (directives, comments, blanks).
pub fn extract_ks_document(text: &str) -> Option<String> {
    let mut out = String::new();
    let mut in_doc = false;
    for raw in text.lines() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if !in_doc {
            if line.trim() == "KS/1" {
                in_doc = true;
                out.push_str("KS/1\n");
            }
            continue;
        }
        let t = line.trim_start();
        let first = t.split_whitespace().next().unwrap_or("");
        if t.is_empty()
            || t.starts_with('#')
            || matches!(first, "CIRCUIT" | "TRADEOFF" | "ASSOC" | "INFL")
        {
            out.push_str(line);
            out.push('\n');
        } else {
            break;
        }
    }
    in_doc.then_some(out)
}

// ---------------------------------------------------------------------------
// The advisor wrapper: retries, transcripts, high-level operations

/// Log entry for one advisor call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvisorTranscript {
    pub role: AdvisorRole,
    pub kind: String,
    pub system: String,
    pub user: String,
    pub raw_response: String,
    /// Short description of what parsing made of the response.
    pub parsed: String,
    /// Wall-clock milliseconds since the epoch; excluded from
    /// reproducibility comparisons.
    pub timestamp_ms: u64,
}

/// A summary-producing operation's result: the summary plus anything
/// worth surfacing without failing the run.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryOutcome {
    pub summary: KnowledgeSummary,
    pub warnings: Vec<String>,
    /// Non-empty response lines that were not valid records.
    pub skipped_lines: usize,
}

/// Wraps a chat client with retry, context budgeting, and transcripts.
pub struct Advisor {
    client: Box<dyn ChatClient>,
    config: AdvisorConfig,
    transcripts: Vec<AdvisorTranscript>,
    backoff_base: Duration,
}

impl Advisor {
    pub fn new(client: Box<dyn ChatClient>, config: AdvisorConfig) -> Self {
        debug_assert!(config.validate().is_ok());
        Advisor {
            client,
            config,
            transcripts: Vec::new(),
            backoff_base: Duration::from_secs(1),
        }
    }

    /// Overrides the first retry delay (doubled on each further retry).
    pub fn with_backoff_base(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    pub fn config(&self) -> &AdvisorConfig {
        &self.config
    }

    pub fn transcripts(&self) -> &[AdvisorTranscript] {
        &self.transcripts
    }

    pub fn drain_transcripts(&mut self) -> Vec<AdvisorTranscript> {
        std::mem::take(&mut self.transcripts)
    }

    fn now_ms() -> u64 {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }

    /// Issues one logical call with retries; always appends exactly one
    /// transcript.
    fn call(&mut self, kind: RequestKind, bundle: &PromptBundle) -> Result<String, AdvisorError> {
        let mut fitted = bundle.clone();
        let truncated = fitted.fit_to_window(self.config.context_window);
        let request = ChatRequest {
            kind,
            system: fitted.system.clone(),
            user: fitted.user_text(),
            model: self.config.model_name.clone(),
            temperature: self.config.temperature,
            max_tokens: self.config.max_tokens,
            timeout_s: self.config.timeout_s,
        };
        let mut last_error = String::new();
        for attempt in 0..self.config.max_retries {
            if attempt > 0 {
                std::thread::sleep(self.backoff_base * 2u32.pow(attempt - 1));
            }
            match self.client.complete(&request) {
                Ok(raw) => {
                    self.transcripts.push(AdvisorTranscript {
                        role: self.config.role,
                        kind: kind.label().into(),
                        system: request.system,
                        user: request.user,
                        raw_response: raw.clone(),
                        parsed: if truncated {
                            "ok (context truncated)".into()
                        } else {
                            "ok".into()
                        },
                        timestamp_ms: Self::now_ms(),
                    });
                    return Ok(raw);
                }
                Err(e) => last_error = e,
            }
        }
        self.transcripts.push(AdvisorTranscript {
            role: self.config.role,
            kind: kind.label().into(),
            system: request.system,
            user: request.user,
            raw_response: String::new(),
            parsed: format!("unavailable: {last_error}"),
            timestamp_ms: Self::now_ms(),
        });
        Err(AdvisorError::Unavailable {
            attempts: self.config.max_retries,
            last_error,
        })
    }

    fn note_parsed(&mut self, desc: String) {
        if let Some(t) = self.transcripts.last_mut() {
            t.parsed = desc;
        }
    }

    /// Asks for `n_points` design points.
    pub fn suggest(
        &mut self,
        spec: &CircuitSpec,
        demos: &[EvaluationRecord],
        reuse: &ContextDocument,
        n_points: usize,
    ) -> Result<Vec<Suggestion>, AdvisorError> {
        let bundle = build_suggestion_prompt(spec, demos, reuse, n_points);
        let raw = self.call(RequestKind::Suggest { n_points }, &bundle)?;
        match parse_suggestions(&raw, spec, n_points) {
            Ok(s) => {
                let clipped = s.iter().filter(|x| x.clipped).count();
                self.note_parsed(format!("parsed {} suggestion(s), {clipped} clipped", s.len()));
                Ok(s)
            }
            Err(e) => {
                self.note_parsed(e.to_string());
                Err(e)
            }
        }
    }

    /// Builds a knowledge summary from three record-kind prompts.
    ///
    /// Any valid record in any response counts; duplicates collapse to
    /// the first occurrence. Validation findings become warnings.
    pub fn generate_summary(
        &mut self,
        spec: &CircuitSpec,
        demos: &[EvaluationRecord],
        iteration: u32,
    ) -> Result<SummaryOutcome, AdvisorError> {
        let bundles = build_summary_prompts(spec, demos);
        let kinds = [
            RequestKind::SummaryTradeoffs,
            RequestKind::SummaryAssociations,
            RequestKind::SummaryInfluences,
        ];
        let mut summary = KnowledgeSummary::new(spec.circuit_id.clone());
        summary.iteration = iteration;
        let mut warnings = Vec::new();
        let mut skipped_lines = 0;
        for (kind, bundle) in kinds.into_iter().zip(bundles) {
            let raw = self.call(kind, &bundle)?;
            let mut parsed = 0usize;
            for line in raw.lines() {
                match parse_record_lenient(line) {
                    Some(Record::Tradeoff(t)) => {
                        summary.insert_tradeoff(t);
                        parsed += 1;
                    }
                    Some(Record::Association(a)) => {
                        summary.insert_association(a);
                        parsed += 1;
                    }
                    Some(Record::Influence(i)) => {
                        summary.insert_influence(i);
                        parsed += 1;
                    }
                    None => {
                        if !line.trim().is_empty() {
                            skipped_lines += 1;
                        }
                    }
                }
            }
            self.note_parsed(format!("parsed {parsed} record(s)"));
        }
        if summary.is_empty() {
            warnings.push("no records parsed from summary responses".into());
        }
        for f in validate_summary(&summary, spec).findings {
            warnings.push(format!("{}: {}", f.kind, f.record));
        }
        Ok(SummaryOutcome {
            summary,
            warnings,
            skipped_lines,
        })
    }

    /// One critique pass over a generated summary.
    ///
    /// The result never falls below the input: unavailable advisors,
    /// unparseable responses, mismatched circuit ids, and responses
    /// that would empty a non-empty summary all return the input
    /// unchanged with a warning.
    pub fn critique(&mut self, k: &KnowledgeSummary, spec: &CircuitSpec) -> SummaryOutcome {
        debug_assert_eq!(k.provenance, Provenance::Generated);
        let unchanged = |warning: String| SummaryOutcome {
            summary: k.clone(),
            warnings: vec![warning],
            skipped_lines: 0,
        };
        let bundle = build_critique_prompt(k, spec);
        let raw = match self.call(RequestKind::Critique, &bundle) {
            Ok(r) => r,
            Err(e) => return unchanged(format!("critique skipped: {e}")),
        };
        let Some(doc) = extract_ks_document(&raw) else {
            self.note_parsed("no KS/1 document in critique response".into());
            return unchanged("critique response held no KS/1 document; summary unchanged".into());
        };
        match parse_summary(&doc) {
            Ok(mut refined) if refined.circuit_id == k.circuit_id => {
                if refined.is_empty() && !k.is_empty() {
                    self.note_parsed("critique would empty the summary; rejected".into());
                    return unchanged(
                        "critique returned an empty summary; original kept".into(),
                    );
                }
                refined.provenance = Provenance::Refined;
                refined.iteration = k.iteration;
                self.note_parsed(format!(
                    "refined summary accepted ({} records)",
                    refined.record_count()
                ));
                SummaryOutcome {
                    summary: refined,
                    warnings: Vec::new(),
                    skipped_lines: 0,
                }
            }
            Ok(other) => {
                self.note_parsed("critique summary names a different circuit".into());
                unchanged(format!(
                    "critique summary names circuit {}, expected {}; summary unchanged",
                    other.circuit_id, k.circuit_id
                ))
            }
            Err(e) => {
                self.note_parsed(format!("critique document unparseable: {e}"));
                unchanged(format!("critique document unparseable ({e}); summary unchanged"))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// HTTP client

/// Chat-completion client over HTTP POST. Reads the API key from the
/// `USO_ADVISOR_API_KEY` environment variable at call time; requests
/// carry model, system+user messages, temperature, and max tokens, and
/// the first choice's message content is returned.
pub struct HttpChatClient {
    endpoint: String,
    http: reqwest::blocking::Client,
}

impl HttpChatClient {
    pub fn new(endpoint: impl Into<String>) -> Self {
        HttpChatClient {
            endpoint: endpoint.into(),
            http: reqwest::blocking::Client::new(),
        }
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, String> {
        let payload = serde_json::json!({
            "model": request.model,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.user},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let mut builder = self
            .http
            .post(&self.endpoint)
            .json(&payload)
            .timeout(Duration::from_secs_f64(request.timeout_s));
        if let Ok(key) = std::env::var(API_KEY_ENV) {
            if !key.is_empty() {
                builder = builder.bearer_auth(key);
            }
        }
        let response = builder.send().map_err(|e| e.to_string())?;
        let status = response.status();
        if !status.is_success() {
            return Err(format!("HTTP {status}"));
        }
        let body: Value = response.json().map_err(|e| e.to_string())?;
        body.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| "response missing choices[0].message.content".into())
    }
}

// ---------------------------------------------------------------------------
// Mock client

/// How the mock answers suggestion prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MockPolicy {
    /// Gaussian perturbation (sigma 5% of range) of the best demo, box
    /// center when there is none.
    Perturb,
    /// Like PERTURB, but parameters named by influence records in the
    /// reuse context take a deterministic directional step (10% of
    /// range, scaled per candidate index) toward improving under-spec
    /// metrics instead of noise.
    KnowledgeGuided,
    /// Replays canned responses verbatim, empty string when exhausted.
    FixedScript,
}

const GUIDE_MULTIPLIERS: [f64; 4] = [1.0, 0.5, 1.5, 2.0];

/// Deterministic offline advisor. Responses depend only on the seed,
/// the policy configuration, and the prompt text.
pub struct MockAdvisor {
    seed: u64,
    policy: MockPolicy,
    script: Vec<String>,
    cursor: AtomicUsize,
    summary_records: Option<Vec<Record>>,
    critique_note: Option<String>,
    garbage_critique: bool,
}

impl MockAdvisor {
    pub fn new(seed: u64, policy: MockPolicy) -> Self {
        MockAdvisor {
            seed,
            policy,
            script: Vec::new(),
            cursor: AtomicUsize::new(0),
            summary_records: None,
            critique_note: None,
            garbage_critique: false,
        }
    }

    /// Canned responses for the FIXED_SCRIPT policy, replayed in order.
    pub fn with_script(mut self, script: Vec<String>) -> Self {
        self.script = script;
        self
    }

    /// Fixed records to emit from summary prompts (each prompt gets the
    /// records of its kind) instead of deriving generic ones.
    pub fn with_summary_records(mut self, records: Vec<Record>) -> Self {
        self.summary_records = Some(records);
        self
    }

    /// Makes the critique response attach this note to the first
    /// influence record that lacks one.
    pub fn with_critique_note(mut self, note: impl Into<String>) -> Self {
        self.critique_note = Some(note.into());
        self
    }

    /// Makes critique responses contain no KS/1 document at all.
    pub fn with_garbage_critique(mut self) -> Self {
        self.garbage_critique = true;
        self
    }

    fn suggest_response(&self, n_points: usize, user: &str) -> String {
        let facts = PromptFacts::parse(user);
        if facts.params.is_empty() {
            return "The prompt lists no parameters, so no suggestion can be made.".into();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ stable_hash(user));
        let mut points: Vec<BTreeMap<String, f64>> = Vec::with_capacity(n_points);
        for i in 0..n_points {
            let mut point = BTreeMap::new();
            for (id, lo, hi) in &facts.params {
                let range = hi - lo;
                let base = facts
                    .best_params
                    .as_ref()
                    .and_then(|m| m.get(id).copied())
                    .unwrap_or(lo + 0.5 * range);
                let guided_sign = match self.policy {
                    MockPolicy::KnowledgeGuided => facts.improvement_sign(id),
                    _ => None,
                };
                let value = match guided_sign {
                    Some(sign) => base + sign * 0.10 * range * GUIDE_MULTIPLIERS[i % 4],
                    None => {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        base + 0.05 * range * z
                    }
                };
                point.insert(id.clone(), value.clamp(*lo, *hi));
            }
            points.push(point);
        }
        format!(
            "Considering the objectives and the provided context, here are {} candidate design \
             point(s):\n{}\nEach point nudges the under-specified metrics in a helpful direction.",
            n_points,
            serde_json::to_string(&points).expect("plain map serializes")
        )
    }

    fn summary_response(&self, kind: RequestKind, user: &str) -> String {
        let mut lines = Vec::new();
        if let Some(records) = &self.summary_records {
            for r in records {
                let matches = matches!(
                    (kind, r),
                    (RequestKind::SummaryTradeoffs, Record::Tradeoff(_))
                        | (RequestKind::SummaryAssociations, Record::Association(_))
                        | (RequestKind::SummaryInfluences, Record::Influence(_))
                );
                if matches {
                    lines.push(serialize_record(r));
                }
            }
        } else {
            let facts = PromptFacts::parse(user);
            match kind {
                RequestKind::SummaryTradeoffs => {
                    if facts.objectives.len() >= 2 {
                        lines.push(format!(
                            "TRADEOFF {} {}",
                            facts.objectives[0].0, facts.objectives[1].0
                        ));
                    }
                }
                RequestKind::SummaryAssociations => {
                    if let Some((m, _, _)) = facts.objectives.first() {
                        let mut seen = Vec::new();
                        for (id, _, _) in &facts.params {
                            if let Some(sub) = facts.subs_by_param.get(id) {
                                if !seen.contains(sub) {
                                    seen.push(sub.clone());
                                    lines.push(format!("ASSOC {sub} METRIC {m}"));
                                }
                            }
                        }
                    }
                }
                RequestKind::SummaryInfluences => {
                    if let Some((m, _, _)) = facts.objectives.first() {
                        for (id, _, _) in &facts.params {
                            if let Some(sub) = facts.subs_by_param.get(id) {
                                lines.push(format!("INFL {id} IN {sub} ON {m} DIR +"));
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        format!(
            "Based on the circuit context, the records are:\n{}\nThat covers the requested kind.",
            lines.join("\n")
        )
    }

    fn critique_response(&self, user: &str) -> String {
        if self.garbage_critique {
            return "I am unable to review this summary in a structured way, sorry.".into();
        }
        let Some(doc) = extract_ks_document(user) else {
            return "No summary found in the request.".into();
        };
        let refined = match (&self.critique_note, parse_summary(&doc)) {
            (Some(note), Ok(k)) => {
                let mut out = KnowledgeSummary::new(k.circuit_id.clone());
                for t in k.tradeoffs() {
                    out.insert_tradeoff(t.clone());
                }
                for a in k.associations() {
                    out.insert_association(a.clone());
                }
                let mut noted = false;
                for i in k.influences() {
                    let mut rec = i.clone();
                    if !noted && rec.note.is_empty() {
                        rec.note = note.clone();
                        noted = true;
                    }
                    out.insert_influence(rec);
                }
                serialize_summary(&out)
            }
            _ => doc,
        };
        format!(
            "I reviewed the summary; here is the corrected version:\n\n{refined}\nThe records \
             are consistent with the provided definition."
        )
    }
}

impl ChatClient for MockAdvisor {
    fn complete(&self, request: &ChatRequest) -> Result<String, String> {
        if self.policy == MockPolicy::FixedScript {
            let i = self.cursor.fetch_add(1, Ordering::SeqCst);
            return Ok(self.script.get(i).cloned().unwrap_or_default());
        }
        Ok(match request.kind {
            RequestKind::Suggest { n_points } => self.suggest_response(n_points, &request.user),
            RequestKind::Critique => self.critique_response(&request.user),
            kind => self.summary_response(kind, &request.user),
        })
    }
}

/// Everything the mock gleans from a prompt's machine-readable lines.
struct PromptFacts {
    /// (id, lo, hi) in prompt order.
    params: Vec<(String, f64, f64)>,
    subs_by_param: BTreeMap<String, String>,
    /// (id, maximize, threshold) in prompt order.
    objectives: Vec<(String, bool, f64)>,
    best_params: Option<BTreeMap<String, f64>>,
    best_metrics: Option<BTreeMap<String, f64>>,
    /// (param, metric, direction sign) from reuse-context INFL lines,
    /// monotone directions only, in document order.
    influences: Vec<(String, String, f64)>,
}

impl PromptFacts {
    fn parse(user: &str) -> Self {
        let mut facts = PromptFacts {
            params: Vec::new(),
            subs_by_param: BTreeMap::new(),
            objectives: Vec::new(),
            best_params: None,
            best_metrics: None,
            influences: Vec::new(),
        };
        for line in user.lines() {
            let tokens: Vec<&str> = line.split_whitespace().collect();
            match tokens.first().copied() {
                Some("PARAM") if tokens.len() == 9 => {
                    if let (Ok(lo), Ok(hi)) = (tokens[3].parse(), tokens[4].parse()) {
                        facts.params.push((tokens[1].to_string(), lo, hi));
                        facts
                            .subs_by_param
                            .insert(tokens[1].to_string(), tokens[8].to_string());
                    }
                }
                Some("OBJECTIVE") if tokens.len() == 7 => {
                    if let Ok(threshold) = tokens[4].parse() {
                        facts.objectives.push((
                            tokens[1].to_string(),
                            tokens[2] == "MAXIMIZE",
                            threshold,
                        ));
                    }
                }
                Some("INFL") => {
                    if let Some(Record::Influence(i)) = parse_record_lenient(line) {
                        let sign = match i.direction {
                            InfluenceDirection::Positive => 1.0,
                            InfluenceDirection::Negative => -1.0,
                            InfluenceDirection::Nonmonotonic => continue,
                        };
                        facts
                            .influences
                            .push((i.param.to_string(), i.metric.to_string(), sign));
                    }
                }
                _ => {
                    if facts.best_params.is_none() {
                        if let Some(json) = line.strip_prefix("Parameter values: ") {
                            facts.best_params = serde_json::from_str(json).ok();
                        }
                    }
                    if facts.best_metrics.is_none() {
                        if let Some(json) =
                            line.strip_prefix("Corresponding performance metrics: ")
                        {
                            facts.best_metrics = serde_json::from_str(json).ok();
                        }
                    }
                }
            }
        }
        facts
    }

    /// True when the named objective is not yet met by the best demo
    /// (missing data counts as unmet).
    fn objective_unmet(&self, (_, maximize, threshold): &(String, bool, f64), value: Option<f64>) -> bool {
        match value {
            None => true,
            Some(v) => {
                if *maximize {
                    v < *threshold
                } else {
                    v > *threshold
                }
            }
        }
    }

    /// The parameter-step sign that would improve some unmet metric,
    /// from the first applicable influence record; None when no record
    /// names this parameter.
    fn improvement_sign(&self, param: &str) -> Option<f64> {
        for (p, metric, dir_sign) in &self.influences {
            if p != param {
                continue;
            }
            let Some(obj) = self.objectives.iter().find(|(m, _, _)| m == metric) else {
                continue;
            };
            let value = self
                .best_metrics
                .as_ref()
                .and_then(|m| m.get(metric).copied());
            if !self.objective_unmet(obj, value) {
                continue;
            }
            let improve = if obj.1 { 1.0 } else { -1.0 };
            return Some(dir_sign * improve);
        }
        None
    }
}

fn stable_hash(s: &str) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    s.hash(&mut h);
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::buffer::{compute_fom, Source};
    use crate::circuit::MetricId;
    use crate::evaluator::{toy_circuit_family, ToyVariant};
    use crate::knowledge::{assemble_reuse_context, select_related, LibraryEntry};

    fn toy_spec() -> CircuitSpec {
        toy_circuit_family(0, ToyVariant::Source).spec().clone()
    }

    fn demo(spec: &CircuitSpec, unit: f64, iteration: u32) -> EvaluationRecord {
        let circuit = toy_circuit_family(0, ToyVariant::Source);
        let point = DesignPoint::from_unit(spec, &vec![unit; spec.dim()]).unwrap();
        let metrics = circuit.metrics_at(&point).unwrap();
        let fom = compute_fom(spec, &metrics).unwrap();
        EvaluationRecord {
            point,
            metrics,
            fom,
            iteration,
            source: Source::Init,
            valid: true,
        }
    }

    fn sorted_demos(spec: &CircuitSpec) -> Vec<EvaluationRecord> {
        let mut demos = vec![
            demo(spec, 0.3, 0),
            demo(spec, 0.5, 1),
            demo(spec, 0.7, 2),
        ];
        demos.sort_by(|a, b| b.fom.partial_cmp(&a.fom).unwrap());
        demos
    }

    fn empty_reuse() -> ContextDocument {
        ContextDocument { text: String::new() }
    }

    fn section<'a>(bundle: &'a PromptBundle, label: SectionLabel) -> &'a str {
        &bundle
            .sections
            .iter()
            .find(|(l, _)| *l == label)
            .expect("section present")
            .1
    }

    #[test]
    fn suggestion_prompts_differ_only_in_instruction_across_n_points() {
        let spec = toy_spec();
        let demos = sorted_demos(&spec);
        let a = build_suggestion_prompt(&spec, &demos, &empty_reuse(), 1);
        let b = build_suggestion_prompt(&spec, &demos, &empty_reuse(), 4);
        assert_eq!(a.system, b.system);
        for label in [
            SectionLabel::Definition,
            SectionLabel::Objectives,
            SectionLabel::Reuse,
            SectionLabel::Demonstrations,
        ] {
            assert_eq!(section(&a, label), section(&b, label));
        }
        assert_ne!(
            section(&a, SectionLabel::Instruction),
            section(&b, SectionLabel::Instruction)
        );
        let again = build_suggestion_prompt(&spec, &demos, &empty_reuse(), 1);
        assert_eq!(a, again, "prompt text is deterministic");
    }

    #[test]
    fn empty_demos_are_marked_and_three_demos_render_descending() {
        let spec = toy_spec();
        let none = build_suggestion_prompt(&spec, &[], &empty_reuse(), 1);
        assert!(section(&none, SectionLabel::Demonstrations).contains("(no demonstrations yet)"));

        let demos = sorted_demos(&spec);
        let three = build_suggestion_prompt(&spec, &demos, &empty_reuse(), 1);
        let text = section(&three, SectionLabel::Demonstrations);
        assert_eq!(text.matches("Parameter values: ").count(), 3);
        assert_eq!(
            text.matches("Corresponding performance metrics: ").count(),
            3
        );
        let foms: Vec<f64> = demos.iter().map(|d| d.fom).collect();
        let p1 = text.find(&format!("FOM {}", foms[0])).unwrap();
        let p2 = text.find(&format!("FOM {}", foms[1])).unwrap();
        assert!(p1 < p2);
    }

    #[test]
    fn summary_prompts_share_context_and_enumerate_names() {
        let spec = toy_spec();
        let demos = sorted_demos(&spec);
        let [p1, p2, p3] = build_summary_prompts(&spec, &demos);
        for label in [
            SectionLabel::Definition,
            SectionLabel::Objectives,
            SectionLabel::Demonstrations,
        ] {
            assert_eq!(section(&p1, label), section(&p2, label));
            assert_eq!(section(&p2, label), section(&p3, label));
        }
        let i1 = section(&p1, SectionLabel::Instruction);
        assert!(i1.contains("gain") && i1.contains("ugf") && i1.contains("iq"));
        let i2 = section(&p2, SectionLabel::Instruction);
        assert!(i2.contains("diffpair") && i2.contains("out_stage"));
        let i3 = section(&p3, SectionLabel::Instruction);
        assert!(i3.contains("dp_w1") && i3.contains("os_rl"));
        assert_ne!(i1, i2);
        assert_ne!(i2, i3);
    }

    #[test]
    fn parse_suggestions_accepts_clean_arrays() {
        let spec = toy_spec();
        let mut maps = Vec::new();
        for i in 0..4 {
            let point = DesignPoint::from_unit(&spec, &vec![0.2 + 0.1 * i as f64; spec.dim()])
                .unwrap();
            maps.push(point);
        }
        let text = format!(
            "Sure! Here are the points:\n{}\nGood luck.",
            serde_json::to_string(&maps).unwrap()
        );
        let out = parse_suggestions(&text, &spec, 4).unwrap();
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|s| !s.clipped));
    }

    #[test]
    fn parse_suggestions_clips_and_flags() {
        let spec = toy_spec();
        let p = spec.params[0].clone();
        let mut map = serde_json::Map::new();
        for q in &spec.params {
            map.insert(q.id.to_string(), serde_json::json!(q.lo));
        }
        map.insert(p.id.to_string(), serde_json::json!(p.hi * 1.1));
        let text = format!("[{}]", serde_json::to_string(&map).unwrap());
        let out = parse_suggestions(&text, &spec, 1).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0].clipped);
        assert_eq!(out[0].point.get(&p.id).unwrap(), p.hi);
    }

    #[test]
    fn parse_suggestions_handles_prose_strings_and_garbage() {
        let spec = toy_spec();
        assert_eq!(
            parse_suggestions("thinking about it, no JSON here [not json]", &spec, 1),
            Err(AdvisorError::NoParseableSuggestion)
        );

        // Numeric strings coerce; an entry missing a parameter drops;
        // extra keys are ignored.
        let good: BTreeMap<String, String> = spec
            .params
            .iter()
            .map(|p| (p.id.to_string(), format!("{}", (p.lo + p.hi) / 2.0)))
            .collect();
        let text = format!(
            "candidates [1] then [{}, {{\"dp_w1\": 1.0, \"bogus\": 2.0}}]",
            serde_json::to_string(&good).unwrap().replace('}', ", \"extra\": 99}")
        );
        let out = parse_suggestions(&text, &spec, 5);
        // The first array "[1]" parses but holds no object, so it wins
        // the first-array rule and yields nothing.
        assert_eq!(out, Err(AdvisorError::NoParseableSuggestion));

        let text2 = format!(
            "candidates [{}, {{\"dp_w1\": 1.0}}]",
            serde_json::to_string(&good).unwrap()
        );
        let out2 = parse_suggestions(&text2, &spec, 5).unwrap();
        assert_eq!(out2.len(), 1, "malformed second entry dropped");
    }

    #[test]
    fn parse_suggestions_never_returns_out_of_bounds() {
        use rand::Rng;
        let spec = toy_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let mut maps = Vec::new();
            for _ in 0..3 {
                let mut m = serde_json::Map::new();
                for p in &spec.params {
                    let wild = rng.gen_range(-3.0..3.0) * (p.hi - p.lo) + p.lo;
                    m.insert(p.id.to_string(), serde_json::json!(wild));
                }
                maps.push(Value::Object(m));
            }
            let text = serde_json::to_string(&maps).unwrap();
            if let Ok(out) = parse_suggestions(&text, &spec, 3) {
                for s in out {
                    for p in &spec.params {
                        let v = s.point.get(&p.id).unwrap();
                        assert!(v >= p.lo && v <= p.hi);
                    }
                }
            }
        }
    }

    #[test]
    fn window_fitting_cuts_reuse_before_demos() {
        let spec = toy_spec();
        let demos = sorted_demos(&spec);
        let reuse = ContextDocument {
            text: "R".repeat(40_000),
        };
        let mut bundle = build_suggestion_prompt(&spec, &demos, &reuse, 1);
        let demos_before = section(&bundle, SectionLabel::Demonstrations).to_string();
        assert!(bundle.estimated_tokens() > 4000);
        assert!(bundle.fit_to_window(4000));
        assert!(bundle.estimated_tokens() <= 4000);
        assert!(section(&bundle, SectionLabel::Reuse).contains("[truncated]"));
        assert_eq!(section(&bundle, SectionLabel::Demonstrations), demos_before);

        // A window small enough to exhaust the reuse section reaches
        // into demonstrations too.
        let mut tiny = build_suggestion_prompt(&spec, &demos, &reuse, 1);
        assert!(tiny.fit_to_window(400));
        assert!(section(&tiny, SectionLabel::Demonstrations).contains("[truncated]"));
        // Instruction stays whole either way.
        assert!(!section(&tiny, SectionLabel::Instruction).contains("[truncated]"));
    }

    #[test]
    fn mock_is_deterministic_per_seed_and_prompt() {
        let spec = toy_spec();
        let demos = sorted_demos(&spec);
        let bundle = build_suggestion_prompt(&spec, &demos, &empty_reuse(), 2);
        let request = ChatRequest {
            kind: RequestKind::Suggest { n_points: 2 },
            system: bundle.system.clone(),
            user: bundle.user_text(),
            model: "working".into(),
            temperature: 0.5,
            max_tokens: 1000,
            timeout_s: 5.0,
        };
        let a = MockAdvisor::new(7, MockPolicy::Perturb).complete(&request).unwrap();
        let b = MockAdvisor::new(7, MockPolicy::Perturb).complete(&request).unwrap();
        let c = MockAdvisor::new(8, MockPolicy::Perturb).complete(&request).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);

        let mut other = request.clone();
        other.user.push_str("nudge");
        let d = MockAdvisor::new(7, MockPolicy::Perturb).complete(&other).unwrap();
        assert_ne!(a, d, "different prompt, different draws");
    }

    #[test]
    fn perturb_mock_centers_on_box_center_without_demos() {
        let spec = toy_spec();
        let mut advisor = Advisor::new(
            Box::new(MockAdvisor::new(1, MockPolicy::Perturb)),
            AdvisorConfig::working_default(),
        );
        let out = advisor.suggest(&spec, &[], &empty_reuse(), 3).unwrap();
        assert_eq!(out.len(), 3);
        for s in &out {
            for p in &spec.params {
                let v = s.point.get(&p.id).unwrap();
                let center = (p.lo + p.hi) / 2.0;
                let sigma = 0.05 * (p.hi - p.lo);
                assert!(
                    (v - center).abs() <= 5.0 * sigma,
                    "{}: {v} too far from center {center}",
                    p.id
                );
            }
        }
    }

    fn reuse_with_source_knowledge() -> (CircuitSpec, ContextDocument) {
        let source = toy_circuit_family(0, ToyVariant::Source);
        let target = toy_circuit_family(0, ToyVariant::Target);
        let library = vec![LibraryEntry {
            spec: source.spec().clone(),
            summary: source.ground_truth_summary(),
        }];
        let related = select_related(target.spec(), &library, None);
        assert_eq!(related.len(), 1, "shared diffpair tag links the circuits");
        let netlists: BTreeMap<_, _> = [(
            source.spec().circuit_id.clone(),
            source.spec().netlist_text.clone(),
        )]
        .into();
        let reuse = assemble_reuse_context(target.spec(), &related, &netlists).unwrap();
        (target.spec().clone(), reuse)
    }

    #[test]
    fn knowledge_guided_mock_moves_influenced_params_directionally() {
        let (spec, reuse) = reuse_with_source_knowledge();
        let target = toy_circuit_family(0, ToyVariant::Target);

        // A mediocre demo: gain under spec, so positive-influence
        // diffpair widths must step strictly up from it.
        let point = DesignPoint::from_unit(&spec, &vec![0.3; spec.dim()]).unwrap();
        let metrics = target.metrics_at(&point).unwrap();
        let fom = compute_fom(&spec, &metrics).unwrap();
        let gain = MetricId::new("gain").unwrap();
        assert!(!spec.metric(&gain).unwrap().satisfied_by(metrics[&gain]));
        let demos = vec![EvaluationRecord {
            point: point.clone(),
            metrics,
            fom,
            iteration: 0,
            source: Source::Init,
            valid: true,
        }];

        let mut advisor = Advisor::new(
            Box::new(MockAdvisor::new(5, MockPolicy::KnowledgeGuided)),
            AdvisorConfig::working_default(),
        );
        let out = advisor.suggest(&spec, &demos, &reuse, 4).unwrap();
        assert_eq!(out.len(), 4);
        let w1 = crate::circuit::ParamId::new("dp_w1").unwrap();
        let base = point.get(&w1).unwrap();
        let mut steps = Vec::new();
        for s in &out {
            let v = s.point.get(&w1).unwrap();
            assert!(v > base, "influenced width must step strictly up");
            steps.push(v - base);
        }
        // Per-candidate multipliers make the four candidates distinct.
        steps.sort_by(|a, b| a.partial_cmp(b).unwrap());
        steps.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        assert_eq!(steps.len(), 4);
    }

    #[test]
    fn fixed_script_replays_and_exhausts_to_empty() {
        let mock = MockAdvisor::new(0, MockPolicy::FixedScript)
            .with_script(vec!["first".into(), "second".into()]);
        let request = ChatRequest {
            kind: RequestKind::Suggest { n_points: 1 },
            system: String::new(),
            user: "anything".into(),
            model: String::new(),
            temperature: 0.0,
            max_tokens: 1,
            timeout_s: 1.0,
        };
        assert_eq!(mock.complete(&request).unwrap(), "first");
        assert_eq!(mock.complete(&request).unwrap(), "second");
        assert_eq!(mock.complete(&request).unwrap(), "");
    }

    #[test]
    fn generated_summaries_round_trip_and_validate() {
        let spec = toy_spec();
        let demos = sorted_demos(&spec);
        let mut advisor = Advisor::new(
            Box::new(MockAdvisor::new(2, MockPolicy::Perturb)),
            AdvisorConfig::working_default(),
        );
        let out = advisor.generate_summary(&spec, &demos, 4).unwrap();
        assert!(!out.summary.is_empty());
        assert_eq!(out.summary.provenance, Provenance::Generated);
        assert_eq!(out.summary.iteration, 4);
        assert!(out.warnings.is_empty(), "{:?}", out.warnings);
        let reparsed = parse_summary(&serialize_summary(&out.summary)).unwrap();
        assert!(reparsed.same_content(&out.summary));
        assert_eq!(advisor.transcripts().len(), 3);
    }

    #[test]
    fn summary_generation_merges_dedups_and_warns() {
        let spec = toy_spec();
        // Scripted responses: duplicates across responses, prose lines
        // to skip, and a record naming an unknown metric (a validation
        // warning, not an error).
        let script = vec![
            "here you go\nTRADEOFF gain iq\nTRADEOFF iq gain \"dup, reversed\"\nnot a record".into(),
            "ASSOC diffpair METRIC gain\nASSOC diffpair METRIC gain\n".into(),
            "INFL dp_w1 IN diffpair ON notametric DIR +\nINFL dp_w1 IN diffpair ON gain DIR +".into(),
        ];
        let mut advisor = Advisor::new(
            Box::new(MockAdvisor::new(0, MockPolicy::FixedScript).with_script(script)),
            AdvisorConfig::working_default(),
        );
        let out = advisor.generate_summary(&spec, &[], 1).unwrap();
        assert_eq!(out.summary.tradeoffs().len(), 1, "reversed pair deduped");
        assert_eq!(out.summary.associations().len(), 1);
        assert_eq!(out.summary.influences().len(), 2);
        assert_eq!(out.skipped_lines, 2, "prose lines counted");
        assert!(
            out.warnings.iter().any(|w| w.contains("notametric")),
            "{:?}",
            out.warnings
        );
    }

    #[test]
    fn zero_record_responses_degrade_to_empty_summary_with_warning() {
        let spec = toy_spec();
        let script = vec!["nothing".into(), "useful".into(), "here".into()];
        let mut advisor = Advisor::new(
            Box::new(MockAdvisor::new(0, MockPolicy::FixedScript).with_script(script)),
            AdvisorConfig::working_default(),
        );
        let out = advisor.generate_summary(&spec, &[], 0).unwrap();
        assert!(out.summary.is_empty());
        assert!(out.warnings.iter().any(|w| w.contains("no records")));
    }

    fn generated_summary(spec: &CircuitSpec) -> KnowledgeSummary {
        let mut advisor = Advisor::new(
            Box::new(MockAdvisor::new(2, MockPolicy::Perturb)),
            AdvisorConfig::working_default(),
        );
        advisor.generate_summary(spec, &[], 3).unwrap().summary
    }

    #[test]
    fn identity_critique_refines_without_changing_content() {
        let spec = toy_spec();
        let k = generated_summary(&spec);
        let mut critic = Advisor::new(
            Box::new(MockAdvisor::new(0, MockPolicy::Perturb)),
            AdvisorConfig::critique_default(),
        );
        let out = critic.critique(&k, &spec);
        assert!(out.warnings.is_empty());
        assert_eq!(out.summary.provenance, Provenance::Refined);
        assert_eq!(out.summary.iteration, k.iteration);
        assert!(out.summary.same_content(&k));
        assert_eq!(critic.transcripts().len(), 1);
    }

    #[test]
    fn critique_note_adds_exactly_one_note() {
        let spec = toy_spec();
        let k = generated_summary(&spec);
        let notes_before = k.influences().iter().filter(|i| !i.note.is_empty()).count();
        let mut critic = Advisor::new(
            Box::new(
                MockAdvisor::new(0, MockPolicy::Perturb)
                    .with_critique_note("watch the bias current"),
            ),
            AdvisorConfig::critique_default(),
        );
        let out = critic.critique(&k, &spec);
        let notes_after = out
            .summary
            .influences()
            .iter()
            .filter(|i| !i.note.is_empty())
            .count();
        assert_eq!(out.summary.provenance, Provenance::Refined);
        assert_eq!(notes_after, notes_before + 1);
        assert_eq!(out.summary.record_count(), k.record_count());
    }

    #[test]
    fn unparseable_critique_keeps_the_input() {
        let spec = toy_spec();
        let k = generated_summary(&spec);
        let mut critic = Advisor::new(
            Box::new(MockAdvisor::new(0, MockPolicy::Perturb).with_garbage_critique()),
            AdvisorConfig::critique_default(),
        );
        let out = critic.critique(&k, &spec);
        assert_eq!(out.summary, k, "unchanged, provenance still GENERATED");
        assert!(!out.warnings.is_empty());
    }

    #[test]
    fn emptying_critique_is_rejected() {
        let spec = toy_spec();
        let k = generated_summary(&spec);
        assert!(!k.is_empty());
        let script = vec![format!(
            "Corrected:\nKS/1\nCIRCUIT {}\nDone.",
            spec.circuit_id
        )];
        let mut critic = Advisor::new(
            Box::new(MockAdvisor::new(0, MockPolicy::FixedScript).with_script(script)),
            AdvisorConfig::critique_default(),
        );
        let out = critic.critique(&k, &spec);
        assert_eq!(out.summary, k);
        assert!(out.warnings.iter().any(|w| w.contains("empty")));
    }

    struct FlakyClient {
        failures: AtomicUsize,
        inner: MockAdvisor,
    }

    impl ChatClient for FlakyClient {
        fn complete(&self, request: &ChatRequest) -> Result<String, String> {
            if self.failures.load(Ordering::SeqCst) > 0 {
                self.failures.fetch_sub(1, Ordering::SeqCst);
                return Err("connection reset".into());
            }
            self.inner.complete(request)
        }
    }

    #[test]
    fn retries_recover_from_transient_failures() {
        let spec = toy_spec();
        let client = FlakyClient {
            failures: AtomicUsize::new(2),
            inner: MockAdvisor::new(1, MockPolicy::Perturb),
        };
        let mut advisor = Advisor::new(Box::new(client), AdvisorConfig::working_default())
            .with_backoff_base(Duration::from_millis(1));
        let out = advisor.suggest(&spec, &[], &empty_reuse(), 1);
        assert!(out.is_ok());
        assert_eq!(advisor.transcripts().len(), 1, "one transcript per call");
    }

    struct DeadClient;

    impl ChatClient for DeadClient {
        fn complete(&self, _request: &ChatRequest) -> Result<String, String> {
            Err("no route to host".into())
        }
    }

    #[test]
    fn exhausted_retries_report_unavailable_with_backoff() {
        let spec = toy_spec();
        let base = Duration::from_millis(5);
        let mut advisor = Advisor::new(Box::new(DeadClient), AdvisorConfig::working_default())
            .with_backoff_base(base);
        let start = std::time::Instant::now();
        let out = advisor.suggest(&spec, &[], &empty_reuse(), 1);
        let elapsed = start.elapsed();
        assert_eq!(
            out,
            Err(AdvisorError::Unavailable {
                attempts: 3,
                last_error: "no route to host".into()
            })
        );
        assert!(elapsed >= base * 3, "1x + 2x backoff slept: {elapsed:?}");
        assert_eq!(advisor.transcripts().len(), 1);
        assert!(advisor.transcripts()[0].parsed.contains("unavailable"));
    }

    #[test]
    fn http_client_speaks_the_wire_protocol() {
        use std::io::{Read, Write};
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = Vec::new();
            let mut tmp = [0u8; 4096];
            loop {
                let n = stream.read(&mut tmp).unwrap();
                buf.extend_from_slice(&tmp[..n]);
                let text = String::from_utf8_lossy(&buf);
                if let Some(header_end) = text.find("\r\n\r\n") {
                    let content_length: usize = text
                        .lines()
                        .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:")
                            .map(|v| v.trim().parse().unwrap()))
                        .unwrap_or(0);
                    if buf.len() >= header_end + 4 + content_length {
                        break;
                    }
                }
            }
            let request_text = String::from_utf8_lossy(&buf).to_string();
            let body = serde_json::json!({
                "choices": [{"message": {"role": "assistant", "content": "mocked reply"}}]
            })
            .to_string();
            let response = format!(
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                body.len(),
                body
            );
            stream.write_all(response.as_bytes()).unwrap();
            request_text
        });

        std::env::set_var(API_KEY_ENV, "test-key-123");
        let client = HttpChatClient::new(format!("http://{addr}/v1/chat/completions"));
        let request = ChatRequest {
            kind: RequestKind::Suggest { n_points: 1 },
            system: "sys".into(),
            user: "hello".into(),
            model: "some-model".into(),
            temperature: 0.5,
            max_tokens: 16,
            timeout_s: 5.0,
        };
        let reply = client.complete(&request).unwrap();
        std::env::remove_var(API_KEY_ENV);
        assert_eq!(reply, "mocked reply");

        let seen = server.join().unwrap();
        assert!(seen.contains("\"model\":\"some-model\""));
        assert!(seen.contains("\"temperature\":0.5"));
        assert!(seen.contains("authorization: Bearer test-key-123")
            || seen.contains("Authorization: Bearer test-key-123"));
        assert!(seen.contains("hello"));
    }

    #[test]
    fn ks_document_extraction_brackets_the_grammar() {
        let text = "Sure, here is the summary:\n\nKS/1\nCIRCUIT amp\nTRADEOFF gain iq\n# done\n\nHope that helps!";
        let doc = extract_ks_document(text).unwrap();
        assert_eq!(doc, "KS/1\nCIRCUIT amp\nTRADEOFF gain iq\n# done\n\n");
        assert!(parse_summary(&doc).is_ok());
        assert_eq!(extract_ks_document("no document here"), None);
    }
}
