//! The optimization loop: initialization, per-iteration proposal and
//! evaluation, knowledge-summary maintenance, and artifact export.
//!
//! Four modes share one loop skeleton. Every mode evaluates exactly two
//! points per iteration: one from the surrogate's expected-improvement
//! search, one from a mode-specific second slot (a second surrogate
//! point, a single advisor suggestion, or the best-of-four advisor
//! suggestion under UCB ranking). The evaluation budget is exact and
//! asserted: `init_points + 2 * iterations` records, no more, no less.
//!
//! Determinism contract: with a deterministic evaluator and mock
//! advisors, a fixed seed reproduces the buffer and summary byte for
//! byte. All derived randomness flows from `ExperimentConfig::seed`
//! through named streams, so adding a consumer never shifts another's
//! draws.

use std::collections::BTreeMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::{propose_bo_point, rank_by_ucb, AcquisitionConfig};
use crate::advisor::{Advisor, AdvisorConfig, AdvisorError, AdvisorTranscript, ChatClient};
use crate::buffer::{compute_fom, meets_all_specs, Buffer, EvaluationRecord, Source};
use crate::circuit::{CircuitSpec, DesignPoint, Ident};
use crate::evaluator::{EvaluationOutcome, Evaluator};
use crate::knowledge::{
    assemble_reuse_context, select_related, serialize_summary, ContextDocument, ContextError,
    KnowledgeSummary, LibraryEntry,
};
use crate::sampling::latin_hypercube;
use crate::surrogate::{GpError, GpModel};

/// Which proposal strategy fills the per-iteration advisor slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    /// Surrogate only: both points per step come from EI search.
    Bo,
    /// One advisor suggestion per step, used directly; no knowledge
    /// summaries, no reuse context.
    Hybrid,
    /// Advisor with reuse context; knowledge summary regenerated each
    /// iteration and critiqued once at the end.
    UsoR,
    /// Like [`Mode::UsoR`], but the advisor returns four candidates and
    /// the UCB-best one is evaluated.
    UsoC,
}

impl Mode {
    pub fn label(self) -> &'static str {
        match self {
            Mode::Bo => "BO",
            Mode::Hybrid => "HYBRID",
            Mode::UsoR => "USO_R",
            Mode::UsoC => "USO_C",
        }
    }

    /// Advisor suggestions requested per iteration.
    pub fn suggestions_per_step(self) -> usize {
        match self {
            Mode::Bo => 0,
            Mode::Hybrid | Mode::UsoR => 1,
            Mode::UsoC => 4,
        }
    }

    pub fn uses_advisor(self) -> bool {
        self != Mode::Bo
    }

    /// True for the modes that maintain a knowledge summary (regenerate
    /// per iteration, critique once post-loop).
    pub fn maintains_summary(self) -> bool {
        matches!(self, Mode::UsoR | Mode::UsoC)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "bo" => Ok(Mode::Bo),
            "hybrid" => Ok(Mode::Hybrid),
            "uso_r" | "usor" => Ok(Mode::UsoR),
            "uso_c" | "usoc" => Ok(Mode::UsoC),
            other => Err(format!(
                "unknown mode {other:?}; expected bo, hybrid, uso_r, or uso_c"
            )),
        }
    }
}

/// Everything one run needs besides the evaluator and chat clients.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub spec: CircuitSpec,
    pub mode: Mode,
    /// Initialization batch size.
    pub init_points: usize,
    /// Loop iterations after initialization.
    pub iterations: usize,
    /// Evaluations per iteration; structurally 2 (one surrogate point
    /// plus one second-slot point).
    pub evals_per_step: usize,
    /// How many top buffer records are shown to the advisor.
    pub demos_k: usize,
    /// UCB exploration weight for candidate ranking.
    pub kappa: f64,
    pub seed: u64,
    pub working: AdvisorConfig,
    pub critique: AdvisorConfig,
    /// Related-circuit library for reuse context; consulted only by the
    /// summary-maintaining modes.
    pub reuse_library: Vec<LibraryEntry>,
    /// When set, exactly these library circuits form the reuse context,
    /// overriding the shared-substructure rule.
    pub reuse_overrides: Option<Vec<Ident>>,
    /// BO mode only: draw the initialization batch from the advisor
    /// instead of Latin-hypercube sampling.
    pub advisor_init_for_bo: bool,
    /// Merge newly generated summary records into the previous summary
    /// instead of replacing it.
    pub accumulate_summary: bool,
    /// Where run artifacts are written; in-memory only when absent.
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(spec: CircuitSpec, mode: Mode) -> Self {
        ExperimentConfig {
            spec,
            mode,
            init_points: 5,
            iterations: 20,
            evals_per_step: 2,
            demos_k: 3,
            kappa: 1.0,
            seed: 0,
            working: AdvisorConfig::working_default(),
            critique: AdvisorConfig::critique_default(),
            reuse_library: Vec::new(),
            reuse_overrides: None,
            advisor_init_for_bo: false,
            accumulate_summary: false,
            out_dir: None,
        }
    }

    pub fn total_evaluations(&self) -> usize {
        self.init_points + self.evals_per_step * self.iterations
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.init_points < 2 {
            return Err(format!(
                "init_points = {} but the surrogate needs at least 2 points to fit",
                self.init_points
            ));
        }
        if self.iterations == 0 {
            return Err("iterations must be at least 1".into());
        }
        if self.evals_per_step != 2 {
            return Err(format!(
                "evals_per_step = {} but the step structure pairs exactly one surrogate \
                 point with one second-slot point",
                self.evals_per_step
            ));
        }
        if self.demos_k == 0 {
            return Err("demos_k must be at least 1".into());
        }
        if !self.kappa.is_finite() || self.kappa < 0.0 {
            return Err(format!("kappa {} must be finite and nonnegative", self.kappa));
        }
        self.working.validate().map_err(|e| format!("working advisor: {e}"))?;
        self.critique.validate().map_err(|e| format!("critique advisor: {e}"))?;
        for entry in &self.reuse_library {
            if entry.summary.circuit_id != entry.spec.circuit_id {
                return Err(format!(
                    "reuse library entry pairs spec {} with summary for {}",
                    entry.spec.circuit_id, entry.summary.circuit_id
                ));
            }
        }
        if let Some(ids) = &self.reuse_overrides {
            for id in ids {
                if !self.reuse_library.iter().any(|e| &e.spec.circuit_id == id) {
                    return Err(format!("reuse override {id} is not in the library"));
                }
            }
        }
        Ok(())
    }
}

pub const FLAG_CLIPPED: &str = "CLIPPED";
pub const FLAG_SUBSTITUTED: &str = "SUBSTITUTED";
pub const FLAG_DUPLICATE: &str = "DUPLICATE";

/// Surrogate hyperparameters as fitted for one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpTrace {
    pub n_train: usize,
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
    pub jitter: f64,
    pub lml: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalTrace {
    pub x: Vec<f64>,
    pub ei: f64,
}

/// One advisor-slot candidate: where it came from and what happened to
/// it (`CLIPPED`, `SUBSTITUTED`, `DUPLICATE`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateTrace {
    pub x: Vec<f64>,
    pub ucb: Option<f64>,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTrace {
    pub source: Source,
    pub x: Vec<f64>,
    pub fom: Option<f64>,
    pub valid: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub diagnostics: Option<String>,
}

/// One row per iteration (iteration 0 is the initialization batch).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: u32,
    pub gp: Option<GpTrace>,
    pub bo: Vec<ProposalTrace>,
    pub advisor_candidates: Vec<CandidateTrace>,
    /// `(candidate index, ucb)` pairs, best first; empty unless the
    /// mode ranks candidates.
    pub ucb_ranking: Vec<(usize, f64)>,
    pub chosen_advisor: Option<usize>,
    pub evaluations: Vec<EvalTrace>,
    pub best_fom_so_far: Option<f64>,
    pub summary_records: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactPaths {
    pub manifest: PathBuf,
    pub buffer: PathBuf,
    pub trace: PathBuf,
    pub transcripts: PathBuf,
    pub summary: Option<PathBuf>,
}

/// A completed run: the incumbent, the final summary (when the mode
/// maintains one), and everything logged along the way.
#[derive(Debug)]
pub struct RunResult {
    pub best: EvaluationRecord,
    pub summary: Option<KnowledgeSummary>,
    pub buffer: Buffer,
    pub trace: Vec<TraceRow>,
    pub transcripts: Vec<AdvisorTranscript>,
    pub warnings: Vec<String>,
    pub artifacts: Option<ArtifactPaths>,
    pub wall_clock_s: f64,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("advisor failed: {0}")]
    Advisor(#[from] AdvisorError),
    #[error("surrogate fit failed at iteration {iteration}: {source}")]
    Surrogate {
        iteration: u32,
        #[source]
        source: GpError,
    },
    #[error("reuse context assembly failed: {0}")]
    Context(#[from] ContextError),
    #[error("run produced no valid evaluations")]
    NoValidEvaluations,
    #[error(
        "budget violation: expected {expected} evaluations, evaluator performed {performed}, \
         buffer holds {recorded}"
    )]
    Budget {
        expected: u64,
        performed: u64,
        recorded: u64,
    },
    #[error("artifact write failed: {0}")]
    Io(#[from] std::io::Error),
}

/// Stable sub-seed derivation: one named stream per consumer, so seeds
/// never collide or shift between consumers.
fn derive_seed(base: u64, stream: &str, counter: u64) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    base.hash(&mut h);
    stream.hash(&mut h);
    counter.hash(&mut h);
    h.finish()
}

/// Runs the `points` evaluations concurrently, preserving input order
/// in the result.
fn evaluate_batch(
    evaluator: &Evaluator,
    spec: &CircuitSpec,
    points: &[DesignPoint],
) -> Vec<EvaluationOutcome> {
    std::thread::scope(|s| {
        let handles: Vec<_> = points
            .iter()
            .map(|p| s.spawn(move || evaluator.evaluate(spec, p)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation thread panicked"))
            .collect()
    })
}

fn make_record(
    spec: &CircuitSpec,
    point: DesignPoint,
    outcome: &EvaluationOutcome,
    iteration: u32,
    source: Source,
) -> EvaluationRecord {
    let fom = if outcome.valid {
        compute_fom(spec, &outcome.metrics).ok()
    } else {
        None
    };
    EvaluationRecord {
        point,
        metrics: outcome.metrics.clone(),
        fom: fom.unwrap_or(f64::NEG_INFINITY),
        iteration,
        source,
        valid: fom.is_some(),
    }
}

/// 1-based index of the first valid record meeting every metric
/// threshold; None when the run never reached spec.
pub fn evaluations_to_spec(spec: &CircuitSpec, buffer: &Buffer) -> Option<usize> {
    buffer
        .records()
        .iter()
        .position(|r| r.valid && meets_all_specs(spec, &r.metrics))
        .map(|i| i + 1)
}

struct Orchestrator<'a> {
    config: &'a ExperimentConfig,
    evaluator: &'a Evaluator,
    working: Advisor,
    critique: Advisor,
    buffer: Buffer,
    reuse: ContextDocument,
    summary: Option<KnowledgeSummary>,
    trace: Vec<TraceRow>,
    warnings: Vec<String>,
    substitutions: u64,
    calls_at_start: u64,
}

impl<'a> Orchestrator<'a> {
    fn new(
        config: &'a ExperimentConfig,
        evaluator: &'a Evaluator,
        working_client: Box<dyn ChatClient>,
        critique_client: Box<dyn ChatClient>,
    ) -> Result<Self, RunError> {
        config.validate().map_err(RunError::Config)?;
        let reuse = if config.mode.maintains_summary() {
            let related = select_related(
                &config.spec,
                &config.reuse_library,
                config.reuse_overrides.as_deref(),
            );
            let netlists: BTreeMap<Ident, String> = config
                .reuse_library
                .iter()
                .map(|e| (e.spec.circuit_id.clone(), e.spec.netlist_text.clone()))
                .collect();
            assemble_reuse_context(&config.spec, &related, &netlists)?
        } else {
            ContextDocument {
                text: String::new(),
            }
        };
        Ok(Orchestrator {
            config,
            evaluator,
            working: Advisor::new(working_client, config.working.clone()),
            critique: Advisor::new(critique_client, config.critique.clone()),
            buffer: Buffer::new(),
            reuse,
            summary: None,
            trace: Vec::new(),
            warnings: Vec::new(),
            substitutions: 0,
            calls_at_start: evaluator.calls(),
        })
    }

    /// True when `point` sits within 1e-9 (unit-cube Euclidean) of an
    /// already-evaluated point.
    fn is_duplicate(&self, spec: &CircuitSpec, point: &DesignPoint) -> bool {
        let u = point.to_unit(spec);
        self.buffer.records().iter().any(|r| {
            let v = r.point.to_unit(spec);
            let d2: f64 = u.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum();
            d2.sqrt() < 1e-9
        })
    }

    /// Seeded in-bounds stand-in for an advisor slot that produced
    /// nothing parseable.
    fn substitute_point(&mut self, spec: &CircuitSpec) -> DesignPoint {
        let k = self.substitutions;
        self.substitutions += 1;
        let unit = &latin_hypercube(1, spec.dim(), derive_seed(self.config.seed, "substitute", k))[0];
        DesignPoint::from_unit(spec, unit).expect("unit sample is in bounds")
    }

    fn top_demos(&self) -> Vec<EvaluationRecord> {
        self.buffer
            .top_k(self.config.demos_k)
            .into_iter()
            .cloned()
            .collect()
    }

    fn initialize(&mut self) -> Result<(), RunError> {
        let config = self.config;
        let spec = &config.spec;
        let lhs: Vec<DesignPoint> =
            latin_hypercube(config.init_points, spec.dim(), derive_seed(config.seed, "init", 0))
                .iter()
                .map(|u| DesignPoint::from_unit(spec, u).expect("unit sample is in bounds"))
                .collect();

        let use_advisor = config.mode.uses_advisor() || config.advisor_init_for_bo;
        let mut candidates: Vec<CandidateTrace> = Vec::new();
        let mut points: Vec<DesignPoint> = Vec::new();
        if use_advisor {
            match self
                .working
                .suggest(spec, &[], &self.reuse, config.init_points)
            {
                Ok(suggestions) => {
                    for s in suggestions {
                        let mut flags = Vec::new();
                        if s.clipped {
                            flags.push(FLAG_CLIPPED.to_string());
                        }
                        candidates.push(CandidateTrace {
                            x: s.point.to_vec(spec),
                            ucb: None,
                            flags,
                        });
                        points.push(s.point);
                    }
                }
                Err(AdvisorError::NoParseableSuggestion) => {}
                Err(e) => return Err(e.into()),
            }
        }
        // Parse shortfall (or LHS-initialized modes): fill from the
        // seeded Latin-hypercube batch, position for position.
        while points.len() < config.init_points {
            let p = lhs[points.len()].clone();
            if use_advisor {
                candidates.push(CandidateTrace {
                    x: p.to_vec(spec),
                    ucb: None,
                    flags: vec![FLAG_SUBSTITUTED.to_string()],
                });
            }
            points.push(p);
        }

        let outcomes = evaluate_batch(self.evaluator, spec, &points);
        let mut evaluations = Vec::new();
        for (point, outcome) in points.into_iter().zip(&outcomes) {
            let record = make_record(spec, point, outcome, 0, Source::Init);
            evaluations.push(EvalTrace {
                source: Source::Init,
                x: record.point.to_vec(spec),
                fom: record.valid.then_some(record.fom),
                valid: record.valid,
                diagnostics: (!record.valid).then(|| outcome.diagnostics.clone()),
            });
            self.buffer.insert(record);
        }

        self.trace.push(TraceRow {
            iteration: 0,
            gp: None,
            bo: Vec::new(),
            advisor_candidates: candidates,
            ucb_ranking: Vec::new(),
            chosen_advisor: None,
            evaluations,
            best_fom_so_far: self.buffer.best().ok().map(|r| r.fom),
            summary_records: None,
        });
        Ok(())
    }

    fn step(&mut self, t: u32) -> Result<(), RunError> {
        let config = self.config;
        let spec = &config.spec;
        let bounds = spec.bounds();

        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for r in self.buffer.valid_records() {
            xs.push(r.point.to_vec(spec));
            ys.push(r.fom);
        }
        let model = GpModel::fit(&bounds, &xs, &ys, derive_seed(config.seed, "gp", t as u64))
            .map_err(|source| RunError::Surrogate { iteration: t, source })?;
        let gp = GpTrace {
            n_train: model.n_train(),
            lengthscales: model.params().lengthscales().to_vec(),
            signal_variance: model.params().signal_variance(),
            noise_variance: model.params().noise_variance(),
            jitter: model.jitter(),
            lml: model.lml(),
            degenerate: model.degenerate(),
        };

        let acq = AcquisitionConfig {
            kappa: config.kappa,
            seed: derive_seed(config.seed, "bo", t as u64),
            ..AcquisitionConfig::default()
        };
        let bo1 = propose_bo_point(&model, &acq);
        let mut bo = vec![ProposalTrace {
            x: bo1.x.clone(),
            ei: bo1.ei,
        }];
        let bo1_point = DesignPoint::from_vec(spec, &bo1.x).expect("proposals stay in bounds");

        let demos = self.top_demos();
        let mut advisor_candidates: Vec<CandidateTrace> = Vec::new();
        let mut ucb_ranking: Vec<(usize, f64)> = Vec::new();
        let mut chosen_advisor: Option<usize> = None;

        let second: (Source, DesignPoint) = if config.mode == Mode::Bo {
            let acq2 = AcquisitionConfig {
                kappa: config.kappa,
                seed: derive_seed(config.seed, "bo2", t as u64),
                ..AcquisitionConfig::default()
            };
            let bo2 = propose_bo_point(&model, &acq2);
            bo.push(ProposalTrace {
                x: bo2.x.clone(),
                ei: bo2.ei,
            });
            let p = DesignPoint::from_vec(spec, &bo2.x).expect("proposals stay in bounds");
            (Source::Bo, p)
        } else {
            let n = config.mode.suggestions_per_step();
            match self.working.suggest(spec, &demos, &self.reuse, n) {
                Ok(suggestions) => {
                    let pick = if config.mode == Mode::UsoC {
                        let cand_vecs: Vec<Vec<f64>> =
                            suggestions.iter().map(|s| s.point.to_vec(spec)).collect();
                        let ranking = rank_by_ucb(&model, &cand_vecs, config.kappa);
                        for (i, s) in suggestions.iter().enumerate() {
                            let ucb = ranking.iter().find(|(j, _)| *j == i).map(|(_, u)| *u);
                            let mut flags = Vec::new();
                            if s.clipped {
                                flags.push(FLAG_CLIPPED.to_string());
                            }
                            if self.is_duplicate(spec, &s.point) {
                                flags.push(FLAG_DUPLICATE.to_string());
                            }
                            advisor_candidates.push(CandidateTrace {
                                x: cand_vecs[i].clone(),
                                ucb,
                                flags,
                            });
                        }
                        let best = ranking[0].0;
                        ucb_ranking = ranking;
                        best
                    } else {
                        let s = &suggestions[0];
                        let mut flags = Vec::new();
                        if s.clipped {
                            flags.push(FLAG_CLIPPED.to_string());
                        }
                        if self.is_duplicate(spec, &s.point) {
                            flags.push(FLAG_DUPLICATE.to_string());
                        }
                        advisor_candidates.push(CandidateTrace {
                            x: s.point.to_vec(spec),
                            ucb: None,
                            flags,
                        });
                        0
                    };
                    chosen_advisor = Some(pick);
                    (Source::Advisor, suggestions[pick].point.clone())
                }
                Err(AdvisorError::NoParseableSuggestion) => {
                    let p = self.substitute_point(spec);
                    let mut flags = vec![FLAG_SUBSTITUTED.to_string()];
                    if self.is_duplicate(spec, &p) {
                        flags.push(FLAG_DUPLICATE.to_string());
                    }
                    advisor_candidates.push(CandidateTrace {
                        x: p.to_vec(spec),
                        ucb: None,
                        flags,
                    });
                    chosen_advisor = Some(advisor_candidates.len() - 1);
                    (Source::Advisor, p)
                }
                Err(e) => return Err(e.into()),
            }
        };

        // Evaluate concurrently; insert in fixed (surrogate, second
        // slot) order so reruns are reproducible.
        let slots = [(Source::Bo, bo1_point), second];
        let points: Vec<DesignPoint> = slots.iter().map(|(_, p)| p.clone()).collect();
        let outcomes = evaluate_batch(self.evaluator, spec, &points);
        let mut evaluations = Vec::new();
        for ((source, point), outcome) in slots.into_iter().zip(&outcomes) {
            let record = make_record(spec, point, outcome, t, source);
            evaluations.push(EvalTrace {
                source,
                x: record.point.to_vec(spec),
                fom: record.valid.then_some(record.fom),
                valid: record.valid,
                diagnostics: (!record.valid).then(|| outcome.diagnostics.clone()),
            });
            self.buffer.insert(record);
        }

        if config.mode.maintains_summary() {
            let demos_now = self.top_demos();
            let outcome = self.working.generate_summary(spec, &demos_now, t)?;
            for w in outcome.warnings {
                self.warnings.push(format!("iteration {t} summary: {w}"));
            }
            self.apply_summary(outcome.summary);
        }

        self.trace.push(TraceRow {
            iteration: t,
            gp: Some(gp),
            bo,
            advisor_candidates,
            ucb_ranking,
            chosen_advisor,
            evaluations,
            best_fom_so_far: self.buffer.best().ok().map(|r| r.fom),
            summary_records: self.summary.as_ref().map(|k| k.record_count()),
        });
        Ok(())
    }

    /// Replaces the held summary, or merges into it (keep-first on
    /// duplicate keys) when accumulation is on.
    fn apply_summary(&mut self, new: KnowledgeSummary) {
        if self.config.accumulate_summary {
            if let Some(prev) = &self.summary {
                let mut merged = prev.clone();
                merged.iteration = new.iteration;
                for t in new.tradeoffs() {
                    merged.insert_tradeoff(t.clone());
                }
                for a in new.associations() {
                    merged.insert_association(a.clone());
                }
                for i in new.influences() {
                    merged.insert_influence(i.clone());
                }
                self.summary = Some(merged);
                return;
            }
        }
        self.summary = Some(new);
    }

    fn execute(&mut self) -> Result<(), RunError> {
        self.initialize()?;
        for t in 1..=self.config.iterations as u32 {
            self.step(t)?;
        }
        if self.config.mode.maintains_summary() {
            let current = self
                .summary
                .clone()
                .unwrap_or_else(|| KnowledgeSummary::new(self.config.spec.circuit_id.clone()));
            let outcome = self.critique.critique(&current, &self.config.spec);
            for w in outcome.warnings {
                self.warnings.push(format!("critique: {w}"));
            }
            self.summary = Some(outcome.summary);
        }
        Ok(())
    }

    fn trace_jsonl(&self) -> String {
        let mut out = String::new();
        for row in &self.trace {
            out.push_str(&serde_json::to_string(row).expect("trace row serializes"));
            out.push('\n');
        }
        out
    }

    /// Best-effort export of whatever exists when a run aborts.
    fn export_partial(&self, dir: &Path) {
        let _ = std::fs::create_dir_all(dir);
        let _ = std::fs::write(dir.join("buffer.jsonl"), self.buffer.to_jsonl());
        let _ = std::fs::write(dir.join("trace.jsonl"), self.trace_jsonl());
    }

    fn write_artifacts(
        &self,
        dir: &Path,
        best: &EvaluationRecord,
        transcripts: &[AdvisorTranscript],
        wall_clock_s: f64,
    ) -> Result<ArtifactPaths, std::io::Error> {
        std::fs::create_dir_all(dir)?;
        let paths = ArtifactPaths {
            manifest: dir.join("manifest.json"),
            buffer: dir.join("buffer.jsonl"),
            trace: dir.join("trace.jsonl"),
            transcripts: dir.join("transcripts.jsonl"),
            summary: self.summary.as_ref().map(|_| dir.join("summary.ks")),
        };
        std::fs::write(&paths.buffer, self.buffer.to_jsonl())?;
        std::fs::write(&paths.trace, self.trace_jsonl())?;
        let mut transcript_lines = String::new();
        for t in transcripts {
            transcript_lines
                .push_str(&serde_json::to_string(t).expect("transcript serializes"));
            transcript_lines.push('\n');
        }
        std::fs::write(&paths.transcripts, transcript_lines)?;
        if let (Some(path), Some(summary)) = (&paths.summary, &self.summary) {
            std::fs::write(path, serialize_summary(summary))?;
        }

        let config = self.config;
        let manifest = serde_json::json!({
            "circuit_id": config.spec.circuit_id,
            "mode": config.mode.label(),
            "seed": config.seed,
            "init_points": config.init_points,
            "iterations": config.iterations,
            "evals_per_step": config.evals_per_step,
            "demos_k": config.demos_k,
            "kappa": config.kappa,
            "advisor_init_for_bo": config.advisor_init_for_bo,
            "accumulate_summary": config.accumulate_summary,
            "working_model": config.working.model_name,
            "critique_model": config.critique.model_name,
            "reuse_circuits": config
                .reuse_library
                .iter()
                .map(|e| e.spec.circuit_id.to_string())
                .collect::<Vec<_>>(),
            "total_evaluations": self.buffer.len(),
            "best_fom": best.fom,
            "best_point": best.point,
            "evaluations_to_spec": evaluations_to_spec(&config.spec, &self.buffer),
            "wall_clock_s": wall_clock_s,
            "warnings": self.warnings,
            "artifacts": {
                "manifest": "manifest.json",
                "buffer": "buffer.jsonl",
                "trace": "trace.jsonl",
                "transcripts": "transcripts.jsonl",
                "summary": self.summary.as_ref().map(|_| "summary.ks"),
            },
        });
        std::fs::write(
            &paths.manifest,
            serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
        )?;
        Ok(paths)
    }

    fn finish(&mut self, wall_clock_s: f64) -> Result<RunResult, RunError> {
        let expected = self.config.total_evaluations() as u64;
        let performed = self.evaluator.calls() - self.calls_at_start;
        let recorded = self.buffer.len() as u64;
        if performed != expected || recorded != expected {
            return Err(RunError::Budget {
                expected,
                performed,
                recorded,
            });
        }
        let best = self
            .buffer
            .best()
            .map_err(|_| RunError::NoValidEvaluations)?
            .clone();
        let mut transcripts = self.working.drain_transcripts();
        transcripts.extend(self.critique.drain_transcripts());
        let artifacts = match &self.config.out_dir {
            Some(dir) => Some(self.write_artifacts(dir, &best, &transcripts, wall_clock_s)?),
            None => None,
        };
        Ok(RunResult {
            best,
            summary: self.summary.take(),
            buffer: std::mem::take(&mut self.buffer),
            trace: std::mem::take(&mut self.trace),
            transcripts,
            warnings: std::mem::take(&mut self.warnings),
            artifacts,
            wall_clock_s,
        })
    }
}

/// Executes one full run: initialization, `iterations` steps, the
/// post-loop critique for summary-maintaining modes, budget assertion,
/// and artifact export when the config names an output directory. On
/// error the partial buffer and trace are still exported there.
pub fn run(
    config: &ExperimentConfig,
    evaluator: &Evaluator,
    working_client: Box<dyn ChatClient>,
    critique_client: Box<dyn ChatClient>,
) -> Result<RunResult, RunError> {
    let start = Instant::now();
    let mut orchestrator = Orchestrator::new(config, evaluator, working_client, critique_client)?;
    let outcome = orchestrator
        .execute()
        .and_then(|()| orchestrator.finish(start.elapsed().as_secs_f64()));
    if outcome.is_err() {
        if let Some(dir) = &config.out_dir {
            orchestrator.export_partial(dir);
        }
    }
    outcome
}

// ---------------------------------------------------------------------------
// Benchmark grid

/// One grid entry: a label for reporting plus the config to run.
#[derive(Debug, Clone)]
pub struct BenchItem {
    pub label: String,
    pub config: ExperimentConfig,
}

/// Builds the chat clients (working, critique) for one run.
pub type ClientFactory<'f> = dyn Fn(&ExperimentConfig) -> (Box<dyn ChatClient>, Box<dyn ChatClient>) + 'f;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchCell {
    pub label: String,
    pub seed: u64,
    pub best_fom: Option<f64>,
    pub evals_to_spec: Option<usize>,
    pub error: Option<String>,
}

/// Aggregates over one label's successful runs. Evaluations-to-spec is
/// censored: runs that never reach spec count as infinity, so the
/// median itself is infinite when at least half are censored.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub label: String,
    pub runs: usize,
    pub failures: usize,
    pub median_best_fom: f64,
    pub iqr_best_fom: f64,
    pub median_evals_to_spec: f64,
    pub spec_reached: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub cells: Vec<BenchCell>,
    pub rows: Vec<BenchRow>,
}

/// Linear-interpolation percentile of an ascending-sorted slice,
/// `p` in [0, 1].
fn percentile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    // Equal endpoints return directly so censored (infinite) values
    // never produce inf - inf.
    if sorted[lo] == sorted[hi] {
        return sorted[lo];
    }
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("no NaN in aggregates"));
    percentile(values, 0.5)
}

fn iqr(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("no NaN in aggregates"));
    percentile(values, 0.75) - percentile(values, 0.25)
}

/// Runs every item at every seed (a fresh evaluator and fresh clients
/// per cell), recording failures without stopping the grid.
pub fn bench(items: &[BenchItem], seeds: &[u64], make_clients: &ClientFactory) -> BenchReport {
    assert!(!items.is_empty(), "bench needs at least one item");
    assert!(!seeds.is_empty(), "bench needs at least one seed");
    let mut cells = Vec::new();
    for item in items {
        for &seed in seeds {
            let mut config = item.config.clone();
            config.seed = seed;
            let evaluator = Evaluator::new();
            let (working, critique) = make_clients(&config);
            let cell = match run(&config, &evaluator, working, critique) {
                Ok(result) => BenchCell {
                    label: item.label.clone(),
                    seed,
                    best_fom: Some(result.best.fom),
                    evals_to_spec: evaluations_to_spec(&config.spec, &result.buffer),
                    error: None,
                },
                Err(e) => BenchCell {
                    label: item.label.clone(),
                    seed,
                    best_fom: None,
                    evals_to_spec: None,
                    error: Some(e.to_string()),
                },
            };
            cells.push(cell);
        }
    }

    let mut rows = Vec::new();
    for item in items {
        let mine: Vec<&BenchCell> = cells.iter().filter(|c| c.label == item.label).collect();
        let mut best: Vec<f64> = mine.iter().filter_map(|c| c.best_fom).collect();
        let mut evals: Vec<f64> = mine
            .iter()
            .filter(|c| c.error.is_none())
            .map(|c| c.evals_to_spec.map(|n| n as f64).unwrap_or(f64::INFINITY))
            .collect();
        let failures = mine.iter().filter(|c| c.error.is_some()).count();
        rows.push(BenchRow {
            label: item.label.clone(),
            runs: mine.len(),
            failures,
            median_best_fom: if best.is_empty() {
                f64::NAN
            } else {
                median(&mut best)
            },
            iqr_best_fom: if best.is_empty() { f64::NAN } else { iqr(&mut best) },
            median_evals_to_spec: if evals.is_empty() {
                f64::INFINITY
            } else {
                median(&mut evals)
            },
            spec_reached: mine.iter().filter(|c| c.evals_to_spec.is_some()).count(),
        });
    }
    BenchReport { cells, rows }
}

fn fmt_count(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v}")
    }
}

impl BenchReport {
    /// One line per run.
    pub fn cells_csv(&self) -> String {
        let mut out = String::from("label,seed,best_fom,evals_to_spec,error\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                c.label,
                c.seed,
                c.best_fom.map(|v| v.to_string()).unwrap_or_default(),
                c.error
                    .is_none()
                    .then(|| c.evals_to_spec.map(|n| n.to_string()).unwrap_or("inf".into()))
                    .unwrap_or_default(),
                c.error.clone().unwrap_or_default().replace(',', ";"),
            ));
        }
        out
    }

    /// One line per label.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "label,runs,failures,median_best_fom,iqr_best_fom,median_evals_to_spec,spec_reached\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.label,
                r.runs,
                r.failures,
                r.median_best_fom,
                r.iqr_best_fom,
                fmt_count(r.median_evals_to_spec),
                r.spec_reached,
            ));
        }
        out
    }

    /// Aligned human-readable aggregate table.
    pub fn table(&self) -> String {
        let label_w = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .chain([5])
            .max()
            .unwrap();
        let mut out = String::new();
        out.push_str(&format!(
            "{:<label_w$} {:>5} {:>9} {:>16} {:>13} {:>15} {:>13}\n",
            "label", "runs", "failures", "median_best_fom", "iqr_best_fom", "evals_to_spec", "spec_reached"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<label_w$} {:>5} {:>9} {:>16.6} {:>13.6} {:>15} {:>13}\n",
                r.label,
                r.runs,
                r.failures,
                r.median_best_fom,
                r.iqr_best_fom,
                fmt_count(r.median_evals_to_spec),
                r.spec_reached,
            ));
        }
        out
    }
}
