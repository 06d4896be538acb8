//! Core library for a knowledge-reusing black-box sizing optimizer.
//!
//! The pipeline couples a Gaussian-process surrogate with an LLM advisor:
//! the surrogate proposes points by expected improvement, the advisor
//! proposes points from circuit context and reusable knowledge summaries,
//! and an orchestrator alternates the two under a fixed evaluation budget.
//!
//! Module layout:
//!
//! - [`circuit`]: identifiers, parameter/metric schemas, design points
//! - [`knowledge`]: structured knowledge summaries (KS/1 documents)
//! - [`buffer`]: evaluation records, figure of merit, demonstration store
//! - [`sampling`]: seeded Latin hypercube and low-discrepancy sequences
//! - [`surrogate`]: Gaussian-process regression on the unit cube
//! - [`acquisition`]: UCB ranking, expected improvement, point proposal
//! - [`advisor`]: prompt assembly, suggestion parsing, chat clients, mocks
//! - [`evaluator`]: circuit bindings (analytic, test-function, external)
//! - [`orchestrator`]: run loop, modes, budget accounting, benchmarking

pub mod acquisition;
pub mod advisor;
pub mod buffer;
pub mod circuit;
pub mod evaluator;
pub mod knowledge;
pub mod orchestrator;
pub mod sampling;
pub mod surrogate;

pub use buffer::{Buffer, EvaluationRecord, Source};
pub use circuit::{CircuitSpec, DesignPoint, Ident, MetricId, ParamId, SubStructureId};
pub use knowledge::KnowledgeSummary;
pub use acquisition::{AcquisitionConfig, Proposal};
pub use advisor::{
    Advisor, AdvisorConfig, AdvisorError, AdvisorRole, AdvisorTranscript, ChatClient,
    ChatRequest, HttpChatClient, MockAdvisor, MockPolicy, Suggestion, SummaryOutcome,
};
pub use orchestrator::{
    bench, evaluations_to_spec, run, ArtifactPaths, BenchCell, BenchItem, BenchReport, BenchRow,
    CandidateTrace, EvalTrace, ExperimentConfig, GpTrace, Mode, ProposalTrace, RunError,
    RunResult, TraceRow,
};
pub use evaluator::{toy_circuit_family, EvaluationOutcome, Evaluator, ToyCircuit, ToyVariant};
pub use surrogate::GpModel;
