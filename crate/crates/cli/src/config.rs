//! TOML experiment configuration: file schema, circuit resolution, and
//! chat-client construction.
//!
//! Unknown keys are rejected everywhere so typos fail loudly instead of
//! silently running with defaults. Credentials never appear here: the
//! HTTP client reads `USO_ADVISOR_API_KEY` from the environment at
//! request time.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use uso_core::advisor::{AdvisorConfig, ChatClient, HttpChatClient, MockAdvisor, MockPolicy};
use uso_core::circuit::{CircuitSpec, Ident};
use uso_core::evaluator::{branin_spec, sphere_spec, toy_circuit_family, ToyVariant};
use uso_core::knowledge::{parse_summary, LibraryEntry};
use uso_core::orchestrator::{ExperimentConfig, Mode};

/// On-disk experiment description. Every scalar is optional and
/// defaults to the [`ExperimentConfig::new`] value; `mode` may instead
/// come from the command line.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub mode: Option<String>,
    pub seed: Option<u64>,
    pub init_points: Option<usize>,
    pub iterations: Option<usize>,
    pub evals_per_step: Option<usize>,
    pub demos_k: Option<usize>,
    pub kappa: Option<f64>,
    pub accumulate_summary: Option<bool>,
    pub advisor_init_for_bo: Option<bool>,
    pub out_dir: Option<PathBuf>,
    pub circuit: CircuitSource,
    #[serde(default)]
    pub advisor: AdvisorSection,
    /// Defaults to the working advisor's client choice when left out.
    #[serde(default)]
    pub critique: AdvisorSection,
    #[serde(default)]
    pub reuse: Vec<ReuseEntry>,
    pub reuse_overrides: Option<Vec<String>>,
}

/// Exactly one of `builtin`, `path`, or `inline` selects the circuit.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircuitSource {
    /// `branin`, `sphere2`, `sphere4`, `toy_source`, or `toy_target`.
    pub builtin: Option<String>,
    /// Instance seed for the toy circuit family.
    pub family_seed: Option<u64>,
    /// JSON file holding a full circuit spec.
    pub path: Option<PathBuf>,
    /// Circuit spec written directly as a TOML table.
    pub inline: Option<toml::Value>,
}

/// One advisor endpoint or mock. `mock` and `endpoint` are mutually
/// exclusive; when both are absent the deterministic PERTURB mock is
/// used so configs run offline by default.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvisorSection {
    /// `PERTURB`, `KNOWLEDGE_GUIDED`, or `FIXED_SCRIPT`.
    pub mock: Option<String>,
    /// Mock randomness seed; defaults to the experiment seed.
    pub mock_seed: Option<u64>,
    /// FIXED_SCRIPT replies, split on lines containing only `---`.
    pub script_path: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    pub context_window: Option<usize>,
    pub timeout_s: Option<f64>,
    pub max_retries: Option<u32>,
}

impl AdvisorSection {
    fn is_unset(&self) -> bool {
        self.mock.is_none()
            && self.mock_seed.is_none()
            && self.script_path.is_none()
            && self.endpoint.is_none()
            && self.model.is_none()
            && self.temperature.is_none()
            && self.max_tokens.is_none()
            && self.context_window.is_none()
            && self.timeout_s.is_none()
            && self.max_retries.is_none()
    }
}

/// One related circuit: its spec (same three source forms as
/// `[circuit]`) plus the KS/1 knowledge file to reuse.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReuseEntry {
    pub builtin: Option<String>,
    pub family_seed: Option<u64>,
    pub path: Option<PathBuf>,
    pub inline: Option<toml::Value>,
    pub summary: PathBuf,
}

/// Command-line values that take precedence over file values.
#[derive(Debug, Default)]
pub struct Overrides {
    pub mode: Option<String>,
    pub seed: Option<u64>,
    pub iters: Option<usize>,
    pub init: Option<usize>,
    pub kappa: Option<f64>,
    pub advisor_endpoint: Option<String>,
    pub mock_advisor: Option<String>,
    pub out: Option<PathBuf>,
}

pub fn parse_policy(s: &str) -> Result<MockPolicy, String> {
    match s.to_ascii_uppercase().replace('-', "_").as_str() {
        "PERTURB" => Ok(MockPolicy::Perturb),
        "KNOWLEDGE_GUIDED" => Ok(MockPolicy::KnowledgeGuided),
        "FIXED_SCRIPT" => Ok(MockPolicy::FixedScript),
        other => Err(format!(
            "unknown mock policy {other:?}; expected PERTURB, KNOWLEDGE_GUIDED, or FIXED_SCRIPT"
        )),
    }
}

fn read_file(path: &Path, what: &str) -> Result<String, String> {
    std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {what} {}: {e}", path.display()))
}

pub fn load_config_file(path: &Path) -> Result<ConfigFile, String> {
    let text = read_file(path, "config")?;
    toml::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))
}

/// Resolves one circuit-source triple relative to `base` (the config
/// file's directory, so relative paths travel with the config).
pub fn resolve_circuit(
    builtin: Option<&str>,
    family_seed: Option<u64>,
    path: Option<&Path>,
    inline: Option<&toml::Value>,
    base: &Path,
) -> Result<CircuitSpec, String> {
    let set = builtin.is_some() as u8 + path.is_some() as u8 + inline.is_some() as u8;
    if set != 1 {
        return Err("circuit needs exactly one of builtin, path, or inline".into());
    }
    if let Some(name) = builtin {
        let seed = family_seed.unwrap_or(0);
        if family_seed.is_some() && !name.starts_with("toy_") {
            return Err("family_seed only applies to the toy builtins".into());
        }
        return match name {
            "branin" => Ok(branin_spec()),
            "sphere2" => Ok(sphere_spec(2)),
            "sphere4" => Ok(sphere_spec(4)),
            "toy_source" => Ok(toy_circuit_family(seed, ToyVariant::Source).spec().clone()),
            "toy_target" => Ok(toy_circuit_family(seed, ToyVariant::Target).spec().clone()),
            other => Err(format!(
                "unknown builtin circuit {other:?}; expected branin, sphere2, sphere4, \
                 toy_source, or toy_target"
            )),
        };
    }
    if family_seed.is_some() {
        return Err("family_seed only applies to the toy builtins".into());
    }
    if let Some(p) = path {
        let full = base.join(p);
        let text = read_file(&full, "circuit spec")?;
        let spec = serde_json::from_str(&text)
            .map_err(|e| format!("circuit spec {}: {e}", full.display()))?;
        return revalidate(spec).map_err(|e| format!("circuit spec {}: {e}", full.display()));
    }
    let spec = inline
        .expect("exactly one source is set")
        .clone()
        .try_into()
        .map_err(|e| format!("inline circuit spec: {e}"))?;
    revalidate(spec).map_err(|e| format!("inline circuit spec: {e}"))
}

/// Deserialization fills the fields but skips the construction-time
/// invariants; rebuild the spec so malformed inputs fail here instead
/// of deep inside a run.
fn revalidate(spec: CircuitSpec) -> Result<CircuitSpec, String> {
    CircuitSpec::new(
        spec.circuit_id,
        spec.params,
        spec.metrics,
        spec.substructure_tags,
        spec.netlist_text,
        spec.binding,
    )
    .map_err(|e| e.to_string())
}

fn load_reuse(entries: &[ReuseEntry], base: &Path) -> Result<Vec<LibraryEntry>, String> {
    let mut library = Vec::new();
    for entry in entries {
        let spec = resolve_circuit(
            entry.builtin.as_deref(),
            entry.family_seed,
            entry.path.as_deref(),
            entry.inline.as_ref(),
            base,
        )?;
        let full = base.join(&entry.summary);
        let text = read_file(&full, "knowledge summary")?;
        let summary = parse_summary(&text)
            .map_err(|e| format!("knowledge summary {}: {e}", full.display()))?;
        library.push(LibraryEntry { spec, summary });
    }
    Ok(library)
}

/// Which concrete client a section resolves to, after applying flags.
#[derive(Debug)]
enum ClientChoice {
    Mock {
        policy: MockPolicy,
        seed: Option<u64>,
        script: Vec<String>,
    },
    Http {
        endpoint: String,
    },
}

fn choose_client(
    section: &AdvisorSection,
    overrides: &Overrides,
    base: &Path,
) -> Result<ClientChoice, String> {
    let script = match &section.script_path {
        Some(p) => {
            let full = base.join(p);
            Some(split_script(&read_file(&full, "mock script")?))
        }
        None => None,
    };
    if let Some(policy) = &overrides.mock_advisor {
        return Ok(ClientChoice::Mock {
            policy: parse_policy(policy)?,
            seed: section.mock_seed,
            script: script.unwrap_or_default(),
        });
    }
    if let Some(endpoint) = &overrides.advisor_endpoint {
        return Ok(ClientChoice::Http {
            endpoint: endpoint.clone(),
        });
    }
    match (&section.mock, &section.endpoint) {
        (Some(_), Some(_)) => Err("advisor section sets both mock and endpoint".into()),
        (Some(policy), None) => Ok(ClientChoice::Mock {
            policy: parse_policy(policy)?,
            seed: section.mock_seed,
            script: script.unwrap_or_default(),
        }),
        (None, Some(endpoint)) => Ok(ClientChoice::Http {
            endpoint: endpoint.clone(),
        }),
        (None, None) => Ok(ClientChoice::Mock {
            policy: MockPolicy::Perturb,
            seed: section.mock_seed,
            script: script.unwrap_or_default(),
        }),
    }
}

/// Script files hold one reply per entry, separated by `---` lines.
fn split_script(text: &str) -> Vec<String> {
    let mut entries = vec![String::new()];
    for line in text.lines() {
        if line.trim_end() == "---" {
            entries.push(String::new());
        } else {
            let current = entries.last_mut().expect("entries never empty");
            if !current.is_empty() {
                current.push('\n');
            }
            current.push_str(line);
        }
    }
    entries
}

fn apply_section(section: &AdvisorSection, mut config: AdvisorConfig) -> AdvisorConfig {
    if let Some(v) = &section.endpoint {
        config.endpoint = v.clone();
    }
    if let Some(v) = &section.model {
        config.model_name = v.clone();
    }
    if let Some(v) = section.temperature {
        config.temperature = v;
    }
    if let Some(v) = section.max_tokens {
        config.max_tokens = v;
    }
    if let Some(v) = section.context_window {
        config.context_window = v;
    }
    if let Some(v) = section.timeout_s {
        config.timeout_s = v;
    }
    if let Some(v) = section.max_retries {
        config.max_retries = v;
    }
    config
}

fn build_client(
    choice: &ClientChoice,
    fallback_seed: u64,
    config: &mut AdvisorConfig,
) -> Box<dyn ChatClient> {
    match choice {
        ClientChoice::Mock {
            policy,
            seed,
            script,
        } => {
            let mock = MockAdvisor::new(seed.unwrap_or(fallback_seed), *policy)
                .with_script(script.clone());
            Box::new(mock)
        }
        ClientChoice::Http { endpoint } => {
            config.endpoint = endpoint.clone();
            Box::new(HttpChatClient::new(endpoint.clone()))
        }
    }
}

/// A fully materialized experiment: the merged config plus the chat
/// clients it should run with.
pub struct LoadedExperiment {
    pub config: ExperimentConfig,
    pub working_client: Box<dyn ChatClient>,
    pub critique_client: Box<dyn ChatClient>,
}

/// Merges file values and command-line overrides into a runnable
/// experiment. `base` anchors the file's relative paths.
pub fn assemble(
    file: &ConfigFile,
    overrides: &Overrides,
    base: &Path,
) -> Result<LoadedExperiment, String> {
    let spec = resolve_circuit(
        file.circuit.builtin.as_deref(),
        file.circuit.family_seed,
        file.circuit.path.as_deref(),
        file.circuit.inline.as_ref(),
        base,
    )?;
    let mode: Mode = overrides
        .mode
        .as_deref()
        .or(file.mode.as_deref())
        .ok_or("mode is required: set it in the config or pass --mode")?
        .parse()?;

    let mut config = ExperimentConfig::new(spec, mode);
    if let Some(v) = overrides.seed.or(file.seed) {
        config.seed = v;
    }
    if let Some(v) = overrides.init.or(file.init_points) {
        config.init_points = v;
    }
    if let Some(v) = overrides.iters.or(file.iterations) {
        config.iterations = v;
    }
    if let Some(v) = file.evals_per_step {
        config.evals_per_step = v;
    }
    if let Some(v) = file.demos_k {
        config.demos_k = v;
    }
    if let Some(v) = overrides.kappa.or(file.kappa) {
        config.kappa = v;
    }
    if let Some(v) = file.accumulate_summary {
        config.accumulate_summary = v;
    }
    if let Some(v) = file.advisor_init_for_bo {
        config.advisor_init_for_bo = v;
    }
    config.out_dir = overrides
        .out
        .clone()
        .or_else(|| file.out_dir.as_ref().map(|p| base.join(p)));
    config.reuse_library = load_reuse(&file.reuse, base)?;
    if let Some(ids) = &file.reuse_overrides {
        let parsed: Result<Vec<Ident>, _> = ids.iter().map(Ident::new).collect();
        config.reuse_overrides = Some(parsed.map_err(|e| e.to_string())?);
    }

    config.working = apply_section(&file.advisor, AdvisorConfig::working_default());
    // An omitted critique section inherits the working client choice,
    // keeping single-advisor configs short.
    let critique_section = if file.critique.is_unset() {
        &file.advisor
    } else {
        &file.critique
    };
    config.critique = apply_section(critique_section, AdvisorConfig::critique_default());

    let working_choice = choose_client(&file.advisor, overrides, base)?;
    let critique_choice = choose_client(critique_section, overrides, base)?;
    let working_client = build_client(&working_choice, config.seed, &mut config.working);
    // Distinct fallback seed so the two mocks never mirror each other.
    let critique_client = build_client(
        &critique_choice,
        config.seed ^ 0x9e37_79b9,
        &mut config.critique,
    );

    Ok(LoadedExperiment {
        config,
        working_client,
        critique_client,
    })
}
