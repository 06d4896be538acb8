//! Objective evaluation: analytic toy-circuit families with a shared
//! sub-structure block, standard test functions, and a subprocess
//! adapter for external simulators.
//!
//! The toy family provides two sizing problems (SOURCE and TARGET)
//! built on one "diffpair" block with identical parameter ids, bounds,
//! and metric contributions, so knowledge learned on one transfers to
//! the other and ground truth is available for every influence
//! direction the family exports.

use std::collections::BTreeMap;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::circuit::{
    CircuitSpec, DesignPoint, Direction, EvaluatorBinding, Ident, MetricId, MetricSpec, ParamId,
    ParamSpec, SubStructureId,
};
use crate::knowledge::{
    AssociationRecord, InfluenceDirection, InfluenceRecord, KnowledgeSummary, TradeoffRecord,
};

/// Result of evaluating one design point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationOutcome {
    pub metrics: BTreeMap<MetricId, f64>,
    /// True only when every declared metric is present and finite.
    pub valid: bool,
    pub diagnostics: String,
}

impl EvaluationOutcome {
    fn failure(diagnostics: impl Into<String>) -> Self {
        EvaluationOutcome {
            metrics: BTreeMap::new(),
            valid: false,
            diagnostics: diagnostics.into(),
        }
    }
}

/// Dispatches design points to the evaluator named by the circuit's
/// binding, counting every call.
///
/// Analytic and test-function evaluations are pure; optional seeded
/// Gaussian noise perturbs metrics deterministically per point, so a
/// noisy evaluator is still reproducible.
#[derive(Debug, Default)]
pub struct Evaluator {
    noise: Option<NoiseSpec>,
    calls: AtomicU64,
}

#[derive(Debug, Clone, Copy)]
struct NoiseSpec {
    sd: f64,
    seed: u64,
}

impl Evaluator {
    pub fn new() -> Self {
        Evaluator::default()
    }

    pub fn with_noise(sd: f64, seed: u64) -> Self {
        assert!(sd >= 0.0 && sd.is_finite(), "noise sd must be finite and nonnegative");
        Evaluator {
            noise: Some(NoiseSpec { sd, seed }),
            calls: AtomicU64::new(0),
        }
    }

    /// Number of evaluations performed so far.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn evaluate(&self, spec: &CircuitSpec, x: &DesignPoint) -> EvaluationOutcome {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut out = match &spec.binding {
            EvaluatorBinding::Analytic { name } => evaluate_analytic(name, x),
            EvaluatorBinding::TestFn { name } => evaluate_testfn(name, spec, x),
            EvaluatorBinding::External { command, timeout_s } => {
                run_external(command, *timeout_s, spec, x)
            }
        };
        if out.valid {
            if let Some(noise) = self.noise {
                apply_noise(noise, x, &mut out.metrics);
            }
        }
        enforce_declared_metrics(spec, &mut out);
        out
    }
}

/// Downgrades the outcome when a declared metric is absent or
/// non-finite, and drops undeclared metrics the evaluator produced.
fn enforce_declared_metrics(spec: &CircuitSpec, out: &mut EvaluationOutcome) {
    out.metrics.retain(|id, _| spec.metric(id).is_some());
    if !out.valid {
        return;
    }
    for m in &spec.metrics {
        match out.metrics.get(&m.id) {
            Some(v) if v.is_finite() => {}
            Some(_) => {
                out.valid = false;
                out.diagnostics = format!("metric {} is not finite", m.id);
                return;
            }
            None => {
                out.valid = false;
                out.diagnostics = format!("metric {} missing from evaluator output", m.id);
                return;
            }
        }
    }
}

fn apply_noise(noise: NoiseSpec, x: &DesignPoint, metrics: &mut BTreeMap<MetricId, f64>) {
    for (id, value) in metrics.iter_mut() {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        noise.seed.hash(&mut h);
        id.as_str().hash(&mut h);
        for (pid, v) in x.values() {
            pid.as_str().hash(&mut h);
            v.to_bits().hash(&mut h);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
        let z: f64 = StandardNormal.sample(&mut rng);
        *value += noise.sd * z;
    }
}

// ---------------------------------------------------------------------------
// Test functions

/// Branin function in its standard form; global minimum 0.397887 at
/// (pi, 2.275) and two symmetric points.
pub fn branin(x1: f64, x2: f64) -> f64 {
    use std::f64::consts::PI;
    let b = 5.1 / (4.0 * PI * PI);
    let c = 5.0 / PI;
    let t = 1.0 / (8.0 * PI);
    (x2 - b * x1 * x1 + c * x1 - 6.0).powi(2) + 10.0 * (1.0 - t) * x1.cos() + 10.0
}

/// Sizing-problem wrapper for [`branin`]: minimize metric `value` over
/// the standard box, spec threshold 0.9.
pub fn branin_spec() -> CircuitSpec {
    let inputs = SubStructureId::new("inputs").unwrap();
    CircuitSpec::new(
        Ident::new("branin").unwrap(),
        vec![
            ParamSpec {
                id: ParamId::new("x1").unwrap(),
                lo: -5.0,
                hi: 10.0,
                unit: String::new(),
                substructure: inputs.clone(),
            },
            ParamSpec {
                id: ParamId::new("x2").unwrap(),
                lo: 0.0,
                hi: 15.0,
                unit: String::new(),
                substructure: inputs.clone(),
            },
        ],
        vec![MetricSpec::new(MetricId::new("value").unwrap(), Direction::Minimize, 0.9)
            .with_scale(1.0)],
        vec![inputs],
        String::new(),
        EvaluatorBinding::TestFn {
            name: "branin".into(),
        },
    )
    .unwrap()
}

/// Sizing-problem wrapper for the sphere function `sum(x_i^2)` on
/// `[-2, 2]^dim`: minimize metric `value`, spec threshold 0.25.
pub fn sphere_spec(dim: usize) -> CircuitSpec {
    assert!(dim >= 1);
    let inputs = SubStructureId::new("inputs").unwrap();
    let params = (1..=dim)
        .map(|i| ParamSpec {
            id: ParamId::new(format!("x{i}")).unwrap(),
            lo: -2.0,
            hi: 2.0,
            unit: String::new(),
            substructure: inputs.clone(),
        })
        .collect();
    CircuitSpec::new(
        Ident::new(format!("sphere{dim}")).unwrap(),
        params,
        vec![MetricSpec::new(MetricId::new("value").unwrap(), Direction::Minimize, 0.25)
            .with_scale(1.0)],
        vec![inputs],
        String::new(),
        EvaluatorBinding::TestFn {
            name: "sphere".into(),
        },
    )
    .unwrap()
}

fn evaluate_testfn(name: &str, spec: &CircuitSpec, x: &DesignPoint) -> EvaluationOutcome {
    if spec.metrics.len() != 1 {
        return EvaluationOutcome::failure(format!(
            "test function {name} binds exactly one metric, spec declares {}",
            spec.metrics.len()
        ));
    }
    let v = x.to_vec(spec);
    let value = match name {
        "branin" => {
            if v.len() != 2 {
                return EvaluationOutcome::failure(format!(
                    "branin is two-dimensional, spec declares {} params",
                    v.len()
                ));
            }
            branin(v[0], v[1])
        }
        "sphere" => v.iter().map(|x| x * x).sum(),
        other => return EvaluationOutcome::failure(format!("unknown test function '{other}'")),
    };
    let mut metrics = BTreeMap::new();
    metrics.insert(spec.metrics[0].id.clone(), value);
    EvaluationOutcome {
        metrics,
        valid: true,
        diagnostics: String::new(),
    }
}

// ---------------------------------------------------------------------------
// Toy circuit family

/// Which member of the toy family to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ToyVariant {
    Source,
    Target,
}

/// One member of the analytic toy family: its sizing spec plus the
/// closed-form metric model behind the `ANALYTIC` binding.
///
/// Both variants share the four-parameter "diffpair" block. Its
/// gain contribution is concave increasing and its bias-current
/// contribution is linear increasing in every width, so pushing gain
/// up necessarily drags quiescent current along: the family has a real
/// gain/current trade-off with known directional ground truth.
#[derive(Debug, Clone)]
pub struct ToyCircuit {
    spec: CircuitSpec,
    variant: ToyVariant,
    family_seed: u64,
    /// Shared-block log-gain coefficients, identical across variants.
    g: [f64; 4],
    /// Shared-block current coefficients, identical across variants.
    c: [f64; 4],
    /// Variant-specific coefficients (6 for SOURCE, 5 for TARGET).
    v: Vec<f64>,
    dp_ids: [ParamId; 4],
    var_ids: Vec<ParamId>,
}

const DP_BOUNDS: (f64, f64) = (0.5, 8.0);
const TARGET_VB_CENTER: f64 = 0.6;

fn perturbed(rng: &mut ChaCha8Rng, nominal: f64) -> f64 {
    nominal * (1.0 + 0.2 * rng.gen_range(-1.0..1.0))
}

/// Builds one family member. The shared-block coefficients depend only
/// on `family_seed`, so SOURCE and TARGET of the same family agree on
/// the diffpair's contribution exactly.
pub fn toy_circuit_family(family_seed: u64, variant: ToyVariant) -> ToyCircuit {
    let mut shared_rng = ChaCha8Rng::seed_from_u64(family_seed);
    let g = [12.0, 8.0, 5.0, 3.0].map(|n| perturbed(&mut shared_rng, n));
    let c = [0.8, 0.5, 0.3, 0.2].map(|n| perturbed(&mut shared_rng, n));

    let variant_stream = match variant {
        ToyVariant::Source => 0x746f_7953_5243,
        ToyVariant::Target => 0x746f_7954_4754,
    };
    let mut var_rng = ChaCha8Rng::seed_from_u64(family_seed ^ variant_stream);

    let diffpair = SubStructureId::new("diffpair").unwrap();
    let dp_ids = [
        ParamId::new("dp_w1").unwrap(),
        ParamId::new("dp_w2").unwrap(),
        ParamId::new("dp_w3").unwrap(),
        ParamId::new("dp_w4").unwrap(),
    ];
    let mut params: Vec<ParamSpec> = dp_ids
        .iter()
        .map(|id| ParamSpec {
            id: id.clone(),
            lo: DP_BOUNDS.0,
            hi: DP_BOUNDS.1,
            unit: "um".into(),
            substructure: diffpair.clone(),
        })
        .collect();

    let (circuit_id, binding_name, tags, var_ids, v, metrics, netlist);
    match variant {
        ToyVariant::Source => {
            let out_stage = SubStructureId::new("out_stage").unwrap();
            let ids = [
                ("os_w5", DP_BOUNDS, "um"),
                ("os_w6", DP_BOUNDS, "um"),
                ("os_rl", (1.0, 20.0), "kohm"),
            ];
            var_ids = ids
                .iter()
                .map(|(n, _, _)| ParamId::new(*n).unwrap())
                .collect::<Vec<_>>();
            for ((_, (lo, hi), unit), id) in ids.iter().zip(&var_ids) {
                params.push(ParamSpec {
                    id: id.clone(),
                    lo: *lo,
                    hi: *hi,
                    unit: (*unit).into(),
                    substructure: out_stage.clone(),
                });
            }
            v = [6.0, 4.0, 2.5, 0.4, 0.6, 0.4]
                .iter()
                .map(|n| perturbed(&mut var_rng, *n))
                .collect();
            metrics = vec![
                MetricSpec::new(MetricId::new("gain").unwrap(), Direction::Maximize, 45.0),
                MetricSpec::new(MetricId::new("ugf").unwrap(), Direction::Maximize, 1.5),
                MetricSpec::new(MetricId::new("iq").unwrap(), Direction::Minimize, 9.0),
            ];
            circuit_id = Ident::new(format!("toy_src_{family_seed}")).unwrap();
            binding_name = format!("toy_src#{family_seed}");
            tags = vec![diffpair.clone(), out_stage];
            netlist = "\
M1 outp inp tail vss nch w=dp_w1\n\
M2 outn inn tail vss nch w=dp_w2\n\
M3 tail bias vss vss nch w=dp_w3\n\
M4 outn outn vdd vdd pch w=dp_w4\n\
M5 out outn vdd vdd pch w=os_w5\n\
M6 out bias vss vss nch w=os_w6\n\
RL out vss os_rl\n";
        }
        ToyVariant::Target => {
            let cascode = SubStructureId::new("cascode").unwrap();
            let ids = [
                ("cs_w5", DP_BOUNDS, "um"),
                ("cs_w6", DP_BOUNDS, "um"),
                ("cs_ib", (10.0, 100.0), "uA"),
                ("cs_vb", (0.2, 1.0), "V"),
            ];
            var_ids = ids
                .iter()
                .map(|(n, _, _)| ParamId::new(*n).unwrap())
                .collect::<Vec<_>>();
            for ((_, (lo, hi), unit), id) in ids.iter().zip(&var_ids) {
                params.push(ParamSpec {
                    id: id.clone(),
                    lo: *lo,
                    hi: *hi,
                    unit: (*unit).into(),
                    substructure: cascode.clone(),
                });
            }
            v = [7.0, 20.0, 5.0, 10.0, 0.02]
                .iter()
                .map(|n| perturbed(&mut var_rng, *n))
                .collect();
            metrics = vec![
                MetricSpec::new(MetricId::new("gain").unwrap(), Direction::Maximize, 50.0),
                MetricSpec::new(MetricId::new("cmrr").unwrap(), Direction::Maximize, 70.0),
                MetricSpec::new(MetricId::new("iq").unwrap(), Direction::Minimize, 8.0),
            ];
            circuit_id = Ident::new(format!("toy_tgt_{family_seed}")).unwrap();
            binding_name = format!("toy_tgt#{family_seed}");
            tags = vec![diffpair.clone(), cascode];
            netlist = "\
M1 outp inp tail vss nch w=dp_w1\n\
M2 outn inn tail vss nch w=dp_w2\n\
M3 tail bias vss vss nch w=dp_w3\n\
M4 outn outn vdd vdd pch w=dp_w4\n\
M5 casp outn vdd vdd pch w=cs_w5\n\
M6 out vb casp vdd pch w=cs_w6\n\
IB out vss cs_ib\n";
        }
    }

    let spec = CircuitSpec::new(
        circuit_id,
        params,
        metrics,
        tags,
        netlist.to_string(),
        EvaluatorBinding::Analytic { name: binding_name },
    )
    .expect("toy family spec is well-formed by construction");

    ToyCircuit {
        spec,
        variant,
        family_seed,
        g,
        c,
        v,
        dp_ids,
        var_ids,
    }
}

impl ToyCircuit {
    pub fn spec(&self) -> &CircuitSpec {
        &self.spec
    }

    pub fn variant(&self) -> ToyVariant {
        self.variant
    }

    pub fn family_seed(&self) -> u64 {
        self.family_seed
    }

    /// Shared-block gain contribution, identical across variants of the
    /// same family.
    pub fn shared_gain_component(&self, dp: [f64; 4]) -> f64 {
        self.g.iter().zip(dp).map(|(g, w)| g * w.ln()).sum()
    }

    /// Shared-block current contribution, identical across variants of
    /// the same family.
    pub fn shared_current_component(&self, dp: [f64; 4]) -> f64 {
        self.c.iter().zip(dp).map(|(c, w)| c * w).sum()
    }

    /// Closed-form metrics at a point. `None` when the point lacks any
    /// of this circuit's parameters.
    pub fn metrics_at(&self, x: &DesignPoint) -> Option<BTreeMap<MetricId, f64>> {
        let mut dp = [0.0; 4];
        for (slot, id) in dp.iter_mut().zip(&self.dp_ids) {
            *slot = x.get(id)?;
        }
        let gd = self.shared_gain_component(dp);
        let cd = self.shared_current_component(dp);
        let mut vals = Vec::with_capacity(self.var_ids.len());
        for id in &self.var_ids {
            vals.push(x.get(id)?);
        }

        let mut metrics = BTreeMap::new();
        let mut put = |name: &str, v: f64| {
            metrics.insert(MetricId::new(name).unwrap(), v);
        };
        match self.variant {
            ToyVariant::Source => {
                let (w5, w6, rl) = (vals[0], vals[1], vals[2]);
                put("gain", gd + self.v[0] * w5.ln() + self.v[1] * rl.ln());
                put("ugf", self.v[2] * w6 / rl + self.v[3] * dp[0]);
                put("iq", cd + self.v[4] * w5 + self.v[5] * w6);
            }
            ToyVariant::Target => {
                let (w5, w6, ib, vb) = (vals[0], vals[1], vals[2], vals[3]);
                let detune = vb - TARGET_VB_CENTER;
                put("gain", gd + self.v[0] * w5.ln() + 8.0 - self.v[1] * detune * detune);
                put("cmrr", 0.8 * gd + self.v[2] * w6.ln() + self.v[3] * ib.ln());
                put("iq", cd + self.v[4] * ib);
            }
        }
        Some(metrics)
    }

    /// Ground-truth directional influences of every parameter on every
    /// metric it enters. Monotone effects carry their sign; the TARGET
    /// bias voltage is genuinely nonmonotonic and is exported as such.
    pub fn ground_truth_influences(&self) -> Vec<InfluenceRecord> {
        let infl = |p: &str, s: &str, m: &str, d: InfluenceDirection, note: &str| {
            InfluenceRecord::new(
                ParamId::new(p).unwrap(),
                SubStructureId::new(s).unwrap(),
                MetricId::new(m).unwrap(),
                d,
                note,
            )
            .unwrap()
        };
        use InfluenceDirection::{Negative, Nonmonotonic, Positive};
        let mut out = Vec::new();
        for w in ["dp_w1", "dp_w2", "dp_w3", "dp_w4"] {
            out.push(infl(w, "diffpair", "gain", Positive, ""));
            out.push(infl(w, "diffpair", "iq", Positive, ""));
        }
        match self.variant {
            ToyVariant::Source => {
                out.push(infl(
                    "dp_w1",
                    "diffpair",
                    "ugf",
                    Positive,
                    "input device loads the unity-gain frequency directly",
                ));
                out.push(infl("os_w5", "out_stage", "gain", Positive, ""));
                out.push(infl("os_rl", "out_stage", "gain", Positive, ""));
                out.push(infl("os_w6", "out_stage", "ugf", Positive, ""));
                out.push(infl(
                    "os_rl",
                    "out_stage",
                    "ugf",
                    Negative,
                    "larger load resistance slows the output pole",
                ));
                out.push(infl("os_w5", "out_stage", "iq", Positive, ""));
                out.push(infl("os_w6", "out_stage", "iq", Positive, ""));
            }
            ToyVariant::Target => {
                for w in ["dp_w1", "dp_w2", "dp_w3", "dp_w4"] {
                    out.push(infl(w, "diffpair", "cmrr", Positive, ""));
                }
                out.push(infl("cs_w5", "cascode", "gain", Positive, ""));
                out.push(infl(
                    "cs_vb",
                    "cascode",
                    "gain",
                    Nonmonotonic,
                    "gain peaks at the bias sweet spot and falls off both ways",
                ));
                out.push(infl("cs_w6", "cascode", "cmrr", Positive, ""));
                out.push(infl("cs_ib", "cascode", "cmrr", Positive, ""));
                out.push(infl("cs_ib", "cascode", "iq", Positive, ""));
            }
        }
        out
    }

    /// Ground-truth knowledge summary: validates cleanly against this
    /// circuit's spec and can seed a reuse library.
    pub fn ground_truth_summary(&self) -> KnowledgeSummary {
        let metric = |m: &str| MetricId::new(m).unwrap();
        let sub = |s: &str| SubStructureId::new(s).unwrap();
        let mut k = KnowledgeSummary::new(self.spec.circuit_id.clone());
        k.insert_tradeoff(
            TradeoffRecord::new(
                metric("gain"),
                metric("iq"),
                "wider diffpair devices raise gain but burn bias current",
            )
            .unwrap(),
        );
        k.insert_association(
            AssociationRecord::to_tradeoff(sub("diffpair"), metric("gain"), metric("iq"), "")
                .unwrap(),
        );
        k.insert_association(
            AssociationRecord::to_metric(sub("diffpair"), metric("gain"), "").unwrap(),
        );
        k.insert_association(
            AssociationRecord::to_metric(sub("diffpair"), metric("iq"), "").unwrap(),
        );
        match self.variant {
            ToyVariant::Source => {
                k.insert_association(
                    AssociationRecord::to_metric(sub("diffpair"), metric("ugf"), "").unwrap(),
                );
                for m in ["gain", "ugf", "iq"] {
                    k.insert_association(
                        AssociationRecord::to_metric(sub("out_stage"), metric(m), "").unwrap(),
                    );
                }
            }
            ToyVariant::Target => {
                k.insert_tradeoff(
                    TradeoffRecord::new(
                        metric("cmrr"),
                        metric("iq"),
                        "rejection improves with tail current that the budget must absorb",
                    )
                    .unwrap(),
                );
                k.insert_association(
                    AssociationRecord::to_metric(sub("diffpair"), metric("cmrr"), "").unwrap(),
                );
                for m in ["gain", "cmrr", "iq"] {
                    k.insert_association(
                        AssociationRecord::to_metric(sub("cascode"), metric(m), "").unwrap(),
                    );
                }
            }
        }
        for rec in self.ground_truth_influences() {
            k.insert_influence(rec);
        }
        k
    }
}

fn parse_toy_binding(name: &str) -> Option<(u64, ToyVariant)> {
    if let Some(rest) = name.strip_prefix("toy_src#") {
        return rest.parse().ok().map(|s| (s, ToyVariant::Source));
    }
    if let Some(rest) = name.strip_prefix("toy_tgt#") {
        return rest.parse().ok().map(|s| (s, ToyVariant::Target));
    }
    None
}

fn evaluate_analytic(name: &str, x: &DesignPoint) -> EvaluationOutcome {
    let Some((family_seed, variant)) = parse_toy_binding(name) else {
        return EvaluationOutcome::failure(format!("unknown analytic model '{name}'"));
    };
    let circuit = toy_circuit_family(family_seed, variant);
    match circuit.metrics_at(x) {
        Some(metrics) => EvaluationOutcome {
            metrics,
            valid: true,
            diagnostics: String::new(),
        },
        None => EvaluationOutcome::failure(format!(
            "design point lacks parameters required by analytic model '{name}'"
        )),
    }
}

// ---------------------------------------------------------------------------
// External subprocess adapter

static EXCHANGE_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Removes the exchange directory when the evaluation ends, whichever
/// way it ends.
struct DirGuard(PathBuf);

impl Drop for DirGuard {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.0);
    }
}

fn run_external(
    command: &str,
    timeout_s: f64,
    spec: &CircuitSpec,
    x: &DesignPoint,
) -> EvaluationOutcome {
    if !command.contains("{input}") || !command.contains("{output}") {
        return EvaluationOutcome::failure(
            "command template must contain {input} and {output} placeholders",
        );
    }
    let dir = std::env::temp_dir().join(format!(
        "uso-eval-{}-{}",
        std::process::id(),
        EXCHANGE_COUNTER.fetch_add(1, Ordering::SeqCst)
    ));
    if let Err(e) = fs::create_dir_all(&dir) {
        return EvaluationOutcome::failure(format!("cannot create exchange dir: {e}"));
    }
    let _guard = DirGuard(dir.clone());
    let input_path = dir.join("design.in");
    let output_path = dir.join("metrics.out");
    let stderr_path = dir.join("stderr.log");

    let mut input = String::new();
    for p in &spec.params {
        let v = x.get(&p.id).expect("point validated against this spec");
        input.push_str(&format!("{}={v}\n", p.id));
    }
    if let Err(e) = fs::write(&input_path, input) {
        return EvaluationOutcome::failure(format!("cannot write design file: {e}"));
    }

    let line = command
        .replace("{input}", &input_path.display().to_string())
        .replace("{output}", &output_path.display().to_string());
    let stderr_file = match fs::File::create(&stderr_path) {
        Ok(f) => f,
        Err(e) => return EvaluationOutcome::failure(format!("cannot open stderr log: {e}")),
    };
    let child = Command::new("sh")
        .arg("-c")
        .arg(&line)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(stderr_file)
        .spawn();
    let mut child = match child {
        Ok(c) => c,
        Err(e) => return EvaluationOutcome::failure(format!("cannot spawn command: {e}")),
    };

    let deadline = Instant::now() + Duration::from_secs_f64(timeout_s.max(0.0));
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) => {
                if Instant::now() >= deadline {
                    let _ = child.kill();
                    let _ = child.wait();
                    return EvaluationOutcome::failure(format!(
                        "timeout after {timeout_s}s: {line}"
                    ));
                }
                std::thread::sleep(Duration::from_millis(10));
            }
            Err(e) => return EvaluationOutcome::failure(format!("wait failed: {e}")),
        }
    };
    if !status.success() {
        let tail = stderr_tail(&stderr_path);
        return EvaluationOutcome::failure(format!("nonzero exit ({status}): {tail}"));
    }

    let text = match fs::read_to_string(&output_path) {
        Ok(t) => t,
        Err(e) => {
            return EvaluationOutcome::failure(format!("parse failure: cannot read output: {e}"))
        }
    };
    match parse_metric_lines(&text) {
        Ok(metrics) => EvaluationOutcome {
            metrics,
            valid: true,
            diagnostics: String::new(),
        },
        Err(reason) => EvaluationOutcome::failure(format!("parse failure: {reason}")),
    }
}

fn stderr_tail(path: &Path) -> String {
    let text = fs::read_to_string(path).unwrap_or_default();
    let tail: Vec<&str> = text.lines().rev().take(5).collect();
    tail.into_iter().rev().collect::<Vec<_>>().join(" | ")
}

/// Parses `metric=value` lines; `#` starts a comment, blank lines are
/// skipped.
fn parse_metric_lines(text: &str) -> Result<BTreeMap<MetricId, f64>, String> {
    let mut metrics = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((name, value)) = line.split_once('=') else {
            return Err(format!("line {}: expected metric=value", lineno + 1));
        };
        let id = MetricId::new(name.trim())
            .map_err(|e| format!("line {}: bad metric name: {e}", lineno + 1))?;
        let v: f64 = value
            .trim()
            .parse()
            .map_err(|e| format!("line {}: bad value: {e}", lineno + 1))?;
        metrics.insert(id, v);
    }
    Ok(metrics)
}
