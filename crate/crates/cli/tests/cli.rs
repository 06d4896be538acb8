//! End-to-end tests of the `uso` binary: exit codes, artifact layout,
//! override precedence, and reproducibility.

use std::path::Path;
use std::process::{Command, Output};

fn uso(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uso"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("no signal")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

const TOY_RUN_CONFIG: &str = r#"
mode = "USO_R"
seed = 3
init_points = 2
iterations = 2

[circuit]
builtin = "toy_source"

[advisor]
mock = "PERTURB"
"#;

#[test]
fn run_writes_the_full_artifact_set() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), TOY_RUN_CONFIG).unwrap();
    let out = uso(&["run", "exp.toml", "--out", "artifacts"], dir.path());
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("best FOM"));

    let artifacts = dir.path().join("artifacts");
    for name in ["manifest.json", "buffer.jsonl", "trace.jsonl", "transcripts.jsonl", "summary.ks"]
    {
        assert!(artifacts.join(name).exists(), "{name} missing");
    }
    let buffer = std::fs::read_to_string(artifacts.join("buffer.jsonl")).unwrap();
    assert_eq!(buffer.lines().count(), 6, "2 init + 2 per step * 2 steps");

    // Every artifact the manifest names actually exists.
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(artifacts.join("manifest.json")).unwrap())
            .unwrap();
    for (_, name) in manifest["artifacts"].as_object().unwrap() {
        if let Some(name) = name.as_str() {
            assert!(artifacts.join(name).exists(), "{name} named but missing");
        }
    }
    assert_eq!(manifest["total_evaluations"], 6);
}

#[test]
fn malformed_config_exits_2_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("bad.toml"),
        "mode = \"BO\"\nitters = 3\n[circuit]\nbuiltin = \"branin\"\n",
    )
    .unwrap();
    let out = uso(&["run", "bad.toml", "--out", "artifacts"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("itters"), "names the unknown key");
    assert!(!dir.path().join("artifacts").exists());
}

#[test]
fn flag_overrides_reach_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = r#"
mode = "HYBRID"
seed = 1
init_points = 2
iterations = 5

[circuit]
builtin = "sphere2"
"#;
    std::fs::write(dir.path().join("exp.toml"), config).unwrap();
    let out = uso(
        &["run", "exp.toml", "--mode", "uso_c", "--seed", "7", "--iters", "1", "--out", "a"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("a/manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["mode"], "USO_C");
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["iterations"], 1);
}

#[test]
fn run_without_an_output_directory_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), TOY_RUN_CONFIG).unwrap();
    let out = uso(&["run", "exp.toml"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("output directory"));
}

#[test]
fn unreachable_advisor_exits_3_and_keeps_partials() {
    let dir = tempfile::tempdir().unwrap();
    let config = r#"
mode = "USO_R"
seed = 3
init_points = 2
iterations = 2

[circuit]
builtin = "toy_source"

[advisor]
endpoint = "http://127.0.0.1:9"
timeout_s = 1.0
max_retries = 1
"#;
    std::fs::write(dir.path().join("exp.toml"), config).unwrap();
    let out = uso(&["run", "exp.toml", "--out", "partial"], dir.path());
    assert_eq!(code(&out), 3, "stderr: {}", stderr(&out));
    let partial = dir.path().join("partial");
    assert!(partial.join("buffer.jsonl").exists());
    assert!(partial.join("trace.jsonl").exists());
    assert!(!partial.join("manifest.json").exists());
}

#[test]
fn rerunning_a_seed_reproduces_artifacts_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let config = r#"
mode = "USO_C"
seed = 11
init_points = 2
iterations = 2

[circuit]
builtin = "toy_source"

[advisor]
mock = "PERTURB"
"#;
    std::fs::write(dir.path().join("exp.toml"), config).unwrap();
    for out_dir in ["first", "second"] {
        let out = uso(&["run", "exp.toml", "--out", out_dir], dir.path());
        assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    }
    for name in ["buffer.jsonl", "trace.jsonl", "summary.ks"] {
        let a = std::fs::read(dir.path().join("first").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("second").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between reruns");
    }
}

const VALID_KS: &str = "KS/1\nCIRCUIT toy_src_0\nTRADEOFF gain iq\n\
                        ASSOC diffpair METRIC gain\nINFL dp_w1 IN diffpair ON gain DIR +\n";

#[test]
fn validate_ks_passes_a_coherent_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("good.ks"), VALID_KS).unwrap();
    let out = uso(&["validate-ks", "good.ks", "--builtin", "toy_source"], dir.path());
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("no findings"));
}

#[test]
fn validate_ks_reports_unknown_metric_with_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let doc = format!("{VALID_KS}TRADEOFF gain bogus\n");
    std::fs::write(dir.path().join("warn.ks"), doc).unwrap();
    let out = uso(&["validate-ks", "warn.ks", "--builtin", "toy_source"], dir.path());
    assert_eq!(code(&out), 1);
    let printed = stdout(&out);
    let lines: Vec<&str> = printed.lines().collect();
    assert_eq!(lines.len(), 1, "exactly one finding line: {lines:?}");
    assert!(lines[0].contains("bogus"));
}

#[test]
fn validate_ks_names_the_syntax_error_line() {
    let dir = tempfile::tempdir().unwrap();
    // Line 5 has the wrong arity for an INFL record.
    let doc = "KS/1\nCIRCUIT toy_src_0\nTRADEOFF gain iq\nASSOC diffpair METRIC gain\n\
               INFL dp_w1 gain\n";
    std::fs::write(dir.path().join("broken.ks"), doc).unwrap();
    let out = uso(&["validate-ks", "broken.ks", "--builtin", "toy_source"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 5"), "stderr: {}", stderr(&out));
}

#[test]
fn bench_tabulates_a_single_config_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid");
    std::fs::create_dir(&grid).unwrap();
    let config = r#"
mode = "BO"
init_points = 2
iterations = 1

[circuit]
builtin = "sphere2"
"#;
    std::fs::write(grid.join("bo_sphere.toml"), config).unwrap();
    let out = uso(
        &["bench", "grid", "--seeds", "5", "--out", "report"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let cells = std::fs::read_to_string(dir.path().join("report/cells.csv")).unwrap();
    assert_eq!(cells.lines().count(), 2, "header plus one row: {cells}");
    assert!(cells.lines().nth(1).unwrap().starts_with("bo_sphere,5,"));
    assert!(dir.path().join("report/summary.csv").exists());
    assert!(dir.path().join("report/table.txt").exists());
    assert!(stdout(&out).contains("bo_sphere"));
}

#[test]
fn bench_on_a_missing_directory_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = uso(&["bench", "no_such_dir", "--seeds", "1"], dir.path());
    assert_eq!(code(&out), 2);
}
