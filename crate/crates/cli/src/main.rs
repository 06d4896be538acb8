//! `uso`: run sizing-optimization experiments, validate KS/1 knowledge
//! files, and benchmark mode grids.
//!
//! Exit codes: 0 success, 1 validation findings, 2 configuration or
//! parse error, 3 runtime failure (partial artifacts are retained).

mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use uso_core::knowledge::{parse_summary, validate_summary};
use uso_core::orchestrator::{bench, run, BenchItem, BenchReport, RunError};
use uso_core::Evaluator;

use config::{assemble, load_config_file, resolve_circuit, Overrides};

#[derive(Parser)]
#[command(
    name = "uso",
    version,
    about = "Knowledge-reusing black-box circuit sizing optimizer",
    after_help = "HTTP advisor credentials are read from USO_ADVISOR_API_KEY; \
                  nothing else is taken from the environment."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one experiment described by a TOML config.
    Run(RunArgs),
    /// Check a KS/1 knowledge file against a circuit spec.
    ValidateKs(ValidateArgs),
    /// Run every config in a directory across a seed list and tabulate.
    Bench(BenchArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Override the config's mode (bo, hybrid, uso_r, uso_c).
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override the iteration count.
    #[arg(long)]
    iters: Option<usize>,
    /// Override the initialization batch size.
    #[arg(long)]
    init: Option<usize>,
    /// Override the UCB exploration weight.
    #[arg(long)]
    kappa: Option<f64>,
    /// Send advisor calls to this HTTP endpoint.
    #[arg(long, conflicts_with = "mock_advisor")]
    advisor_endpoint: Option<String>,
    /// Use a deterministic mock advisor (PERTURB, KNOWLEDGE_GUIDED,
    /// FIXED_SCRIPT) instead of any configured endpoint.
    #[arg(long)]
    mock_advisor: Option<String>,
    /// Artifact directory (overrides the config's out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    /// KS/1 knowledge file.
    ks_file: PathBuf,
    /// Circuit spec as JSON (alternative to --builtin).
    #[arg(long, conflicts_with = "builtin")]
    spec: Option<PathBuf>,
    /// Builtin circuit name (alternative to --spec).
    #[arg(long)]
    builtin: Option<String>,
    /// Instance seed for the toy builtins.
    #[arg(long, requires = "builtin")]
    family_seed: Option<u64>,
}

#[derive(Args)]
struct BenchArgs {
    /// Directory of experiment configs (one grid item per *.toml).
    config_dir: PathBuf,
    /// Seeds to run each config at.
    #[arg(long, required = true, value_delimiter = ',', num_args = 1..)]
    seeds: Vec<u64>,
    /// Report directory for cells.csv, summary.csv, and table.txt.
    #[arg(long, default_value = "bench_out")]
    out: PathBuf,
    /// Force a mock advisor for every run.
    #[arg(long, conflicts_with = "advisor_endpoint")]
    mock_advisor: Option<String>,
    /// Force an HTTP advisor endpoint for every run.
    #[arg(long)]
    advisor_endpoint: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::ValidateKs(args) => cmd_validate_ks(&args),
        Command::Bench(args) => cmd_bench(&args),
    };
    ExitCode::from(code)
}

fn config_error(msg: impl std::fmt::Display) -> u8 {
    eprintln!("error: {msg}");
    2
}

fn runtime_error(msg: impl std::fmt::Display) -> u8 {
    eprintln!("error: {msg}");
    3
}

fn cmd_run(args: &RunArgs) -> u8 {
    let overrides = Overrides {
        mode: args.mode.clone(),
        seed: args.seed,
        iters: args.iters,
        init: args.init,
        kappa: args.kappa,
        advisor_endpoint: args.advisor_endpoint.clone(),
        mock_advisor: args.mock_advisor.clone(),
        out: args.out.clone(),
    };
    let file = match load_config_file(&args.config) {
        Ok(f) => f,
        Err(e) => return config_error(e),
    };
    let base = args
        .config
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    let loaded = match assemble(&file, &overrides, &base) {
        Ok(l) => l,
        Err(e) => return config_error(e),
    };
    if loaded.config.out_dir.is_none() {
        return config_error("no output directory: set out_dir in the config or pass --out");
    }

    let evaluator = Evaluator::new();
    let result = run(
        &loaded.config,
        &evaluator,
        loaded.working_client,
        loaded.critique_client,
    );
    match result {
        Ok(result) => {
            println!(
                "best FOM {:.6} after {} evaluations (mode {}, seed {})",
                result.best.fom,
                result.buffer.len(),
                loaded.config.mode,
                loaded.config.seed
            );
            for warning in &result.warnings {
                eprintln!("warning: {warning}");
            }
            if let Some(paths) = &result.artifacts {
                let dir = paths.manifest.parent().unwrap();
                let shown = dir.canonicalize().unwrap_or_else(|_| dir.to_path_buf());
                println!("artifacts: {}", shown.display());
            }
            0
        }
        Err(RunError::Config(e)) => config_error(e),
        Err(e) => runtime_error(e),
    }
}

fn cmd_validate_ks(args: &ValidateArgs) -> u8 {
    if args.spec.is_none() && args.builtin.is_none() {
        return config_error("a circuit is required: pass --spec or --builtin");
    }
    let spec = match resolve_circuit(
        args.builtin.as_deref(),
        args.family_seed,
        args.spec.as_deref(),
        None,
        std::path::Path::new("."),
    ) {
        Ok(s) => s,
        Err(e) => return config_error(e),
    };
    let text = match std::fs::read_to_string(&args.ks_file) {
        Ok(t) => t,
        Err(e) => return config_error(format!("cannot read {}: {e}", args.ks_file.display())),
    };
    let summary = match parse_summary(&text) {
        Ok(s) => s,
        Err(e) => return config_error(format!("{}: {e}", args.ks_file.display())),
    };
    let report = validate_summary(&summary, &spec);
    if report.is_empty() {
        println!(
            "{}: {} records, no findings",
            args.ks_file.display(),
            summary.record_count()
        );
        return 0;
    }
    for finding in &report.findings {
        println!("{finding}");
    }
    eprintln!("{} finding(s)", report.len());
    1
}

fn cmd_bench(args: &BenchArgs) -> u8 {
    let entries = match std::fs::read_dir(&args.config_dir) {
        Ok(e) => e,
        Err(e) => {
            return config_error(format!("cannot read {}: {e}", args.config_dir.display()))
        }
    };
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    files.sort();
    if files.is_empty() {
        return config_error(format!(
            "no *.toml configs in {}",
            args.config_dir.display()
        ));
    }

    let mut cells = Vec::new();
    let mut rows = Vec::new();
    for path in &files {
        let file = match load_config_file(path) {
            Ok(f) => f,
            Err(e) => return config_error(e),
        };
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let overrides = Overrides {
            mock_advisor: args.mock_advisor.clone(),
            advisor_endpoint: args.advisor_endpoint.clone(),
            ..Overrides::default()
        };
        // Assemble once to surface config errors before any run; the
        // factory re-assembles per cell so each gets fresh clients
        // seeded by that cell's seed.
        let mut probe = match assemble(&file, &overrides, &args.config_dir) {
            Ok(l) => l,
            Err(e) => return config_error(format!("{}: {e}", path.display())),
        };
        probe.config.out_dir = None;
        let item = BenchItem {
            label,
            config: probe.config,
        };
        let factory = |cfg: &uso_core::ExperimentConfig| {
            let cell_overrides = Overrides {
                mock_advisor: args.mock_advisor.clone(),
                advisor_endpoint: args.advisor_endpoint.clone(),
                seed: Some(cfg.seed),
                ..Overrides::default()
            };
            let cell = assemble(&file, &cell_overrides, &args.config_dir)
                .expect("config assembled once already");
            (cell.working_client, cell.critique_client)
        };
        let report = bench(&[item], &args.seeds, &factory);
        cells.extend(report.cells);
        rows.extend(report.rows);
    }
    let report = BenchReport { cells, rows };

    if let Err(e) = std::fs::create_dir_all(&args.out) {
        return runtime_error(format!("cannot create {}: {e}", args.out.display()));
    }
    let table = report.table();
    let writes = [
        ("cells.csv", report.cells_csv()),
        ("summary.csv", report.summary_csv()),
        ("table.txt", table.clone()),
    ];
    for (name, content) in writes {
        if let Err(e) = std::fs::write(args.out.join(name), content) {
            return runtime_error(format!("cannot write {name}: {e}"));
        }
    }
    print!("{table}");
    println!("reports: {}", args.out.display());

    if report.cells.iter().all(|c| c.error.is_some()) {
        return runtime_error("every benchmark run failed");
    }
    for cell in report.cells.iter().filter(|c| c.error.is_some()) {
        eprintln!(
            "warning: {} seed {} failed: {}",
            cell.label,
            cell.seed,
            cell.error.as_deref().unwrap_or("")
        );
    }
    0
}
