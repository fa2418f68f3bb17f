//! `dinas` command line: train, sample, eval, analyze, ablate.
//!
//! Exit codes: 0 success, 1 usage error (flags, config files, invalid
//! settings), 2 runtime error.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dinas_core::artifacts::{atomic_write, Checkpoint, RunManifest};
use dinas_core::bench::BenchmarkTable;
use dinas_core::cell::CellGraph;
use dinas_core::conditioning::{CombineSpace, ConditionVector};
use dinas_core::error::CoreError;
use dinas_core::harness::{
    ablate, ablate_csv, analyze, eval_search, feasibility_pct, prepare_experiment, run_training,
    AblateKind, EvalReport, ExperimentConfig, REPORT_SCHEMA_VERSION,
};
use dinas_core::sampling::{sample, SampleRequest, SamplerModel};
use dinas_core::training::loss_log_csv;

#[derive(Parser)]
#[command(name = "dinas", version, about = "Conditional graph diffusion for architecture cells")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from an experiment config; writes a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory (default: $DINAS_RUN_DIR or ./runs, plus run-<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample cells from a trained run directory.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        count: Option<usize>,
        /// Output directory (default: the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fixed-budget search evaluation over generated cells.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        queries: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Novelty / uniqueness / feasibility of generated cells.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep gamma, class count, or training-set size; emits CSV.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum CliError {
    Usage(String),
    Runtime(String),
}

/// Invalid settings are the caller's to fix; everything else failed at run
/// time.
fn classify(err: CoreError) -> CliError {
    match &err {
        CoreError::InvalidConfig { .. }
        | CoreError::InvalidSchema(_)
        | CoreError::InvalidSpace(_)
        | CoreError::UnknownCondition { .. }
        | CoreError::EmptyInput(_) => CliError::Usage(err.to_string()),
        _ => CliError::Runtime(err.to_string()),
    }
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("cannot parse config {}: {e}", path.display())))
}

fn run_root() -> PathBuf {
    std::env::var_os("DINAS_RUN_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn write_cells_jsonl(path: &Path, cells: &[CellGraph]) -> Result<(), CoreError> {
    let mut text = String::new();
    for cell in cells {
        text.push_str(&cell.canonical_json());
        text.push('\n');
    }
    atomic_write(path, text.as_bytes())
}

fn read_cells_jsonl(path: &Path) -> Result<Vec<CellGraph>, CliError> {
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::Usage(format!("cannot read cells {}: {e}", path.display())))?;
    let mut cells = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::Runtime(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let cell: CellGraph = serde_json::from_str(&line).map_err(|e| {
            CliError::Usage(format!("{}:{}: malformed cell: {e}", path.display(), idx + 1))
        })?;
        cells.push(cell);
    }
    Ok(cells)
}

fn cmd_train(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), CliError> {
    let mut cfg: ExperimentConfig = read_config(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let run_dir = out.unwrap_or_else(|| run_root().join(format!("run-{}", cfg.seed)));
    let exp = prepare_experiment(&cfg).map_err(classify)?;
    let (train_out, manifest, checkpoint) = run_training(&cfg, &exp).map_err(classify)?;
    std::fs::create_dir_all(&run_dir).map_err(|e| CliError::Runtime(e.to_string()))?;
    manifest
        .save(&run_dir.join("manifest.json"))
        .and_then(|_| checkpoint.save(&run_dir.join("checkpoint.json")))
        .and_then(|_| {
            atomic_write(
                &run_dir.join("loss.csv"),
                loss_log_csv(&train_out.loss_log).as_bytes(),
            )
        })
        .and_then(|_| exp.table.save(&run_dir.join("benchmark.jsonl")))
        .and_then(|_| {
            let cells: Vec<CellGraph> = exp.dataset.iter().map(|(c, _)| c.clone()).collect();
            write_cells_jsonl(&run_dir.join("training_cells.jsonl"), &cells)
        })
        .map_err(classify)?;
    println!("{}", run_dir.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleCliConfig {
    run_dir: PathBuf,
    /// Condition name -> target class; unnamed conditions stay null.
    conditions: BTreeMap<String, usize>,
    count: usize,
    #[serde(default = "default_gamma")]
    gamma: f64,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_true")]
    filter_valid: bool,
}

fn default_gamma() -> f64 {
    -4.0
}

fn default_true() -> bool {
    true
}

#[derive(Serialize)]
struct SampleReport<'a> {
    schema_version: &'static str,
    requested: usize,
    produced: usize,
    attempts: usize,
    validity_rate: f64,
    forward_calls: u64,
    seconds_per_arch: f64,
    budget_exhausted: bool,
    config_echo: &'a SampleCliConfig,
}

fn cmd_sample(
    config: &Path,
    seed: Option<u64>,
    gamma: Option<f64>,
    count: Option<usize>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let mut cfg: SampleCliConfig = read_config(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(gamma) = gamma {
        cfg.gamma = gamma;
    }
    if let Some(count) = count {
        cfg.count = count;
    }
    let manifest = RunManifest::load(&cfg.run_dir.join("manifest.json")).map_err(classify)?;
    let checkpoint =
        Checkpoint::load(&cfg.run_dir.join("checkpoint.json"), &manifest.schema_hash)
            .map_err(classify)?;
    let schema = &manifest.condition_schema;
    let mut classes = vec![None; schema.k()];
    for (name, &class) in &cfg.conditions {
        let idx = schema.index_of(name).map_err(classify)?;
        let d = schema.conditions[idx].d;
        if class >= d {
            return Err(CliError::Usage(format!(
                "condition '{name}' has {d} classes; got class {class}"
            )));
        }
        classes[idx] = Some(class);
    }
    let schedule = manifest.schedule().map_err(classify)?;
    let marginals = manifest.marginals();
    let model = SamplerModel {
        params: &checkpoint.params,
        dcfg: &checkpoint.denoiser_config,
        dims: &checkpoint.dims,
        schedule: &schedule,
        marginals: &marginals,
    };
    let request = SampleRequest {
        count: cfg.count,
        gamma: cfg.gamma,
        combine_space: CombineSpace::LogProbability,
        cond: ConditionVector { classes },
        seed: cfg.seed,
        filter_valid: cfg.filter_valid,
    };
    let output = sample(&model, &manifest.space, &request).map_err(classify)?;
    let out_dir = out.unwrap_or_else(|| cfg.run_dir.clone());
    std::fs::create_dir_all(&out_dir).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_cells_jsonl(&out_dir.join("cells.jsonl"), &output.cells).map_err(classify)?;
    let report = SampleReport {
        schema_version: REPORT_SCHEMA_VERSION,
        requested: cfg.count,
        produced: output.cells.len(),
        attempts: output.attempts,
        validity_rate: output.validity_rate,
        forward_calls: output.forward_calls,
        seconds_per_arch: output.elapsed_secs / output.cells.len().max(1) as f64,
        budget_exhausted: output.budget_exhausted,
        config_echo: &cfg,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
    atomic_write(&out_dir.join("sample_report.json"), json.as_bytes()).map_err(classify)?;
    println!("{json}");
    if output.budget_exhausted {
        return Err(CliError::Runtime(format!(
            "validity retry budget exhausted: produced {} of {}",
            output.cells.len(),
            cfg.count
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct EvalCliConfig {
    cells: PathBuf,
    benchmark: PathBuf,
    runs: usize,
    queries: usize,
    #[serde(default)]
    training_cells: Option<PathBuf>,
    #[serde(default)]
    latency_device: Option<String>,
    #[serde(default)]
    latency_threshold: Option<f64>,
}

fn cmd_eval(
    config: &Path,
    runs: Option<usize>,
    queries: Option<usize>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let mut cfg: EvalCliConfig = read_config(config)?;
    if let Some(runs) = runs {
        cfg.runs = runs;
    }
    if let Some(queries) = queries {
        cfg.queries = queries;
    }
    let cells = read_cells_jsonl(&cfg.cells)?;
    let table = BenchmarkTable::load(&cfg.benchmark).map_err(classify)?;
    table.reset_queries();
    let search = eval_search(&cells, &table, cfg.runs, cfg.queries).map_err(classify)?;
    let expected = (cfg.runs * cfg.queries) as u64;
    if table.query_count() != expected {
        return Err(CliError::Runtime(format!(
            "query audit failed: counter {} != {expected}",
            table.query_count()
        )));
    }
    let (novelty, uniqueness) = match &cfg.training_cells {
        Some(path) => {
            let training = read_cells_jsonl(path)?;
            let a = analyze(&cells, &training).map_err(classify)?;
            (Some(a.novelty_pct), Some(a.uniqueness_pct))
        }
        None => (None, None),
    };
    let feasibility = match (&cfg.latency_device, cfg.latency_threshold) {
        (Some(device), Some(threshold)) => {
            Some(feasibility_pct(&cells, &table, device, threshold).map_err(classify)?)
        }
        _ => None,
    };
    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION.into(),
        search,
        novelty_pct: novelty,
        uniqueness_pct: uniqueness,
        feasibility_pct: feasibility,
        seconds_per_arch: None,
        config_echo: serde_json::to_value(&cfg).map_err(|e| CliError::Runtime(e.to_string()))?,
    };
    emit_json(&report, out.as_deref())
}

#[derive(Debug, Serialize, Deserialize)]
struct AnalyzeCliConfig {
    cells: PathBuf,
    training_cells: PathBuf,
    #[serde(default)]
    benchmark: Option<PathBuf>,
    #[serde(default)]
    latency_device: Option<String>,
    #[serde(default)]
    latency_threshold: Option<f64>,
}

fn cmd_analyze(config: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    let cfg: AnalyzeCliConfig = read_config(config)?;
    let cells = read_cells_jsonl(&cfg.cells)?;
    let training = read_cells_jsonl(&cfg.training_cells)?;
    let mut report = analyze(&cells, &training).map_err(classify)?;
    if let (Some(path), Some(device), Some(threshold)) =
        (&cfg.benchmark, &cfg.latency_device, cfg.latency_threshold)
    {
        let table = BenchmarkTable::load(path).map_err(classify)?;
        report.feasibility_pct =
            Some(feasibility_pct(&cells, &table, device, threshold).map_err(classify)?);
    }
    emit_json(&report, out.as_deref())
}

#[derive(Debug, Serialize, Deserialize)]
struct AblateCliConfig {
    kind: AblateKind,
    grid: Vec<f64>,
    base: ExperimentConfig,
}

fn cmd_ablate(config: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    let cfg: AblateCliConfig = read_config(config)?;
    let rows = ablate(&cfg.base, cfg.kind, &cfg.grid).map_err(classify)?;
    let csv = ablate_csv(&rows);
    if let Some(path) = out {
        atomic_write(&path, csv.as_bytes()).map_err(classify)?;
    }
    print!("{csv}");
    Ok(())
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    if let Some(path) = out {
        atomic_write(path, json.as_bytes()).map_err(classify)?;
    }
    println!("{json}");
    Ok(())
}

fn real_main() -> Result<(), CliError> {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let _ = Cli::command();
            return Err(CliError::Usage(e.to_string()));
        }
    };
    match cli.cmd {
        Cmd::Train { config, seed, out } => cmd_train(&config, seed, out),
        Cmd::Sample {
            config,
            seed,
            gamma,
            count,
            out,
        } => cmd_sample(&config, seed, gamma, count, out),
        Cmd::Eval {
            config,
            runs,
            queries,
            out,
        } => cmd_eval(&config, runs, queries, out),
        Cmd::Analyze { config, out } => cmd_analyze(&config, out),
        Cmd::Ablate { config, out } => cmd_ablate(&config, out),
    }
}

fn main() {
    std::process::exit(match real_main() {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    })
}
