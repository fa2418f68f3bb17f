//! Evaluation harness: experiment configuration, the end-to-end
//! prepare/train/sample/evaluate pipeline, search-metric evaluation with
//! query accounting, novelty/uniqueness/feasibility analysis, and ablation
//! sweeps.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifacts::{Checkpoint, RunManifest, ARTIFACT_SCHEMA_VERSION};
use crate::bench::{synth_benchmark, BenchmarkRecord, BenchmarkTable, SynthConfig};
use crate::cell::{canonical_key, enumerate_space, CellGraph, SearchSpaceSpec};
use crate::conditioning::{
    calibrate_condition, CombineSpace, ConditionSchema, ConditionSpec, ConditionVector, Direction,
    SplitSpec,
};
use crate::denoiser::DenoiserConfig;
use crate::error::CoreError;
use crate::sampling::{sample, SampleOutput, SampleRequest, SamplerModel};
use crate::spaces::{desk_space, nb201_style_space};
use crate::training::{train, TrainConfig, TrainOutput};

pub const REPORT_SCHEMA_VERSION: &str = "1";

/// Which benchmark metric a condition is calibrated and discretized on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum MetricSource {
    ValAcc,
    TestAcc,
    Latency { device: String },
}

impl MetricSource {
    pub fn extract(&self, record: &BenchmarkRecord) -> Result<f64, CoreError> {
        match self {
            MetricSource::ValAcc => Ok(record.val_acc),
            MetricSource::TestAcc => Ok(record.test_acc),
            MetricSource::Latency { device } => {
                record
                    .latency
                    .get(device)
                    .copied()
                    .ok_or_else(|| CoreError::InvalidConfig {
                        field: "latency device".into(),
                        reason: format!("benchmark has no device '{device}'"),
                    })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionConfig {
    pub name: String,
    pub metric: MetricSource,
    pub direction: Direction,
    pub splits: SplitSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SpaceConfig {
    Desk { slots: usize, ops: usize },
    Nb201Style,
}

impl SpaceConfig {
    pub fn build(&self) -> SearchSpaceSpec {
        match self {
            SpaceConfig::Desk { slots, ops } => desk_space(*slots, *ops),
            SpaceConfig::Nb201Style => nb201_style_space(),
        }
    }
}

/// One self-contained experiment: synthetic space + oracle + conditions +
/// training + sampling + evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub space: SpaceConfig,
    pub bench: SynthConfig,
    pub conditions: Vec<ConditionConfig>,
    pub train: TrainConfig,
    pub denoiser: DenoiserConfig,
    /// Train on the first `train_size` cells of a seed-shuffled enumeration;
    /// None trains on the whole space.
    pub train_size: Option<usize>,
    pub seed: u64,
    pub gamma: f64,
    pub sample_count: usize,
    pub eval_runs: usize,
    pub eval_queries: usize,
}

/// Prepared inputs shared by training and evaluation.
pub struct Experiment {
    pub space: SearchSpaceSpec,
    pub table: BenchmarkTable,
    pub schema: ConditionSchema,
    pub dataset: Vec<(CellGraph, ConditionVector)>,
}

/// Enumerate the space, score it with the synthetic oracle, calibrate the
/// condition schema on the training subset, and discretize every training
/// cell into its condition vector. Calibration reads the table uncounted.
pub fn prepare_experiment(cfg: &ExperimentConfig) -> Result<Experiment, CoreError> {
    let space = cfg.space.build();
    space.check()?;
    let mut cells = enumerate_space(&space)?;
    let table = synth_benchmark(&cells, &cfg.bench)?;
    if let Some(size) = cfg.train_size {
        if size == 0 || size > cells.len() {
            return Err(CoreError::InvalidConfig {
                field: "train_size".into(),
                reason: format!("must be in 1..={}", cells.len()),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_6e64);
        cells.shuffle(&mut rng);
        cells.truncate(size);
    }
    if cfg.conditions.is_empty() {
        return Err(CoreError::InvalidSchema("no conditions configured".into()));
    }

    let mut metric_values: Vec<Vec<f64>> = Vec::with_capacity(cfg.conditions.len());
    for cond in &cfg.conditions {
        let mut values = Vec::with_capacity(cells.len());
        for cell in &cells {
            let record = table
                .peek(&canonical_key(cell))
                .expect("enumerated cell is in its own benchmark");
            values.push(cond.metric.extract(record)?);
        }
        metric_values.push(values);
    }
    let mut entries = Vec::with_capacity(cfg.conditions.len());
    for (cond, values) in cfg.conditions.iter().zip(&metric_values) {
        let spec = ConditionSpec {
            name: cond.name.clone(),
            direction: cond.direction,
            splits: cond.splits.clone(),
        };
        entries.push(calibrate_condition(&spec, values)?);
    }
    let schema = ConditionSchema {
        conditions: entries,
    };
    schema.check()?;

    let dataset = cells
        .iter()
        .enumerate()
        .map(|(i, cell)| {
            let classes = schema
                .conditions
                .iter()
                .enumerate()
                .map(|(c, entry)| Some(crate::conditioning::discretize(metric_values[c][i], entry)))
                .collect();
            (cell.clone(), ConditionVector { classes })
        })
        .collect();
    Ok(Experiment {
        space,
        table,
        schema,
        dataset,
    })
}

/// Train and package the run artifacts.
pub fn run_training(
    cfg: &ExperimentConfig,
    exp: &Experiment,
) -> Result<(TrainOutput, RunManifest, Checkpoint), CoreError> {
    let out = train(
        &exp.space,
        &exp.schema,
        &exp.dataset,
        &cfg.train,
        &cfg.denoiser,
        cfg.seed,
    )?;
    let manifest = RunManifest {
        schema_version: ARTIFACT_SCHEMA_VERSION.into(),
        m_x: out.marginals.m_x.clone(),
        m_e: out.marginals.m_e.clone(),
        t_max: out.schedule.t_max,
        s: out.schedule.s,
        node_count_dist: vec![(exp.space.n_nodes, 1.0)],
        condition_schema: exp.schema.clone(),
        schema_hash: exp.schema.hash(),
        space: exp.space.clone(),
        train_config: cfg.train,
        denoiser_config: cfg.denoiser,
        seed: cfg.seed,
        final_loss: out.final_loss(),
    };
    let checkpoint = Checkpoint::new(&cfg.denoiser, &out.dims, &exp.schema, out.params.clone());
    Ok((out, manifest, checkpoint))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchStats {
    pub runs: usize,
    pub queries_per_run: usize,
    pub max_val_acc_mean: f64,
    pub max_val_acc_std: f64,
    pub corresponding_test_acc_mean: f64,
}

/// Fixed-budget search evaluation: run r consumes generated cells
/// [r*Q, (r+1)*Q) in generation order, querying the benchmark for each
/// (duplicates and misses still cost a query), and records the maximum
/// validation accuracy and its paired test accuracy.
pub fn eval_search(
    cells: &[CellGraph],
    table: &BenchmarkTable,
    runs: usize,
    queries: usize,
) -> Result<SearchStats, CoreError> {
    if runs == 0 || queries == 0 {
        return Err(CoreError::InvalidConfig {
            field: if runs == 0 { "runs" } else { "queries" }.into(),
            reason: "must be >= 1".into(),
        });
    }
    let needed = runs * queries;
    if cells.len() < needed {
        return Err(CoreError::InsufficientCells {
            needed,
            have: cells.len(),
        });
    }
    let mut max_vals = Vec::with_capacity(runs);
    let mut tests = Vec::with_capacity(runs);
    for r in 0..runs {
        let mut best: Option<(f64, f64)> = None;
        for cell in &cells[r * queries..(r + 1) * queries] {
            if let Some(record) = table.query(&canonical_key(cell)) {
                if best.map_or(true, |(v, _)| record.val_acc > v) {
                    best = Some((record.val_acc, record.test_acc));
                }
            }
        }
        let (v, t) = best.unwrap_or((0.0, 0.0));
        max_vals.push(v);
        tests.push(t);
    }
    let (mean, std) = mean_std(&max_vals);
    Ok(SearchStats {
        runs,
        queries_per_run: queries,
        max_val_acc_mean: mean,
        max_val_acc_std: std,
        corresponding_test_acc_mean: tests.iter().sum::<f64>() / runs as f64,
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeReport {
    pub schema_version: String,
    pub n_generated: usize,
    pub novelty_pct: f64,
    pub uniqueness_pct: f64,
    pub feasibility_pct: Option<f64>,
}

/// Novelty: percentage of generated instances whose key is absent from the
/// training set. Uniqueness: percentage of generated instances whose key
/// occurs exactly once among the generations.
pub fn analyze(generated: &[CellGraph], training: &[CellGraph]) -> Result<AnalyzeReport, CoreError> {
    if generated.is_empty() {
        return Err(CoreError::EmptyInput("generated cells".into()));
    }
    let training_keys: std::collections::BTreeSet<_> =
        training.iter().map(canonical_key).collect();
    let keys: Vec<_> = generated.iter().map(canonical_key).collect();
    let mut counts: BTreeMap<&crate::cell::CanonicalKey, usize> = BTreeMap::new();
    for key in &keys {
        *counts.entry(key).or_insert(0) += 1;
    }
    let novel = keys.iter().filter(|k| !training_keys.contains(k)).count();
    let unique_instances = counts.values().filter(|&&c| c == 1).count();
    let n = generated.len() as f64;
    Ok(AnalyzeReport {
        schema_version: REPORT_SCHEMA_VERSION.into(),
        n_generated: generated.len(),
        novelty_pct: 100.0 * novel as f64 / n,
        uniqueness_pct: 100.0 * unique_instances as f64 / n,
        feasibility_pct: None,
    })
}

/// Percentage of generated cells whose benchmark latency on `device` meets
/// the threshold; cells missing from the table count as infeasible. Reads
/// the table uncounted (analysis, not search).
pub fn feasibility_pct(
    generated: &[CellGraph],
    table: &BenchmarkTable,
    device: &str,
    threshold: f64,
) -> Result<f64, CoreError> {
    if generated.is_empty() {
        return Err(CoreError::EmptyInput("generated cells".into()));
    }
    let feasible = generated
        .iter()
        .filter(|cell| {
            table
                .peek(&canonical_key(cell))
                .and_then(|r| r.latency.get(device))
                .map_or(false, |&lat| lat <= threshold)
        })
        .count();
    Ok(100.0 * feasible as f64 / generated.len() as f64)
}

/// Full machine-readable evaluation report with config echo.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: String,
    pub search: SearchStats,
    pub novelty_pct: Option<f64>,
    pub uniqueness_pct: Option<f64>,
    pub feasibility_pct: Option<f64>,
    pub seconds_per_arch: Option<f64>,
    pub config_echo: serde_json::Value,
}

/// Outcome of one full prepare → train → sample → evaluate cycle.
pub struct PipelineOutcome {
    pub experiment: Experiment,
    pub manifest: RunManifest,
    pub checkpoint: Checkpoint,
    pub sample_output: SampleOutput,
    pub report: EvalReport,
}

/// Run the whole cycle with the guided condition "best class on every
/// configured condition".
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutcome, CoreError> {
    let exp = prepare_experiment(cfg)?;
    let (out, manifest, checkpoint) = run_training(cfg, &exp)?;
    let model = SamplerModel {
        params: &out.params,
        dcfg: &cfg.denoiser,
        dims: &out.dims,
        schedule: &out.schedule,
        marginals: &out.marginals,
    };
    let request = SampleRequest {
        count: cfg.sample_count,
        gamma: cfg.gamma,
        combine_space: CombineSpace::LogProbability,
        cond: ConditionVector {
            classes: vec![Some(0); exp.schema.k()],
        },
        seed: cfg.seed,
        filter_valid: true,
    };
    let sample_output = sample(&model, &exp.space, &request)?;
    if sample_output.budget_exhausted {
        return Err(CoreError::RetryBudgetExhausted {
            produced: sample_output.cells.len(),
            requested: cfg.sample_count,
        });
    }
    exp.table.reset_queries();
    let search = eval_search(
        &sample_output.cells,
        &exp.table,
        cfg.eval_runs,
        cfg.eval_queries,
    )?;
    let training_cells: Vec<CellGraph> = exp.dataset.iter().map(|(c, _)| c.clone()).collect();
    let analysis = analyze(&sample_output.cells, &training_cells)?;
    let feasibility = exp
        .schema
        .conditions
        .iter()
        .zip(&cfg.conditions)
        .find_map(|(entry, cond)| match (&cond.metric, entry.direction) {
            (MetricSource::Latency { device }, Direction::LowerIsBetter) => Some(
                feasibility_pct(
                    &sample_output.cells,
                    &exp.table,
                    device,
                    entry.thresholds[0],
                ),
            ),
            _ => None,
        })
        .transpose()?;
    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION.into(),
        search,
        novelty_pct: Some(analysis.novelty_pct),
        uniqueness_pct: Some(analysis.uniqueness_pct),
        feasibility_pct: feasibility,
        seconds_per_arch: Some(sample_output.elapsed_secs / sample_output.cells.len() as f64),
        config_echo: serde_json::to_value(cfg)?,
    };
    Ok(PipelineOutcome {
        experiment: exp,
        manifest,
        checkpoint,
        sample_output,
        report,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblateKind {
    Gamma,
    Classes,
    TrainSize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblateRow {
    pub setting: f64,
    pub max_val_acc_mean: Option<f64>,
    pub max_val_acc_std: Option<f64>,
    pub corresponding_test_acc_mean: Option<f64>,
    pub validity_rate: Option<f64>,
    pub error: Option<String>,
}

/// Percentile ladder used for the class-count sweep; d classes take the
/// last d-1 entries.
pub const CLASS_SWEEP_PERCENTILES: [f64; 4] = [30.0, 50.0, 80.0, 95.0];

fn apply_setting(
    base: &ExperimentConfig,
    kind: AblateKind,
    value: f64,
) -> Result<ExperimentConfig, CoreError> {
    let mut cfg = base.clone();
    match kind {
        AblateKind::Gamma => cfg.gamma = value,
        AblateKind::Classes => {
            let d = value as usize;
            if !(2..=CLASS_SWEEP_PERCENTILES.len() + 1).contains(&d) || d as f64 != value {
                return Err(CoreError::InvalidConfig {
                    field: "classes".into(),
                    reason: format!("must be an integer in 2..={}", CLASS_SWEEP_PERCENTILES.len() + 1),
                });
            }
            let splits = CLASS_SWEEP_PERCENTILES[CLASS_SWEEP_PERCENTILES.len() - (d - 1)..].to_vec();
            let first = cfg.conditions.first_mut().ok_or_else(|| {
                CoreError::InvalidSchema("class sweep needs at least one condition".into())
            })?;
            first.splits = SplitSpec::Percentiles(splits);
        }
        AblateKind::TrainSize => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(CoreError::InvalidConfig {
                    field: "train_size".into(),
                    reason: "must be a positive integer".into(),
                });
            }
            cfg.train_size = Some(value as usize);
        }
    }
    Ok(cfg)
}

/// One full cycle per grid value; per-setting failures land in the row and
/// the sweep continues.
pub fn ablate(
    base: &ExperimentConfig,
    kind: AblateKind,
    grid: &[f64],
) -> Result<Vec<AblateRow>, CoreError> {
    if grid.is_empty() {
        return Err(CoreError::EmptyInput("ablation grid".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &value in grid {
        let outcome = apply_setting(base, kind, value).and_then(|cfg| run_pipeline(&cfg));
        rows.push(match outcome {
            Ok(o) => AblateRow {
                setting: value,
                max_val_acc_mean: Some(o.report.search.max_val_acc_mean),
                max_val_acc_std: Some(o.report.search.max_val_acc_std),
                corresponding_test_acc_mean: Some(o.report.search.corresponding_test_acc_mean),
                validity_rate: Some(o.sample_output.validity_rate),
                error: None,
            },
            Err(e) => AblateRow {
                setting: value,
                max_val_acc_mean: None,
                max_val_acc_std: None,
                corresponding_test_acc_mean: None,
                validity_rate: None,
                error: Some(e.to_string()),
            },
        });
    }
    Ok(rows)
}

pub fn ablate_csv(rows: &[AblateRow]) -> String {
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from(
        "setting,max_val_acc_mean,max_val_acc_std,corresponding_test_acc_mean,validity_rate,error\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.setting,
            fmt(r.max_val_acc_mean),
            fmt(r.max_val_acc_std),
            fmt(r.corresponding_test_acc_mean),
            fmt(r.validity_rate),
            r.error.as_deref().unwrap_or("").replace(',', ";"),
        ));
    }
    out
}
