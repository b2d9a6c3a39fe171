use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use holdup_core::cluster::SamplerKind;
use holdup_core::model::{load_dataset, load_labels, Dataset, LabelDef, PredictionSet, Schema, TaskKind, TaskSpec};
use holdup_core::money::{Budget, CostLedger, Money, SharedLedger};
use holdup_core::oracle::{
    default_prices, HttpOracle, HttpOracleConfig, RecordingOracle, ReplayCache, ReplayOracle,
    SimOracle, SimOracleConfig,
};
use holdup_core::pipeline::{self, PipelineConfig, RunReport};
use holdup_core::simulate::{self, SimulationConfig};

use crate::files::{read_json, read_predictions, write_atomic, write_json, write_predictions};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "holdup", version, about = "Clustering-based labelling of text records with LLM annotations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Label a dataset.
    Run(RunArgs),
    /// Compare the pipeline with row-by-row labelling on the simulated oracle.
    Simulate(SimulateArgs),
    /// Score a predictions file against a dataset's labels.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Classification,
    Scoring,
    Clustering,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Classification => TaskKind::Classification,
            TaskArg::Scoring => TaskKind::Scoring,
            TaskArg::Clustering => TaskKind::Clustering,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OracleArg {
    Sim,
    Replay,
    Http,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SamplerArg {
    Uniform,
    Coverage,
}

#[derive(Debug, Args)]
pub struct TaskFlags {
    #[arg(long, value_enum)]
    pub task: TaskArg,
    /// JSONL dataset: {"id": optional int, "text": string, "label": optional string}.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// JSON array of {"name", "description"}.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Class, score or cluster count; defaults to the number of labels.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub instruction: Option<String>,
}

/// Settings that override the config file.
#[derive(Debug, Args)]
pub struct PipelineFlags {
    /// JSON pipeline configuration; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Spending cap in currency units; unlimited when absent.
    #[arg(long)]
    pub budget: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub sample_size: Option<usize>,
    #[arg(long)]
    pub m_max: Option<usize>,
    #[arg(long)]
    pub m_sort: Option<usize>,
    #[arg(long, value_enum)]
    pub sampler: Option<SamplerArg>,
    #[arg(long)]
    pub parallelism: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub task: TaskFlags,
    #[command(flatten)]
    pub pipeline: PipelineFlags,
    #[arg(long, value_enum, default_value = "sim")]
    pub oracle: OracleArg,
    /// Simulated-oracle settings (JSON).
    #[arg(long)]
    pub sim_config: Option<PathBuf>,
    /// Replay cache; required for `replay`, recorded into for `http`.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Chat-completions endpoint for `http`.
    #[arg(long)]
    pub base_url: Option<String>,
    #[arg(long, default_value = "predictions.jsonl")]
    pub out: PathBuf,
    #[arg(long, default_value = "report.json")]
    pub report: PathBuf,
    /// Per-batch clustering, assignment and cascade details (JSON).
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Simulation settings (JSON): {"sim", "pipeline", "seeds", "prices"}.
    #[arg(long)]
    pub sim_config: PathBuf,
    #[arg(long, value_enum, default_value = "classification")]
    pub task: TaskArg,
    /// Dataset with labels; a balanced synthetic one when absent.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    /// Synthetic dataset size.
    #[arg(long, default_value_t = 400)]
    pub n: usize,
    /// Runs seeds `0..N` instead of the configured list.
    #[arg(long)]
    pub seeds: Option<u64>,
    #[command(flatten)]
    pub pipeline: PipelineFlags,
    /// CSV output; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub task: TaskFlags,
    /// Predictions JSONL from `run`.
    #[arg(long)]
    pub predictions: PathBuf,
    /// JSON output; stdout when absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

/// Pipeline settings plus the price table, as read from `--config`.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    #[serde(flatten)]
    pipeline: PipelineConfig,
    prices: Vec<(String, Money)>,
}

fn default_instruction(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::Classification => "Classify each record into one of the given classes.",
        TaskKind::Scoring => "Score each record on the given scale.",
        TaskKind::Clustering => "Group the records by topic.",
    }
}

fn build_task(flags: &TaskFlags) -> Result<TaskSpec, CliError> {
    let kind = TaskKind::from(flags.task);
    let instruction = flags
        .instruction
        .clone()
        .unwrap_or_else(|| default_instruction(kind).to_string());
    let labels: Vec<LabelDef> = match &flags.labels {
        Some(path) => load_labels(path)?,
        None => Vec::new(),
    };
    let task = match kind {
        TaskKind::Classification => {
            if flags.labels.is_none() {
                return Err(CliError::usage("classification needs --labels"));
            }
            if let Some(k) = flags.k {
                if k != labels.len() {
                    return Err(CliError::usage(format!("--k {k} but {} labels", labels.len())));
                }
            }
            TaskSpec::classification(instruction, labels)?
        }
        TaskKind::Scoring => {
            let k = match (flags.k, labels.len()) {
                (Some(k), _) => k,
                (None, 0) => return Err(CliError::usage("scoring needs --k or --labels")),
                (None, n) => n,
            };
            TaskSpec::scoring(instruction, k, labels)?
        }
        TaskKind::Clustering => {
            if flags.labels.is_some() {
                return Err(CliError::usage("clustering generates its labels; drop --labels"));
            }
            let k = flags.k.ok_or_else(|| CliError::usage("clustering needs --k"))?;
            TaskSpec::clustering(instruction, k)?
        }
    };
    Ok(task)
}

fn load_input(path: Option<&Path>) -> Result<Dataset, CliError> {
    let path = path.ok_or_else(|| CliError::usage("--input is required"))?;
    Ok(load_dataset(path, &Schema::default())?)
}

fn pipeline_config(flags: &PipelineFlags, base: PipelineConfig) -> Result<PipelineConfig, CliError> {
    let mut config = base;
    if let Some(b) = flags.budget {
        if !b.is_finite() || b < 0.0 {
            return Err(CliError::usage(format!("--budget {b} must be a non-negative amount")));
        }
        config.budget = Budget::Limit(Money::from_units(b));
    }
    if let Some(s) = flags.seed {
        config.seed = s;
    }
    if let Some(b) = flags.batch_size {
        config.batch_size = Some(b);
    }
    if let Some(s) = flags.sample_size {
        config.cluster.sample_size = s;
    }
    if let Some(m) = flags.m_max {
        config.cluster.termination.m_max = m;
    }
    if let Some(m) = flags.m_sort {
        config.m_sort = m;
    }
    if let Some(s) = flags.sampler {
        config.cluster.sampler = match s {
            SamplerArg::Uniform => SamplerKind::Uniform,
            SamplerArg::Coverage => SamplerKind::Coverage,
        };
    }
    if let Some(p) = flags.parallelism {
        config.parallelism = p;
    }
    config.validate()?;
    Ok(config)
}

fn ledger(prices: &[(String, Money)]) -> SharedLedger {
    if prices.is_empty() {
        SharedLedger::new(CostLedger::with_prices(default_prices()))
    } else {
        SharedLedger::new(CostLedger::with_prices(prices.iter().cloned()))
    }
}

#[derive(Serialize)]
struct Diagnostics<'a> {
    d0: usize,
    cascade: &'a holdup_core::cascade::CascadePlan,
    batches: &'a [pipeline::BatchReport],
}

pub fn run(args: RunArgs) -> Result<(), CliError> {
    let task = build_task(&args.task)?;
    let dataset = load_input(args.task.input.as_deref())?;
    let file_config: RunConfig = match &args.pipeline.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    let config = pipeline_config(&args.pipeline, file_config.pipeline)?;
    let ledger = ledger(&file_config.prices);

    let output = match args.oracle {
        OracleArg::Sim => {
            let sim = match &args.sim_config {
                Some(p) => read_json::<SimOracleConfig>(p)?,
                None => SimOracleConfig::noiseless(config.seed),
            };
            let oracle = SimOracle::from_dataset(sim, &dataset, ledger)?;
            pipeline::run(&dataset, &task, &oracle, &config)?
        }
        OracleArg::Replay => {
            let path = args.cache.as_deref().ok_or_else(|| CliError::usage("--oracle replay needs --cache"))?;
            let oracle = ReplayOracle::new(ReplayCache::load(path)?, ledger);
            pipeline::run(&dataset, &task, &oracle, &config)?
        }
        OracleArg::Http => {
            let mut http = HttpOracleConfig {
                seed: config.seed,
                ..HttpOracleConfig::default()
            }
            .with_env_key();
            if let Some(url) = &args.base_url {
                http.base_url = url.clone();
            }
            let inner = HttpOracle::new(http, ledger)?;
            match &args.cache {
                None => pipeline::run(&dataset, &task, &inner, &config)?,
                Some(path) => {
                    let seed_cache = if path.exists() { ReplayCache::load(path)? } else { ReplayCache::new() };
                    let oracle = RecordingOracle::new(inner, seed_cache);
                    let result = pipeline::run(&dataset, &task, &oracle, &config);
                    // Paid answers are kept even when the run fails.
                    let cache = oracle.into_cache();
                    write_atomic(path, |mut out| cache.write(&mut out))?;
                    result?
                }
            }
        }
    };

    write_predictions(&args.out, &dataset, &output.task, &output.predictions)?;
    let mut report: RunReport = output.report;
    report.predictions_path = Some(args.out.display().to_string());
    write_json(&args.report, &report)?;
    if let Some(path) = &args.diagnostics {
        write_json(
            path,
            &Diagnostics {
                d0: report.d0,
                cascade: &report.cascade,
                batches: &report.batches,
            },
        )?;
    }
    let acc = report
        .accuracy
        .or(report.clustering_accuracy)
        .map(|a| format!(" accuracy={a:.4}"))
        .unwrap_or_default();
    println!(
        "{} records, cost {} ({:.6} per 1000){acc}",
        report.n, report.cost_total, report.cost_per_1000
    );
    Ok(())
}

pub fn simulate(args: SimulateArgs) -> Result<(), CliError> {
    let mut sim: SimulationConfig = read_json(&args.sim_config)?;
    sim.pipeline = pipeline_config(&args.pipeline, sim.pipeline)?;
    if let Some(n) = args.seeds {
        sim.seeds = (0..n).collect();
    }
    let kind = TaskKind::from(args.task);
    let labels = match &args.labels {
        Some(p) => load_labels(p)?,
        None if kind == TaskKind::Scoring => Vec::new(),
        None => simulate::class_labels(args.k),
    };
    let task = match kind {
        TaskKind::Classification => TaskSpec::classification(default_instruction(kind), labels)?,
        TaskKind::Scoring => TaskSpec::scoring(default_instruction(kind), args.k, labels)?,
        TaskKind::Clustering => return Err(CliError::usage("simulate compares tasks with labels")),
    };
    let dataset = match &args.input {
        Some(p) => load_dataset(p, &Schema::default())?,
        None => simulate::balanced_dataset(args.n, task.labels()),
    };
    let rows = simulate::compare(&dataset, &task, &sim)?;
    let to_csv = |out: &mut dyn std::io::Write| -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "seed", "accuracy", "cost_per_1000"])?;
        for r in &rows {
            w.write_record([
                r.method.as_str().to_string(),
                r.seed.to_string(),
                r.accuracy.to_string(),
                r.cost_per_1000.to_string(),
            ])?;
        }
        w.flush()
    };
    match &args.out {
        Some(path) => write_atomic(path, to_csv)?,
        None => to_csv(&mut std::io::stdout().lock()).map_err(|e| CliError::io(e.to_string()))?,
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalReport {
    task: TaskKind,
    n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pairwise_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    clustering_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cluster_count: Option<usize>,
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    let dataset = load_input(args.task.input.as_deref())?;
    if !dataset.has_truth() {
        return Err(CliError::usage("every record of --input needs a label to evaluate against"));
    }
    let names = read_predictions(&args.predictions, &dataset)?;
    if names.len() != dataset.len() {
        return Err(CliError::usage(format!(
            "{} predictions for {} records",
            names.len(),
            dataset.len()
        )));
    }
    let kind = TaskKind::from(args.task.task);
    let (task, predictions) = if kind == TaskKind::Clustering {
        // Cluster names only group records; any k works for the metric.
        let mut index: BTreeMap<&str, usize> = BTreeMap::new();
        for name in names.values() {
            let next = index.len();
            index.entry(name.as_str()).or_insert(next);
        }
        let k = args.task.k.unwrap_or(index.len()).max(1);
        let preds: PredictionSet = names.iter().map(|(&id, n)| (id, index[n.as_str()])).collect();
        (TaskSpec::clustering(default_instruction(kind), k)?, preds)
    } else {
        let task = build_task(&args.task)?;
        let mut preds = PredictionSet::new();
        for (&id, name) in &names {
            let label = task
                .resolve_label(name)
                .ok_or_else(|| CliError::usage(format!("predicted label `{name}` is not a task label")))?;
            preds.insert(id, label);
        }
        (task, preds)
    };
    let (accuracy, pairwise_accuracy, clustering_accuracy, cluster_count) =
        pipeline::evaluate(&dataset, &task, &predictions)?;
    let report = EvalReport {
        task: kind,
        n: dataset.len(),
        accuracy,
        pairwise_accuracy,
        clustering_accuracy,
        cluster_count,
    };
    match &args.report {
        Some(path) => write_json(path, &report)?,
        None => println!(
            "{}",
            serde_json::to_string_pretty(&report).map_err(|e| CliError::io(e.to_string()))?
        ),
    }
    Ok(())
}
