//! Side-by-side runs of the pipeline and a row-by-row baseline against the
//! simulated oracle.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{truth_predictions, Dataset, LabelDef, PredictionSet, Record, TaskKind, TaskSpec};
use crate::money::{CostLedger, Money, SharedLedger};
use crate::oracle::{default_prices, AnnotationOracle, OracleExt, SimOracle, SimOracleConfig};
use crate::pipeline::{self, PipelineConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Holdup,
    RowByRow,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Holdup => "holdup",
            Method::RowByRow => "row_by_row",
        }
    }
}

/// One line of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub method: Method,
    pub seed: u64,
    pub accuracy: f64,
    pub cost_per_1000: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub sim: SimOracleConfig,
    pub pipeline: PipelineConfig,
    /// Seeds; each one seeds both the oracle and the pipeline.
    pub seeds: Vec<u64>,
    /// Model prices per token; the default table when empty.
    pub prices: Vec<(String, Money)>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            sim: SimOracleConfig::default(),
            pipeline: PipelineConfig::default(),
            seeds: (0..5).collect(),
            prices: Vec::new(),
        }
    }
}

/// `n` records spread round-robin over `labels`, truth set to the label
/// names.
pub fn balanced_dataset(n: usize, labels: &[LabelDef]) -> Dataset {
    let records = (0..n)
        .map(|i| {
            let label = &labels[i % labels.len()].name;
            Record::new(i, format!("item {i} about {label}"), Some(label.clone()))
        })
        .collect();
    Dataset::from_records(records).expect("ids are distinct")
}

/// `class-1..class-k`.
pub fn class_labels(k: usize) -> Vec<LabelDef> {
    (1..=k).map(|c| LabelDef::new(format!("class-{c}"))).collect()
}

fn ledger(prices: &[(String, Money)]) -> SharedLedger {
    if prices.is_empty() {
        SharedLedger::new(CostLedger::with_prices(default_prices()))
    } else {
        SharedLedger::new(CostLedger::with_prices(prices.iter().cloned()))
    }
}

/// Accuracy of `predictions`: classification accuracy, or clustering
/// accuracy for clustering tasks.
fn accuracy(dataset: &Dataset, task: &TaskSpec, predictions: &PredictionSet) -> Result<f64> {
    let (acc, _, clu, _) = pipeline::evaluate(dataset, task, predictions)?;
    acc.or(clu)
        .ok_or_else(|| Error::InvalidInput("simulation needs truth labels on every record".into()))
}

/// One expensive-model row call per record.
pub fn row_by_row(
    dataset: &Dataset,
    task: &TaskSpec,
    sim: SimOracleConfig,
    config: &PipelineConfig,
    prices: &[(String, Money)],
) -> Result<SimRow> {
    if !task.has_labels() {
        return Err(Error::InvalidTask("the row-by-row baseline needs task labels".into()));
    }
    let seed = config.seed;
    let oracle = SimOracle::from_dataset(sim, dataset, ledger(prices))?;
    let model = &config.models.expensive;
    let predictions: PredictionSet = dataset
        .records()
        .par_iter()
        .map(|r| oracle.classify_record(r, task, model).map(|(l, _)| (r.id, l)))
        .collect::<std::result::Result<Vec<_>, _>>()?
        .into_iter()
        .collect();
    let truth = truth_predictions(dataset, task)?;
    Ok(SimRow {
        method: Method::RowByRow,
        seed,
        accuracy: metrics::classification_accuracy(&truth, &predictions)?,
        cost_per_1000: metrics::cost_per_1000(oracle.ledger().total(), dataset.len())?,
    })
}

pub fn holdup(
    dataset: &Dataset,
    task: &TaskSpec,
    sim: SimOracleConfig,
    config: &PipelineConfig,
    prices: &[(String, Money)],
) -> Result<SimRow> {
    let oracle = SimOracle::from_dataset(sim, dataset, ledger(prices))?;
    let out = pipeline::run(dataset, task, &oracle, config)?;
    Ok(SimRow {
        method: Method::Holdup,
        seed: config.seed,
        accuracy: accuracy(dataset, &out.task, &out.predictions)?,
        cost_per_1000: out.report.cost_per_1000,
    })
}

/// Both methods for every seed, in seed order; the pipeline row comes first.
pub fn compare(dataset: &Dataset, task: &TaskSpec, config: &SimulationConfig) -> Result<Vec<SimRow>> {
    if task.kind() == TaskKind::Clustering {
        return Err(Error::InvalidTask("comparisons need a task with labels".into()));
    }
    let mut rows = Vec::with_capacity(2 * config.seeds.len());
    for &seed in &config.seeds {
        let sim = SimOracleConfig {
            seed,
            ..config.sim.clone()
        };
        let pipe = PipelineConfig {
            seed,
            ..config.pipeline.clone()
        };
        rows.push(holdup(dataset, task, sim.clone(), &pipe, &config.prices)?);
        rows.push(row_by_row(dataset, task, sim, &pipe, &config.prices)?);
    }
    Ok(rows)
}

/// Mean accuracy of one method's rows.
pub fn mean_accuracy(rows: &[SimRow], method: Method) -> Option<f64> {
    let acc: Vec<f64> = rows.iter().filter(|r| r.method == method).map(|r| r.accuracy).collect();
    (!acc.is_empty()).then(|| acc.iter().sum::<f64>() / acc.len() as f64)
}
