//! The three-step run: cluster-classify a sample batch, route the rest
//! through the cascade, cluster-classify what the cascade leaves.
//!
//! With a finite budget every clustering loop stops sampling early enough
//! that the batch's assignment calls and the fallback for all unprocessed
//! records still fit. A batch that cannot afford a single sample keeps its
//! proxy labels.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assign::{assign, generate_cluster_labels, AssignDiagnostics};
use crate::cascade::{predict_with_cascade, row_pass_cost, CascadePlan};
use crate::cluster::{cluster, ClusterConfig, ClusterDiagnostics, StopReason};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{estimate_tokens, truth_predictions, Dataset, LabelDef, PredictionSet, Record, RecordId, TaskKind, TaskSpec};
use crate::money::{Budget, CostLedger, LedgerEntry, Money, Usage};
use crate::oracle::{AnnotationOracle, Capability, ModelRoles, OracleExt, Request};
use crate::order::{sort_assign, OrderDiagnostics};
use crate::seed::{derive_seed, rng_for};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Records per clustering batch; `max(200, 10k)` when unset.
    pub batch_size: Option<usize>,
    pub cluster: ClusterConfig,
    /// Comparisons per pair of clusters when scoring.
    pub m_sort: usize,
    /// Records shown per cluster in scoring and summary calls.
    pub cluster_record_cap: usize,
    pub seed: u64,
    pub budget: Budget,
    pub models: ModelRoles,
    /// Batches clustered concurrently in the last step (unlimited budget only).
    pub parallelism: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            batch_size: None,
            cluster: ClusterConfig::default(),
            m_sort: 11,
            cluster_record_cap: 20,
            seed: 0,
            budget: Budget::Unlimited,
            models: ModelRoles::default(),
            parallelism: 4,
        }
    }
}

impl PipelineConfig {
    pub fn batch_size_for(&self, k: usize) -> usize {
        self.batch_size.unwrap_or_else(|| 200.max(10 * k))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == Some(0) {
            return Err(Error::InvalidInput("batch size must be at least 1".into()));
        }
        if self.m_sort == 0 {
            return Err(Error::InvalidInput("m_sort must be at least 1".into()));
        }
        if self.cluster_record_cap == 0 {
            return Err(Error::InvalidInput("cluster record cap must be at least 1".into()));
        }
        if self.cluster.sample_size < 2 {
            return Err(Error::InvalidInput("sample size must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.cluster.unsampled_weight) {
            return Err(Error::InvalidInput("unsampled weight must lie in [0, 1]".into()));
        }
        self.cluster.termination.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub records: usize,
    pub cluster: ClusterDiagnostics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub assignment: Option<AssignDiagnostics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub order: Option<OrderDiagnostics>,
    pub cost: Money,
}

/// Predictions and diagnostics of one clustering-based batch.
#[derive(Clone, Debug)]
pub struct BatchOutcome {
    pub predictions: PredictionSet,
    /// Labels generated from this batch (clustering tasks without labels).
    pub generated_labels: Option<Vec<LabelDef>>,
    pub report: BatchReport,
}

/// Longest label name assumed when quoting calls whose labels are not yet
/// generated, in characters.
const PLACEHOLDER_LABEL_CHARS: usize = 64;

/// Stand-in labels for quoting before a clustering task has its own.
fn placeholder_task(task: &TaskSpec) -> Result<TaskSpec> {
    if task.has_labels() {
        return Ok(task.clone());
    }
    let labels = (0..task.k())
        .map(|i| LabelDef::new(format!("{i:0>width$}", width = PLACEHOLDER_LABEL_CHARS)))
        .collect();
    task.with_generated_labels(labels)
}

/// Quote for a call whose answer may name a label of up to
/// [`PLACEHOLDER_LABEL_CHARS`] characters.
fn quote_with_label_answer<O: AnnotationOracle + ?Sized>(oracle: &O, req: &Request<'_>) -> Result<Money> {
    let q = oracle.quote(req);
    let answer = estimate_tokens(&"x".repeat(PLACEHOLDER_LABEL_CHARS)) + 1;
    let usage = Usage::new(q.input.max(req.input_tokens()), q.output.max(answer));
    Ok(oracle.ledger().quote(req.model, usage)?)
}

/// Quoted cost of labelling `records` by row calls with `model`; bounded
/// with placeholder labels when the task has none yet.
pub fn row_pass_bound<O: AnnotationOracle + ?Sized>(
    records: &[&Record],
    task: &TaskSpec,
    oracle: &O,
    model: &str,
) -> Result<Money> {
    if task.has_labels() {
        return row_pass_cost(records, task, oracle, model);
    }
    let stand_in = placeholder_task(task)?;
    let mut total = Money::ZERO;
    for r in records {
        total += quote_with_label_answer(oracle, &Request::new(Capability::RowClassification, model, &stand_in, vec![*r]))?;
    }
    Ok(total)
}

fn largest_records<'a>(batch: &[&'a Record], count: usize) -> Vec<&'a Record> {
    let mut by_size: Vec<&Record> = batch.to_vec();
    by_size.sort_by(|a, b| b.token_count.cmp(&a.token_count).then(a.id.cmp(&b.id)));
    by_size.truncate(count);
    by_size
}

/// Upper bound on the oracle spend of a batch's assignment step.
pub fn assignment_reserve<O: AnnotationOracle + ?Sized>(
    batch: &[&Record],
    task: &TaskSpec,
    oracle: &O,
    config: &PipelineConfig,
) -> Result<Money> {
    let k = task.k() as u64;
    let model = &config.models.expensive;
    if task.kind() == TaskKind::Scoring {
        let top = largest_records(batch, 2);
        if top.len() < 2 {
            return Ok(Money::ZERO);
        }
        let per = oracle.quote_cost(&Request::new(Capability::PairwiseOrder, model, task, top))?;
        return Ok(per * (k * k.saturating_sub(1) / 2 * config.m_sort as u64));
    }
    // Any capped cluster's prompt is bounded by the largest records.
    let top = largest_records(batch, config.cluster_record_cap);
    let stand_in = placeholder_task(task)?;
    let mut score = Money::ZERO;
    for label in stand_in.labels() {
        let req = Request::new(Capability::ClusterLabelScore, model, &stand_in, top.clone()).with_label(label);
        score = score.max(oracle.quote_cost(&req)?);
    }
    let mut total = score * (k * k);
    if !task.has_labels() {
        let req = Request::new(Capability::ClusterSummary, model, task, top);
        total += quote_with_label_answer(oracle, &req)? * k;
    }
    Ok(total)
}

/// Clusters a batch and maps clusters to labels or scores. Returns `None`
/// when `spend_limit` does not allow a single sample.
pub fn cb_classification<O: AnnotationOracle + ?Sized>(
    batch: &[&Record],
    task: &TaskSpec,
    oracle: &O,
    config: &PipelineConfig,
    seed: u64,
    spend_limit: Option<Money>,
) -> Result<Option<BatchOutcome>> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("cannot classify an empty batch".into()));
    }
    let before = oracle.ledger().total();
    let cluster_limit = match spend_limit {
        Some(limit) => {
            let reserve = assignment_reserve(batch, task, oracle, config)?;
            Some(limit.saturating_sub(reserve))
        }
        None => None,
    };
    let outcome = cluster(
        batch,
        task,
        task.k(),
        oracle,
        &config.models.cheap,
        &config.cluster,
        derive_seed(seed, "cluster", 0),
        cluster_limit,
        None,
    )?;
    if outcome.diagnostics.m == 0 && outcome.diagnostics.stop == StopReason::SpendLimit {
        return Ok(None);
    }
    let by_id: std::collections::HashMap<RecordId, &Record> = batch.iter().map(|r| (r.id, *r)).collect();
    let clusters: Vec<Vec<&Record>> = outcome
        .clusters
        .iter()
        .map(|c| c.iter().map(|id| by_id[id]).collect())
        .collect();
    let model = &config.models.expensive;
    let cap = config.cluster_record_cap;
    let assign_seed = derive_seed(seed, "assign", 0);
    let mut generated_labels = None;
    let mut assignment = None;
    let mut order = None;
    let predictions = match task.kind() {
        TaskKind::Scoring => {
            let (p, d) = sort_assign(&clusters, task, oracle, model, config.m_sort, derive_seed(seed, "sort", 0))?;
            order = Some(d);
            p
        }
        TaskKind::Classification | TaskKind::Clustering => {
            let labelled;
            let task = if task.has_labels() {
                task
            } else {
                let labels = generate_cluster_labels(&clusters, task, oracle, model, cap, assign_seed)?;
                labelled = task.with_generated_labels(labels.clone())?;
                generated_labels = Some(labels);
                &labelled
            };
            let (p, d) = assign(&clusters, task, oracle, model, cap, assign_seed)?;
            assignment = Some(d);
            p
        }
    };
    Ok(Some(BatchOutcome {
        predictions,
        generated_labels,
        report: BatchReport {
            records: batch.len(),
            cluster: outcome.diagnostics,
            assignment,
            order,
            cost: oracle.ledger().total() - before,
        },
    }))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepCosts {
    pub step1: Money,
    pub step2: Money,
    pub step3: Money,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task: TaskKind,
    pub n: usize,
    pub k: usize,
    pub predictions_path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairwise_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clustering_accuracy: Option<f64>,
    /// Non-empty predicted clusters; flags degenerate clusterings.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cluster_count: Option<usize>,
    pub cost_total: Money,
    pub cost_per_1000: f64,
    pub per_model_breakdown: Vec<LedgerEntry>,
    pub steps: StepCosts,
    pub budget: Budget,
    pub seed: u64,
    pub batch_size: usize,
    pub labels: Vec<LabelDef>,
    pub d0: usize,
    pub cascade: CascadePlan,
    /// Records labelled by the proxy because their batch could not be
    /// clustered within the budget.
    pub budget_fallbacks: usize,
    pub batches: Vec<BatchReport>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub predictions: PredictionSet,
    /// The task as run; clustering tasks carry their generated labels.
    pub task: TaskSpec,
    pub report: RunReport,
}

/// Labels `records` with one row call each.
fn proxy_labels<O: AnnotationOracle + ?Sized>(
    records: &[&Record],
    task: &TaskSpec,
    oracle: &O,
    model: &str,
) -> Result<PredictionSet> {
    let answers: Vec<(RecordId, usize)> = records
        .par_iter()
        .map(|r| oracle.classify_record(r, task, model).map(|(l, _)| (r.id, l)))
        .collect::<std::result::Result<_, _>>()?;
    Ok(answers.into_iter().collect())
}

/// Metrics of `predictions` against the dataset's truth labels, when every
/// record has one.
pub fn evaluate(
    dataset: &Dataset,
    task: &TaskSpec,
    predictions: &PredictionSet,
) -> Result<(Option<f64>, Option<f64>, Option<f64>, Option<usize>)> {
    if !dataset.has_truth() {
        return Ok((None, None, None, None));
    }
    match task.kind() {
        TaskKind::Classification => {
            let truth = truth_predictions(dataset, task)?;
            Ok((Some(metrics::classification_accuracy(&truth, predictions)?), None, None, None))
        }
        TaskKind::Scoring => {
            let truth = truth_predictions(dataset, task)?;
            let acc = metrics::classification_accuracy(&truth, predictions)?;
            let pairwise = if dataset.len() >= 2 {
                Some(metrics::pairwise_score_accuracy(&truth, predictions)?)
            } else {
                None
            };
            Ok((Some(acc), pairwise, None, None))
        }
        TaskKind::Clustering => {
            let mut names: Vec<&str> = dataset
                .records()
                .iter()
                .filter_map(|r| r.truth_label.as_deref())
                .collect();
            names.sort_unstable();
            names.dedup();
            let truth: PredictionSet = dataset
                .records()
                .iter()
                .map(|r| {
                    let name = r.truth_label.as_deref().expect("has_truth checked");
                    (r.id, names.binary_search(&name).expect("name collected"))
                })
                .collect();
            let pred_clusters = metrics::clusters_of(predictions);
            let clu = metrics::clustering_accuracy(&metrics::clusters_of(&truth), &pred_clusters)?;
            Ok((None, None, Some(clu), Some(pred_clusters.len())))
        }
    }
}

/// Runs all three steps over `dataset`.
pub fn run<O: AnnotationOracle + ?Sized>(
    dataset: &Dataset,
    task: &TaskSpec,
    oracle: &O,
    config: &PipelineConfig,
) -> Result<RunOutput> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput("dataset is empty".into()));
    }
    if task.kind() != TaskKind::Clustering && !task.has_labels() {
        return Err(Error::InvalidTask("task needs its labels".into()));
    }
    let k = task.k();
    let b = config.batch_size_for(k);
    let n = dataset.len();
    let all: Vec<&Record> = dataset.records().iter().collect();
    let ledger = oracle.ledger();
    let opening = ledger.snapshot();
    let start = opening.total();
    let limit = config.budget.limit().map(|l| start + l);
    let cheap = &config.models.cheap;

    // Feasibility: the cheapest full fallback must fit.
    if let Some(l) = config.budget.limit() {
        let proxy = row_pass_bound(&all, task, oracle, cheap)?;
        if proxy > l {
            return Err(Error::BudgetInfeasible {
                budget: l,
                spent: Money::ZERO,
                proxy,
            });
        }
    }

    // Step 1: sample batch.
    let mut rng = rng_for(config.seed, "d0", 0);
    let mut d0_idx = index::sample(&mut rng, n, b.min(n)).into_vec();
    d0_idx.sort_unstable();
    let d0: Vec<&Record> = d0_idx.iter().map(|&i| all[i]).collect();
    let in_d0: std::collections::HashSet<RecordId> = d0.iter().map(|r| r.id).collect();
    let rest: Vec<&Record> = all.iter().copied().filter(|r| !in_d0.contains(&r.id)).collect();

    let step1_limit = match limit {
        Some(l) => Some(l.saturating_sub(row_pass_bound(&all, task, oracle, cheap)?)),
        None => None,
    };
    let first = cb_classification(&d0, task, oracle, config, derive_seed(config.seed, "batch", 0), step1_limit)?;
    let Some(first) = first else {
        return proxy_only_run(dataset, task, oracle, config, &opening);
    };
    let step1 = ledger.total() - start;
    let c0 = step1;
    let task_eff = match &first.generated_labels {
        Some(labels) => task.with_generated_labels(labels.clone())?,
        None => task.clone(),
    };
    let mut predictions = first.predictions.clone();
    let mut batches = vec![first.report];

    // Step 2: cascade over everything outside D_0.
    let cascade = predict_with_cascade(&rest, n, &task_eff, c0, b, config.budget, oracle, &config.models)?;
    let step2 = ledger.total() - start - step1;
    let clashes = predictions.extend_disjoint(cascade.predictions.clone());
    debug_assert!(clashes.is_empty());

    // Step 3: cluster what is left, in id order.
    let d_x: Vec<&Record> = {
        let routed: std::collections::HashSet<RecordId> = cascade.plan.d_x.iter().copied().collect();
        rest.iter().copied().filter(|r| routed.contains(&r.id)).collect()
    };
    let chunks: Vec<&[&Record]> = d_x.chunks(b).collect();
    let mut budget_fallbacks = 0;
    match limit {
        None => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(config.parallelism.max(1))
                .build()
                .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
            let results: Vec<Option<BatchOutcome>> = pool.install(|| {
                chunks
                    .par_iter()
                    .enumerate()
                    .map(|(i, chunk)| {
                        cb_classification(chunk, &task_eff, oracle, config, derive_seed(config.seed, "batch", i as u64 + 1), None)
                    })
                    .collect::<Result<_>>()
            })?;
            for outcome in results.into_iter().flatten() {
                predictions.extend_disjoint(outcome.predictions);
                batches.push(outcome.report);
            }
        }
        Some(l) => {
            let have_proxy = !cascade.proxy_labels.is_empty();
            for (i, chunk) in chunks.iter().enumerate() {
                let later: Vec<&Record> = chunks[i + 1..].iter().flat_map(|c| c.iter().copied()).collect();
                let reserve = if have_proxy {
                    Money::ZERO
                } else {
                    row_pass_cost(&later, &task_eff, oracle, cheap)? + row_pass_cost(chunk, &task_eff, oracle, cheap)?
                };
                let outcome = cb_classification(
                    chunk,
                    &task_eff,
                    oracle,
                    config,
                    derive_seed(config.seed, "batch", i as u64 + 1),
                    Some(l.saturating_sub(reserve)),
                )?;
                match outcome {
                    Some(o) => {
                        predictions.extend_disjoint(o.predictions);
                        batches.push(o.report);
                    }
                    None => {
                        budget_fallbacks += chunk.len();
                        let labels = if have_proxy {
                            chunk
                                .iter()
                                .map(|r| (r.id, cascade.proxy_labels.get(r.id).expect("proxy pass covers D_X")))
                                .collect()
                        } else {
                            proxy_labels(chunk, &task_eff, oracle, cheap)?
                        };
                        predictions.extend_disjoint(labels);
                    }
                }
            }
        }
    }
    let step3 = ledger.total() - start - step1 - step2;
    finish(
        dataset,
        task_eff,
        predictions,
        oracle,
        config,
        &opening,
        StepCosts { step1, step2, step3 },
        d0.len(),
        cascade.plan,
        budget_fallbacks,
        batches,
    )
}

/// Everything by row calls with the best affordable model; used when the
/// budget does not allow even the first clustering sample.
fn proxy_only_run<O: AnnotationOracle + ?Sized>(
    dataset: &Dataset,
    task: &TaskSpec,
    oracle: &O,
    config: &PipelineConfig,
    opening: &CostLedger,
) -> Result<RunOutput> {
    let start = opening.total();
    let all: Vec<&Record> = dataset.records().iter().collect();
    if !task.has_labels() {
        return Err(Error::BudgetInfeasible {
            budget: config.budget.limit().unwrap_or(Money::ZERO),
            spent: oracle.ledger().total() - start,
            proxy: row_pass_bound(&all, task, oracle, &config.models.cheap)?,
        });
    }
    let spent = oracle.ledger().total() - start;
    let budget = match config.budget.limit() {
        Some(l) => Budget::Limit(l.saturating_sub(spent)),
        None => Budget::Unlimited,
    };
    let model = crate::cascade::choose_proxy(Money::ZERO, &all, task, oracle, &config.models, budget)?;
    let before = oracle.ledger().total();
    let predictions = proxy_labels(&all, task, oracle, &model)?;
    let c_mp = oracle.ledger().total() - before;
    let plan = CascadePlan {
        proxy: Some(model),
        tau_star: 0.0,
        d_r: all.iter().map(|r| r.id).collect(),
        d_x: Vec::new(),
        c_mp_estimate: c_mp,
        c_mp,
        projected_cost: c_mp,
    };
    finish(
        dataset,
        task.clone(),
        predictions,
        oracle,
        config,
        opening,
        StepCosts {
            step1: spent,
            step2: c_mp,
            step3: Money::ZERO,
        },
        0,
        plan,
        dataset.len(),
        Vec::new(),
    )
}

#[allow(clippy::too_many_arguments)]
fn finish<O: AnnotationOracle + ?Sized>(
    dataset: &Dataset,
    task: TaskSpec,
    predictions: PredictionSet,
    oracle: &O,
    config: &PipelineConfig,
    opening: &CostLedger,
    steps: StepCosts,
    d0: usize,
    cascade: CascadePlan,
    budget_fallbacks: usize,
    batches: Vec<BatchReport>,
) -> Result<RunOutput> {
    if predictions.len() != dataset.len() || dataset.records().iter().any(|r| !predictions.contains(r.id)) {
        return Err(Error::InvalidInput(format!(
            "internal coverage error: {} predictions for {} records",
            predictions.len(),
            dataset.len()
        )));
    }
    predictions.validate(&task)?;
    let snapshot = oracle.ledger().snapshot();
    let cost_total = snapshot.total() - opening.total();
    let (accuracy, pairwise_accuracy, clustering_accuracy, cluster_count) = evaluate(dataset, &task, &predictions)?;
    let report = RunReport {
        task: task.kind(),
        n: dataset.len(),
        k: task.k(),
        predictions_path: None,
        accuracy,
        pairwise_accuracy,
        clustering_accuracy,
        cluster_count,
        cost_total,
        cost_per_1000: metrics::cost_per_1000(cost_total, dataset.len())?,
        per_model_breakdown: snapshot.since(opening),
        steps,
        budget: config.budget,
        seed: config.seed,
        batch_size: config.batch_size_for(task.k()),
        labels: task.labels().to_vec(),
        d0,
        cascade,
        budget_fallbacks,
        batches,
    };
    Ok(RunOutput {
        predictions,
        task,
        report,
    })
}
