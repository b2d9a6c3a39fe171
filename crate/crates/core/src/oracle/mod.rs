//! The annotation oracle: every LLM interaction goes through
//! [`AnnotationOracle::call`] with a [`Request`] naming one capability.
//!
//! Implementations: [`SimOracle`] (ground-truth simulation with configurable
//! noise), [`ReplayOracle`] (answers from a recorded cache),
//! [`RecordingOracle`] (wraps another oracle and records its answers) and
//! [`HttpOracle`] (chat-completions endpoint). All of them charge the shared
//! ledger before returning.

mod http;
mod prompts;
mod replay;
mod sim;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::OracleError;
use crate::model::{estimate_tokens, LabelDef, Record, RecordId, TaskKind, TaskSpec};
use crate::money::{Money, SharedLedger, Usage};

pub use http::{HttpOracle, HttpOracleConfig, API_KEY_ENV};
pub use replay::{CacheEntry, RecordingOracle, ReplayCache, ReplayOracle};
pub use sim::{ConfidenceModel, SimOracle, SimOracleConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    SameClassPairs,
    ClusterLabelScore,
    PairwiseOrder,
    RowClassification,
    ClusterSummary,
}

impl Capability {
    pub fn tag(self) -> &'static str {
        match self {
            Capability::SameClassPairs => "same_class_pairs",
            Capability::ClusterLabelScore => "cluster_label_score",
            Capability::PairwiseOrder => "pairwise_order",
            Capability::RowClassification => "row_classification",
            Capability::ClusterSummary => "cluster_summary",
        }
    }

    /// Capabilities whose record list is a set; the others are positional.
    fn records_are_unordered(self) -> bool {
        !matches!(self, Capability::PairwiseOrder)
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Result of a pairwise comparison: `Less` means the first record scores
/// below the second.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Order {
    Less,
    Greater,
}

impl Order {
    pub fn reversed(self) -> Order {
        match self {
            Order::Less => Order::Greater,
            Order::Greater => Order::Less,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Request<'a> {
    pub capability: Capability,
    pub model: &'a str,
    pub task: &'a TaskSpec,
    pub records: Vec<&'a Record>,
    pub label: Option<&'a LabelDef>,
}

impl<'a> Request<'a> {
    pub fn new(
        capability: Capability,
        model: &'a str,
        task: &'a TaskSpec,
        records: Vec<&'a Record>,
    ) -> Self {
        Request {
            capability,
            model,
            task,
            records,
            label: None,
        }
    }

    pub fn with_label(mut self, label: &'a LabelDef) -> Self {
        self.label = Some(label);
        self
    }

    /// Token estimate of the prompt content: instruction, one marker token
    /// per record plus its text, and label text where the capability shows
    /// the label set.
    pub fn input_tokens(&self) -> u64 {
        let mut tokens = estimate_tokens(self.task.instruction());
        tokens += self.records.iter().map(|r| r.token_count + 1).sum::<u64>();
        let shows_labels = matches!(
            self.capability,
            Capability::ClusterLabelScore | Capability::PairwiseOrder | Capability::RowClassification
        );
        if shows_labels {
            tokens += self.task.labels().iter().map(label_tokens).sum::<u64>();
        }
        if let Some(label) = self.label {
            tokens += label_tokens(label);
        }
        tokens
    }

    /// Stable SHA-256 over the canonicalized request.
    pub fn digest(&self) -> String {
        let mut ids: Vec<&Record> = self.records.clone();
        if self.capability.records_are_unordered() {
            ids.sort_by_key(|r| r.id);
        }
        let mut canon = String::new();
        canon.push_str("holdup-request-v1\n");
        canon.push_str(self.capability.tag());
        canon.push('\n');
        canon.push_str(self.model);
        canon.push('\n');
        canon.push_str(&self.task.kind().to_string());
        canon.push('\n');
        canon.push_str(&normalize_ws(self.task.instruction()));
        canon.push('\n');
        for l in self.task.labels() {
            push_label(&mut canon, l);
        }
        canon.push_str("label:");
        if let Some(l) = self.label {
            push_label(&mut canon, l);
        }
        canon.push('\n');
        for r in ids {
            canon.push_str(&format!("{}\t{}\n", r.id, normalize_ws(&r.text)));
        }
        hex::encode(Sha256::digest(canon.as_bytes()))
    }
}

fn label_tokens(l: &LabelDef) -> u64 {
    estimate_tokens(&l.name) + l.description.as_deref().map_or(0, estimate_tokens) + 1
}

fn push_label(canon: &mut String, l: &LabelDef) {
    canon.push_str(&normalize_ws(&l.name));
    canon.push('|');
    if let Some(d) = &l.description {
        canon.push_str(&normalize_ws(d));
    }
    canon.push('\n');
}

pub(crate) fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Capability-specific payload. Serialized as the `response` object of a
/// replay cache entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Response {
    Pairs { pairs: Vec<(RecordId, RecordId)> },
    LogProb { logprob: f64 },
    Order { order: Order },
    Classified { label: String, confidence: f64 },
    Summary(LabelDef),
}

impl Response {
    pub fn matches(&self, capability: Capability) -> bool {
        matches!(
            (self, capability),
            (Response::Pairs { .. }, Capability::SameClassPairs)
                | (Response::LogProb { .. }, Capability::ClusterLabelScore)
                | (Response::Order { .. }, Capability::PairwiseOrder)
                | (Response::Classified { .. }, Capability::RowClassification)
                | (Response::Summary(_), Capability::ClusterSummary)
        )
    }
}

/// A response together with the usage that was charged for it.
#[derive(Clone, Debug, PartialEq)]
pub struct Answer {
    pub response: Response,
    pub usage: Usage,
}

pub trait AnnotationOracle: Send + Sync {
    /// Answers one request and charges the ledger for it.
    fn answer(&self, request: &Request<'_>) -> Result<Answer, OracleError>;

    fn call(&self, request: &Request<'_>) -> Result<Response, OracleError> {
        self.answer(request).map(|a| a.response)
    }

    /// Upper bound on the usage `call` would charge for `request`.
    fn quote(&self, request: &Request<'_>) -> Usage;

    fn ledger(&self) -> &SharedLedger;

    fn quote_cost(&self, request: &Request<'_>) -> Result<Money, OracleError> {
        self.ledger().quote(request.model, self.quote(request))
    }
}

fn unexpected(capability: Capability, got: &Response) -> OracleError {
    OracleError::InvalidRequest(format!("{capability} call returned mismatched payload {got:?}"))
}

/// Typed entry points over [`AnnotationOracle::call`].
pub trait OracleExt: AnnotationOracle {
    /// Unordered same-class pairs among `sample`, as `(smaller id, larger id)`.
    /// Pairs naming records outside the sample are dropped individually.
    fn propose_same_class_pairs(
        &self,
        sample: &[&Record],
        task: &TaskSpec,
        model: &str,
    ) -> Result<BTreeSet<(RecordId, RecordId)>, OracleError> {
        if sample.len() < 2 {
            return Err(OracleError::InvalidRequest(
                "pair proposals need at least two records".into(),
            ));
        }
        let members: BTreeSet<RecordId> = sample.iter().map(|r| r.id).collect();
        if members.len() != sample.len() {
            return Err(OracleError::InvalidRequest("sample records must be distinct".into()));
        }
        let request = Request::new(Capability::SameClassPairs, model, task, sample.to_vec());
        match self.call(&request)? {
            Response::Pairs { pairs } => Ok(pairs
                .into_iter()
                .filter(|(a, b)| a != b && members.contains(a) && members.contains(b))
                .map(|(a, b)| (a.min(b), a.max(b)))
                .collect()),
            other => Err(unexpected(request.capability, &other)),
        }
    }

    /// Log-probability (≤ 0) that `cluster` belongs to `label`.
    fn score_cluster_label(
        &self,
        cluster: &[&Record],
        label: &LabelDef,
        task: &TaskSpec,
        model: &str,
    ) -> Result<f64, OracleError> {
        if cluster.is_empty() {
            return Err(OracleError::InvalidRequest("cannot score an empty cluster".into()));
        }
        let request =
            Request::new(Capability::ClusterLabelScore, model, task, cluster.to_vec()).with_label(label);
        match self.call(&request)? {
            Response::LogProb { logprob } if logprob.is_nan() => Err(OracleError::Parse {
                attempts: 1,
                message: "NaN log-probability".into(),
            }),
            Response::LogProb { logprob } => Ok(logprob.min(0.0).max(MIN_LOGPROB)),
            other => Err(unexpected(request.capability, &other)),
        }
    }

    fn compare_records(
        &self,
        s: &Record,
        t: &Record,
        task: &TaskSpec,
        model: &str,
    ) -> Result<Order, OracleError> {
        if task.kind() != TaskKind::Scoring {
            return Err(OracleError::InvalidRequest("comparisons need a scoring task".into()));
        }
        let request = Request::new(Capability::PairwiseOrder, model, task, vec![s, t]);
        match self.call(&request)? {
            Response::Order { order } => Ok(order),
            other => Err(unexpected(request.capability, &other)),
        }
    }

    /// Label index and confidence in `[0, 1]`.
    fn classify_record(
        &self,
        record: &Record,
        task: &TaskSpec,
        model: &str,
    ) -> Result<(usize, f64), OracleError> {
        if !task.has_labels() {
            return Err(OracleError::InvalidRequest("task has no labels to classify into".into()));
        }
        let request = Request::new(Capability::RowClassification, model, task, vec![record]);
        match self.call(&request)? {
            Response::Classified { label, confidence } => {
                let idx = task.resolve_label(&label).ok_or_else(|| OracleError::Parse {
                    attempts: 1,
                    message: format!("label `{label}` is not one of the task labels"),
                })?;
                Ok((idx, confidence.clamp(0.0, 1.0)))
            }
            other => Err(unexpected(request.capability, &other)),
        }
    }

    fn summarize_cluster(
        &self,
        cluster: &[&Record],
        task: &TaskSpec,
        model: &str,
    ) -> Result<LabelDef, OracleError> {
        if cluster.is_empty() {
            return Err(OracleError::InvalidRequest("cannot summarize an empty cluster".into()));
        }
        if task.kind() != TaskKind::Clustering {
            return Err(OracleError::InvalidRequest("summaries need a clustering task".into()));
        }
        let request = Request::new(Capability::ClusterSummary, model, task, cluster.to_vec());
        match self.call(&request)? {
            Response::Summary(label) if !label.name.trim().is_empty() => Ok(label),
            Response::Summary(_) => Err(OracleError::Parse {
                attempts: 1,
                message: "empty cluster summary".into(),
            }),
            other => Err(unexpected(request.capability, &other)),
        }
    }
}

impl<T: AnnotationOracle + ?Sized> OracleExt for T {}

/// Floor applied to returned log-probabilities so weights stay finite.
pub const MIN_LOGPROB: f64 = -1.0e6;

/// Model identifiers for the two tiers a run uses.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelRoles {
    /// Higher-accuracy model; used for cluster assignment, comparisons and
    /// summaries, and as the preferred proxy.
    pub expensive: String,
    /// Cheaper model; used for pair proposals and as the fallback proxy.
    pub cheap: String,
}

impl Default for ModelRoles {
    fn default() -> Self {
        ModelRoles {
            expensive: "gpt-4.1".into(),
            cheap: "gpt-4.1-nano".into(),
        }
    }
}

/// Per-token prices of the default models.
pub fn default_prices() -> Vec<(String, Money)> {
    vec![
        ("gpt-4.1".into(), Money::from_units(2.0e-6)),
        ("gpt-4.1-nano".into(), Money::from_units(1.0e-7)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task() -> TaskSpec {
        TaskSpec::classification("topic", vec![LabelDef::new("a"), LabelDef::new("b")]).unwrap()
    }

    #[test]
    fn digest_ignores_record_order_and_whitespace() {
        let t = task();
        let r1 = Record::new(1, "hello   world", None);
        let r2 = Record::new(2, "x", None);
        let r1b = Record::new(1, " hello world ", None);
        let a = Request::new(Capability::SameClassPairs, "m", &t, vec![&r1, &r2]).digest();
        let b = Request::new(Capability::SameClassPairs, "m", &t, vec![&r2, &r1b]).digest();
        assert_eq!(a, b);
        let c = Request::new(Capability::SameClassPairs, "other", &t, vec![&r1, &r2]).digest();
        assert_ne!(a, c);
    }

    #[test]
    fn digest_keeps_comparison_direction() {
        let t = TaskSpec::scoring("s", 3, vec![]).unwrap();
        let r1 = Record::new(1, "one", None);
        let r2 = Record::new(2, "two", None);
        let a = Request::new(Capability::PairwiseOrder, "m", &t, vec![&r1, &r2]).digest();
        let b = Request::new(Capability::PairwiseOrder, "m", &t, vec![&r2, &r1]).digest();
        assert_ne!(a, b);
    }

    #[test]
    fn response_json_shapes() {
        let r = Response::Pairs { pairs: vec![(0, 2)] };
        assert_eq!(serde_json::to_string(&r).unwrap(), r#"{"pairs":[[0,2]]}"#);
        let back: Response = serde_json::from_str(r#"{"order":"LESS"}"#).unwrap();
        assert_eq!(back, Response::Order { order: Order::Less });
        let back: Response = serde_json::from_str(r#"{"name":"sports"}"#).unwrap();
        assert_eq!(back, Response::Summary(LabelDef::new("sports")));
        let back: Response = serde_json::from_str(r#"{"label":"a","confidence":0.5}"#).unwrap();
        assert!(back.matches(Capability::RowClassification));
    }
}
