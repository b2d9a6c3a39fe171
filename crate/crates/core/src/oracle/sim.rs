//! Ground-truth oracle with configurable, seeded noise.
//!
//! Each answer is a pure function of the configuration and the request
//! digest: the per-call random stream is seeded from `(seed, digest)`.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng as _, SeedableRng};
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AnnotationOracle, Answer, Capability, Order, Request, Response};
use crate::error::OracleError;
use crate::model::{estimate_tokens, Dataset, LabelDef, RecordId, TaskSpec};
use crate::money::{SharedLedger, Usage};
use crate::seed::Rng;

/// Confidence reported with row classifications. Records with a zero error
/// rate report `certain`; otherwise confidence is drawn from
/// `Beta(correct)` for right answers and `Beta(wrong)` for wrong ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfidenceModel {
    pub correct: (f64, f64),
    pub wrong: (f64, f64),
    pub certain: f64,
}

impl Default for ConfidenceModel {
    fn default() -> Self {
        ConfidenceModel {
            correct: (8.0, 2.0),
            wrong: (2.0, 8.0),
            certain: 0.99,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimOracleConfig {
    pub seed: u64,
    /// Probability a truly-same pair is left out of a proposal.
    pub eps_same: f64,
    /// Probability a truly-different pair is proposed as same-class.
    pub eps_diff: f64,
    /// Row misclassification probability for unambiguous records.
    pub row_error: f64,
    /// Row misclassification probability for ambiguous records.
    pub ambiguous_row_error: f64,
    /// Fraction of records flagged ambiguous (hash-selected by seed) when
    /// `ambiguous_ids` is not given.
    pub ambiguous_fraction: f64,
    pub ambiguous_ids: Option<BTreeSet<RecordId>>,
    pub confidence: ConfidenceModel,
    /// Probability a pairwise comparison is inverted.
    pub order_error: f64,
    /// Probability reported for a cluster's majority label.
    pub cluster_label_probability: f64,
}

impl Default for SimOracleConfig {
    fn default() -> Self {
        SimOracleConfig {
            seed: 0,
            eps_same: 0.0,
            eps_diff: 0.0,
            row_error: 0.0,
            ambiguous_row_error: 0.0,
            ambiguous_fraction: 0.0,
            ambiguous_ids: None,
            confidence: ConfidenceModel::default(),
            order_error: 0.0,
            cluster_label_probability: 0.99,
        }
    }
}

impl SimOracleConfig {
    pub fn noiseless(seed: u64) -> Self {
        SimOracleConfig {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        let probs = [
            ("eps_same", self.eps_same),
            ("eps_diff", self.eps_diff),
            ("row_error", self.row_error),
            ("ambiguous_row_error", self.ambiguous_row_error),
            ("ambiguous_fraction", self.ambiguous_fraction),
            ("order_error", self.order_error),
            ("cluster_label_probability", self.cluster_label_probability),
            ("confidence.certain", self.confidence.certain),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(OracleError::Config(format!("{name}={p} is not a probability")));
            }
        }
        for (name, (a, b)) in [("confidence.correct", self.confidence.correct), ("confidence.wrong", self.confidence.wrong)] {
            if a <= 0.0 || b <= 0.0 || !a.is_finite() || !b.is_finite() {
                return Err(OracleError::Config(format!("{name} Beta parameters must be positive")));
            }
        }
        Ok(())
    }
}

pub struct SimOracle {
    config: SimOracleConfig,
    truth: HashMap<RecordId, String>,
    ambiguous: BTreeSet<RecordId>,
    ledger: SharedLedger,
}

impl SimOracle {
    pub fn new(
        config: SimOracleConfig,
        truth: HashMap<RecordId, String>,
        ledger: SharedLedger,
    ) -> Result<Self, OracleError> {
        config.validate()?;
        let ambiguous = match &config.ambiguous_ids {
            Some(ids) => ids.clone(),
            None => truth
                .keys()
                .copied()
                .filter(|&id| unit_hash(config.seed, "ambiguous", id as u64) < config.ambiguous_fraction)
                .collect(),
        };
        Ok(SimOracle {
            config,
            truth,
            ambiguous,
            ledger,
        })
    }

    /// Truth taken from the dataset's labels; every record must have one.
    pub fn from_dataset(
        config: SimOracleConfig,
        dataset: &Dataset,
        ledger: SharedLedger,
    ) -> Result<Self, OracleError> {
        let truth = dataset
            .records()
            .iter()
            .map(|r| {
                r.truth_label
                    .clone()
                    .map(|l| (r.id, l))
                    .ok_or_else(|| OracleError::Config(format!("record {} has no truth label", r.id)))
            })
            .collect::<Result<_, _>>()?;
        Self::new(config, truth, ledger)
    }

    pub fn config(&self) -> &SimOracleConfig {
        &self.config
    }

    pub fn is_ambiguous(&self, id: RecordId) -> bool {
        self.ambiguous.contains(&id)
    }

    fn truth(&self, id: RecordId) -> Result<&str, OracleError> {
        self.truth
            .get(&id)
            .map(String::as_str)
            .ok_or_else(|| OracleError::InvalidRequest(format!("no truth for record {id}")))
    }

    fn row_error_for(&self, id: RecordId) -> f64 {
        if self.is_ambiguous(id) {
            self.config.ambiguous_row_error
        } else {
            self.config.row_error
        }
    }

    fn call_rng(&self, request: &Request<'_>) -> Rng {
        let mut h = Sha256::new();
        h.update(self.config.seed.to_le_bytes());
        h.update(request.digest().as_bytes());
        let out = h.finalize();
        Rng::seed_from_u64(u64::from_le_bytes(out[..8].try_into().expect("32-byte digest")))
    }

    /// Majority truth label of the records; ties go to the smaller name.
    fn majority(&self, request: &Request<'_>) -> Result<String, OracleError> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &request.records {
            *counts.entry(self.truth(r.id)?).or_default() += 1;
        }
        let best = counts.values().copied().max().unwrap_or(0);
        counts
            .into_iter()
            .find(|&(_, c)| c == best)
            .map(|(name, _)| name.to_string())
            .ok_or_else(|| OracleError::InvalidRequest("empty record list".into()))
    }

    fn same_label(task: &TaskSpec, truth: &str, label: &LabelDef) -> bool {
        match (task.resolve_label(truth), task.label_index(&label.name)) {
            (Some(a), Some(b)) => a == b,
            _ => truth == label.name,
        }
    }

    fn simulate(&self, request: &Request<'_>) -> Result<(Response, Usage), OracleError> {
        let mut rng = self.call_rng(request);
        let task = request.task;
        let input = request.input_tokens();
        let (response, output) = match request.capability {
            Capability::SameClassPairs => {
                let mut members: Vec<_> = request.records.clone();
                members.sort_by_key(|r| r.id);
                let mut pairs = Vec::new();
                for (i, a) in members.iter().enumerate() {
                    for b in &members[i + 1..] {
                        let same = self.truth(a.id)? == self.truth(b.id)?;
                        let u: f64 = rng.random();
                        let propose = if same {
                            u >= self.config.eps_same
                        } else {
                            u < self.config.eps_diff
                        };
                        if propose {
                            pairs.push((a.id, b.id));
                        }
                    }
                }
                let out = 1 + 3 * pairs.len() as u64;
                (Response::Pairs { pairs }, out)
            }
            Capability::ClusterLabelScore => {
                let label = request
                    .label
                    .ok_or_else(|| OracleError::InvalidRequest("cluster scoring needs a label".into()))?;
                let k = task.k();
                let logprob = if k <= 1 {
                    0.0
                } else {
                    let majority = self.majority(request)?;
                    let p = self.config.cluster_label_probability;
                    if Self::same_label(task, &majority, label) {
                        p.ln()
                    } else {
                        ((1.0 - p) / (k - 1) as f64).ln()
                    }
                };
                (Response::LogProb { logprob }, 1)
            }
            Capability::PairwiseOrder => {
                let [s, t] = request.records[..] else {
                    return Err(OracleError::InvalidRequest("comparison needs two records".into()));
                };
                let score = |id| {
                    let truth = self.truth(id)?;
                    task.resolve_label(truth).ok_or_else(|| {
                        OracleError::InvalidRequest(format!("truth `{truth}` is not a score"))
                    })
                };
                let (zs, zt) = (score(s.id)?, score(t.id)?);
                let mut order = match zs.cmp(&zt) {
                    std::cmp::Ordering::Less => Order::Less,
                    std::cmp::Ordering::Greater => Order::Greater,
                    std::cmp::Ordering::Equal => {
                        if rng.random_bool(0.5) {
                            Order::Less
                        } else {
                            Order::Greater
                        }
                    }
                };
                if rng.random::<f64>() < self.config.order_error {
                    order = order.reversed();
                }
                (Response::Order { order }, 1)
            }
            Capability::RowClassification => {
                let record = request.records[0];
                let truth = self.truth(record.id)?;
                let k = task.k();
                if task.labels().is_empty() {
                    return Err(OracleError::InvalidRequest("row classification needs labels".into()));
                }
                let Some(truth_idx) = task.resolve_label(truth) else {
                    // No label fits; any answer is a guess.
                    let idx = rng.random_range(0..k);
                    let (a, b) = self.config.confidence.wrong;
                    let confidence = Beta::new(a, b)
                        .map_err(|e| OracleError::Config(e.to_string()))?
                        .sample(&mut rng);
                    let label = task.labels()[idx].name.clone();
                    let out = estimate_tokens(&label) + 1;
                    return Ok((Response::Classified { label, confidence }, Usage::new(input, out)));
                };
                let err = self.row_error_for(record.id);
                let wrong = k > 1 && rng.random::<f64>() < err;
                let idx = if wrong {
                    let pick = rng.random_range(0..k - 1);
                    if pick >= truth_idx {
                        pick + 1
                    } else {
                        pick
                    }
                } else {
                    truth_idx
                };
                let conf = &self.config.confidence;
                let confidence = if err == 0.0 {
                    conf.certain
                } else {
                    let (a, b) = if wrong { conf.wrong } else { conf.correct };
                    Beta::new(a, b)
                        .map_err(|e| OracleError::Config(e.to_string()))?
                        .sample(&mut rng)
                };
                let label = task.labels()[idx].name.clone();
                let out = estimate_tokens(&label) + 1;
                (Response::Classified { label, confidence }, out)
            }
            Capability::ClusterSummary => {
                let name = self.majority(request)?;
                let out = estimate_tokens(&name) + 1;
                (Response::Summary(LabelDef::new(name)), out)
            }
        };
        Ok((response, Usage::new(input, output)))
    }
}

impl AnnotationOracle for SimOracle {
    fn answer(&self, request: &Request<'_>) -> Result<Answer, OracleError> {
        let (response, usage) = self.simulate(request)?;
        self.ledger.charge(request.model, usage)?;
        Ok(Answer { response, usage })
    }

    fn quote(&self, request: &Request<'_>) -> Usage {
        // Answers are deterministic, so the quote is exact.
        self.simulate(request)
            .map(|(_, usage)| usage)
            .unwrap_or_else(|_| Usage::new(request.input_tokens(), 0))
    }

    fn ledger(&self) -> &SharedLedger {
        &self.ledger
    }
}

/// Uniform value in `[0, 1)` from a keyed hash.
fn unit_hash(seed: u64, tag: &str, index: u64) -> f64 {
    let h = crate::seed::derive_seed(seed, tag, index);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Record, TaskSpec};
    use crate::money::{CostLedger, Money};
    use crate::oracle::OracleExt;

    const M: &str = "m";

    fn ledger() -> SharedLedger {
        SharedLedger::new(CostLedger::with_prices([(M, Money::from_nanos(100))]))
    }

    fn classes() -> TaskSpec {
        TaskSpec::classification("topic", vec![LabelDef::new("A"), LabelDef::new("B")]).unwrap()
    }

    fn records(labels: &[&str]) -> Vec<Record> {
        labels
            .iter()
            .enumerate()
            .map(|(i, l)| Record::new(i + 1, format!("record {i}"), Some(l.to_string())))
            .collect()
    }

    fn oracle(config: SimOracleConfig, recs: &[Record]) -> SimOracle {
        let truth = recs
            .iter()
            .map(|r| (r.id, r.truth_label.clone().unwrap()))
            .collect();
        SimOracle::new(config, truth, ledger()).unwrap()
    }

    #[test]
    fn noiseless_pairs_are_truth_pairs() {
        let recs = records(&["A", "A", "B"]);
        let o = oracle(SimOracleConfig::noiseless(1), &recs);
        let refs: Vec<&Record> = recs.iter().collect();
        let pairs = o.propose_same_class_pairs(&refs, &classes(), M).unwrap();
        assert_eq!(pairs.into_iter().collect::<Vec<_>>(), vec![(1, 2)]);
    }

    #[test]
    fn forced_diff_flips_emit_cross_pairs() {
        let recs = records(&["A", "A", "B"]);
        let cfg = SimOracleConfig {
            eps_diff: 1.0,
            ..SimOracleConfig::noiseless(1)
        };
        let o = oracle(cfg, &recs);
        let refs: Vec<&Record> = recs.iter().collect();
        let pairs = o.propose_same_class_pairs(&refs, &classes(), M).unwrap();
        assert_eq!(pairs.into_iter().collect::<Vec<_>>(), vec![(1, 2), (1, 3), (2, 3)]);
    }

    #[test]
    fn pair_proposals_ignore_sample_order() {
        let recs = records(&["A", "B", "A", "B", "A"]);
        let cfg = SimOracleConfig {
            eps_same: 0.3,
            eps_diff: 0.3,
            ..SimOracleConfig::noiseless(9)
        };
        let o = oracle(cfg, &recs);
        let fwd: Vec<&Record> = recs.iter().collect();
        let rev: Vec<&Record> = recs.iter().rev().collect();
        assert_eq!(
            o.propose_same_class_pairs(&fwd, &classes(), M).unwrap(),
            o.propose_same_class_pairs(&rev, &classes(), M).unwrap()
        );
    }

    #[test]
    fn cluster_scores_follow_calibration() {
        let recs = records(&["A", "A", "A"]);
        let o = oracle(SimOracleConfig::noiseless(1), &recs);
        let refs: Vec<&Record> = recs.iter().collect();
        let t = classes();
        let a = o.score_cluster_label(&refs, &t.labels()[0], &t, M).unwrap();
        let b = o.score_cluster_label(&refs, &t.labels()[1], &t, M).unwrap();
        assert_eq!(a, 0.99f64.ln());
        assert_eq!(b, 0.01f64.ln());

        let one = TaskSpec::classification("p", vec![LabelDef::new("A")]).unwrap();
        let s = o.score_cluster_label(&refs[..1], &one.labels()[0], &one, M).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn comparisons_follow_truth_and_forced_inversion() {
        let scoring = TaskSpec::scoring("quality", 5, vec![]).unwrap();
        let recs = records(&["2", "5"]);
        let o = oracle(SimOracleConfig::noiseless(3), &recs);
        assert_eq!(o.compare_records(&recs[0], &recs[1], &scoring, M).unwrap(), Order::Less);
        assert_eq!(o.compare_records(&recs[1], &recs[0], &scoring, M).unwrap(), Order::Greater);
        let inverted = oracle(
            SimOracleConfig {
                order_error: 1.0,
                ..SimOracleConfig::noiseless(3)
            },
            &recs,
        );
        assert_eq!(
            inverted.compare_records(&recs[0], &recs[1], &scoring, M).unwrap(),
            Order::Greater
        );
    }

    #[test]
    fn classification_noise() {
        let recs = records(&["A", "B"]);
        let t = classes();
        let o = oracle(SimOracleConfig::noiseless(5), &recs);
        assert_eq!(o.classify_record(&recs[0], &t, M).unwrap(), (0, 0.99));

        let always_wrong = oracle(
            SimOracleConfig {
                row_error: 1.0,
                ..SimOracleConfig::noiseless(5)
            },
            &recs,
        );
        let (label, conf) = always_wrong.classify_record(&recs[0], &t, M).unwrap();
        assert_eq!(label, 1);
        assert!((0.0..=1.0).contains(&conf));
    }

    #[test]
    fn truth_outside_the_labels_is_a_guess() {
        let recs = records(&["C"]);
        let o = oracle(SimOracleConfig::noiseless(4), &recs);
        let (label, conf) = o.classify_record(&recs[0], &classes(), M).unwrap();
        assert!(label < 2);
        assert!((0.0..=1.0).contains(&conf));
        assert_eq!(o.classify_record(&recs[0], &classes(), M).unwrap(), (label, conf));
    }

    #[test]
    fn summary_is_majority_with_lexicographic_ties() {
        let t = TaskSpec::clustering("group", 2).unwrap();
        let recs = records(&["world", "sports", "sports"]);
        let o = oracle(SimOracleConfig::noiseless(1), &recs);
        let refs: Vec<&Record> = recs.iter().collect();
        assert_eq!(o.summarize_cluster(&refs, &t, M).unwrap().name, "sports");
        let tied = records(&["world", "sports"]);
        let o = oracle(SimOracleConfig::noiseless(1), &tied);
        let refs: Vec<&Record> = tied.iter().collect();
        assert_eq!(o.summarize_cluster(&refs, &t, M).unwrap().name, "sports");
    }

    #[test]
    fn every_call_is_charged_and_quote_matches() {
        let recs = records(&["A", "B", "A"]);
        let o = oracle(SimOracleConfig::noiseless(1), &recs);
        let t = classes();
        let refs: Vec<&Record> = recs.iter().collect();
        let req = Request::new(Capability::SameClassPairs, M, &t, refs.clone());
        let quoted = o.quote_cost(&req).unwrap();
        o.propose_same_class_pairs(&refs, &t, M).unwrap();
        o.classify_record(&recs[0], &t, M).unwrap();
        let snap = o.ledger().snapshot();
        assert_eq!(snap.calls(), 2);
        assert!(snap.total() > quoted);
        assert_eq!(snap.total(), snap.recomputed_total());
    }

    #[test]
    fn invalid_probabilities_rejected() {
        let cfg = SimOracleConfig {
            eps_same: 1.5,
            ..SimOracleConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
