//! Accuracy metrics and cost normalization.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::model::{PredictionSet, RecordId};
use crate::money::Money;

fn same_ids(truth: &PredictionSet, pred: &PredictionSet) -> Result<()> {
    if truth.len() != pred.len() || truth.iter().any(|(id, _)| !pred.contains(id)) {
        let missing: Vec<RecordId> = truth.iter().map(|(id, _)| id).filter(|&id| !pred.contains(id)).take(5).collect();
        let extra: Vec<RecordId> = pred.iter().map(|(id, _)| id).filter(|&id| !truth.contains(id)).take(5).collect();
        return Err(Error::IdMismatch(format!(
            "truth has {} records, predictions {}; missing from predictions {missing:?}, unexpected {extra:?}",
            truth.len(),
            pred.len()
        )));
    }
    Ok(())
}

/// Fraction of records whose predicted label equals the truth.
pub fn classification_accuracy(truth: &PredictionSet, pred: &PredictionSet) -> Result<f64> {
    same_ids(truth, pred)?;
    if truth.is_empty() {
        return Err(Error::InvalidInput("accuracy of an empty set".into()));
    }
    let hits = truth.iter().filter(|&(id, y)| pred.get(id) == Some(y)).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Fraction of record pairs whose predicted order (less, equal, greater)
/// agrees with the truth order.
pub fn pairwise_score_accuracy(truth: &PredictionSet, pred: &PredictionSet) -> Result<f64> {
    same_ids(truth, pred)?;
    let n = truth.len();
    if n < 2 {
        return Err(Error::InvalidInput("pairwise accuracy needs at least two records".into()));
    }
    let rows: Vec<(usize, usize)> = truth
        .iter()
        .map(|(id, y)| (y, pred.get(id).expect("ids checked")))
        .collect();
    let mut agree = 0u64;
    for i in 0..n {
        for j in i + 1..n {
            if rows[i].0.cmp(&rows[j].0) == rows[i].1.cmp(&rows[j].1) {
                agree += 1;
            }
        }
    }
    let pairs = (n as u64) * (n as u64 - 1) / 2;
    Ok(agree as f64 / pairs as f64)
}

fn check_partition(clusters: &[Vec<RecordId>], what: &str) -> Result<BTreeSet<RecordId>> {
    let mut seen = BTreeSet::new();
    for &id in clusters.iter().flatten() {
        if !seen.insert(id) {
            return Err(Error::InvalidInput(format!("record {id} appears twice in the {what} clusters")));
        }
    }
    Ok(seen)
}

/// `(1/n) Σ_i max_j |Ĉ_i ∩ C_j|` over predicted clusters `Ĉ_i`.
pub fn clustering_accuracy(truth_clusters: &[Vec<RecordId>], pred_clusters: &[Vec<RecordId>]) -> Result<f64> {
    let truth_ids = check_partition(truth_clusters, "truth")?;
    let pred_ids = check_partition(pred_clusters, "predicted")?;
    if truth_ids != pred_ids {
        return Err(Error::IdMismatch("truth and predicted clusters cover different records".into()));
    }
    if truth_ids.is_empty() {
        return Err(Error::InvalidInput("clustering accuracy of an empty set".into()));
    }
    let owner: BTreeMap<RecordId, usize> = truth_clusters
        .iter()
        .enumerate()
        .flat_map(|(j, c)| c.iter().map(move |&id| (id, j)))
        .collect();
    let mut total = 0usize;
    for c in pred_clusters {
        let mut counts = vec![0usize; truth_clusters.len()];
        for id in c {
            counts[owner[id]] += 1;
        }
        total += counts.into_iter().max().unwrap_or(0);
    }
    Ok(total as f64 / truth_ids.len() as f64)
}

/// Groups a prediction set by label value.
pub fn clusters_of(pred: &PredictionSet) -> Vec<Vec<RecordId>> {
    let mut groups: BTreeMap<usize, Vec<RecordId>> = BTreeMap::new();
    for (id, label) in pred.iter() {
        groups.entry(label).or_default().push(id);
    }
    groups.into_values().collect()
}

/// `total / n · 1000` in currency units.
pub fn cost_per_1000(total: Money, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidInput("cost per 1000 of zero records".into()));
    }
    Ok(total.as_units() / n as f64 * 1000.0)
}
