//! Cluster-to-label assignment by maximum-weight perfect matching, and label
//! generation for clustering tasks.

use std::collections::HashSet;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LabelDef, PredictionSet, Record, TaskSpec};
use crate::oracle::{AnnotationOracle, OracleExt};
use crate::seed::rng_for;

/// Minimum-cost assignment of a square cost matrix (row-major), Hungarian
/// method with potentials. Returns `(column per row, row potentials,
/// column potentials)`; reduced costs `c[i][j] - u[i] - v[j]` are
/// non-negative and zero on the assignment.
fn hungarian_min(n: usize, cost: &[f64]) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    // 1-based internals; index 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    (row_to_col, u[1..].to_vec(), v[1..].to_vec())
}

/// Whether rows `from..n` can be matched into free columns using allowed
/// edges (augmenting paths).
fn completes(n: usize, from: usize, allowed: &[bool], col_taken: &[bool]) -> bool {
    fn augment(r: usize, n: usize, allowed: &[bool], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for c in 0..n {
            if allowed[r * n + c] && !seen[c] {
                seen[c] = true;
                if owner[c].is_none_or(|o| augment(o, n, allowed, seen, owner)) {
                    owner[c] = Some(r);
                    return true;
                }
            }
        }
        false
    }
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut masked = allowed.to_vec();
    for c in (0..n).filter(|&c| col_taken[c]) {
        for r in 0..n {
            masked[r * n + c] = false;
        }
    }
    (from..n).all(|r| {
        let mut seen = vec![false; n];
        augment(r, n, &masked, &mut seen, &mut owner)
    })
}

/// Sum of `weights[i][perm[i]]` in row order.
pub fn matching_weight(weights: &[Vec<f64>], perm: &[usize]) -> f64 {
    weights.iter().zip(perm).map(|(row, &j)| row[j]).sum()
}

/// Permutation `σ` (cluster `i` → label `σ[i]`) maximizing
/// `Σ_i weights[i][σ[i]]`. Among optimal permutations the
/// lexicographically smallest is returned.
pub fn max_weight_perfect_matching(weights: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = weights.len();
    if weights.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidInput("assignment weights must form a square matrix".into()));
    }
    if weights.iter().flatten().any(|w| !w.is_finite()) {
        return Err(Error::InvalidInput("assignment weights must be finite".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let cost: Vec<f64> = weights.iter().flatten().map(|w| -w).collect();
    let (hung, u, v) = hungarian_min(n, &cost);
    let scale = weights.iter().flatten().fold(1.0_f64, |m, w| m.max(w.abs()));
    let tol = 1e-9 * scale;
    // Every perfect matching on tight edges is optimal.
    let tight: Vec<bool> = (0..n * n)
        .map(|idx| cost[idx] - u[idx / n] - v[idx % n] <= tol)
        .collect();
    let mut taken = vec![false; n];
    let mut perm = Vec::with_capacity(n);
    for i in 0..n {
        let choice = (0..n).find(|&j| {
            if taken[j] || !tight[i * n + j] {
                return false;
            }
            taken[j] = true;
            let ok = completes(n, i + 1, &tight, &taken);
            taken[j] = false;
            ok
        });
        match choice {
            Some(j) => {
                taken[j] = true;
                perm.push(j);
            }
            None => return Ok(hung),
        }
    }
    if matching_weight(weights, &perm) < matching_weight(weights, &hung) - tol {
        return Ok(hung);
    }
    Ok(perm)
}

/// Up to `cap` records of a cluster, seeded sample in id order.
pub(crate) fn capped<'a>(cluster: &[&'a Record], cap: usize, seed: u64, index_tag: u64) -> Vec<&'a Record> {
    if cluster.len() <= cap {
        return cluster.to_vec();
    }
    let mut rng = rng_for(seed, "cluster-cap", index_tag);
    let mut picked: Vec<&Record> = index::sample(&mut rng, cluster.len(), cap)
        .into_iter()
        .map(|i| cluster[i])
        .collect();
    picked.sort_by_key(|r| r.id);
    picked
}

/// `k x k` matrix with entry `(i, j)` = log-probability of cluster `i` under
/// label `j`, times `|C_i|`. Rows of empty clusters are zero.
pub fn cluster_label_weights<O: AnnotationOracle + ?Sized>(
    clusters: &[Vec<&Record>],
    task: &TaskSpec,
    oracle: &O,
    model: &str,
    record_cap: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let labels = task.labels();
    if clusters.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} clusters for {} labels",
            clusters.len(),
            labels.len()
        )));
    }
    let k = labels.len();
    let shown: Vec<Vec<&Record>> = clusters
        .iter()
        .enumerate()
        .map(|(i, c)| capped(c, record_cap.max(1), seed, i as u64))
        .collect();
    let cells: Vec<f64> = (0..k * k)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / k, idx % k);
            if clusters[i].is_empty() {
                return Ok(0.0);
            }
            let lp = oracle.score_cluster_label(&shown[i], &labels[j], task, model)?;
            Ok(lp * clusters[i].len() as f64)
        })
        .collect::<Result<_>>()?;
    Ok(cells.chunks(k).map(<[f64]>::to_vec).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssignDiagnostics {
    pub weights: Vec<Vec<f64>>,
    /// Label index per cluster.
    pub permutation: Vec<usize>,
}

/// Labels every record of cluster `i` with label `σ(i)`.
pub fn assign<O: AnnotationOracle + ?Sized>(
    clusters: &[Vec<&Record>],
    task: &TaskSpec,
    oracle: &O,
    model: &str,
    record_cap: usize,
    seed: u64,
) -> Result<(PredictionSet, AssignDiagnostics)> {
    if !task.has_labels() {
        return Err(Error::InvalidTask("assignment needs the task labels".into()));
    }
    let weights = cluster_label_weights(clusters, task, oracle, model, record_cap, seed)?;
    let permutation = max_weight_perfect_matching(&weights)?;
    let predictions = clusters
        .iter()
        .zip(&permutation)
        .flat_map(|(c, &label)| c.iter().map(move |r| (r.id, label)))
        .collect();
    Ok((predictions, AssignDiagnostics { weights, permutation }))
}

/// One label per cluster from oracle summaries. Empty clusters get
/// `empty-<i>` (1-based); repeated names get `-2`, `-3`, ... suffixes.
pub fn generate_cluster_labels<O: AnnotationOracle + ?Sized>(
    clusters: &[Vec<&Record>],
    task: &TaskSpec,
    oracle: &O,
    model: &str,
    record_cap: usize,
    seed: u64,
) -> Result<Vec<LabelDef>> {
    let summaries: Vec<Option<LabelDef>> = clusters
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            if c.is_empty() {
                return Ok(None);
            }
            let shown = capped(c, record_cap.max(1), seed, i as u64);
            Ok(Some(oracle.summarize_cluster(&shown, task, model)?))
        })
        .collect::<Result<_>>()?;
    let raw: Vec<LabelDef> = summaries
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.unwrap_or_else(|| LabelDef::new(format!("empty-{}", i + 1))))
        .collect();
    Ok(dedup_names(raw))
}

fn dedup_names(labels: Vec<LabelDef>) -> Vec<LabelDef> {
    let mut used: HashSet<String> = HashSet::new();
    labels
        .into_iter()
        .map(|mut l| {
            let base = l.name.trim().to_string();
            let mut name = base.clone();
            let mut n = 2;
            while used.contains(&name) {
                name = format!("{base}-{n}");
                n += 1;
            }
            used.insert(name.clone());
            l.name = name;
            l
        })
        .collect()
}
