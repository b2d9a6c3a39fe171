//! Scores for clusters: sampled pairwise comparisons between clusters and a
//! minimum-violation total order over them.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PredictionSet, Record, TaskKind, TaskSpec};
use crate::oracle::{AnnotationOracle, Order, OracleExt};
use crate::seed::rng_for;

/// Largest cluster count solved exactly.
pub const EXACT_ORDER_LIMIT: usize = 16;

/// `w[i][j]`: fraction of sampled record pairs where the record from cluster
/// `i` was judged to score below the one from cluster `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderGraph {
    pub w: Vec<Vec<f64>>,
    pub m_sort: usize,
}

impl OrderGraph {
    /// From the upper triangle; the lower one is the complement.
    pub fn from_upper(k: usize, upper: impl Fn(usize, usize) -> f64, m_sort: usize) -> Self {
        let mut w = vec![vec![0.0; k]; k];
        for i in 0..k {
            for j in i + 1..k {
                let x = upper(i, j);
                w[i][j] = x;
                w[j][i] = 1.0 - x;
            }
        }
        OrderGraph { w, m_sort }
    }

    pub fn k(&self) -> usize {
        self.w.len()
    }
}

/// Violations of the order given by `scores` (a permutation of `0..k`, the
/// score rank of each cluster): for `i < j`, `w[i][j]` if `i` ranks above
/// `j`, else `w[j][i]`.
pub fn ordering_objective(w: &[Vec<f64>], scores: &[usize]) -> f64 {
    let k = w.len();
    let mut total = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            total += if scores[i] > scores[j] { w[i][j] } else { w[j][i] };
        }
    }
    total
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorePermutation {
    /// 0-based score rank per cluster.
    pub scores: Vec<usize>,
    pub objective: f64,
    /// False when the heuristic for large `k` was used.
    pub optimal: bool,
}

/// Ranks clusters to minimize [`ordering_objective`]. Exact subset dynamic
/// program up to [`EXACT_ORDER_LIMIT`] clusters; above that, greedy
/// insertion followed by adjacent-swap descent.
pub fn optimal_score_permutation(graph: &OrderGraph) -> ScorePermutation {
    let k = graph.k();
    let w = &graph.w;
    let bottom_up = if k <= EXACT_ORDER_LIMIT {
        subset_dp(w)
    } else {
        insertion_heuristic(w)
    };
    let mut scores = vec![0; k];
    for (rank, &c) in bottom_up.iter().enumerate() {
        scores[c] = rank;
    }
    ScorePermutation {
        objective: ordering_objective(w, &scores),
        scores,
        optimal: k <= EXACT_ORDER_LIMIT,
    }
}

/// Clusters from lowest to highest score. `best[S]` is the least cost of
/// ordering set `S` as the bottom `|S|` ranks; placing `j` directly above
/// `S` costs `Σ_{y∈S} w[j][y]`.
fn subset_dp(w: &[Vec<f64>]) -> Vec<usize> {
    let k = w.len();
    let full = 1usize << k;
    let mut best = vec![f64::INFINITY; full];
    let mut last = vec![usize::MAX; full];
    best[0] = 0.0;
    for set in 0..full {
        if !best[set].is_finite() {
            continue;
        }
        for j in 0..k {
            if set & (1 << j) != 0 {
                continue;
            }
            let add: f64 = (0..k).filter(|&y| set & (1 << y) != 0).map(|y| w[j][y]).sum();
            let next = set | (1 << j);
            let cand = best[set] + add;
            if cand < best[next] {
                best[next] = cand;
                last[next] = j;
            }
        }
    }
    let mut order = Vec::with_capacity(k);
    let mut set = full - 1;
    while set != 0 {
        let j = last[set];
        order.push(j);
        set &= !(1 << j);
    }
    order.reverse();
    order
}

fn insertion_heuristic(w: &[Vec<f64>]) -> Vec<usize> {
    let k = w.len();
    let cost = |order: &[usize]| -> f64 {
        let mut c = 0.0;
        for (lo, &a) in order.iter().enumerate() {
            for &b in &order[lo + 1..] {
                c += w[b][a];
            }
        }
        c
    };
    let mut order: Vec<usize> = Vec::with_capacity(k);
    for c in 0..k {
        let pos = (0..=order.len())
            .min_by(|&p, &q| {
                let mut a = order.clone();
                a.insert(p, c);
                let mut b = order.clone();
                b.insert(q, c);
                cost(&a).total_cmp(&cost(&b))
            })
            .unwrap_or(0);
        order.insert(pos, c);
    }
    let mut improved = true;
    while improved {
        improved = false;
        for p in 0..k.saturating_sub(1) {
            let (a, b) = (order[p], order[p + 1]);
            // Swapping only changes the a/b term.
            if w[a][b] < w[b][a] - 1e-12 {
                order.swap(p, p + 1);
                improved = true;
            }
        }
    }
    order
}

/// Samples `m_sort` record pairs with replacement for every unordered
/// cluster pair and records the LESS fraction. Every cluster must be
/// non-empty.
pub fn pairwise_cluster_orders<O: AnnotationOracle + ?Sized>(
    clusters: &[Vec<&Record>],
    task: &TaskSpec,
    oracle: &O,
    model: &str,
    m_sort: usize,
    seed: u64,
) -> Result<OrderGraph> {
    if m_sort == 0 {
        return Err(Error::InvalidInput("m_sort must be at least 1".into()));
    }
    if clusters.iter().any(Vec::is_empty) {
        return Err(Error::InvalidInput("comparisons need non-empty clusters".into()));
    }
    let k = clusters.len();
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect();
    let fractions: Vec<f64> = pairs
        .par_iter()
        .enumerate()
        .map(|(idx, &(i, j))| {
            let mut rng = rng_for(seed, "order", idx as u64);
            let mut less = 0usize;
            for _ in 0..m_sort {
                let s = clusters[i][rng.random_range(0..clusters[i].len())];
                let t = clusters[j][rng.random_range(0..clusters[j].len())];
                if oracle.compare_records(s, t, task, model)? == Order::Less {
                    less += 1;
                }
            }
            Ok(less as f64 / m_sort as f64)
        })
        .collect::<Result<_>>()?;
    let mut w = vec![vec![0.0; k]; k];
    for (&(i, j), &f) in pairs.iter().zip(&fractions) {
        w[i][j] = f;
        w[j][i] = 1.0 - f;
    }
    Ok(OrderGraph { w, m_sort })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderDiagnostics {
    /// Indices of the non-empty clusters the graph is over.
    pub clusters: Vec<usize>,
    pub w_ord: Vec<Vec<f64>>,
    pub objective: f64,
    pub optimal: bool,
    /// Score index (0-based) per cluster.
    pub scores: Vec<usize>,
}

/// Scores every record of a cluster with that cluster's rank. Non-empty
/// clusters take the lowest scores in rank order; empty clusters take the
/// rest.
pub fn sort_assign<O: AnnotationOracle + ?Sized>(
    clusters: &[Vec<&Record>],
    task: &TaskSpec,
    oracle: &O,
    model: &str,
    m_sort: usize,
    seed: u64,
) -> Result<(PredictionSet, OrderDiagnostics)> {
    if task.kind() != TaskKind::Scoring {
        return Err(Error::InvalidTask("score assignment needs a scoring task".into()));
    }
    let k = task.k();
    if clusters.len() != k {
        return Err(Error::InvalidInput(format!("{} clusters for k={k}", clusters.len())));
    }
    let nonempty: Vec<usize> = (0..k).filter(|&i| !clusters[i].is_empty()).collect();
    let sub: Vec<Vec<&Record>> = nonempty.iter().map(|&i| clusters[i].clone()).collect();
    let graph = pairwise_cluster_orders(&sub, task, oracle, model, m_sort, seed)?;
    let perm = optimal_score_permutation(&graph);
    let mut scores = vec![usize::MAX; k];
    for (pos, &i) in nonempty.iter().enumerate() {
        scores[i] = perm.scores[pos];
    }
    let mut next = nonempty.len();
    for s in scores.iter_mut().filter(|s| **s == usize::MAX) {
        *s = next;
        next += 1;
    }
    let predictions = clusters
        .iter()
        .zip(&scores)
        .flat_map(|(c, &s)| c.iter().map(move |r| (r.id, s)))
        .collect();
    Ok((
        predictions,
        OrderDiagnostics {
            clusters: nonempty,
            w_ord: graph.w,
            objective: perm.objective,
            optimal: perm.optimal,
            scores,
        },
    ))
}
