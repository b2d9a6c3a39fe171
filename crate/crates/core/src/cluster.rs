//! Correlation clustering into exactly `k` (possibly empty) clusters by
//! best-improvement local search, with the sampling loop that stops once
//! the expected number of uncertain records is small.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::edge::{annotate_sample, CoverageSampler, EdgeStats, Sampler, UniformSampler, WeightMatrix};
use crate::error::{Error, Result};
use crate::model::{Record, RecordId, TaskSpec};
use crate::money::Money;
use crate::oracle::{AnnotationOracle, Capability, Request};
use crate::seed::{derive_seed, rng_for};

/// Smallest objective decrease accepted as an improving move.
pub const MIN_IMPROVEMENT: f64 = 1e-9;

/// Assignment plus the disagreement table `d(a, j)` (row-major `B x k`).
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterState {
    k: usize,
    assignment: Vec<usize>,
    d: Vec<f64>,
    objective: f64,
}

impl ClusterState {
    /// Computes every `d(a, j)` from the definition.
    pub fn from_scratch(w: &WeightMatrix, k: usize, assignment: Vec<usize>) -> Self {
        assert!(k >= 1, "k must be positive");
        assert_eq!(w.len(), assignment.len(), "assignment must cover the batch");
        assert!(assignment.iter().all(|&c| c < k), "cluster id out of range");
        let b = w.len();
        // d(a, j) = Σ_{b≠a} (1 − W) + Σ_{b∈C_j, b≠a} (2W − 1).
        let mut d = vec![0.0; b * k];
        for a in 0..b {
            let row = w.row(a);
            let out = &mut d[a * k..(a + 1) * k];
            let mut base = 0.0;
            for (x, (&wab, &c)) in row.iter().zip(&assignment).enumerate() {
                if x == a {
                    continue;
                }
                base += 1.0 - wab;
                out[c] += 2.0 * wab - 1.0;
            }
            for v in out.iter_mut() {
                *v += base;
            }
        }
        let objective = (0..b).map(|a| d[a * k + assignment[a]]).sum();
        ClusterState {
            k,
            assignment,
            d,
            objective,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn d(&self, a: usize, j: usize) -> f64 {
        self.d[a * self.k + j]
    }

    pub fn objective(&self) -> f64 {
        self.objective
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &c in &self.assignment {
            sizes[c] += 1;
        }
        sizes
    }

    /// Batch positions per cluster.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (a, &c) in self.assignment.iter().enumerate() {
            out[c].push(a);
        }
        out
    }

    /// Moves record `a` to cluster `q`, updating `d` and the objective
    /// incrementally.
    pub fn move_record(&mut self, w: &WeightMatrix, a: usize, q: usize) {
        let p = self.assignment[a];
        if p == q {
            return;
        }
        let k = self.k;
        self.objective += 2.0 * (self.d[a * k + q] - self.d[a * k + p]);
        let row = w.row(a);
        for (b, &wab) in row.iter().enumerate() {
            if b == a {
                continue;
            }
            self.d[b * k + p] += 1.0 - 2.0 * wab;
            self.d[b * k + q] += 2.0 * wab - 1.0;
        }
        self.assignment[a] = q;
    }

    /// The single move with the largest objective decrease, as
    /// `(record, target, decrease)`. Ties go to the lowest record, then the
    /// lowest target. `None` at a local optimum.
    pub fn best_move(&self) -> Option<(usize, usize, f64)> {
        let k = self.k;
        let mut best: Option<(usize, usize, f64)> = None;
        for (a, &p) in self.assignment.iter().enumerate() {
            let here = self.d[a * k + p];
            for j in 0..k {
                if j == p {
                    continue;
                }
                let gain = 2.0 * (here - self.d[a * k + j]);
                if gain > MIN_IMPROVEMENT && best.is_none_or(|(_, _, g)| gain > g) {
                    best = Some((a, j, gain));
                }
            }
        }
        best
    }
}

/// `d(a, j)`: weights to the other members of cluster `j` plus complements
/// of weights to everything outside it.
pub fn disagreement(a: usize, j: usize, w: &WeightMatrix, assignment: &[usize]) -> f64 {
    let mut total = 0.0;
    for (b, &c) in assignment.iter().enumerate() {
        if b == a {
            continue;
        }
        let wab = w.effective(a, b);
        total += if c == j { wab } else { 1.0 - wab };
    }
    total
}

/// Runs best-improvement moves from `state` until no move improves by more
/// than [`MIN_IMPROVEMENT`] or `max_moves` moves were made. Returns the
/// number of moves.
pub fn descend(state: &mut ClusterState, w: &WeightMatrix, max_moves: usize) -> usize {
    let mut moves = 0;
    while moves < max_moves {
        let Some((a, q, _)) = state.best_move() else { break };
        state.move_record(w, a, q);
        moves += 1;
    }
    moves
}

/// Best of `restarts` descents from seeded random assignments. Ties keep
/// the earliest restart.
pub fn local_search(w: &WeightMatrix, k: usize, seed: u64, restarts: usize, max_moves: usize) -> ClusterState {
    use rand::Rng as _;
    let b = w.len();
    let runs: Vec<ClusterState> = (0..restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = rng_for(seed, "restart", r as u64);
            let assignment: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
            let mut state = ClusterState::from_scratch(w, k, assignment);
            descend(&mut state, w, max_moves);
            state
        })
        .collect();
    runs.into_iter()
        .reduce(|best, s| if s.objective < best.objective { s } else { best })
        .expect("at least one restart")
}

/// `max(0, ½ min_{j≠id_a} (d(a,j) − d(a,id_a)))`; `+∞` when `k = 1`.
pub fn epsilon_margin(a: usize, state: &ClusterState) -> f64 {
    let own = state.assignment[a];
    let here = state.d(a, own);
    let gap = (0..state.k)
        .filter(|&j| j != own)
        .map(|j| state.d(a, j) - here)
        .fold(f64::INFINITY, f64::min);
    if gap.is_infinite() {
        return f64::INFINITY;
    }
    (0.5 * gap).max(0.0)
}

/// `Σ_a exp(−2r Σ_i ε_a² / |C_i|²)` over nonempty clusters `i`. A record with
/// an infinite margin contributes 0 once `r > 0`.
pub fn bound_from_margins(epsilons: &[f64], cluster_sizes: &[usize], r: f64) -> f64 {
    if r <= 0.0 {
        return epsilons.len() as f64;
    }
    let inv_sq: f64 = cluster_sizes
        .iter()
        .filter(|&&s| s > 0)
        .map(|&s| 1.0 / (s as f64 * s as f64))
        .sum();
    epsilons
        .iter()
        .map(|&e| {
            if e.is_infinite() {
                0.0
            } else {
                (-2.0 * r * e * e * inv_sq).exp()
            }
        })
        .sum()
}

/// Expected number of uncertain records after `r` co-samples per pair.
pub fn uncertainty_bound(state: &ClusterState, r: f64) -> f64 {
    let eps: Vec<f64> = (0..state.len()).map(|a| epsilon_margin(a, state)).collect();
    bound_from_margins(&eps, &state.cluster_sizes(), r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TerminationConfig {
    pub m_max: usize,
    /// Stop once the bound is at most this fraction of the batch size.
    pub tau_fraction: f64,
}

impl Default for TerminationConfig {
    fn default() -> Self {
        TerminationConfig {
            m_max: 800,
            tau_fraction: 0.2,
        }
    }
}

impl TerminationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_max == 0 {
            return Err(Error::InvalidInput("m_max must be at least 1".into()));
        }
        if !(self.tau_fraction > 0.0 && self.tau_fraction <= 1.0) {
            return Err(Error::InvalidInput(format!("tau_fraction {} outside (0, 1]", self.tau_fraction)));
        }
        Ok(())
    }
}

/// Expected co-samples per pair after `m` samples of `s` from `b` records.
pub fn samples_per_pair(m: usize, s: usize, b: usize) -> f64 {
    if b < 2 {
        return 0.0;
    }
    let s = s.min(b) as f64;
    let b = b as f64;
    m as f64 * s * (s - 1.0) / (b * (b - 1.0))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    Uniform,
    Coverage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub sample_size: usize,
    pub termination: TerminationConfig,
    pub restarts: usize,
    /// Cap on accepted moves per descent.
    pub max_moves: usize,
    /// Weight read for never co-sampled pairs.
    pub unsampled_weight: f64,
    pub sampler: SamplerKind,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            sample_size: 80,
            termination: TerminationConfig::default(),
            restarts: 4,
            max_moves: 100_000,
            unsampled_weight: 0.5,
            sampler: SamplerKind::Uniform,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Uncertain-record bound reached the threshold.
    Converged,
    MaxIterations,
    /// The next sample would have exceeded the spend limit.
    SpendLimit,
    /// The sampler produced no further samples.
    SamplerExhausted,
    /// Fewer than two records: nothing to compare.
    Trivial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterDiagnostics {
    pub m: usize,
    pub final_bound: f64,
    pub objective: f64,
    pub cluster_sizes: Vec<usize>,
    pub stop: StopReason,
}

#[derive(Clone, Debug)]
pub struct ClusterOutcome {
    /// Record ids per cluster, `k` lists.
    pub clusters: Vec<Vec<RecordId>>,
    pub diagnostics: ClusterDiagnostics,
    pub stats: EdgeStats,
}

/// Samples, annotates and re-clusters until the bound drops to
/// `tau_fraction · |batch|` or `m_max` samples were taken.
///
/// With `spend_limit`, sampling also stops before any call whose quoted
/// cost would take the ledger past the limit. `sampler` overrides the
/// configured sampler.
#[allow(clippy::too_many_arguments)]
pub fn cluster<O: AnnotationOracle + ?Sized>(
    batch: &[&Record],
    task: &TaskSpec,
    k: usize,
    oracle: &O,
    model: &str,
    config: &ClusterConfig,
    seed: u64,
    spend_limit: Option<Money>,
    sampler: Option<&mut dyn Sampler>,
) -> Result<ClusterOutcome> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be positive".into()));
    }
    config.termination.validate()?;
    if config.sample_size < 2 {
        return Err(Error::InvalidInput("sample size must be at least 2".into()));
    }
    let b = batch.len();
    let mut stats = EdgeStats::new(b);
    let ids = |state: &ClusterState| -> Vec<Vec<RecordId>> {
        state
            .clusters()
            .into_iter()
            .map(|c| c.into_iter().map(|a| batch[a].id).collect())
            .collect()
    };
    if b < 2 {
        let state = ClusterState::from_scratch(&stats.weights(config.unsampled_weight), k, vec![0; b]);
        return Ok(ClusterOutcome {
            clusters: ids(&state),
            diagnostics: ClusterDiagnostics {
                m: 0,
                final_bound: 0.0,
                objective: 0.0,
                cluster_sizes: state.cluster_sizes(),
                stop: StopReason::Trivial,
            },
            stats,
        });
    }

    let mut uniform = UniformSampler;
    let mut coverage = CoverageSampler;
    let sampler: &mut dyn Sampler = match sampler {
        Some(s) => s,
        None => match config.sampler {
            SamplerKind::Uniform => &mut uniform,
            SamplerKind::Coverage => &mut coverage,
        },
    };
    let tau = config.termination.tau_fraction * b as f64;
    let mut sample_rng = rng_for(seed, "sample", 0);
    let mut state = None;
    let mut bound = b as f64;
    let stop = loop {
        let m = stats.iteration();
        if m >= config.termination.m_max {
            break StopReason::MaxIterations;
        }
        let Some(sample) = sampler.sample(&stats, config.sample_size, &mut sample_rng) else {
            break StopReason::SamplerExhausted;
        };
        if let Some(limit) = spend_limit {
            let records: Vec<&Record> = sample.iter().map(|&a| batch[a]).collect();
            let quote = oracle.quote_cost(&Request::new(Capability::SameClassPairs, model, task, records))?;
            if oracle.ledger().total() + quote > limit {
                break StopReason::SpendLimit;
            }
        }
        annotate_sample(&mut stats, batch, task, oracle, model, &sample)?;
        let w = stats.weights(config.unsampled_weight);
        let s = local_search(
            &w,
            k,
            derive_seed(seed, "local-search", stats.iteration() as u64),
            config.restarts,
            config.max_moves,
        );
        bound = uncertainty_bound(&s, samples_per_pair(stats.iteration(), sample.len(), b));
        state = Some(s);
        tracing::trace!(m = stats.iteration(), bound, tau, "clustering iteration");
        if bound <= tau {
            break StopReason::Converged;
        }
    };
    let state = match state {
        Some(s) => s,
        None => {
            let w = stats.weights(config.unsampled_weight);
            local_search(&w, k, derive_seed(seed, "local-search", 0), config.restarts, config.max_moves)
        }
    };
    Ok(ClusterOutcome {
        clusters: ids(&state),
        diagnostics: ClusterDiagnostics {
            m: stats.iteration(),
            final_bound: bound,
            objective: state.objective(),
            cluster_sizes: state.cluster_sizes(),
            stop,
        },
        stats,
    })
}
