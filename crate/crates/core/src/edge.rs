//! Same-class annotation counts and edge weights for one batch.
//!
//! Records are addressed by their position in the batch (`0..B`). Each
//! sampling iteration asks the oracle for same-class pairs within a sample,
//! closes them transitively, and counts every other pair of the sample as a
//! negative annotation.

use std::collections::{BTreeSet, HashMap};

use rand::seq::index;
use rand::seq::SliceRandom;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::model::{Record, TaskSpec};
use crate::oracle::{AnnotationOracle, OracleExt};
use crate::seed::Rng;

/// Disjoint-set forest with path compression and union by size.
#[derive(Clone, Debug)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = x;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        let (big, small) = if self.size[ra] >= self.size[rb] { (ra, rb) } else { (rb, ra) };
        self.parent[small] = big;
        self.size[big] += self.size[small];
        true
    }
}

/// All within-component pairs `(min, max)` of the union-find structure that
/// `pairs` induces over `sample`.
pub fn transitive_closure(
    pairs: &BTreeSet<(usize, usize)>,
    sample: &[usize],
) -> Result<BTreeSet<(usize, usize)>> {
    let pos: HashMap<usize, usize> = sample.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut uf = UnionFind::new(sample.len());
    for &(a, b) in pairs {
        let (Some(&pa), Some(&pb)) = (pos.get(&a), pos.get(&b)) else {
            return Err(Error::InvalidInput(format!("pair ({a}, {b}) names an id outside the sample")));
        };
        uf.union(pa, pb);
    }
    let roots: Vec<usize> = (0..sample.len()).map(|i| uf.find(i)).collect();
    let mut closed = BTreeSet::new();
    for i in 0..sample.len() {
        for j in i + 1..sample.len() {
            if roots[i] == roots[j] {
                let (a, b) = (sample[i], sample[j]);
                closed.insert((a.min(b), a.max(b)));
            }
        }
    }
    Ok(closed)
}

/// Positive and negative annotation counts per pair, plus how often each
/// record has been sampled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeStats {
    b: usize,
    c_plus: Vec<u32>,
    c_minus: Vec<u32>,
    appearances: Vec<u32>,
    iteration: usize,
}

impl EdgeStats {
    pub fn new(b: usize) -> Self {
        EdgeStats {
            b,
            c_plus: vec![0; b * b],
            c_minus: vec![0; b * b],
            appearances: vec![0; b],
            iteration: 0,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.b
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn c_plus(&self, a: usize, b: usize) -> u32 {
        self.c_plus[a * self.b + b]
    }

    pub fn c_minus(&self, a: usize, b: usize) -> u32 {
        self.c_minus[a * self.b + b]
    }

    pub fn appearances(&self, a: usize) -> u32 {
        self.appearances[a]
    }

    /// Applies one annotated sample: `positives` are batch positions judged
    /// same-class, before closure.
    pub fn record_annotation(
        &mut self,
        sample: &[usize],
        positives: &BTreeSet<(usize, usize)>,
    ) -> Result<()> {
        if let Some(&bad) = sample.iter().find(|&&a| a >= self.b) {
            return Err(Error::InvalidInput(format!("sample position {bad} outside batch of {}", self.b)));
        }
        let distinct: BTreeSet<usize> = sample.iter().copied().collect();
        if distinct.len() != sample.len() {
            return Err(Error::InvalidInput("sample positions must be distinct".into()));
        }
        let closed = transitive_closure(positives, sample)?;
        for (i, &a) in sample.iter().enumerate() {
            self.appearances[a] += 1;
            for &b in &sample[i + 1..] {
                let counts = if closed.contains(&(a.min(b), a.max(b))) {
                    &mut self.c_plus
                } else {
                    &mut self.c_minus
                };
                counts[a * self.b + b] += 1;
                counts[b * self.b + a] += 1;
            }
        }
        self.iteration += 1;
        Ok(())
    }

    /// Negative-annotation frequency per pair; pairs never co-sampled read
    /// as `unsampled`.
    pub fn weights(&self, unsampled: f64) -> WeightMatrix {
        let mut values = vec![0.0; self.b * self.b];
        let mut sampled = vec![false; self.b * self.b];
        for a in 0..self.b {
            for b in 0..self.b {
                if a == b {
                    continue;
                }
                let idx = a * self.b + b;
                let total = self.c_plus[idx] + self.c_minus[idx];
                if total > 0 {
                    values[idx] = f64::from(self.c_minus[idx]) / f64::from(total);
                    sampled[idx] = true;
                } else {
                    values[idx] = unsampled;
                }
            }
        }
        WeightMatrix {
            b: self.b,
            values,
            sampled,
        }
    }

    /// `{"c_plus", "c_minus", "w"}` as nested arrays; unsampled weights are
    /// `null`.
    pub fn debug_json(&self) -> Value {
        let rows = |m: &Vec<u32>| -> Vec<Vec<u32>> { m.chunks(self.b.max(1)).map(<[u32]>::to_vec).collect() };
        let w = self.weights(0.5);
        let w_rows: Vec<Vec<Option<f64>>> = (0..self.b)
            .map(|a| (0..self.b).map(|b| if a == b { None } else { w.get(a, b) }).collect())
            .collect();
        json!({
            "iteration": self.iteration,
            "c_plus": rows(&self.c_plus),
            "c_minus": rows(&self.c_minus),
            "w": w_rows,
        })
    }
}

/// Symmetric `B x B` edge weights in `[0, 1]`. Pairs without annotations
/// hold the configured prior.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMatrix {
    b: usize,
    values: Vec<f64>,
    sampled: Vec<bool>,
}

impl WeightMatrix {
    /// Fully specified weights, row-major `b x b`; the diagonal is ignored.
    pub fn from_dense(b: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != b * b {
            return Err(Error::InvalidInput(format!("expected {} weights, got {}", b * b, values.len())));
        }
        for a in 0..b {
            for c in 0..b {
                let w = values[a * b + c];
                if a != c && (!(0.0..=1.0).contains(&w) || w != values[c * b + a]) {
                    return Err(Error::InvalidInput(format!(
                        "weight ({a}, {c}) must lie in [0, 1] and be symmetric"
                    )));
                }
            }
        }
        let mut sampled = vec![true; b * b];
        for a in 0..b {
            sampled[a * b + a] = false;
        }
        Ok(WeightMatrix { b, values, sampled })
    }

    pub fn len(&self) -> usize {
        self.b
    }

    pub fn is_empty(&self) -> bool {
        self.b == 0
    }

    /// Stored value, or `None` for a pair that was never co-sampled.
    pub fn get(&self, a: usize, b: usize) -> Option<f64> {
        let idx = a * self.b + b;
        self.sampled[idx].then(|| self.values[idx])
    }

    /// Weight used by the clustering objective; the prior for unsampled pairs.
    #[inline]
    pub fn effective(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.b + b]
    }

    pub fn row(&self, a: usize) -> &[f64] {
        &self.values[a * self.b..(a + 1) * self.b]
    }
}

pub fn edge_weight(w: &WeightMatrix, a: usize, b: usize) -> Result<f64> {
    if a == b {
        return Err(Error::InvalidInput(format!("edge weight of record {a} with itself")));
    }
    if a >= w.len() || b >= w.len() {
        return Err(Error::InvalidInput(format!("pair ({a}, {b}) outside batch of {}", w.len())));
    }
    Ok(w.effective(a, b))
}

/// Chooses the batch positions annotated in one iteration.
pub trait Sampler: Send {
    /// `None` ends sampling.
    fn sample(&mut self, stats: &EdgeStats, size: usize, rng: &mut Rng) -> Option<Vec<usize>>;
}

/// Uniform sample without replacement, independent across iterations.
#[derive(Clone, Copy, Debug, Default)]
pub struct UniformSampler;

impl Sampler for UniformSampler {
    fn sample(&mut self, stats: &EdgeStats, size: usize, rng: &mut Rng) -> Option<Vec<usize>> {
        let b = stats.batch_size();
        let mut picked = index::sample(rng, b, size.min(b)).into_vec();
        picked.sort_unstable();
        Some(picked)
    }
}

/// Prefers the records sampled least often so far; ties are broken at
/// random.
#[derive(Clone, Copy, Debug, Default)]
pub struct CoverageSampler;

impl Sampler for CoverageSampler {
    fn sample(&mut self, stats: &EdgeStats, size: usize, rng: &mut Rng) -> Option<Vec<usize>> {
        let b = stats.batch_size();
        let mut order: Vec<usize> = (0..b).collect();
        order.shuffle(rng);
        order.sort_by_key(|&a| stats.appearances(a));
        let mut picked: Vec<usize> = order.into_iter().take(size.min(b)).collect();
        picked.sort_unstable();
        Some(picked)
    }
}

/// Replays a fixed list of samples, then stops.
#[derive(Clone, Debug)]
pub struct ScriptedSampler {
    samples: std::vec::IntoIter<Vec<usize>>,
}

impl ScriptedSampler {
    pub fn new(samples: Vec<Vec<usize>>) -> Self {
        ScriptedSampler {
            samples: samples.into_iter(),
        }
    }
}

impl Sampler for ScriptedSampler {
    fn sample(&mut self, _: &EdgeStats, _: usize, _: &mut Rng) -> Option<Vec<usize>> {
        self.samples.next()
    }
}

/// One sampling iteration: draw a sample, ask for same-class pairs, fold the
/// closed annotations into `stats`. Returns the sample, or `None` when the
/// sampler is exhausted.
#[allow(clippy::too_many_arguments)]
pub fn update_edge_weights<O: AnnotationOracle + ?Sized>(
    stats: &mut EdgeStats,
    batch: &[&Record],
    task: &TaskSpec,
    oracle: &O,
    model: &str,
    sample_size: usize,
    sampler: &mut dyn Sampler,
    rng: &mut Rng,
) -> Result<Option<Vec<usize>>> {
    let Some(sample) = sampler.sample(stats, sample_size, rng) else {
        return Ok(None);
    };
    annotate_sample(stats, batch, task, oracle, model, &sample)?;
    Ok(Some(sample))
}

/// Annotates a given sample of batch positions.
pub fn annotate_sample<O: AnnotationOracle + ?Sized>(
    stats: &mut EdgeStats,
    batch: &[&Record],
    task: &TaskSpec,
    oracle: &O,
    model: &str,
    sample: &[usize],
) -> Result<()> {
    if batch.len() != stats.batch_size() {
        return Err(Error::InvalidInput(format!(
            "edge statistics cover {} records, batch has {}",
            stats.batch_size(),
            batch.len()
        )));
    }
    if let Some(&bad) = sample.iter().find(|&&a| a >= batch.len()) {
        return Err(Error::InvalidInput(format!("sample position {bad} outside batch of {}", batch.len())));
    }
    let records: Vec<&Record> = sample.iter().map(|&a| batch[a]).collect();
    let pairs = oracle.propose_same_class_pairs(&records, task, model)?;
    let position: HashMap<usize, usize> = sample.iter().map(|&a| (batch[a].id, a)).collect();
    let positives: BTreeSet<(usize, usize)> = pairs
        .into_iter()
        .map(|(x, y)| {
            let (a, b) = (position[&x], position[&y]);
            (a.min(b), a.max(b))
        })
        .collect();
    stats.record_annotation(sample, &positives)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(pairs: &[(usize, usize)]) -> BTreeSet<(usize, usize)> {
        pairs.iter().copied().collect()
    }

    #[test]
    fn closure_examples() {
        assert_eq!(
            transitive_closure(&set(&[(1, 3), (1, 4)]), &[1, 3, 4]).unwrap(),
            set(&[(1, 3), (1, 4), (3, 4)])
        );
        assert!(transitive_closure(&set(&[]), &[1, 2]).unwrap().is_empty());
        assert_eq!(
            transitive_closure(&set(&[(0, 1), (1, 2), (2, 3)]), &[0, 1, 2, 3]).unwrap().len(),
            6
        );
        assert!(transitive_closure(&set(&[(0, 9)]), &[0, 1]).is_err());
    }

    #[test]
    fn edge_weight_examples() {
        let mut stats = EdgeStats::new(3);
        for _ in 0..3 {
            stats.record_annotation(&[0, 1], &set(&[(0, 1)])).unwrap();
            stats.record_annotation(&[0, 1], &set(&[])).unwrap();
        }
        for _ in 0..4 {
            stats.record_annotation(&[1, 2], &set(&[(1, 2)])).unwrap();
        }
        let w = stats.weights(0.5);
        assert_eq!(edge_weight(&w, 0, 1).unwrap(), 0.5);
        assert_eq!(edge_weight(&w, 0, 2).unwrap(), 0.5);
        assert_eq!(w.get(0, 2), None);
        assert_eq!(edge_weight(&w, 1, 2).unwrap(), 0.0);
        assert!(edge_weight(&w, 1, 1).is_err());
    }

    fn brute_recount(b: usize, history: &[(Vec<usize>, BTreeSet<(usize, usize)>)]) -> Vec<Option<f64>> {
        let mut out = vec![None; b * b];
        for a in 0..b {
            for c in 0..b {
                if a == c {
                    continue;
                }
                let (mut neg, mut tot) = (0u32, 0u32);
                for (sample, pos) in history {
                    if !(sample.contains(&a) && sample.contains(&c)) {
                        continue;
                    }
                    tot += 1;
                    // Same component: reachable through positive pairs inside the sample.
                    let mut comp = vec![a];
                    let mut changed = true;
                    while changed {
                        changed = false;
                        for &(x, y) in pos {
                            if comp.contains(&x) && !comp.contains(&y) {
                                comp.push(y);
                                changed = true;
                            } else if comp.contains(&y) && !comp.contains(&x) {
                                comp.push(x);
                                changed = true;
                            }
                        }
                    }
                    if !comp.contains(&c) {
                        neg += 1;
                    }
                }
                if tot > 0 {
                    out[a * b + c] = Some(f64::from(neg) / f64::from(tot));
                }
            }
        }
        out
    }

    fn history_strategy() -> impl Strategy<Value = (usize, Vec<(Vec<usize>, BTreeSet<(usize, usize)>)>)> {
        (2usize..8).prop_flat_map(|b| {
            let step = proptest::sample::subsequence((0..b).collect::<Vec<_>>(), 2..=b).prop_flat_map(|sample| {
                let n = sample.len();
                let s2 = sample.clone();
                proptest::collection::vec((0..n, 0..n), 0..5).prop_map(move |raw| {
                    let pos = raw
                        .into_iter()
                        .filter(|(i, j)| i != j)
                        .map(|(i, j)| (s2[i].min(s2[j]), s2[i].max(s2[j])))
                        .collect::<BTreeSet<_>>();
                    (s2.clone(), pos)
                })
            });
            (Just(b), proptest::collection::vec(step, 1..10))
        })
    }

    proptest! {
        #[test]
        fn weights_match_independent_recount((b, history) in history_strategy()) {
            let mut stats = EdgeStats::new(b);
            for (sample, pos) in &history {
                stats.record_annotation(sample, pos).unwrap();
            }
            let w = stats.weights(0.5);
            let expected = brute_recount(b, &history);
            let mut total = 0u64;
            for a in 0..b {
                for c in 0..b {
                    if a == c { continue; }
                    prop_assert_eq!(w.get(a, c), expected[a * b + c]);
                    prop_assert_eq!(w.get(a, c), w.get(c, a));
                    prop_assert!(stats.c_plus(a, c) + stats.c_minus(a, c) <= stats.iteration() as u32);
                    if a < c { total += u64::from(stats.c_plus(a, c) + stats.c_minus(a, c)); }
                }
            }
            let expected_total: u64 = history.iter().map(|(s, _)| (s.len() * (s.len() - 1) / 2) as u64).sum();
            prop_assert_eq!(total, expected_total);
        }

        #[test]
        fn closure_is_idempotent(raw in proptest::collection::vec((0usize..10, 0usize..10), 0..12)) {
            let sample: Vec<usize> = (0..10).collect();
            let pairs: BTreeSet<_> = raw.into_iter().filter(|(a, b)| a != b).map(|(a, b)| (a.min(b), a.max(b))).collect();
            let once = transitive_closure(&pairs, &sample).unwrap();
            prop_assert!(once.is_superset(&pairs));
            prop_assert_eq!(transitive_closure(&once, &sample).unwrap(), once);
        }
    }
}
