//! Budget-aware routing between row-by-row proxy classification and
//! clustering-based classification.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{PredictionSet, Record, RecordId, TaskSpec};
use crate::money::{Budget, Money};
use crate::oracle::{AnnotationOracle, Capability, ModelRoles, OracleExt, Request};

/// Threshold above every possible confidence.
pub const TAU_ABOVE_ALL: f64 = 1.0 + f64::EPSILON;

/// Quoted cost of one row classification per record with `model`.
pub fn row_pass_cost<O: AnnotationOracle + ?Sized>(
    records: &[&Record],
    task: &TaskSpec,
    oracle: &O,
    model: &str,
) -> Result<Money> {
    let mut total = Money::ZERO;
    for r in records {
        total += oracle.quote_cost(&Request::new(Capability::RowClassification, model, task, vec![*r]))?;
    }
    Ok(total)
}

/// The expensive model when `c0` plus a full expensive pass over
/// `remaining` fits the budget, the cheap one otherwise.
pub fn choose_proxy<O: AnnotationOracle + ?Sized>(
    c0: Money,
    remaining: &[&Record],
    task: &TaskSpec,
    oracle: &O,
    roles: &ModelRoles,
    budget: Budget,
) -> Result<String> {
    if !budget.is_finite() {
        return Ok(roles.expensive.clone());
    }
    let full = row_pass_cost(remaining, task, oracle, &roles.expensive)?;
    Ok(if budget.allows(c0 + full) {
        roles.expensive.clone()
    } else {
        roles.cheap.clone()
    })
}

/// Records whose confidence is below `tau`.
pub fn routed_count(tau: f64, confidences: &[f64]) -> usize {
    confidences.iter().filter(|&&c| c < tau).count()
}

/// `c_mp + c0 · (1 + ⌈n(τ)/B⌉)`.
pub fn cost_of_threshold(tau: f64, confidences: &[f64], c_mp: Money, c0: Money, b: usize) -> Money {
    let n = routed_count(tau, confidences);
    c_mp + c0 * (1 + n.div_ceil(b.max(1)) as u64)
}

/// Candidate thresholds in ascending order: 0, each observed confidence,
/// and a value above all of them.
pub fn threshold_candidates(confidences: &[f64]) -> Vec<f64> {
    let mut c: Vec<f64> = std::iter::once(0.0)
        .chain(confidences.iter().copied())
        .chain(std::iter::once(TAU_ABOVE_ALL))
        .collect();
    c.sort_by(f64::total_cmp);
    c.dedup();
    c
}

/// Largest candidate whose cost fits the budget; 0 when none does.
pub fn select_threshold(confidences: &[f64], c_mp: Money, c0: Money, b: usize, budget: Budget) -> f64 {
    threshold_candidates(confidences)
        .into_iter()
        .rev()
        .find(|&tau| budget.allows(cost_of_threshold(tau, confidences, c_mp, c0, b)))
        .unwrap_or(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadePlan {
    /// `None` when clustering everything was affordable and no proxy ran.
    pub proxy: Option<String>,
    pub tau_star: f64,
    pub d_r: Vec<RecordId>,
    pub d_x: Vec<RecordId>,
    /// Quoted cost of the proxy pass, used for planning.
    pub c_mp_estimate: Money,
    /// Ledger cost of the proxy pass as run.
    pub c_mp: Money,
    pub projected_cost: Money,
}

#[derive(Clone, Debug)]
pub struct CascadeOutcome {
    /// Proxy labels for `D_R`.
    pub predictions: PredictionSet,
    /// Proxy labels for every record of the pass, `D_X` included, kept as a
    /// fallback.
    pub proxy_labels: PredictionSet,
    pub plan: CascadePlan,
}

/// Runs the proxy pass over `remaining` (everything outside `D_0`) and
/// routes records with confidence at least `τ*` to `D_R`. When
/// `c0 · ⌈n_total/B⌉` fits the budget, returns an empty `D_R` without any
/// calls.
#[allow(clippy::too_many_arguments)]
pub fn predict_with_cascade<O: AnnotationOracle + ?Sized>(
    remaining: &[&Record],
    n_total: usize,
    task: &TaskSpec,
    c0: Money,
    b: usize,
    budget: Budget,
    oracle: &O,
    roles: &ModelRoles,
) -> Result<CascadeOutcome> {
    let b = b.max(1);
    if budget.allows(c0 * n_total.div_ceil(b) as u64) {
        return Ok(CascadeOutcome {
            predictions: PredictionSet::new(),
            proxy_labels: PredictionSet::new(),
            plan: CascadePlan {
                proxy: None,
                tau_star: TAU_ABOVE_ALL,
                d_r: Vec::new(),
                d_x: remaining.iter().map(|r| r.id).collect(),
                c_mp_estimate: Money::ZERO,
                c_mp: Money::ZERO,
                projected_cost: c0 * (1 + remaining.len().div_ceil(b) as u64),
            },
        });
    }
    let proxy = choose_proxy(c0, remaining, task, oracle, roles, budget)?;
    let c_mp_estimate = row_pass_cost(remaining, task, oracle, &proxy)?;
    let before = oracle.ledger().total();
    let answers: Vec<(usize, f64)> = remaining
        .par_iter()
        .map(|r| oracle.classify_record(r, task, &proxy))
        .collect::<std::result::Result<_, _>>()?;
    let c_mp = oracle.ledger().total() - before;
    let confidences: Vec<f64> = answers.iter().map(|&(_, c)| c).collect();
    let tau_star = select_threshold(&confidences, c_mp, c0, b, budget);
    let mut predictions = PredictionSet::new();
    let mut proxy_labels = PredictionSet::new();
    let (mut d_r, mut d_x) = (Vec::new(), Vec::new());
    for (r, &(label, conf)) in remaining.iter().zip(&answers) {
        proxy_labels.insert(r.id, label);
        if conf >= tau_star {
            predictions.insert(r.id, label);
            d_r.push(r.id);
        } else {
            d_x.push(r.id);
        }
    }
    Ok(CascadeOutcome {
        predictions,
        proxy_labels,
        plan: CascadePlan {
            proxy: Some(proxy),
            tau_star,
            d_r,
            d_x,
            c_mp_estimate,
            c_mp,
            projected_cost: cost_of_threshold(tau_star, &confidences, c_mp, c0, b),
        },
    })
}

/// Per-token prices for the cost estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostPrices {
    pub proxy: f64,
    pub cluster: f64,
    pub assignment: f64,
}

/// Upper estimate of a run's cost:
/// `κ·L_r·(c_proxy + m·r_frac·c_cluster + r_frac·c_assign)
///  + κ·n·L_ℓ·(c_proxy + r_frac·k·c_assign)`,
/// with `L_r` the dataset's tokens, `L_ℓ` the label-set tokens and `r_frac`
/// the fraction of records clustered.
#[allow(clippy::too_many_arguments)]
pub fn estimate_total_cost(
    l_r: f64,
    l_ell: f64,
    n: f64,
    k: f64,
    m: f64,
    r_frac: f64,
    prices: CostPrices,
    kappa: f64,
) -> f64 {
    kappa * l_r * (prices.proxy + m * r_frac * prices.cluster + r_frac * prices.assignment)
        + kappa * n * l_ell * (prices.proxy + r_frac * k * prices.assignment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn units(x: i64) -> Money {
        Money::from_nanos(x)
    }

    #[test]
    fn threshold_cost_examples() {
        let conf = [0.2, 0.6, 0.9];
        assert_eq!(cost_of_threshold(0.0, &conf, units(3), units(1), 2), units(4));
        assert_eq!(cost_of_threshold(0.7, &conf, units(3), units(1), 2), units(5));
        assert_eq!(cost_of_threshold(TAU_ABOVE_ALL, &conf, units(3), units(1), 2), units(3 + 1 + 2));
    }

    #[test]
    fn threshold_selection_examples() {
        let conf = [0.2, 0.6, 0.9];
        assert_eq!(select_threshold(&conf, units(3), units(1), 2, Budget::Unlimited), TAU_ABOVE_ALL);
        assert_eq!(select_threshold(&conf, units(3), units(1), 2, Budget::Limit(units(4))), 0.2);
        // 0.2 routes nothing; only a budget below 4 forces 0.
        assert_eq!(select_threshold(&conf, units(3), units(1), 2, Budget::Limit(units(3))), 0.0);
        assert_eq!(select_threshold(&[0.5, 0.9], units(3), units(1), 1, Budget::Limit(units(4))), 0.5);
    }

    #[test]
    fn estimate_examples() {
        let p = CostPrices { proxy: 1e-7, cluster: 2e-6, assignment: 2e-6 };
        let pure = estimate_total_cost(1000.0, 10.0, 50.0, 4.0, 30.0, 0.0, p, 2.0);
        assert!((pure - 2.0 * (1000.0 * 1e-7 + 50.0 * 10.0 * 1e-7)).abs() < 1e-15);
        let zero = CostPrices { proxy: 0.0, cluster: 0.0, assignment: 0.0 };
        assert_eq!(estimate_total_cost(1000.0, 10.0, 50.0, 4.0, 30.0, 0.4, zero, 2.0), 0.0);
    }

    proptest! {
        #[test]
        fn cost_is_monotone_and_selection_is_maximal(
            conf in proptest::collection::vec(0.0f64..=1.0, 0..30),
            c_mp in 0i64..1000,
            c0 in 0i64..1000,
            b in 1usize..10,
            budget in 0i64..20_000,
        ) {
            let cands = threshold_candidates(&conf);
            for pair in cands.windows(2) {
                prop_assert!(cost_of_threshold(pair[0], &conf, units(c_mp), units(c0), b)
                    <= cost_of_threshold(pair[1], &conf, units(c_mp), units(c0), b));
            }
            let limit = Budget::Limit(units(budget));
            let tau = select_threshold(&conf, units(c_mp), units(c0), b, limit);
            let scan = cands.iter().copied()
                .filter(|&t| cost_of_threshold(t, &conf, units(c_mp), units(c0), b) <= units(budget))
                .fold(None, |m: Option<f64>, t| Some(m.map_or(t, |m| m.max(t))))
                .unwrap_or(0.0);
            prop_assert_eq!(tau, scan);
        }
    }
}
