//! Fixed-point currency and the per-model cost ledger.
//!
//! Amounts are held as integer nano-units (1e-9 of a currency unit) so budget
//! comparisons are exact and charge order never changes a total.

use std::collections::BTreeMap;
use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Mul, Sub};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::OracleError;

/// Nano-units per currency unit.
pub const NANOS_PER_UNIT: i64 = 1_000_000_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Money(i64);

impl Money {
    pub const ZERO: Money = Money(0);

    pub const fn from_nanos(nanos: i64) -> Self {
        Money(nanos)
    }

    /// Rounds to the nearest nano-unit.
    pub fn from_units(amount: f64) -> Self {
        Money((amount * NANOS_PER_UNIT as f64).round() as i64)
    }

    pub const fn nanos(self) -> i64 {
        self.0
    }

    pub fn as_units(self) -> f64 {
        self.0 as f64 / NANOS_PER_UNIT as f64
    }

    pub fn saturating_sub(self, other: Money) -> Money {
        Money(self.0.saturating_sub(other.0))
    }

    /// `self * numerator / denominator`, rounded half away from zero.
    pub fn scale(self, numerator: u64, denominator: u64) -> Money {
        assert!(denominator > 0, "scale by zero denominator");
        let num = self.0 as i128 * numerator as i128;
        let den = denominator as i128;
        let half = den / 2;
        let q = if num >= 0 { (num + half) / den } else { (num - half) / den };
        Money(q as i64)
    }
}

impl Add for Money {
    type Output = Money;
    fn add(self, rhs: Money) -> Money {
        Money(self.0 + rhs.0)
    }
}

impl AddAssign for Money {
    fn add_assign(&mut self, rhs: Money) {
        self.0 += rhs.0;
    }
}

impl Sub for Money {
    type Output = Money;
    fn sub(self, rhs: Money) -> Money {
        Money(self.0 - rhs.0)
    }
}

impl Mul<u64> for Money {
    type Output = Money;
    fn mul(self, rhs: u64) -> Money {
        Money(self.0 * rhs as i64)
    }
}

impl Sum for Money {
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        iter.fold(Money::ZERO, Add::add)
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        write!(
            f,
            "{sign}{}.{:09}",
            abs / NANOS_PER_UNIT as u64,
            abs % NANOS_PER_UNIT as u64
        )
    }
}

impl Serialize for Money {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.as_units())
    }
}

impl<'de> Deserialize<'de> for Money {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        f64::deserialize(deserializer).map(Money::from_units)
    }
}

/// Spending cap. `Unlimited` is the infinite budget.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Budget {
    #[default]
    Unlimited,
    Limit(Money),
}

impl Budget {
    pub fn allows(self, amount: Money) -> bool {
        match self {
            Budget::Unlimited => true,
            Budget::Limit(cap) => amount <= cap,
        }
    }

    pub fn limit(self) -> Option<Money> {
        match self {
            Budget::Unlimited => None,
            Budget::Limit(cap) => Some(cap),
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Budget::Limit(_))
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Unlimited => f.write_str("inf"),
            Budget::Limit(m) => m.fmt(f),
        }
    }
}

impl Serialize for Budget {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Budget::Unlimited => serializer.serialize_none(),
            Budget::Limit(m) => m.serialize(serializer),
        }
    }
}

impl<'de> Deserialize<'de> for Budget {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        Ok(match Option::<f64>::deserialize(deserializer)? {
            Some(v) if v.is_finite() => Budget::Limit(Money::from_units(v)),
            _ => Budget::Unlimited,
        })
    }
}

/// Token counts of one oracle call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    #[serde(rename = "in")]
    pub input: u64,
    #[serde(rename = "out")]
    pub output: u64,
}

impl Usage {
    pub fn new(input: u64, output: u64) -> Self {
        Usage { input, output }
    }

    pub fn total(self) -> u64 {
        self.input + self.output
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub model: String,
    pub unit_price: Money,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub calls: u64,
}

impl LedgerEntry {
    pub fn cost(&self) -> Money {
        self.unit_price * (self.input_tokens + self.output_tokens)
    }
}

/// Per-model token and money accounting.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    entries: BTreeMap<String, LedgerEntry>,
    total: Money,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_prices<I, S>(prices: I) -> Self
    where
        I: IntoIterator<Item = (S, Money)>,
        S: Into<String>,
    {
        let mut ledger = Self::new();
        for (model, price) in prices {
            ledger.register(model, price);
        }
        ledger
    }

    /// Registers a model at a per-token price. Re-registering keeps the
    /// accumulated counts and replaces the price for future charges only if
    /// no tokens were charged yet.
    pub fn register(&mut self, model: impl Into<String>, unit_price: Money) {
        let model = model.into();
        self.entries
            .entry(model.clone())
            .and_modify(|e| {
                if e.calls == 0 {
                    e.unit_price = unit_price;
                }
            })
            .or_insert(LedgerEntry {
                model,
                unit_price,
                input_tokens: 0,
                output_tokens: 0,
                calls: 0,
            });
    }

    pub fn price(&self, model: &str) -> Option<Money> {
        self.entries.get(model).map(|e| e.unit_price)
    }

    pub fn charge(&mut self, model: &str, usage: Usage) -> Result<Money, OracleError> {
        let entry = self
            .entries
            .get_mut(model)
            .ok_or_else(|| OracleError::UnknownModel(model.to_string()))?;
        let cost = entry.unit_price * usage.total();
        entry.input_tokens += usage.input;
        entry.output_tokens += usage.output;
        entry.calls += 1;
        self.total += cost;
        Ok(cost)
    }

    /// Price of `usage` on `model` without recording it.
    pub fn quote(&self, model: &str, usage: Usage) -> Result<Money, OracleError> {
        self.price(model)
            .map(|p| p * usage.total())
            .ok_or_else(|| OracleError::UnknownModel(model.to_string()))
    }

    pub fn total(&self) -> Money {
        self.total
    }

    pub fn entries(&self) -> impl Iterator<Item = &LedgerEntry> {
        self.entries.values()
    }

    pub fn calls(&self) -> u64 {
        self.entries.values().map(|e| e.calls).sum()
    }

    /// Entries charged after `earlier`, a snapshot of this same ledger.
    pub fn since(&self, earlier: &CostLedger) -> Vec<LedgerEntry> {
        self.entries
            .values()
            .map(|e| match earlier.entries.get(&e.model) {
                Some(b) => LedgerEntry {
                    input_tokens: e.input_tokens - b.input_tokens,
                    output_tokens: e.output_tokens - b.output_tokens,
                    calls: e.calls - b.calls,
                    ..e.clone()
                },
                None => e.clone(),
            })
            .collect()
    }

    /// Total recomputed from the entry list.
    pub fn recomputed_total(&self) -> Money {
        self.entries.values().map(LedgerEntry::cost).sum()
    }
}

/// A ledger shared by every oracle of a run; all charges go through one lock.
#[derive(Clone, Debug, Default)]
pub struct SharedLedger(Arc<Mutex<CostLedger>>);

impl SharedLedger {
    pub fn new(ledger: CostLedger) -> Self {
        SharedLedger(Arc::new(Mutex::new(ledger)))
    }

    pub fn charge(&self, model: &str, usage: Usage) -> Result<Money, OracleError> {
        self.lock().charge(model, usage)
    }

    pub fn quote(&self, model: &str, usage: Usage) -> Result<Money, OracleError> {
        self.lock().quote(model, usage)
    }

    pub fn total(&self) -> Money {
        self.lock().total()
    }

    pub fn snapshot(&self) -> CostLedger {
        self.lock().clone()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, CostLedger> {
        self.0.lock().unwrap_or_else(|e| e.into_inner())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charge_arithmetic() {
        let mut ledger = CostLedger::with_prices([("m", Money::from_units(2e-6))]);
        let cost = ledger.charge("m", Usage::new(1000, 0)).unwrap();
        assert_eq!(cost, Money::from_units(0.002));
        assert_eq!(ledger.total(), Money::from_units(0.002));
        assert_eq!(ledger.calls(), 1);
    }

    #[test]
    fn entries_since_a_snapshot() {
        let mut ledger = CostLedger::with_prices([("a", Money::from_nanos(3))]);
        ledger.charge("a", Usage::new(10, 2)).unwrap();
        let earlier = ledger.clone();
        ledger.register("b", Money::from_nanos(5));
        ledger.charge("a", Usage::new(4, 1)).unwrap();
        ledger.charge("b", Usage::new(1, 1)).unwrap();
        let delta = ledger.since(&earlier);
        assert_eq!(delta.len(), 2);
        assert_eq!((delta[0].input_tokens, delta[0].output_tokens, delta[0].calls), (4, 1, 1));
        let total: Money = delta.iter().map(LedgerEntry::cost).sum();
        assert_eq!(total, ledger.total() - earlier.total());
    }

    #[test]
    fn split_charges_equal_single_charge() {
        let mut a = CostLedger::with_prices([("m", Money::from_units(2e-6))]);
        let mut b = a.clone();
        a.charge("m", Usage::new(500, 0)).unwrap();
        a.charge("m", Usage::new(500, 0)).unwrap();
        b.charge("m", Usage::new(1000, 0)).unwrap();
        assert_eq!(a.total(), b.total());
    }

    #[test]
    fn mixed_models_recount() {
        let mut ledger = CostLedger::with_prices([
            ("e", Money::from_units(2e-6)),
            ("c", Money::from_units(1e-7)),
        ]);
        ledger.charge("e", Usage::new(120, 7)).unwrap();
        ledger.charge("c", Usage::new(3000, 40)).unwrap();
        ledger.charge("e", Usage::new(9, 1)).unwrap();
        let expected = Money::from_units(2e-6) * (120 + 7 + 9 + 1) + Money::from_units(1e-7) * 3040;
        assert_eq!(ledger.total(), expected);
        assert_eq!(ledger.total(), ledger.recomputed_total());
    }

    #[test]
    fn unknown_model_is_rejected() {
        let mut ledger = CostLedger::new();
        assert!(matches!(
            ledger.charge("nope", Usage::new(1, 1)),
            Err(OracleError::UnknownModel(_))
        ));
    }

    #[test]
    fn display_and_scale() {
        assert_eq!(Money::from_units(1.5).to_string(), "1.500000000");
        assert_eq!(Money::from_nanos(-3).to_string(), "-0.000000003");
        assert_eq!(Money::from_nanos(10).scale(1, 3), Money::from_nanos(3));
        assert_eq!(Money::from_nanos(5).scale(1, 2), Money::from_nanos(3));
    }

    #[test]
    fn budget_boundaries() {
        let cap = Money::from_units(1.0);
        assert!(Budget::Limit(cap).allows(cap));
        assert!(!Budget::Limit(cap).allows(cap + Money::from_nanos(1)));
        assert!(Budget::Unlimited.allows(Money::from_units(1e9)));
    }

    proptest::proptest! {
        #[test]
        fn ledger_total_is_order_independent(
            charges in proptest::collection::vec((0usize..3, 0u64..10_000, 0u64..500), 0..40)
        ) {
            let models = ["a", "b", "c"];
            let prices = [Money::from_nanos(2000), Money::from_nanos(100), Money::from_nanos(7)];
            let mut forward = CostLedger::with_prices(models.iter().copied().zip(prices));
            let mut backward = forward.clone();
            for &(m, i, o) in &charges {
                forward.charge(models[m], Usage::new(i, o)).unwrap();
            }
            for &(m, i, o) in charges.iter().rev() {
                backward.charge(models[m], Usage::new(i, o)).unwrap();
            }
            proptest::prop_assert_eq!(forward.total(), backward.total());
            proptest::prop_assert_eq!(forward.total(), forward.recomputed_total());
        }
    }
}
