//! Token tallies and exact fixed-point pricing.
//!
//! Prices are held in micro-dollars per million tokens. Multiplying a token
//! count by that price yields pico-dollars, so every cost is an exact integer
//! and sums are associative.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, AddAssign};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use tracing::warn;

use super::Usage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Linking,
    Generation,
    Selection,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Linking, Stage::Generation, Stage::Selection];
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub calls: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl AddAssign for Tally {
    fn add_assign(&mut self, rhs: Self) {
        self.calls += rhs.calls;
        self.input_tokens += rhs.input_tokens;
        self.output_tokens += rhs.output_tokens;
    }
}

/// Immutable view of ledger contents: stage -> model -> tally.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot(pub BTreeMap<Stage, BTreeMap<String, Tally>>);

impl LedgerSnapshot {
    pub fn stage(&self, stage: Stage) -> BTreeMap<String, Tally> {
        self.0.get(&stage).cloned().unwrap_or_default()
    }

    pub fn merge(&mut self, other: &LedgerSnapshot) {
        for (stage, models) in &other.0 {
            let dest = self.0.entry(*stage).or_default();
            for (model, tally) in models {
                *dest.entry(model.clone()).or_default() += *tally;
            }
        }
    }

    pub fn total(&self) -> Tally {
        let mut t = Tally::default();
        for models in self.0.values() {
            for tally in models.values() {
                t += *tally;
            }
        }
        t
    }

    pub fn calls(&self) -> u64 {
        self.total().calls
    }

    pub fn stage_calls(&self, stage: Stage) -> u64 {
        self.0.get(&stage).map(|m| m.values().map(|t| t.calls).sum()).unwrap_or(0)
    }

    pub fn per_model(&self) -> BTreeMap<String, Tally> {
        let mut out: BTreeMap<String, Tally> = BTreeMap::new();
        for models in self.0.values() {
            for (model, tally) in models {
                *out.entry(model.clone()).or_default() += *tally;
            }
        }
        out
    }
}

/// Append-only, thread-safe usage ledger.
#[derive(Debug, Default)]
pub struct CostLedger {
    inner: Mutex<LedgerSnapshot>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, stage: Stage, model: &str, usage: Usage) {
        let mut inner = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        let tally = inner.0.entry(stage).or_default().entry(model.to_string()).or_default();
        *tally += Tally {
            calls: 1,
            input_tokens: usage.input_tokens,
            output_tokens: usage.output_tokens,
        };
    }

    pub fn absorb(&self, snapshot: &LedgerSnapshot) {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).merge(snapshot);
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

/// Dollar amount in pico-dollars (1e-12 USD).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Money(pub u128);

impl Money {
    pub const PICOS_PER_DOLLAR: u128 = 1_000_000_000_000;

    pub fn from_dollars_str(s: &str) -> Option<Money> {
        let micros = parse_decimal_micros(s)?;
        Some(Money(micros as u128 * 1_000_000))
    }

    pub fn as_dollars(self) -> f64 {
        self.0 as f64 / Self::PICOS_PER_DOLLAR as f64
    }

    /// Rounded to the nearest micro-dollar.
    pub fn micros(self) -> u128 {
        (self.0 + 500_000) / 1_000_000
    }
}

impl Add for Money {
    type Output = Money;
    fn add(self, rhs: Self) -> Money {
        Money(self.0 + rhs.0)
    }
}

impl AddAssign for Money {
    fn add_assign(&mut self, rhs: Self) {
        self.0 += rhs.0;
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let micros = self.micros();
        write!(f, "${}.{:06}", micros / 1_000_000, micros % 1_000_000)
    }
}

/// Parses a non-negative decimal string into millionths, rejecting more
/// than six fractional digits.
fn parse_decimal_micros(s: &str) -> Option<u64> {
    let s = s.trim().trim_start_matches('$');
    let (int, frac) = s.split_once('.').unwrap_or((s, ""));
    if int.is_empty() && frac.is_empty() || frac.len() > 6 {
        return None;
    }
    if !int.chars().all(|c| c.is_ascii_digit()) || !frac.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    let int: u64 = if int.is_empty() { 0 } else { int.parse().ok()? };
    let frac_val: u64 = if frac.is_empty() {
        0
    } else {
        format!("{frac:0<6}").parse().ok()?
    };
    int.checked_mul(1_000_000)?.checked_add(frac_val)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelPrice {
    /// Micro-dollars per one million input tokens.
    pub input_micros_per_m: u64,
    /// Micro-dollars per one million output tokens.
    pub output_micros_per_m: u64,
}

impl ModelPrice {
    pub fn from_dollars(input: &str, output: &str) -> Option<Self> {
        Some(Self {
            input_micros_per_m: parse_decimal_micros(input)?,
            output_micros_per_m: parse_decimal_micros(output)?,
        })
    }

    pub fn cost(&self, tally: &Tally) -> Money {
        Money(
            tally.input_tokens as u128 * self.input_micros_per_m as u128
                + tally.output_tokens as u128 * self.output_micros_per_m as u128,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriceTable {
    pub models: BTreeMap<String, ModelPrice>,
}

#[derive(Debug, thiserror::Error)]
pub enum PriceTableError {
    #[error("cannot read price table {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid price table: {0}")]
    Parse(String),
}

impl Default for PriceTable {
    /// Pay-as-you-go rates as of mid-May 2025.
    fn default() -> Self {
        let entries = [
            ("o3-mini", "1.10", "4.40"),
            ("gpt-4o", "2.50", "10.00"),
            ("gemini-2.5-pro", "1.25", "10.00"),
            ("gemini-1.5-pro", "1.25", "10.00"),
        ];
        Self {
            models: entries
                .into_iter()
                .map(|(m, i, o)| (m.to_string(), ModelPrice::from_dollars(i, o).expect("static price")))
                .collect(),
        }
    }
}

impl PriceTable {
    /// Loads a TOML table of the form
    /// `[models."gpt-4o"] input_per_1m = "2.50"  output_per_1m = "10.00"`.
    /// Prices may be given as strings or numbers.
    pub fn from_toml_str(text: &str) -> Result<Self, PriceTableError> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct File {
            models: BTreeMap<String, Entry>,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Entry {
            input_per_1m: toml::Value,
            output_per_1m: toml::Value,
        }
        let parse = |v: &toml::Value| -> Result<u64, PriceTableError> {
            let s = match v {
                toml::Value::String(s) => s.clone(),
                toml::Value::Float(f) if *f >= 0.0 => format!("{f:.6}"),
                toml::Value::Integer(i) if *i >= 0 => i.to_string(),
                other => return Err(PriceTableError::Parse(format!("bad price {other}"))),
            };
            parse_decimal_micros(&s).ok_or_else(|| PriceTableError::Parse(format!("bad price `{s}`")))
        };
        let file: File = toml::from_str(text).map_err(|e| PriceTableError::Parse(e.to_string()))?;
        let mut models = BTreeMap::new();
        for (model, e) in file.models {
            models.insert(
                model,
                ModelPrice {
                    input_micros_per_m: parse(&e.input_per_1m)?,
                    output_micros_per_m: parse(&e.output_per_1m)?,
                },
            );
        }
        Ok(Self { models })
    }

    pub fn load(path: &Path) -> Result<Self, PriceTableError> {
        let text = std::fs::read_to_string(path).map_err(|source| PriceTableError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// Prices every model in the snapshot; unknown models cost nothing.
    pub fn price(&self, snapshot: &LedgerSnapshot) -> CostReport {
        let mut report = CostReport::default();
        for (model, tally) in snapshot.per_model() {
            let cost = match self.models.get(&model) {
                Some(p) => p.cost(&tally),
                None => {
                    warn!(model = %model, "no price for model; counted as $0");
                    report.unpriced_models.push(model.clone());
                    Money::default()
                }
            };
            report.total += cost;
            report.per_model.insert(model, ModelCost { tally, cost });
        }
        report
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelCost {
    pub tally: Tally,
    pub cost: Money,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub per_model: BTreeMap<String, ModelCost>,
    pub total: Money,
    pub unpriced_models: Vec<String>,
}
