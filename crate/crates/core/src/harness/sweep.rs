//! Exhaustive search over candidate-spec multisets scored by regular voting.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use super::config::LinkerPlan;
use super::dataset::{BenchmarkItem, Dataset};
use super::pipeline::{gold_signature, Engine};
use crate::catalog::FilterLevel;
use crate::generation::CandidateSpec;
use crate::linking::LinkerRunId;
use crate::llm::CostLedger;
use crate::representation::RepresentationFormat;
use crate::selection::GroupKey;

pub const DEFAULT_CAP: usize = 5_000;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("{count} combinations exceed the cap of {cap}; raise the cap explicitly to proceed")]
    TooMany { count: u128, cap: usize },
    #[error("nothing to sweep: {0}")]
    Empty(&'static str),
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub formats: Vec<RepresentationFormat>,
    pub levels: Vec<FilterLevel>,
    pub linker_model: String,
    pub generator_model: String,
    /// Candidates per configuration.
    pub n: usize,
    pub cap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Spec labels such as `mschema/full`, one per candidate.
    pub specs: Vec<String>,
    pub ex: f64,
    pub items: usize,
}

/// Number of size-`n` multisets over `u` kinds: C(u + n - 1, n).
pub fn multiset_count(u: usize, n: usize) -> u128 {
    if u == 0 {
        return u128::from(n == 0);
    }
    let mut c: u128 = 1;
    for i in 0..n as u128 {
        c = c * (u as u128 + i) / (i + 1);
    }
    c
}

/// All non-decreasing index sequences of length `n` over `0..u`, in
/// lexicographic order.
pub fn multisets(u: usize, n: usize) -> Vec<Vec<usize>> {
    fn go(u: usize, n: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        for i in start..u {
            cur.push(i);
            go(u, n, i, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if u > 0 || n == 0 {
        go(u, n, 0, &mut Vec::with_capacity(n), &mut out);
    }
    out
}

/// Deterministic random subset holding `fraction` of the items (at least
/// one when any exist), kept in dataset order.
pub fn subset(items: &[BenchmarkItem], fraction: f64, seed: u64) -> Vec<BenchmarkItem> {
    let take = ((items.len() as f64 * fraction.clamp(0.0, 1.0)).ceil() as usize).min(items.len());
    let take = if items.is_empty() { 0 } else { take.max(1) };
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = idx[..take].to_vec();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| items[i].clone()).collect()
}

/// Winner of a plain vote over `keys`: largest executable group, ties to
/// the earliest position. `None` when nothing executed.
pub fn regular_vote(keys: &[GroupKey]) -> Option<usize> {
    let mut counts: HashMap<&GroupKey, (usize, usize)> = HashMap::new();
    for (pos, k) in keys.iter().enumerate() {
        if k.is_ok() {
            counts.entry(k).or_insert((0, pos)).0 += 1;
        }
    }
    counts
        .values()
        .min_by_key(|(count, first)| (std::cmp::Reverse(*count), *first))
        .map(|&(_, first)| first)
}

fn unique_specs(opts: &SweepOptions) -> (Vec<CandidateSpec>, Vec<LinkerPlan>) {
    let mut linkers: Vec<LinkerPlan> = Vec::new();
    let mut specs = Vec::new();
    for &format in &opts.formats {
        for &level in &opts.levels {
            let linker_run = (level != FilterLevel::NoFiltering).then(|| {
                match linkers.iter().find(|l| l.format == format) {
                    Some(l) => l.id,
                    None => {
                        let id = LinkerRunId(linkers.len());
                        linkers.push(LinkerPlan {
                            id,
                            format,
                            model: opts.linker_model.clone(),
                        });
                        id
                    }
                }
            });
            specs.push(CandidateSpec {
                spec_index: specs.len(),
                format,
                filter_level: level,
                linker_run,
                generator_model: opts.generator_model.clone(),
            });
        }
    }
    (specs, linkers)
}

/// Generates every unique spec once per item, then scores each multiset of
/// `n` specs by regular voting. Rows are ranked by EX, ties keeping
/// enumeration order.
pub fn sweep(engine: &Engine<'_>, dataset: &Dataset, items: &[BenchmarkItem], opts: &SweepOptions) -> Result<Vec<SweepRow>, SweepError> {
    if opts.formats.is_empty() || opts.levels.is_empty() {
        return Err(SweepError::Empty("no formats or filter levels"));
    }
    let (specs, linkers) = unique_specs(opts);
    let count = multiset_count(specs.len(), opts.n);
    if count > opts.cap as u128 {
        return Err(SweepError::TooMany { count, cap: opts.cap });
    }
    let combos = multisets(specs.len(), opts.n);

    // per item: group key of each unique spec and of gold
    let timeout = engine.config.timeout();
    let precision = engine.config.raw.precision;
    let mut per_item: Vec<(Vec<GroupKey>, String)> = Vec::new();
    for item in items {
        let db = dataset.db_path(&item.db_id);
        let gold = match gold_signature(&item.gold_sql, &db, timeout, precision) {
            Ok(g) => g,
            Err(e) => {
                warn!(question = %item.question_id, "gold SQL failed, item excluded: {e}");
                continue;
            }
        };
        let ledger = CostLedger::new();
        let keys = engine
            .catalog(&db)
            .map_err(|e| e.to_string())
            .and_then(|cat| {
                engine
                    .candidates(&cat, &db, &item.question, item.evidence.as_deref(), &specs, &linkers, &ledger)
                    .map_err(|e| e.to_string())
            })
            .map(|(_, cands)| cands.iter().map(|c| GroupKey::of(c.execution.as_ref())).collect())
            .unwrap_or_else(|e| {
                warn!(question = %item.question_id, "sweep item failed: {e}");
                vec![GroupKey::Error("pipeline".into()); specs.len()]
            });
        per_item.push((keys, gold));
    }

    let label = |s: &CandidateSpec| format!("{}/{}", s.format, s.filter_level);
    let mut rows: Vec<SweepRow> = combos
        .iter()
        .map(|combo| {
            let correct = per_item
                .iter()
                .filter(|(keys, gold)| {
                    let picked: Vec<GroupKey> = combo.iter().map(|&i| keys[i].clone()).collect();
                    regular_vote(&picked).is_some_and(|w| picked[w] == GroupKey::Ok(gold.clone()))
                })
                .count();
            SweepRow {
                specs: combo.iter().map(|&i| label(&specs[i])).collect(),
                ex: if per_item.is_empty() { 0.0 } else { correct as f64 / per_item.len() as f64 },
                items: per_item.len(),
            }
        })
        .collect();
    rows.sort_by(|a, b| b.ex.total_cmp(&a.ex));
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binomial(n: u128, k: u128) -> u128 {
        (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
    }

    #[test]
    fn counts_match_enumeration() {
        assert_eq!(multisets(6, 1).len(), 6);
        assert_eq!(multisets(6, 2).len(), 21);
        assert_eq!(binomial(6, 2) + 6, 21);
        for u in 0..7 {
            for n in 0..5 {
                assert_eq!(multisets(u, n).len() as u128, multiset_count(u, n), "u={u} n={n}");
                assert_eq!(multiset_count(u, n), if u == 0 { u128::from(n == 0) } else { binomial((u + n - 1) as u128, n as u128) });
            }
        }
        // 12 specs, 5 candidates: C(16, 5)
        assert_eq!(multiset_count(12, 5), 4368);
    }

    #[test]
    fn multisets_are_sorted_and_unique() {
        let m = multisets(4, 3);
        assert!(m.iter().all(|s| s.windows(2).all(|w| w[0] <= w[1])));
        let mut d = m.clone();
        d.dedup();
        assert_eq!(d, m);
    }

    #[test]
    fn subset_is_deterministic_and_ordered() {
        let items: Vec<BenchmarkItem> = (0..50)
            .map(|i| BenchmarkItem {
                question_id: i.to_string(),
                db_id: "d".into(),
                question: String::new(),
                evidence: None,
                gold_sql: "SELECT 1".into(),
                difficulty: None,
            })
            .collect();
        let a = subset(&items, 0.1, 7);
        assert_eq!(a.len(), 5);
        assert_eq!(a, subset(&items, 0.1, 7));
        let ids: Vec<usize> = a.iter().map(|i| i.question_id.parse().unwrap()).collect();
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(subset(&items, 1.0, 1).len(), 50);
        assert_eq!(subset(&items[..3], 0.01, 1).len(), 1);
    }

    #[test]
    fn regular_vote_prefers_largest_ok_group() {
        let ok = |s: &str| GroupKey::Ok(s.into());
        let err = GroupKey::Error("e".into());
        assert_eq!(regular_vote(&[ok("a"), ok("b"), ok("b")]), Some(1));
        assert_eq!(regular_vote(&[ok("a"), ok("b")]), Some(0));
        assert_eq!(regular_vote(&[err.clone(), err.clone(), ok("a")]), Some(2));
        assert_eq!(regular_vote(&[err]), None);
    }
}
