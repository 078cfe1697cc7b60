//! Selector bounds and accuracy by winning vote count.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::pipeline::RunRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsRow {
    pub candidates: usize,
    pub items: usize,
    /// Accuracy of the selector actually used.
    pub ex: f64,
    /// At least one candidate correct (a perfect selector).
    pub upper: f64,
    /// Every candidate correct (the worst selector).
    pub lower: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteRow {
    pub votes: usize,
    pub items: usize,
    pub ex: f64,
    pub upper: f64,
}

fn scored(records: &[RunRecord]) -> impl Iterator<Item = (&RunRecord, u8)> {
    records.iter().filter_map(|r| r.ex.map(|e| (r, e)))
}

#[derive(Default)]
struct Acc {
    items: usize,
    ex: usize,
    upper: usize,
    lower: usize,
}

impl Acc {
    fn add(&mut self, r: &RunRecord, ex: u8) {
        self.items += 1;
        self.ex += ex as usize;
        self.upper += usize::from(r.candidate_ex.iter().any(|&c| c));
        self.lower += usize::from(!r.candidate_ex.is_empty() && r.candidate_ex.iter().all(|&c| c));
    }

    fn frac(&self, x: usize) -> f64 {
        if self.items == 0 {
            0.0
        } else {
            x as f64 / self.items as f64
        }
    }
}

/// Upper and lower selector bounds, one row per candidate-pool size.
pub fn bounds_analysis(records: &[RunRecord]) -> Vec<BoundsRow> {
    let mut by_n: BTreeMap<usize, Acc> = BTreeMap::new();
    for (r, ex) in scored(records) {
        by_n.entry(r.candidate_ex.len()).or_default().add(r, ex);
    }
    by_n.into_iter()
        .map(|(n, a)| BoundsRow {
            candidates: n,
            items: a.items,
            ex: a.frac(a.ex),
            upper: a.frac(a.upper),
            lower: a.frac(a.lower),
        })
        .collect()
}

/// Accuracy and upper bound bucketed by the size of the chosen candidate's
/// vote group. Items without a selection are left out.
pub fn ex_by_vote(records: &[RunRecord]) -> Vec<VoteRow> {
    let mut by_votes: BTreeMap<usize, Acc> = BTreeMap::new();
    for (r, ex) in scored(records) {
        if let Some(s) = &r.selection {
            by_votes.entry(s.chosen_votes).or_default().add(r, ex);
        }
    }
    by_votes
        .into_iter()
        .map(|(v, a)| VoteRow {
            votes: v,
            items: a.items,
            ex: a.frac(a.ex),
            upper: a.frac(a.upper),
        })
        .collect()
}
