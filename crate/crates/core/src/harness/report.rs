use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pipeline::RunRecord;
use crate::llm::{LedgerSnapshot, Money, PriceTable, Stage};
use crate::selection::Method;
use crate::util::median;

/// Benchmark summary with the accuracy / calls / tokens / cost columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub items: usize,
    pub scored: usize,
    pub gold_failures: usize,
    pub pipeline_failures: usize,
    /// Mean execution accuracy over scored items, as a fraction.
    pub ex: f64,
    pub calls_median: f64,
    pub calls_mean: f64,
    pub input_tokens_k_mean: f64,
    pub output_tokens_k_mean: f64,
    /// Input plus output; the single "Tokens (K)" figure.
    pub tokens_k_mean: f64,
    pub cost_mean: Money,
    pub cost_total: Money,
    pub escalations: usize,
    pub pairwise_calls: usize,
    pub stage_calls: BTreeMap<Stage, u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unpriced_models: Vec<String>,
}

pub fn aggregate(records: &[RunRecord], prices: &PriceTable) -> Report {
    let n = records.len();
    let mean = |sum: f64| if n == 0 { 0.0 } else { sum / n as f64 };
    let scored: Vec<u8> = records.iter().filter_map(|r| r.ex).collect();
    let calls: Vec<f64> = records.iter().map(|r| r.calls() as f64).collect();

    let mut total = LedgerSnapshot::default();
    for r in records {
        total.merge(&r.usage);
    }
    let tally = total.total();
    let cost = prices.price(&total);
    let escalated: Vec<_> = records
        .iter()
        .filter_map(|r| r.selection.as_ref())
        .filter(|s| s.method == Method::PairwiseLLM)
        .collect();
    Report {
        items: n,
        scored: scored.len(),
        gold_failures: records.iter().filter(|r| r.gold_error.is_some()).count(),
        pipeline_failures: records.iter().filter(|r| r.error.is_some()).count(),
        ex: if scored.is_empty() {
            0.0
        } else {
            scored.iter().map(|&e| e as f64).sum::<f64>() / scored.len() as f64
        },
        calls_median: median(&calls),
        calls_mean: mean(calls.iter().sum()),
        input_tokens_k_mean: mean(tally.input_tokens as f64 / 1000.0),
        output_tokens_k_mean: mean(tally.output_tokens as f64 / 1000.0),
        tokens_k_mean: mean((tally.input_tokens + tally.output_tokens) as f64 / 1000.0),
        cost_mean: Money(if n == 0 { 0 } else { cost.total.0 / n as u128 }),
        cost_total: cost.total,
        escalations: escalated.len(),
        pairwise_calls: escalated.iter().map(|s| s.pairwise_calls).sum(),
        stage_calls: Stage::ALL.iter().map(|&s| (s, total.stage_calls(s))).collect(),
        unpriced_models: cost.unpriced_models,
    }
}

fn trim_float(x: f64, places: usize) -> String {
    let s = format!("{x:.places$}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "Items: {} (scored {}, gold failures {}, pipeline failures {})",
            self.items, self.scored, self.gold_failures, self.pipeline_failures
        );
        let _ = writeln!(s, "| Execution Accuracy | LLM Calls Typical(Avg.) | Tokens (K) | Cost ($) |");
        let _ = writeln!(s, "|---|---|---|---|");
        let cost = self.cost_mean.to_string();
        let _ = writeln!(
            s,
            "| {:.2} | {}({}) | {:.1} | {} |",
            self.ex * 100.0,
            trim_float(self.calls_median, 1),
            trim_float(self.calls_mean, 1),
            self.tokens_k_mean,
            cost.trim_start_matches('$'),
        );
        let _ = writeln!(
            s,
            "Tokens (K) per query: input {:.1}, output {:.1}, total {:.1}",
            self.input_tokens_k_mean, self.output_tokens_k_mean, self.tokens_k_mean
        );
        let _ = writeln!(
            s,
            "Escalated selections: {} (pairwise calls {})",
            self.escalations, self.pairwise_calls
        );
        let stages: Vec<String> = self.stage_calls.iter().map(|(k, v)| format!("{} {v}", stage_name(*k))).collect();
        let _ = writeln!(s, "Calls by stage: {}", stages.join(", "));
        let _ = writeln!(s, "Total cost: {}", self.cost_total);
        if !self.unpriced_models.is_empty() {
            let _ = writeln!(s, "Unpriced models (counted as $0): {}", self.unpriced_models.join(", "));
        }
        s
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

fn stage_name(s: Stage) -> &'static str {
    match s {
        Stage::Linking => "linking",
        Stage::Generation => "generation",
        Stage::Selection => "selection",
    }
}

pub fn read_records(path: &Path) -> std::io::Result<Vec<RunRecord>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}:{}: {e}", path.display(), n + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn record_line(record: &RunRecord) -> String {
    let mut s = serde_json::to_string(record).expect("record serializes");
    s.push('\n');
    s
}
