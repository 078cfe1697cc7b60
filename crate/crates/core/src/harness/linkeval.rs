//! Schema-linking evaluation against gold sets derived from reference SQL.

use serde::{Deserialize, Serialize};
use tracing::warn;

use super::config::LinkerPlan;
use super::dataset::{BenchmarkItem, Dataset};
use super::pipeline::Engine;
use crate::linking::{derive_gold_linking, linking_metrics, GoldLinking, LinkingMetrics, LinkingPrediction};
use crate::llm::CostLedger;
use crate::representation::RepresentationFormat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkEvalRow {
    pub format: RepresentationFormat,
    pub model: String,
    pub metrics: LinkingMetrics,
    pub items: usize,
    /// Questions whose gold SQL could not be resolved to the schema.
    pub excluded: usize,
    /// Linker calls that failed or returned no usable mapping; scored as an
    /// empty prediction.
    pub unparsed: usize,
}

pub fn link_eval(engine: &Engine<'_>, dataset: &Dataset, items: &[BenchmarkItem], linkers: &[LinkerPlan]) -> Vec<LinkEvalRow> {
    let mut golds: Vec<Option<GoldLinking>> = Vec::with_capacity(items.len());
    for item in items {
        let gold = engine
            .catalog(&dataset.db_path(&item.db_id))
            .map_err(|e| e.to_string())
            .and_then(|cat| derive_gold_linking(&item.gold_sql, &cat).map_err(|e| e.to_string()));
        golds.push(match gold {
            Ok(g) => Some(g),
            Err(e) => {
                warn!(question = %item.question_id, "excluded from linking metrics: {e}");
                None
            }
        });
    }
    let mut preds: Vec<Vec<LinkingPrediction>> = vec![Vec::new(); linkers.len()];
    let mut unparsed = vec![0; linkers.len()];
    let mut kept_golds = Vec::new();
    for (item, gold) in items.iter().zip(&golds) {
        let Some(gold) = gold else { continue };
        let Ok(cat) = engine.catalog(&dataset.db_path(&item.db_id)) else { continue };
        let ledger = CostLedger::new();
        let runs = engine.link(&cat, &item.question, item.evidence.as_deref(), linkers, &ledger);
        for (i, run) in runs.into_iter().enumerate() {
            if run.prediction.is_none() {
                unparsed[i] += 1;
            }
            preds[i].push(run.prediction.unwrap_or_default());
        }
        kept_golds.push(gold.clone());
    }
    let excluded = golds.iter().filter(|g| g.is_none()).count();
    linkers
        .iter()
        .zip(preds)
        .zip(unparsed)
        .map(|((plan, p), unparsed)| LinkEvalRow {
            format: plan.format,
            model: plan.model.clone(),
            metrics: linking_metrics(&p, &kept_golds).expect("aligned by construction"),
            items: kept_golds.len(),
            excluded,
            unparsed,
        })
        .collect()
}

pub fn link_eval_text(rows: &[LinkEvalRow]) -> String {
    let mut s = String::from("| Format | Model | Table P | Table R | Table F1 | Column P | Column R | Column F1 | Items |\n");
    s.push_str("|---|---|---|---|---|---|---|---|---|\n");
    for r in rows {
        let m = &r.metrics;
        s.push_str(&format!(
            "| {} | {} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {} |\n",
            r.format,
            r.model,
            m.table_precision * 100.0,
            m.table_recall * 100.0,
            m.table_f1 * 100.0,
            m.column_precision * 100.0,
            m.column_recall * 100.0,
            m.column_f1 * 100.0,
            r.items
        ));
    }
    s
}
