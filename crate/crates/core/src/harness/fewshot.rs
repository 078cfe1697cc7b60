//! Few-shot store construction from a training split.

use std::collections::BTreeMap;

use tracing::warn;

use super::dataset::Dataset;
use super::pipeline::load_catalog;
use crate::catalog::{apply_filter, FilterLevel};
use crate::generation::{FewShotRecord, FewShotStore};
use crate::linking::{derive_gold_linking, LinkingPrediction};
use crate::llm::{Embedder, LlmError};
use crate::representation::render_all;

const EMBED_BATCH: usize = 64;

#[derive(Debug, Default)]
pub struct StoreBuild {
    pub store: FewShotStore,
    /// Items dropped because their database or gold SQL could not be used.
    pub skipped: usize,
}

/// One record per usable training item. Each record carries its database
/// schema fully filtered to the gold SQL's tables and columns, rendered in
/// every format.
pub fn build_fewshot_store(dataset: &Dataset, embedder: &dyn Embedder, sample_k: usize) -> Result<StoreBuild, LlmError> {
    let mut catalogs = BTreeMap::new();
    let mut pending = Vec::new();
    let mut skipped = 0;
    for item in &dataset.items {
        if !catalogs.contains_key(&item.db_id) {
            let cat = load_catalog(&dataset.db_path(&item.db_id), sample_k);
            catalogs.insert(item.db_id.clone(), cat);
        }
        let cat = match &catalogs[&item.db_id] {
            Ok(c) => c,
            Err(e) => {
                warn!(db = %item.db_id, "skipping item: {e}");
                skipped += 1;
                continue;
            }
        };
        let gold = match derive_gold_linking(&item.gold_sql, cat) {
            Ok(g) => g,
            Err(e) => {
                warn!(question = %item.question_id, "skipping item: {e}");
                skipped += 1;
                continue;
            }
        };
        let mut pairs: Vec<(String, Vec<String>)> = gold.tables.iter().map(|t| (t.clone(), Vec::new())).collect();
        for (t, c) in &gold.columns {
            if let Some(entry) = pairs.iter_mut().find(|(tt, _)| tt == t) {
                entry.1.push(c.clone());
            }
        }
        let filtered = apply_filter(cat, &LinkingPrediction::from_pairs(pairs), FilterLevel::FullFiltering);
        let schema = render_all(&filtered)
            .into_iter()
            .map(|(f, text)| (f.name().to_string(), text))
            .collect();
        pending.push(FewShotRecord {
            question: item.question.clone(),
            db_id: item.db_id.clone(),
            sql: item.gold_sql.trim().to_string(),
            embedding: Vec::new(),
            schema,
        });
    }
    for chunk in pending.chunks_mut(EMBED_BATCH) {
        let texts: Vec<String> = chunk.iter().map(|r| r.question.clone()).collect();
        for (rec, v) in chunk.iter_mut().zip(embedder.embed(&texts)?) {
            rec.embedding = v;
        }
    }
    Ok(StoreBuild {
        store: FewShotStore { records: pending },
        skipped,
    })
}
