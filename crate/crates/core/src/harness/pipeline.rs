use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use super::config::{LinkerPlan, ResolvedConfig};
use super::dataset::{BenchmarkItem, Dataset};
use crate::catalog::{introspect_with, load_descriptions, CatalogError, IntrospectOptions, SchemaCatalog};
use crate::generation::{
    generate_candidates, retrieve_fewshots, CandidateSpec, FewShotRecord, FewShotStore, GenerationError,
    GenerationInput, SqlCandidate,
};
use crate::linking::{build_linking_prompt, parse_linking_response, LinkerRun};
use crate::llm::{ChatBackend, ChatRequest, CostLedger, Embedder, Gateway, LedgerSnapshot, Stage, Usage};
use crate::representation::{render, RepresentationFormat};
use crate::selection::{
    execute_all, normalize_result, run_query, select, LlmJudge, QueryOutcome, SelectionOutcome,
};
use crate::util::parallel_map;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub question_id: String,
    pub db_id: String,
    pub question: String,
    pub linker_runs: Vec<LinkerRun>,
    pub candidates: Vec<SqlCandidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionOutcome>,
    /// 1 when the chosen SQL matches gold; `None` when the item is excluded
    /// because its gold SQL does not execute.
    pub ex: Option<u8>,
    /// Per-candidate match against gold, in spec order.
    pub candidate_ex: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_error: Option<String>,
    /// Pipeline failure for this item, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub usage: LedgerSnapshot,
    /// Left empty in replay runs so records are reproducible byte for byte.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<u64>,
}

impl RunRecord {
    pub fn calls(&self) -> u64 {
        self.usage.calls()
    }
}

/// Outcome of answering one question.
#[derive(Debug, Clone)]
pub struct Answer {
    pub linker_runs: Vec<LinkerRun>,
    pub candidates: Vec<SqlCandidate>,
    pub selection: Result<SelectionOutcome, String>,
    pub usage: LedgerSnapshot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExOutcome {
    Scored(u8),
    GoldFailed,
}

/// Gold result signature, or why gold could not be executed.
pub fn gold_signature(gold_sql: &str, db_path: &Path, timeout: Duration, precision: u32) -> Result<String, String> {
    match run_query(gold_sql, db_path, timeout) {
        QueryOutcome::Rows(rows) => Ok(normalize_result(&rows, precision)),
        QueryOutcome::Error(e) => Err(e),
        QueryOutcome::Timeout => Err(format!("gold timed out after {timeout:?}")),
    }
}

/// 1 iff `pred_sql` returns the same row multiset as `gold_sql`.
pub fn execution_accuracy(pred_sql: &str, gold_sql: &str, db_path: &Path, timeout: Duration, precision: u32) -> ExOutcome {
    let Ok(gold) = gold_signature(gold_sql, db_path, timeout, precision) else {
        return ExOutcome::GoldFailed;
    };
    match run_query(pred_sql, db_path, timeout) {
        QueryOutcome::Rows(rows) => ExOutcome::Scored(u8::from(normalize_result(&rows, precision) == gold)),
        _ => ExOutcome::Scored(0),
    }
}

pub struct Engine<'c> {
    pub config: &'c ResolvedConfig,
    pub gateway: Gateway,
    pub embedder: Arc<dyn Embedder>,
    pub store: Option<FewShotStore>,
    pub record_wall_time: bool,
    catalogs: Mutex<HashMap<PathBuf, Arc<SchemaCatalog>>>,
}

impl<'c> Engine<'c> {
    pub fn new(
        config: &'c ResolvedConfig,
        backend: Arc<dyn ChatBackend>,
        embedder: Arc<dyn Embedder>,
    ) -> Result<Self, GenerationError> {
        let store = match &config.fewshot_store {
            Some(p) => Some(FewShotStore::load(p)?),
            None => None,
        };
        Ok(Self {
            config,
            gateway: Gateway::new(backend, config.raw.in_flight),
            embedder,
            store,
            record_wall_time: false,
            catalogs: Mutex::new(HashMap::new()),
        })
    }

    /// Introspected catalog for a database, with column descriptions from a
    /// sibling `database_description/` directory when present. Cached.
    pub fn catalog(&self, db_path: &Path) -> Result<Arc<SchemaCatalog>, CatalogError> {
        if let Some(c) = self.catalogs.lock().unwrap_or_else(|e| e.into_inner()).get(db_path) {
            return Ok(c.clone());
        }
        let cat = Arc::new(load_catalog(db_path, self.config.raw.sample_values)?);
        self.catalogs
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(db_path.to_path_buf(), cat.clone());
        Ok(cat)
    }

    pub fn link(
        &self,
        catalog: &SchemaCatalog,
        nlq: &str,
        hint: Option<&str>,
        linkers: &[LinkerPlan],
        ledger: &CostLedger,
    ) -> Vec<LinkerRun> {
        parallel_map(linkers, linkers.len().max(1), |plan| {
            let schema = render(catalog, plan.format);
            let messages = build_linking_prompt(
                &self.config.linker_system_prompt,
                &schema,
                nlq,
                hint,
                &self.config.linker_fewshots,
            );
            let request = ChatRequest::new(plan.model.clone(), messages);
            let mut run = LinkerRun {
                id: plan.id,
                format: plan.format,
                model_id: plan.model.clone(),
                prediction: None,
                failure: None,
                usage: Usage::default(),
            };
            match self.gateway.complete(&request, Stage::Linking, ledger) {
                Ok(resp) => {
                    run.usage = resp.usage;
                    match parse_linking_response(&resp.text) {
                        Ok(mut p) => {
                            p.source = Some(plan.id);
                            run.prediction = Some(p);
                        }
                        Err(e) => {
                            warn!(run = %plan.id, "linker output unusable, falling back to the full schema: {e}");
                            run.failure = Some(e.to_string());
                        }
                    }
                }
                Err(e) => {
                    warn!(run = %plan.id, "linker call failed, falling back to the full schema: {e}");
                    run.failure = Some(e.to_string());
                }
            }
            run
        })
    }

    pub fn fewshots(&self, nlq: &str) -> Vec<FewShotRecord> {
        let Some(store) = &self.store else { return Vec::new() };
        match retrieve_fewshots(nlq, store, self.embedder.as_ref(), self.config.raw.fewshot_k) {
            Ok(records) => records.into_iter().cloned().collect(),
            Err(e) => {
                warn!("few-shot retrieval failed, continuing without examples: {e}");
                Vec::new()
            }
        }
    }

    /// Links, generates and executes candidates for the given specs.
    #[allow(clippy::too_many_arguments)]
    pub fn candidates(
        &self,
        catalog: &SchemaCatalog,
        db_path: &Path,
        nlq: &str,
        hint: Option<&str>,
        specs: &[CandidateSpec],
        linkers: &[LinkerPlan],
        ledger: &CostLedger,
    ) -> Result<(Vec<LinkerRun>, Vec<SqlCandidate>), GenerationError> {
        let runs = self.link(catalog, nlq, hint, linkers, ledger);
        let records = self.fewshots(nlq);
        let refs: Vec<&FewShotRecord> = records.iter().collect();
        let input = GenerationInput {
            nlq,
            hint,
            catalog,
            linker_runs: &runs,
            fewshots: &refs,
        };
        let mut cands = generate_candidates(specs, &input, &self.gateway, ledger, specs.len())?;
        execute_all(
            &mut cands,
            db_path,
            self.config.timeout(),
            self.config.raw.precision,
            specs.len(),
        );
        Ok((runs, cands))
    }

    /// Full pipeline for one question.
    pub fn answer(&self, db_path: &Path, nlq: &str, hint: Option<&str>) -> Result<Answer, String> {
        let catalog = self.catalog(db_path).map_err(|e| e.to_string())?;
        let ledger = CostLedger::new();
        let cfg = self.config;
        let (linker_runs, candidates) = self
            .candidates(&catalog, db_path, nlq, hint, &cfg.specs, &cfg.linkers, &ledger)
            .map_err(|e| e.to_string())?;
        let judge_format = cfg.specs.first().map_or(RepresentationFormat::Ddl, |s| s.format);
        let judge = LlmJudge {
            gateway: &self.gateway,
            ledger: &ledger,
            model: cfg.raw.judge_model.clone(),
            system_prompt: cfg.judge_system_prompt.clone(),
            user_template: cfg.judge_user_template.clone(),
            question: nlq.to_string(),
            hint: hint.map(str::to_string),
            schema_text: render(&catalog, judge_format),
        };
        let selection = select(&candidates, &cfg.policy, &judge, cfg.raw.in_flight).map_err(|e| e.to_string());
        Ok(Answer {
            linker_runs,
            candidates,
            selection,
            usage: ledger.snapshot(),
        })
    }

    pub fn run_item(&self, item: &BenchmarkItem, dataset: &Dataset) -> RunRecord {
        let start = Instant::now();
        let db_path = dataset.db_path(&item.db_id);
        let mut record = RunRecord {
            question_id: item.question_id.clone(),
            db_id: item.db_id.clone(),
            question: item.question.clone(),
            linker_runs: Vec::new(),
            candidates: Vec::new(),
            selection: None,
            ex: None,
            candidate_ex: Vec::new(),
            gold_error: None,
            error: None,
            usage: LedgerSnapshot::default(),
            wall_time_ms: None,
        };
        let gold = gold_signature(&item.gold_sql, &db_path, self.config.timeout(), self.config.raw.precision);
        match self.answer(&db_path, &item.question, item.evidence.as_deref()) {
            Ok(a) => {
                record.linker_runs = a.linker_runs;
                record.candidates = a.candidates;
                record.usage = a.usage;
                match a.selection {
                    Ok(s) => record.selection = Some(s),
                    Err(e) => record.error = Some(e),
                }
            }
            Err(e) => record.error = Some(e),
        }
        match gold {
            Ok(sig) => {
                let matches = |c: &SqlCandidate| {
                    c.execution
                        .as_ref()
                        .and_then(|e| e.signature.as_ref())
                        .is_some_and(|s| *s == sig)
                };
                record.candidate_ex = record.candidates.iter().map(matches).collect();
                let chosen_ok = record.selection.as_ref().is_some_and(|s| {
                    record
                        .candidates
                        .iter()
                        .find(|c| c.spec_index == s.chosen_index)
                        .is_some_and(matches)
                });
                record.ex = Some(u8::from(chosen_ok));
            }
            Err(e) => {
                warn!(question = %item.question_id, "gold SQL failed, item excluded: {e}");
                record.gold_error = Some(e);
            }
        }
        if self.record_wall_time {
            record.wall_time_ms = Some(start.elapsed().as_millis() as u64);
        }
        record
    }
}

pub fn load_catalog(db_path: &Path, sample_k: usize) -> Result<SchemaCatalog, CatalogError> {
    let mut cat = introspect_with(
        db_path,
        IntrospectOptions {
            sample_k,
            ..IntrospectOptions::default()
        },
    )?;
    if let Some(dir) = db_path.parent().map(|d| d.join("database_description")) {
        if dir.is_dir() {
            match load_descriptions(&dir) {
                Ok(d) => cat.apply_descriptions(&d),
                Err(e) => warn!(dir = %dir.display(), "ignoring unreadable descriptions: {e}"),
            }
        }
    }
    Ok(cat)
}

/// Runs every item on `workers` threads and hands records to `sink` in
/// dataset order as soon as each prefix is complete.
pub fn run_benchmark(
    engine: &Engine<'_>,
    dataset: &Dataset,
    items: &[BenchmarkItem],
    mut sink: impl FnMut(&RunRecord),
) -> Vec<RunRecord> {
    let workers = engine.config.raw.workers.clamp(1, items.len().max(1));
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, RunRecord)>();
    let mut out = Vec::with_capacity(items.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                if tx.send((i, engine.run_item(item, dataset))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut pending: BTreeMap<usize, RunRecord> = BTreeMap::new();
        for (i, rec) in rx {
            pending.insert(i, rec);
            while let Some(rec) = pending.remove(&out.len()) {
                info!(question = %rec.question_id, ex = ?rec.ex, calls = rec.calls(), "item done");
                sink(&rec);
                out.push(rec);
            }
        }
    });
    out
}
