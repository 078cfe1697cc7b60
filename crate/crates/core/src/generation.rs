//! Candidate SQL generation: few-shot retrieval, prompt assembly, one LLM call
//! per candidate spec, and SQL extraction from the replies.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::catalog::{apply_filter, FilterLevel, SchemaCatalog};
use crate::linking::{question_turn, LinkerRun, LinkerRunId};
use crate::llm::{cosine, ChatMessage, ChatRequest, CostLedger, Embedder, Gateway, LlmError, Stage, Usage};
use crate::representation::{render, RepresentationFormat};
use crate::selection::ExecutionResult;
use crate::util::parallel_map;

pub const GENERATOR_SYSTEM_PROMPT: &str = include_str!("../assets/generator_system.txt");

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("no fenced code block in response")]
    NoCodeBlock,
    #[error("spec {spec_index} references unknown {run}")]
    UnknownLinkerRun { spec_index: usize, run: LinkerRunId },
    #[error("few-shot store {path}: {reason}")]
    Store { path: String, reason: String },
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSpec {
    pub spec_index: usize,
    pub format: RepresentationFormat,
    pub filter_level: FilterLevel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linker_run: Option<LinkerRunId>,
    pub generator_model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqlCandidate {
    pub spec_index: usize,
    /// Extracted SQL; empty for error candidates.
    pub sql: String,
    pub raw_response: String,
    pub usage: Usage,
    /// Why no SQL could be produced (backend failure or missing code block).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub execution: Option<ExecutionResult>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub question: String,
    pub schema_text: String,
    pub sql: String,
    pub source_db: String,
}

/// One line of the few-shot store file.
///
/// `schema` holds the fully filtered schema of the example rendered in each
/// representation format, keyed by format name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotRecord {
    pub question: String,
    pub db_id: String,
    pub sql: String,
    pub embedding: Vec<f64>,
    pub schema: BTreeMap<String, String>,
}

impl FewShotRecord {
    /// The example as shown to a generator working in `format`. Falls back
    /// to the first stored rendering when that format is missing.
    pub fn example(&self, format: RepresentationFormat) -> FewShotExample {
        let schema_text = self
            .schema
            .get(format.name())
            .or_else(|| self.schema.values().next())
            .cloned()
            .unwrap_or_default();
        FewShotExample {
            question: self.question.clone(),
            schema_text,
            sql: self.sql.clone(),
            source_db: self.db_id.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FewShotStore {
    pub records: Vec<FewShotRecord>,
}

impl FewShotStore {
    pub fn load(path: &Path) -> Result<Self, GenerationError> {
        let err = |reason: String| GenerationError::Store {
            path: path.display().to_string(),
            reason,
        };
        let file = std::fs::File::open(path).map_err(|e| err(e.to_string()))?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: FewShotRecord = serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", n + 1)))?;
            if rec.sql.trim().is_empty() {
                return Err(err(format!("line {}: empty sql", n + 1)));
            }
            records.push(rec);
        }
        Ok(Self { records })
    }

    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// The `k` records most similar to `query`, best first; equal scores
    /// keep store order.
    pub fn nearest(&self, query: &[f64], k: usize) -> Vec<&FewShotRecord> {
        if k > self.records.len() {
            warn!(k, available = self.records.len(), "few-shot store smaller than k");
        }
        let mut scored: Vec<(f64, usize)> = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (cosine(query, &r.embedding), i))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.into_iter().take(k).map(|(_, i)| &self.records[i]).collect()
    }
}

pub fn retrieve_fewshots<'s>(
    nlq: &str,
    store: &'s FewShotStore,
    embedder: &dyn Embedder,
    k: usize,
) -> Result<Vec<&'s FewShotRecord>, LlmError> {
    if k == 0 || store.is_empty() {
        return Ok(Vec::new());
    }
    let query = embedder.embed(&[nlq.to_string()])?.remove(0);
    if let Some(bad) = store.records.iter().find(|r| r.embedding.len() != query.len()) {
        return Err(LlmError::DimensionMismatch {
            expected: bad.embedding.len(),
            got: query.len(),
        });
    }
    Ok(store.nearest(&query, k))
}

fn sql_fence(sql: &str) -> String {
    format!("```sql\n{}\n```", sql.trim())
}

pub fn build_generation_prompt(
    schema_text: &str,
    nlq: &str,
    hint: Option<&str>,
    fewshots: &[FewShotExample],
) -> Vec<ChatMessage> {
    let mut messages = vec![ChatMessage::system(GENERATOR_SYSTEM_PROMPT)];
    for ex in fewshots {
        messages.push(ChatMessage::user(question_turn(&ex.schema_text, &ex.question, None)));
        messages.push(ChatMessage::assistant(sql_fence(&ex.sql)));
    }
    messages.push(ChatMessage::user(question_turn(schema_text, nlq, hint)));
    messages
}

/// Content of the first fenced block tagged `sql` (or `sqlite`), else of the
/// first untagged block. An unterminated final block runs to the end of the
/// text.
pub fn extract_sql(response: &str) -> Result<String, GenerationError> {
    let mut blocks: Vec<(String, String)> = Vec::new();
    let mut open: Option<(String, Vec<&str>)> = None;
    for line in response.split('\n') {
        let trimmed = line.trim_start();
        match open.take() {
            None => {
                if let Some(tag) = trimmed.strip_prefix("```") {
                    open = Some((tag.trim().to_lowercase(), Vec::new()));
                }
            }
            Some((tag, mut body)) => {
                if trimmed.trim_end() == "```" {
                    blocks.push((tag, body.join("\n")));
                } else {
                    body.push(line);
                    open = Some((tag, body));
                }
            }
        }
    }
    if let Some((tag, body)) = open {
        blocks.push((tag, body.join("\n")));
    }
    blocks
        .iter()
        .find(|(tag, _)| tag == "sql" || tag == "sqlite")
        .or_else(|| blocks.iter().find(|(tag, _)| tag.is_empty()))
        .map(|(_, body)| body.trim().to_string())
        .ok_or(GenerationError::NoCodeBlock)
}

/// Everything the generator needs for one question.
pub struct GenerationInput<'a> {
    pub nlq: &'a str,
    pub hint: Option<&'a str>,
    pub catalog: &'a SchemaCatalog,
    pub linker_runs: &'a [LinkerRun],
    /// Retrieved few-shot records, shared by all specs.
    pub fewshots: &'a [&'a FewShotRecord],
}

/// Filtered catalog for `spec`; a failed linker run degrades to the full
/// schema.
pub fn catalog_for_spec(
    spec: &CandidateSpec,
    catalog: &SchemaCatalog,
    linker_runs: &[LinkerRun],
) -> Result<SchemaCatalog, GenerationError> {
    let Some(run_id) = spec.linker_run else {
        return Ok(catalog.clone());
    };
    let run = linker_runs
        .iter()
        .find(|r| r.id == run_id)
        .ok_or(GenerationError::UnknownLinkerRun {
            spec_index: spec.spec_index,
            run: run_id,
        })?;
    Ok(match &run.prediction {
        Some(p) => apply_filter(catalog, p, spec.filter_level),
        None => catalog.clone(),
    })
}

pub fn spec_prompt(spec: &CandidateSpec, input: &GenerationInput<'_>) -> Result<Vec<ChatMessage>, GenerationError> {
    let filtered = catalog_for_spec(spec, input.catalog, input.linker_runs)?;
    let schema_text = render(&filtered, spec.format);
    let examples: Vec<FewShotExample> = input.fewshots.iter().map(|r| r.example(spec.format)).collect();
    Ok(build_generation_prompt(&schema_text, input.nlq, input.hint, &examples))
}

/// One candidate per spec, in spec order. Backend failures and replies
/// without a code block become error candidates.
pub fn generate_candidates(
    specs: &[CandidateSpec],
    input: &GenerationInput<'_>,
    gateway: &Gateway,
    ledger: &CostLedger,
    workers: usize,
) -> Result<Vec<SqlCandidate>, GenerationError> {
    let prompts = specs
        .iter()
        .map(|s| spec_prompt(s, input))
        .collect::<Result<Vec<_>, _>>()?;
    let jobs: Vec<(&CandidateSpec, Vec<ChatMessage>)> = specs.iter().zip(prompts).collect();
    let mut out = parallel_map(&jobs, workers, |(spec, messages)| {
        let request = ChatRequest::new(spec.generator_model.clone(), messages.clone());
        let mut candidate = SqlCandidate {
            spec_index: spec.spec_index,
            sql: String::new(),
            raw_response: String::new(),
            usage: Usage::default(),
            error: None,
            execution: None,
        };
        match gateway.complete(&request, Stage::Generation, ledger) {
            Ok(resp) => {
                candidate.usage = resp.usage;
                match extract_sql(&resp.text) {
                    Ok(sql) => candidate.sql = sql,
                    Err(e) => candidate.error = Some(e.to_string()),
                }
                candidate.raw_response = resp.text;
            }
            Err(e) => {
                warn!(spec = spec.spec_index, "generation call failed: {e}");
                candidate.error = Some(e.to_string());
            }
        }
        candidate
    });
    out.sort_by_key(|c| c.spec_index);
    Ok(out)
}
