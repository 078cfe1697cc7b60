//! Schema linking: prompting for table/column selections, parsing the
//! answers, expanding them into filter levels and scoring them.

mod gold;

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{apply_filter, FilterLevel, SchemaCatalog};
use crate::llm::{ChatMessage, Usage};
use crate::representation::RepresentationFormat;

pub use gold::{derive_gold_linking, GoldLinking};

pub const DEFAULT_SYSTEM_PROMPT: &str = include_str!("../../assets/linking_system.txt");
const DEFAULT_FEWSHOTS: &str = include_str!("../../assets/linking_fewshots.json");

#[derive(Debug, Error)]
pub enum LinkingError {
    #[error("no JSON object found in linker response")]
    NoJsonFound { text: String },
    #[error("linker response is not a table -> column-list mapping: {reason}")]
    MalformedMapping { reason: String, text: String },
    #[error("{predictions} predictions but {golds} gold sets")]
    LengthMismatch { predictions: usize, golds: usize },
    #[error("cannot resolve `{identifier}` in gold SQL: {reason}")]
    Unresolvable { identifier: String, reason: String },
    #[error("linking few-shots: {0}")]
    FewShots(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LinkerRunId(pub usize);

impl fmt::Display for LinkerRunId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "linker#{}", self.0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkingPrediction {
    pub selection: IndexMap<String, Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<LinkerRunId>,
}

impl LinkingPrediction {
    /// Builds a prediction, merging repeated tables and dropping repeated
    /// columns.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Vec<String>)>) -> Self {
        let mut selection: IndexMap<String, Vec<String>> = IndexMap::new();
        for (table, cols) in pairs {
            let entry = selection.entry(table).or_default();
            for c in cols {
                if !entry.contains(&c) {
                    entry.push(c);
                }
            }
        }
        Self {
            selection,
            source: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.selection.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.selection).expect("string map serializes")
    }

    /// Lowercased table names.
    pub fn table_set(&self) -> HashSet<String> {
        self.selection.keys().map(|t| t.to_lowercase()).collect()
    }

    /// Lowercased `(table, column)` pairs.
    pub fn column_set(&self) -> HashSet<(String, String)> {
        self.selection
            .iter()
            .flat_map(|(t, cs)| cs.iter().map(move |c| (t.to_lowercase(), c.to_lowercase())))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkerRun {
    pub id: LinkerRunId,
    pub format: RepresentationFormat,
    pub model_id: String,
    /// `None` when the call or the parse failed; dependants fall back to the
    /// unfiltered schema.
    pub prediction: Option<LinkingPrediction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkingExample {
    pub schema_text: String,
    pub question: String,
    #[serde(default)]
    pub hint: Option<String>,
    pub answer: IndexMap<String, Vec<String>>,
}

/// The fixed set of three linking demonstrations.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkingFewShots([LinkingExample; 3]);

impl LinkingFewShots {
    pub fn new(examples: Vec<LinkingExample>) -> Result<Self, LinkingError> {
        let n = examples.len();
        examples
            .try_into()
            .map(Self)
            .map_err(|_| LinkingError::FewShots(format!("expected exactly 3 examples, got {n}")))
    }

    pub fn from_json(text: &str) -> Result<Self, LinkingError> {
        let examples: Vec<LinkingExample> =
            serde_json::from_str(text).map_err(|e| LinkingError::FewShots(e.to_string()))?;
        Self::new(examples)
    }

    pub fn examples(&self) -> &[LinkingExample; 3] {
        &self.0
    }
}

impl Default for LinkingFewShots {
    fn default() -> Self {
        Self::from_json(DEFAULT_FEWSHOTS).expect("bundled linking few-shots are valid")
    }
}

/// User turn shared by linking and generation prompts.
pub(crate) fn question_turn(schema_text: &str, question: &str, hint: Option<&str>) -> String {
    let mut turn = format!("Database schema:\n{}\n\nQuestion: {question}", schema_text.trim_end());
    if let Some(h) = hint.map(str::trim).filter(|h| !h.is_empty()) {
        turn.push_str("\nHint: ");
        turn.push_str(h);
    }
    turn
}

pub fn build_linking_prompt(
    system_prompt: &str,
    schema_text: &str,
    nlq: &str,
    hint: Option<&str>,
    fewshots: &LinkingFewShots,
) -> Vec<ChatMessage> {
    let mut messages = vec![ChatMessage::system(system_prompt.trim_end())];
    for ex in fewshots.examples() {
        messages.push(ChatMessage::user(question_turn(&ex.schema_text, &ex.question, ex.hint.as_deref())));
        let answer = serde_json::to_string_pretty(&ex.answer).expect("string map serializes");
        messages.push(ChatMessage::assistant(format!("```json\n{answer}\n```")));
    }
    messages.push(ChatMessage::user(question_turn(schema_text, nlq, hint)));
    messages
}

/// Returns the balanced `{...}` span starting at byte `start`, honouring
/// JSON string escapes.
fn balanced_object(text: &str, start: usize) -> Option<&str> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, ch) in text[start..].char_indices() {
        if in_string {
            match ch {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match ch {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

pub fn parse_linking_response(text: &str) -> Result<LinkingPrediction, LinkingError> {
    let value = text
        .match_indices('{')
        .filter_map(|(i, _)| balanced_object(text, i))
        .find_map(|span| serde_json::from_str::<serde_json::Value>(span).ok())
        .ok_or_else(|| LinkingError::NoJsonFound { text: text.to_string() })?;

    let malformed = |reason: String| LinkingError::MalformedMapping {
        reason,
        text: text.to_string(),
    };
    let obj = value
        .as_object()
        .ok_or_else(|| malformed("top-level value is not an object".into()))?;
    let mut pairs = Vec::with_capacity(obj.len());
    for (table, cols) in obj {
        let cols = cols
            .as_array()
            .ok_or_else(|| malformed(format!("value for `{table}` is not a list")))?
            .iter()
            .map(|c| {
                c.as_str()
                    .map(|s| s.trim().to_string())
                    .ok_or_else(|| malformed(format!("non-string column under `{table}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        pairs.push((table.trim().to_string(), cols));
    }
    Ok(LinkingPrediction::from_pairs(pairs))
}

pub fn expand_to_levels(
    prediction: &LinkingPrediction,
    catalog: &SchemaCatalog,
) -> BTreeMap<FilterLevel, SchemaCatalog> {
    FilterLevel::ALL
        .iter()
        .map(|&level| (level, apply_filter(catalog, prediction, level)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkingMetrics {
    pub table_precision: f64,
    pub table_recall: f64,
    pub table_f1: f64,
    pub column_precision: f64,
    pub column_recall: f64,
    pub column_f1: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Counts {
    tp: usize,
    fp: usize,
    fn_: usize,
}

impl Counts {
    fn add<T: Eq + std::hash::Hash>(&mut self, pred: &HashSet<T>, gold: &HashSet<T>) {
        let tp = pred.intersection(gold).count();
        self.tp += tp;
        self.fp += pred.len() - tp;
        self.fn_ += gold.len() - tp;
    }

    /// Precision, recall, F1. An empty denominator scores 1.0.
    fn scores(self) -> (f64, f64, f64) {
        let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        (p, r, f1)
    }
}

/// Micro-averaged precision, recall and F1 for tables and for
/// `(table, column)` pairs, case-insensitive.
pub fn linking_metrics(predictions: &[LinkingPrediction], golds: &[GoldLinking]) -> Result<LinkingMetrics, LinkingError> {
    if predictions.len() != golds.len() {
        return Err(LinkingError::LengthMismatch {
            predictions: predictions.len(),
            golds: golds.len(),
        });
    }
    let mut tables = Counts::default();
    let mut columns = Counts::default();
    for (p, g) in predictions.iter().zip(golds) {
        tables.add(&p.table_set(), &g.table_set());
        columns.add(&p.column_set(), &g.column_set());
    }
    let (table_precision, table_recall, table_f1) = tables.scores();
    let (column_precision, column_recall, column_f1) = columns.scores();
    Ok(LinkingMetrics {
        table_precision,
        table_recall,
        table_f1,
        column_precision,
        column_recall,
        column_f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{golden, toy_catalog};
    use proptest::prelude::*;

    fn pred(pairs: &[(&str, &[&str])]) -> LinkingPrediction {
        LinkingPrediction::from_pairs(pairs.iter().map(|(t, cs)| (t.to_string(), cs.iter().map(|c| c.to_string()).collect())))
    }

    fn gold(pairs: &[(&str, &[&str])]) -> GoldLinking {
        let mut g = GoldLinking::default();
        for (t, cs) in pairs {
            g.tables.insert(t.to_string());
            for c in *cs {
                g.columns.insert((t.to_string(), c.to_string()));
            }
        }
        g
    }

    #[test]
    fn parses_figure_output() {
        let p = parse_linking_response(&golden("linker_output.txt")).unwrap();
        assert_eq!(p, pred(&[("users", &["user_id", "name"]), ("orders", &["user_id", "order_date"])]));
        let keys: Vec<_> = p.selection.keys().collect();
        assert_eq!(keys, ["users", "orders"]);
    }

    #[test]
    fn empty_object_is_empty_prediction() {
        assert!(parse_linking_response("{}").unwrap().is_empty());
    }

    #[test]
    fn fenced_block_in_prose_matches_bare_block() {
        let block = "{\"users\": [\"user_id\", \"name\"], \"orders\": [\"order_date\"]}";
        let wrapped = format!("Sure! Here is the mapping {{as requested}}:\n```json\n{block}\n```\nHope it helps.");
        let strict: serde_json::Value = serde_json::from_str(block).unwrap();
        let expected = LinkingPrediction::from_pairs(strict.as_object().unwrap().iter().map(|(k, v)| {
            (k.clone(), v.as_array().unwrap().iter().map(|c| c.as_str().unwrap().to_string()).collect())
        }));
        assert_eq!(parse_linking_response(&wrapped).unwrap(), expected);
        assert_eq!(parse_linking_response(block).unwrap(), expected);
    }

    #[test]
    fn braces_inside_strings_do_not_confuse_extraction() {
        let p = parse_linking_response("{\"t}\": [\"c{\"]}").unwrap();
        assert_eq!(p, pred(&[("t}", &["c{"])]));
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(parse_linking_response("no json here"), Err(LinkingError::NoJsonFound { .. })));
        assert!(matches!(
            parse_linking_response("{\"users\": \"user_id\"}"),
            Err(LinkingError::MalformedMapping { .. })
        ));
        assert!(matches!(
            parse_linking_response("{\"users\": [1, 2]}"),
            Err(LinkingError::MalformedMapping { .. })
        ));
    }

    #[test]
    fn prompt_contains_schema_and_is_deterministic() {
        let schema = golden("toy.none.dinsql.txt");
        let fs = LinkingFewShots::default();
        let a = build_linking_prompt(DEFAULT_SYSTEM_PROMPT, &schema, "total order amount per user", None, &fs);
        let b = build_linking_prompt(DEFAULT_SYSTEM_PROMPT, &schema, "total order amount per user", None, &fs);
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
        assert!(a.last().unwrap().content.contains(schema.trim_end()));
    }

    #[test]
    fn hint_follows_question() {
        let fs = LinkingFewShots::default();
        let msgs = build_linking_prompt(DEFAULT_SYSTEM_PROMPT, "S", "Q?", Some("use orders"), &fs);
        assert_eq!(msgs.last().unwrap().content, "Database schema:\nS\n\nQuestion: Q?\nHint: use orders");
    }

    #[test]
    fn few_shots_must_be_three() {
        let ex = LinkingFewShots::default().examples()[0].clone();
        assert!(LinkingFewShots::new(vec![ex.clone(), ex]).is_err());
    }

    #[test]
    fn expand_produces_three_levels() {
        let cat = toy_catalog();
        let levels = expand_to_levels(&LinkingPrediction::default(), &cat);
        assert_eq!(levels.len(), 3);
        assert_eq!(levels[&FilterLevel::NoFiltering], cat);

        let everything = LinkingPrediction::from_pairs(
            cat.tables.iter().map(|t| (t.name.clone(), t.columns.iter().map(|c| c.name.clone()).collect())),
        );
        let levels = expand_to_levels(&everything, &cat);
        assert!(levels.values().all(|c| *c == cat));
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let p = pred(&[("users", &["name"]), ("orders", &["user_id"])]);
        let g = gold(&[("users", &["name"]), ("orders", &["user_id"])]);
        let m = linking_metrics(&[p], &[g]).unwrap();
        for v in [m.table_precision, m.table_recall, m.table_f1, m.column_precision, m.column_recall, m.column_f1] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn one_extra_table_halves_precision() {
        let p = pred(&[("users", &[]), ("orders", &[])]);
        let g = gold(&[("users", &[])]);
        let m = linking_metrics(&[p], &[g]).unwrap();
        assert_eq!(m.table_precision, 0.5);
        assert_eq!(m.table_recall, 1.0);
    }

    #[test]
    fn two_question_micro_tally() {
        // q1: pred cols {u.a,u.b,o.c}, gold {u.a,o.c,o.d}: TP2 FP1 FN1
        // q2: pred cols {p.x},         gold {p.x,p.y,p.z}: TP1 FP0 FN2
        // micro: TP3 FP1 FN3 -> P=3/4, R=3/6
        let preds = [pred(&[("u", &["a", "b"]), ("o", &["c"])]), pred(&[("p", &["x"])])];
        let golds = [gold(&[("u", &["a"]), ("o", &["c", "d"])]), gold(&[("p", &["x", "y", "z"])])];
        let m = linking_metrics(&preds, &golds).unwrap();
        assert!((m.column_precision - 0.75).abs() < 1e-12);
        assert!((m.column_recall - 0.5).abs() < 1e-12);
        assert!((m.column_f1 - 0.6).abs() < 1e-12);
        assert_eq!(m.table_precision, 1.0);
    }

    #[test]
    fn metrics_are_case_insensitive() {
        let m = linking_metrics(&[pred(&[("USERS", &["Name"])])], &[gold(&[("users", &["name"])])]).unwrap();
        assert_eq!(m.column_f1, 1.0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(matches!(
            linking_metrics(&[LinkingPrediction::default()], &[]),
            Err(LinkingError::LengthMismatch { .. })
        ));
    }

    fn arb_prediction() -> impl Strategy<Value = LinkingPrediction> {
        proptest::collection::vec(("[a-z_]{1,8}", proptest::collection::vec("[a-zA-Z0-9_ ]{0,8}", 0..4)), 0..5)
            .prop_map(|pairs| {
                LinkingPrediction::from_pairs(pairs.into_iter().map(|(t, cs)| {
                    (t, cs.into_iter().map(|c| c.trim().to_string()).collect())
                }))
            })
    }

    fn arb_gold() -> impl Strategy<Value = GoldLinking> {
        proptest::collection::vec(("[a-d]", proptest::collection::vec("[a-d]", 0..3)), 0..4).prop_map(|pairs| {
            let mut g = GoldLinking::default();
            for (t, cs) in pairs {
                g.tables.insert(t.clone());
                for c in cs {
                    g.columns.insert((t.clone(), c));
                }
            }
            g
        })
    }

    fn subset_of(g: &GoldLinking, keep: &[bool]) -> LinkingPrediction {
        let mut pairs: Vec<(String, Vec<String>)> = Vec::new();
        let mut i = 0;
        for t in &g.tables {
            let cols: Vec<String> = g
                .columns
                .iter()
                .filter(|(tt, _)| tt == t)
                .filter(|_| {
                    i += 1;
                    keep.get(i - 1).copied().unwrap_or(true)
                })
                .map(|(_, c)| c.clone())
                .collect();
            if !cols.is_empty() {
                pairs.push((t.clone(), cols));
            }
        }
        LinkingPrediction::from_pairs(pairs)
    }

    proptest! {
        #[test]
        fn serialize_then_parse_is_identity(p in arb_prediction()) {
            prop_assert_eq!(parse_linking_response(&p.to_json()).unwrap(), p);
        }

        #[test]
        fn micro_metrics_are_permutation_invariant(items in proptest::collection::vec((arb_prediction(), arb_gold()), 1..6), rot in 0usize..6) {
            let (p, g): (Vec<_>, Vec<_>) = items.iter().cloned().unzip();
            let k = rot % items.len();
            let mut p2 = p.clone();
            let mut g2 = g.clone();
            p2.rotate_left(k);
            g2.rotate_left(k);
            prop_assert_eq!(linking_metrics(&p, &g).unwrap(), linking_metrics(&p2, &g2).unwrap());
        }

        #[test]
        fn subset_has_full_precision_superset_full_recall(g in arb_gold(), keep in proptest::collection::vec(any::<bool>(), 0..12)) {
            let sub = subset_of(&g, &keep);
            let m = linking_metrics(&[sub], std::slice::from_ref(&g)).unwrap();
            prop_assert_eq!(m.table_precision, 1.0);
            prop_assert_eq!(m.column_precision, 1.0);

            let mut sup = LinkingPrediction::from_pairs(g.tables.iter().map(|t| {
                (t.clone(), g.columns.iter().filter(|(tt, _)| tt == t).map(|(_, c)| c.clone()).collect())
            }));
            sup.selection.entry("zz_extra".into()).or_default().push("extra".into());
            let m = linking_metrics(&[sup], &[g]).unwrap();
            prop_assert_eq!(m.table_recall, 1.0);
            prop_assert_eq!(m.column_recall, 1.0);
        }
    }
}
