//! Candidate execution, result-equivalence voting and the pairwise judge
//! tournament used for low-confidence vote distributions.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::Duration;

use rusqlite::types::ValueRef;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::warn;

use crate::generation::SqlCandidate;
use crate::llm::{ChatMessage, ChatRequest, CostLedger, Gateway, Stage};
use crate::util::parallel_map;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_PRECISION: u32 = 6;
const PREVIEW_ROWS: usize = 5;

pub const JUDGE_SYSTEM_PROMPT: &str = include_str!("../assets/judge_system.txt");
pub const JUDGE_USER_TEMPLATE: &str = include_str!("../assets/judge_user.txt");

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("no candidates to select from")]
    Empty,
    #[error("no confidence rule table for {0} candidates")]
    MissingRule(usize),
    #[error("invalid confidence rule for n = {n}: {reason}")]
    InvalidRule { n: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Cell {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    Blob(Vec<u8>),
}

impl Cell {
    fn from_value(v: ValueRef<'_>) -> Self {
        match v {
            ValueRef::Null => Cell::Null,
            ValueRef::Integer(i) => Cell::Integer(i),
            ValueRef::Real(f) => Cell::Real(f),
            ValueRef::Text(t) => Cell::Text(String::from_utf8_lossy(t).into_owned()),
            ValueRef::Blob(b) => Cell::Blob(b.to_vec()),
        }
    }

    /// Canonical form: integral numbers collapse to integers, other reals
    /// are rounded to `precision` decimals first.
    fn canonical(&self, precision: u32) -> String {
        match self {
            Cell::Null => "N".into(),
            Cell::Integer(i) => format!("I:{i}"),
            Cell::Real(f) if !f.is_finite() => format!("R:{f}"),
            Cell::Real(f) => {
                let scale = 10f64.powi(precision as i32);
                let r = (f * scale).round() / scale;
                if r.fract() == 0.0 && r.abs() < 9.2e18 {
                    format!("I:{}", r as i64)
                } else {
                    format!("R:{r:.p$}", p = precision as usize)
                }
            }
            Cell::Text(s) => format!("T:{s}"),
            Cell::Blob(b) => format!("B:{}", hex::encode(b)),
        }
    }

    fn display(&self) -> String {
        match self {
            Cell::Null => "NULL".into(),
            Cell::Integer(i) => i.to_string(),
            Cell::Real(f) => f.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Blob(b) => format!("x'{}'", hex::encode(b)),
        }
    }
}

pub type Row = Vec<Cell>;

/// Digest of the row multiset. Row order is ignored; column order within a
/// row is kept.
pub fn normalize_result(rows: &[Row], precision: u32) -> String {
    let mut canon: Vec<Vec<String>> = rows
        .iter()
        .map(|r| r.iter().map(|c| c.canonical(precision)).collect())
        .collect();
    canon.sort();
    let bytes = serde_json::to_vec(&canon).expect("strings serialize");
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecStatus {
    Ok,
    Error,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub status: ExecStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signature: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_text: Option<String>,
    /// The limit in force for this execution.
    pub timeout_ms: u64,
    /// First rows, for judge prompts.
    pub preview: String,
}

impl ExecutionResult {
    pub fn is_ok(&self) -> bool {
        self.status == ExecStatus::Ok
    }

    pub fn error(message: impl Into<String>, timeout: Duration) -> Self {
        let message = message.into();
        Self {
            status: ExecStatus::Error,
            signature: None,
            row_count: None,
            preview: format!("ERROR: {message}"),
            error_text: Some(message),
            timeout_ms: timeout.as_millis() as u64,
        }
    }
}

#[derive(Debug)]
pub enum QueryOutcome {
    Rows(Vec<Row>),
    Error(String),
    Timeout,
}

/// Runs `sql` on a read-only connection, interrupting it after `timeout`.
pub fn run_query(sql: &str, db_path: &Path, timeout: Duration) -> QueryOutcome {
    let conn = match Connection::open_with_flags(
        db_path,
        OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
    ) {
        Ok(c) => c,
        Err(e) => return QueryOutcome::Error(format!("cannot open {}: {e}", db_path.display())),
    };
    let handle = conn.get_interrupt_handle();
    let fired = Arc::new(AtomicBool::new(false));
    let (done_tx, done_rx) = mpsc::channel::<()>();
    let watchdog = {
        let fired = fired.clone();
        std::thread::spawn(move || {
            if let Err(mpsc::RecvTimeoutError::Timeout) = done_rx.recv_timeout(timeout) {
                fired.store(true, Ordering::SeqCst);
                handle.interrupt();
            }
        })
    };
    let result = collect_rows(&conn, sql);
    drop(done_tx);
    let _ = watchdog.join();
    match result {
        Ok(rows) => QueryOutcome::Rows(rows),
        Err(_) if fired.load(Ordering::SeqCst) => QueryOutcome::Timeout,
        Err(e) => QueryOutcome::Error(e.to_string()),
    }
}

fn collect_rows(conn: &Connection, sql: &str) -> rusqlite::Result<Vec<Row>> {
    let mut stmt = conn.prepare(sql)?;
    let width = stmt.column_count();
    let mut rows = stmt.query([])?;
    let mut out = Vec::new();
    while let Some(row) = rows.next()? {
        out.push((0..width).map(|i| row.get_ref(i).map(Cell::from_value)).collect::<Result<_, _>>()?);
    }
    Ok(out)
}

fn preview(rows: &[Row]) -> String {
    let mut s = String::new();
    for row in rows.iter().take(PREVIEW_ROWS) {
        let cells: Vec<String> = row.iter().map(Cell::display).collect();
        let _ = writeln!(s, "{}", cells.join(" | "));
    }
    let _ = write!(s, "({} row{})", rows.len(), if rows.len() == 1 { "" } else { "s" });
    s
}

pub fn execute_candidate(sql: &str, db_path: &Path, timeout: Duration, precision: u32) -> ExecutionResult {
    let timeout_ms = timeout.as_millis() as u64;
    match run_query(sql, db_path, timeout) {
        QueryOutcome::Rows(rows) => ExecutionResult {
            status: ExecStatus::Ok,
            signature: Some(normalize_result(&rows, precision)),
            row_count: Some(rows.len()),
            error_text: None,
            timeout_ms,
            preview: preview(&rows),
        },
        QueryOutcome::Error(e) => ExecutionResult::error(e, timeout),
        QueryOutcome::Timeout => ExecutionResult {
            status: ExecStatus::Timeout,
            signature: None,
            row_count: None,
            error_text: None,
            timeout_ms,
            preview: "TIMEOUT".into(),
        },
    }
}

/// Executes every candidate that has SQL, `workers` at a time.
pub fn execute_all(candidates: &mut [SqlCandidate], db_path: &Path, timeout: Duration, precision: u32, workers: usize) {
    let results = parallel_map(candidates, workers, |c| match &c.error {
        Some(e) => ExecutionResult::error(format!("generation failed: {e}"), timeout),
        None => execute_candidate(&c.sql, db_path, timeout, precision),
    });
    for (c, r) in candidates.iter_mut().zip(results) {
        c.execution = Some(r);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "status", content = "key", rename_all = "lowercase")]
pub enum GroupKey {
    Ok(String),
    Error(String),
    Timeout,
}

impl GroupKey {
    pub fn is_ok(&self) -> bool {
        matches!(self, GroupKey::Ok(_))
    }

    /// Error messages are grouped by their leading clause, so
    /// `no such column: a` and `no such column: b` share a class.
    pub fn of(result: Option<&ExecutionResult>) -> Self {
        match result {
            None => GroupKey::Error("not executed".into()),
            Some(r) => match r.status {
                ExecStatus::Ok => GroupKey::Ok(r.signature.clone().unwrap_or_default()),
                ExecStatus::Timeout => GroupKey::Timeout,
                ExecStatus::Error => {
                    let text = r.error_text.as_deref().unwrap_or_default();
                    let class = text.split(':').next().unwrap_or_default().trim().to_lowercase();
                    GroupKey::Error(class)
                }
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteGroup {
    pub key: GroupKey,
    /// Spec indices, ascending.
    pub members: Vec<usize>,
}

impl VoteGroup {
    pub fn count(&self) -> usize {
        self.members.len()
    }

    pub fn representative(&self) -> usize {
        self.members[0]
    }
}

/// Partitions candidates by execution equivalence, largest group first and
/// ties by smallest member.
pub fn group_votes(candidates: &[SqlCandidate]) -> Vec<VoteGroup> {
    let mut by_key: HashMap<GroupKey, Vec<usize>> = HashMap::new();
    for c in candidates {
        by_key.entry(GroupKey::of(c.execution.as_ref())).or_default().push(c.spec_index);
    }
    let mut groups: Vec<VoteGroup> = by_key
        .into_iter()
        .map(|(key, mut members)| {
            members.sort_unstable();
            VoteGroup { key, members }
        })
        .collect();
    groups.sort_by_key(|g| (std::cmp::Reverse(g.count()), g.representative()));
    groups
}

pub fn distribution(groups: &[VoteGroup]) -> Vec<usize> {
    groups.iter().map(VoteGroup::count).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    AcceptTop,
    Escalate,
}

/// Which vote distributions count as low confidence, per candidate count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfidencePolicy {
    rules: BTreeMap<usize, Vec<Vec<usize>>>,
}

impl Default for ConfidencePolicy {
    fn default() -> Self {
        let mut rules = BTreeMap::new();
        rules.insert(5, vec![vec![1, 1, 1, 1, 1], vec![2, 2, 1], vec![3, 2]]);
        Self { rules }
    }
}

impl ConfidencePolicy {
    /// Adds or replaces the escalation list for `n` candidates. Each entry
    /// must be a non-increasing partition of `n`.
    pub fn with_rule(mut self, n: usize, escalate: Vec<Vec<usize>>) -> Result<Self, SelectionError> {
        for d in &escalate {
            if d.iter().sum::<usize>() != n || d.contains(&0) || d.windows(2).any(|w| w[0] < w[1]) {
                return Err(SelectionError::InvalidRule {
                    n,
                    reason: format!("{d:?} is not a sorted partition of {n}"),
                });
            }
        }
        self.rules.insert(n, escalate);
        Ok(self)
    }

    pub fn covers(&self, n: usize) -> bool {
        self.rules.contains_key(&n)
    }

    pub fn check(&self, n: usize) -> Result<(), SelectionError> {
        if self.covers(n) {
            Ok(())
        } else {
            Err(SelectionError::MissingRule(n))
        }
    }

    pub fn decide(&self, distribution: &[usize], n: usize) -> Result<Decision, SelectionError> {
        let rules = self.rules.get(&n).ok_or(SelectionError::MissingRule(n))?;
        Ok(if rules.iter().any(|r| r == distribution) {
            Decision::Escalate
        } else {
            Decision::AcceptTop
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    A,
    B,
    Unparsed,
}

/// Accepts a bare `A` or `B`, optionally wrapped in quotes, emphasis or a
/// trailing period.
pub fn parse_verdict(reply: &str) -> Verdict {
    let core = reply
        .trim()
        .trim_matches(|c: char| matches!(c, '*' | '`' | '"' | '\'' | '.' | ' ' | '(' | ')'));
    match core {
        "A" | "a" => Verdict::A,
        "B" | "b" => Verdict::B,
        _ => Verdict::Unparsed,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finalist {
    pub spec_index: usize,
    pub sql: String,
    pub preview: String,
    pub votes: usize,
}

pub trait Judge: Sync {
    /// Judges `a` (shown first) against `b`. Failures map to
    /// [`Verdict::Unparsed`].
    fn compare(&self, a: &Finalist, b: &Finalist) -> Verdict;
}

/// Judge backed by a chat model through the gateway.
pub struct LlmJudge<'a> {
    pub gateway: &'a Gateway,
    pub ledger: &'a CostLedger,
    pub model: String,
    pub system_prompt: String,
    pub user_template: String,
    pub question: String,
    pub hint: Option<String>,
    pub schema_text: String,
}

impl LlmJudge<'_> {
    pub fn prompt(&self, a: &Finalist, b: &Finalist) -> Vec<ChatMessage> {
        let hint_line = match self.hint.as_deref().map(str::trim).filter(|h| !h.is_empty()) {
            Some(h) => format!("Hint: {h}\n"),
            None => String::new(),
        };
        let user = self
            .user_template
            .trim_end()
            .replace("{schema}", self.schema_text.trim_end())
            .replace("{question}", &self.question)
            .replace("{hint_line}", &hint_line)
            .replace("{sql_a}", a.sql.trim())
            .replace("{result_a}", &a.preview)
            .replace("{sql_b}", b.sql.trim())
            .replace("{result_b}", &b.preview);
        vec![ChatMessage::system(self.system_prompt.trim_end()), ChatMessage::user(user)]
    }
}

impl Judge for LlmJudge<'_> {
    fn compare(&self, a: &Finalist, b: &Finalist) -> Verdict {
        let request = ChatRequest::new(self.model.clone(), self.prompt(a, b));
        match self.gateway.complete(&request, Stage::Selection, self.ledger) {
            Ok(r) => {
                let v = parse_verdict(&r.text);
                if v == Verdict::Unparsed {
                    warn!(reply = %r.text, "unparseable judge reply, splitting the point");
                }
                v
            }
            Err(e) => {
                warn!("judge call failed, splitting the point: {e}");
                Verdict::Unparsed
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tournament {
    /// Position in the finalist list of the winner.
    pub winner: usize,
    pub calls: usize,
    /// Wins per finalist, in finalist order; unparsed comparisons add 0.5 to
    /// each side.
    pub wins: Vec<f64>,
}

/// Order-swapped round robin: every unordered pair is judged twice.
pub fn pairwise_select(finalists: &[Finalist], judge: &dyn Judge, workers: usize) -> Tournament {
    let mut matches = Vec::new();
    for i in 0..finalists.len() {
        for j in i + 1..finalists.len() {
            matches.push((i, j));
            matches.push((j, i));
        }
    }
    let verdicts = parallel_map(&matches, workers, |&(a, b)| judge.compare(&finalists[a], &finalists[b]));
    let mut wins = vec![0.0f64; finalists.len()];
    for (&(a, b), v) in matches.iter().zip(&verdicts) {
        match v {
            Verdict::A => wins[a] += 1.0,
            Verdict::B => wins[b] += 1.0,
            Verdict::Unparsed => {
                wins[a] += 0.5;
                wins[b] += 0.5;
            }
        }
    }
    let winner = (0..finalists.len())
        .min_by(|&x, &y| {
            wins[y]
                .total_cmp(&wins[x])
                .then(finalists[y].votes.cmp(&finalists[x].votes))
                .then(finalists[x].spec_index.cmp(&finalists[y].spec_index))
        })
        .unwrap_or(0);
    Tournament {
        winner,
        calls: matches.len(),
        wins,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    RegularVote,
    PairwiseLLM,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Confidence {
    High,
    Low,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub chosen_index: usize,
    pub chosen_sql: String,
    pub distribution: Vec<usize>,
    pub method: Method,
    pub pairwise_calls: usize,
    pub confidence: Confidence,
    /// Size of the vote group the chosen candidate belongs to.
    pub chosen_votes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tournament: Option<Tournament>,
}

fn sql_of(candidates: &[SqlCandidate], spec_index: usize) -> String {
    candidates
        .iter()
        .find(|c| c.spec_index == spec_index)
        .map(|c| c.sql.clone())
        .unwrap_or_default()
}

/// Regular vote when the distribution is confident, otherwise a pairwise
/// tournament over the representatives of the executable groups.
pub fn select(
    candidates: &[SqlCandidate],
    policy: &ConfidencePolicy,
    judge: &dyn Judge,
    workers: usize,
) -> Result<SelectionOutcome, SelectionError> {
    if candidates.is_empty() {
        return Err(SelectionError::Empty);
    }
    let groups = group_votes(candidates);
    let dist = distribution(&groups);
    let decision = policy.decide(&dist, candidates.len())?;
    let ok_groups: Vec<&VoteGroup> = groups.iter().filter(|g| g.key.is_ok()).collect();

    let votes_of = |chosen: usize| {
        groups
            .iter()
            .find(|g| g.members.contains(&chosen))
            .map_or(0, VoteGroup::count)
    };
    let low = |chosen: usize, tournament: Option<Tournament>| SelectionOutcome {
        chosen_index: chosen,
        chosen_sql: sql_of(candidates, chosen),
        distribution: dist.clone(),
        method: Method::PairwiseLLM,
        pairwise_calls: tournament.as_ref().map_or(0, |t| t.calls),
        confidence: Confidence::Low,
        chosen_votes: votes_of(chosen),
        tournament,
    };

    if ok_groups.is_empty() {
        let first = candidates.iter().map(|c| c.spec_index).min().expect("non-empty");
        return Ok(low(first, None));
    }
    match decision {
        Decision::AcceptTop => {
            let chosen = ok_groups[0].representative();
            Ok(SelectionOutcome {
                chosen_index: chosen,
                chosen_sql: sql_of(candidates, chosen),
                distribution: dist,
                method: Method::RegularVote,
                pairwise_calls: 0,
                confidence: Confidence::High,
                chosen_votes: votes_of(chosen),
                tournament: None,
            })
        }
        Decision::Escalate if ok_groups.len() == 1 => Ok(low(ok_groups[0].representative(), None)),
        Decision::Escalate => {
            let finalists: Vec<Finalist> = ok_groups
                .iter()
                .map(|g| {
                    let c = candidates
                        .iter()
                        .find(|c| c.spec_index == g.representative())
                        .expect("representative is a candidate");
                    Finalist {
                        spec_index: c.spec_index,
                        sql: c.sql.clone(),
                        preview: c.execution.as_ref().map(|e| e.preview.clone()).unwrap_or_default(),
                        votes: g.count(),
                    }
                })
                .collect();
            let t = pairwise_select(&finalists, judge, workers);
            let chosen = finalists[t.winner].spec_index;
            Ok(low(chosen, Some(t)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::Usage;
    use crate::testutil::toy_db;
    use proptest::prelude::*;
    use std::time::Instant;

    fn ok(sig: &str) -> ExecutionResult {
        ExecutionResult {
            status: ExecStatus::Ok,
            signature: Some(sig.into()),
            row_count: Some(1),
            error_text: None,
            timeout_ms: 1000,
            preview: format!("{sig}\n(1 row)"),
        }
    }

    fn candidates(sigs: &[&str]) -> Vec<SqlCandidate> {
        sigs.iter()
            .enumerate()
            .map(|(i, s)| SqlCandidate {
                spec_index: i,
                sql: format!("SELECT '{s}' -- {i}"),
                raw_response: String::new(),
                usage: Usage::default(),
                error: None,
                execution: Some(if let Some(e) = s.strip_prefix("err:") {
                    ExecutionResult::error(e, Duration::from_secs(1))
                } else {
                    ok(s)
                }),
            })
            .collect()
    }

    /// Always prefers the finalist whose SQL mentions `fav`, whichever side
    /// it is shown on; otherwise picks the first-listed.
    struct Favours<'a>(&'a str, std::sync::atomic::AtomicUsize);

    impl Judge for Favours<'_> {
        fn compare(&self, a: &Finalist, b: &Finalist) -> Verdict {
            self.1.fetch_add(1, Ordering::SeqCst);
            if b.sql.contains(self.0) && !a.sql.contains(self.0) {
                Verdict::B
            } else {
                Verdict::A
            }
        }
    }

    struct FirstListed;
    impl Judge for FirstListed {
        fn compare(&self, _: &Finalist, _: &Finalist) -> Verdict {
            Verdict::A
        }
    }

    struct Mute;
    impl Judge for Mute {
        fn compare(&self, _: &Finalist, _: &Finalist) -> Verdict {
            Verdict::Unparsed
        }
    }

    fn finalists(m: usize) -> Vec<Finalist> {
        (0..m)
            .map(|i| Finalist {
                spec_index: i,
                sql: format!("SELECT {i} /* c{i} */"),
                preview: String::new(),
                votes: 1,
            })
            .collect()
    }

    #[test]
    fn executes_simple_query() {
        let (_d, db) = toy_db();
        let r = execute_candidate("SELECT 1", &db, DEFAULT_TIMEOUT, DEFAULT_PRECISION);
        assert_eq!(r.status, ExecStatus::Ok);
        assert_eq!(r.row_count, Some(1));
        let e = execute_candidate("SELECT * FROM missing_table", &db, DEFAULT_TIMEOUT, DEFAULT_PRECISION);
        assert_eq!(e.status, ExecStatus::Error);
        assert!(e.error_text.unwrap().contains("missing_table"));
    }

    #[test]
    fn connection_is_read_only() {
        let (_d, db) = toy_db();
        let r = execute_candidate("DELETE FROM users", &db, DEFAULT_TIMEOUT, DEFAULT_PRECISION);
        assert_eq!(r.status, ExecStatus::Error);
        let count = execute_candidate("SELECT COUNT(*) FROM users", &db, DEFAULT_TIMEOUT, DEFAULT_PRECISION);
        assert_eq!(count.signature, Some(normalize_result(&[vec![Cell::Integer(4)]], 6)));
    }

    #[test]
    fn runaway_query_times_out_at_limit() {
        let (_d, db) = toy_db();
        let limit = Duration::from_millis(300);
        let start = Instant::now();
        let r = execute_candidate(
            "WITH RECURSIVE c(x) AS (SELECT 1 UNION ALL SELECT x + 1 FROM c) SELECT COUNT(*) FROM c",
            &db,
            limit,
            DEFAULT_PRECISION,
        );
        let elapsed = start.elapsed();
        assert_eq!(r.status, ExecStatus::Timeout);
        assert_eq!(r.timeout_ms, 300);
        assert!(elapsed >= limit && elapsed < limit * 10, "{elapsed:?}");
    }

    #[test]
    fn signature_examples() {
        let a = vec![vec![Cell::Integer(1), Cell::Text("a".into())], vec![Cell::Integer(2), Cell::Text("b".into())]];
        let b = vec![a[1].clone(), a[0].clone()];
        assert_eq!(normalize_result(&a, 6), normalize_result(&b, 6));
        assert_eq!(
            normalize_result(&[vec![Cell::Integer(1)]], 6),
            normalize_result(&[vec![Cell::Real(1.0)]], 6)
        );
        assert_ne!(
            normalize_result(&[vec![Cell::Integer(1)]], 6),
            normalize_result(&[vec![Cell::Integer(1)], vec![Cell::Integer(1)]], 6)
        );
        assert_ne!(
            normalize_result(&[vec![Cell::Null]], 6),
            normalize_result(&[vec![Cell::Text(String::new())]], 6)
        );
        assert_ne!(
            normalize_result(&[vec![Cell::Integer(1), Cell::Integer(2)]], 6),
            normalize_result(&[vec![Cell::Integer(2), Cell::Integer(1)]], 6)
        );
        assert_eq!(
            normalize_result(&[vec![Cell::Real(0.1 + 0.2)]], 6),
            normalize_result(&[vec![Cell::Real(0.3)]], 6)
        );
        assert_ne!(
            normalize_result(&[vec![Cell::Real(0.3)]], 6),
            normalize_result(&[vec![Cell::Real(0.31)]], 6)
        );
    }

    #[test]
    fn groups_for_three_two() {
        let g = group_votes(&candidates(&["A", "B", "A", "B", "A"]));
        assert_eq!(distribution(&g), vec![3, 2]);
        assert_eq!(g[0].members, vec![0, 2, 4]);
        assert_eq!(g[1].members, vec![1, 3]);
    }

    #[test]
    fn unanimous_and_distinct_groups() {
        assert_eq!(distribution(&group_votes(&candidates(&["A"; 5]))), vec![5]);
        assert_eq!(distribution(&group_votes(&candidates(&["A", "B", "C", "D", "E"]))), vec![1; 5]);
    }

    #[test]
    fn error_classes_group_together() {
        let g = group_votes(&candidates(&["err:no such column: a", "A", "err:no such column: b", "err:syntax error"]));
        assert_eq!(distribution(&g), vec![2, 1, 1]);
        assert_eq!(g[0].key, GroupKey::Error("no such column".into()));
        assert_eq!(g[1].members, vec![1]);
    }

    #[test]
    fn policy_escalates_exactly_three_partitions_of_five() {
        let partitions = [
            vec![5],
            vec![4, 1],
            vec![3, 2],
            vec![3, 1, 1],
            vec![2, 2, 1],
            vec![2, 1, 1, 1],
            vec![1, 1, 1, 1, 1],
        ];
        let p = ConfidencePolicy::default();
        let escalated: Vec<_> = partitions
            .iter()
            .filter(|d| p.decide(d, 5).unwrap() == Decision::Escalate)
            .cloned()
            .collect();
        assert_eq!(escalated, vec![vec![3, 2], vec![2, 2, 1], vec![1, 1, 1, 1, 1]]);
    }

    #[test]
    fn policy_requires_rules_for_other_counts() {
        let p = ConfidencePolicy::default();
        assert!(matches!(p.decide(&[2, 1], 3), Err(SelectionError::MissingRule(3))));
        let p = p.with_rule(3, vec![vec![1, 1, 1]]).unwrap();
        assert_eq!(p.decide(&[1, 1, 1], 3).unwrap(), Decision::Escalate);
        assert_eq!(p.decide(&[2, 1], 3).unwrap(), Decision::AcceptTop);
        assert!(ConfidencePolicy::default().with_rule(3, vec![vec![1, 1]]).is_err());
    }

    #[test]
    fn verdict_parsing_is_strict() {
        for (reply, v) in [
            ("A", Verdict::A),
            (" B\n", Verdict::B),
            ("**A**", Verdict::A),
            ("B.", Verdict::B),
            ("Answer: A", Verdict::Unparsed),
            ("A or B", Verdict::Unparsed),
            ("", Verdict::Unparsed),
        ] {
            assert_eq!(parse_verdict(reply), v, "{reply:?}");
        }
    }

    #[test]
    fn tournament_call_counts() {
        for (m, calls) in [(2, 2), (3, 6), (4, 12), (5, 20)] {
            let judge = Favours("c0", Default::default());
            let t = pairwise_select(&finalists(m), &judge, 4);
            assert_eq!(t.calls, calls);
            assert_eq!(judge.1.load(Ordering::SeqCst), calls);
        }
    }

    #[test]
    fn first_listed_judge_splits_pair_and_votes_break_tie() {
        let mut f = finalists(2);
        f[1].votes = 2;
        let t = pairwise_select(&f, &FirstListed, 1);
        assert_eq!(t.wins, vec![1.0, 1.0]);
        assert_eq!(t.winner, 1);
        f[1].votes = 1;
        assert_eq!(pairwise_select(&f, &FirstListed, 1).winner, 0);
    }

    #[test]
    fn favourite_wins_with_four_of_six() {
        let t = pairwise_select(&finalists(3), &Favours("c1", Default::default()), 2);
        assert_eq!(t.winner, 1);
        assert_eq!(t.wins[1], 4.0);
        assert_eq!(t.wins.iter().sum::<f64>(), 6.0);
    }

    #[test]
    fn unparsed_replies_split_every_point() {
        let t = pairwise_select(&finalists(3), &Mute, 1);
        assert_eq!(t.wins, vec![2.0, 2.0, 2.0]);
        assert_eq!(t.winner, 0);
    }

    #[test]
    fn select_regular_vote_for_four_one() {
        let c = candidates(&["B", "A", "A", "A", "A"]);
        let judge = Favours("never", Default::default());
        let out = select(&c, &ConfidencePolicy::default(), &judge, 1).unwrap();
        assert_eq!(out.method, Method::RegularVote);
        assert_eq!(out.confidence, Confidence::High);
        assert_eq!(out.distribution, vec![4, 1]);
        assert_eq!(out.chosen_index, 1);
        assert_eq!(out.chosen_votes, 4);
        assert_eq!(out.pairwise_calls, 0);
        assert_eq!(judge.1.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn select_escalates_two_two_one() {
        // groups: {0,3} sig A, {1,4} sig B, {2} sig C; finalists 0, 1, 2
        let c = candidates(&["A", "B", "C", "A", "B"]);
        // judge favours candidate 2 (the singleton)
        let judge = Favours("-- 2", Default::default());
        let out = select(&c, &ConfidencePolicy::default(), &judge, 2).unwrap();
        assert_eq!(out.method, Method::PairwiseLLM);
        assert_eq!(out.confidence, Confidence::Low);
        assert_eq!(out.pairwise_calls, 6);
        // hand enumeration: (0,1)->0 (1,0)->1 (0,2)->2 (2,0)->2 (1,2)->2 (2,1)->2
        assert_eq!(out.tournament.as_ref().unwrap().wins, vec![1.0, 1.0, 4.0]);
        assert_eq!(out.chosen_index, 2);
    }

    #[test]
    fn all_error_pool_picks_lowest_index() {
        let c = candidates(&["err:x", "err:y", "err:x", "err:z", "err:y"]);
        let out = select(&c, &ConfidencePolicy::default(), &FirstListed, 1).unwrap();
        assert_eq!(out.chosen_index, 0);
        assert_eq!(out.confidence, Confidence::Low);
        assert_eq!(out.method, Method::PairwiseLLM);
        assert_eq!(out.pairwise_calls, 0);
    }

    #[test]
    fn ok_group_beats_larger_error_group() {
        let c = candidates(&["err:x", "err:x", "err:x", "A", "A"]);
        let out = select(&c, &ConfidencePolicy::default(), &FirstListed, 1).unwrap();
        assert_eq!(out.chosen_index, 3);
        assert_eq!(out.distribution, vec![3, 2]);
        // the only executable group wins outright, without judge calls
        assert_eq!(out.pairwise_calls, 0);
    }

    #[test]
    fn empty_pool_is_an_error() {
        assert!(matches!(
            select(&[], &ConfidencePolicy::default(), &FirstListed, 1),
            Err(SelectionError::Empty)
        ));
    }

    #[test]
    fn judge_prompt_shows_both_sides() {
        let gw = Gateway::new(Arc::new(crate::llm::ReplayBackend::default()), 1);
        let ledger = CostLedger::new();
        let judge = LlmJudge {
            gateway: &gw,
            ledger: &ledger,
            model: "m".into(),
            system_prompt: JUDGE_SYSTEM_PROMPT.into(),
            user_template: JUDGE_USER_TEMPLATE.into(),
            question: "How many users?".into(),
            hint: None,
            schema_text: "users(user_id)".into(),
        };
        let f = finalists(2);
        let msgs = judge.prompt(&f[0], &f[1]);
        let user = &msgs[1].content;
        assert!(user.contains("Question: How many users?\n\nCandidate A:"));
        assert!(user.find(&f[0].sql).unwrap() < user.find(&f[1].sql).unwrap());
        assert!(user.ends_with("Answer A or B."));
        // replay miss becomes a split point, and nothing is recorded
        assert_eq!(judge.compare(&f[0], &f[1]), Verdict::Unparsed);
        assert_eq!(ledger.snapshot().calls(), 0);
    }

    fn arb_cell() -> impl Strategy<Value = Cell> {
        prop_oneof![
            Just(Cell::Null),
            (-50i64..50).prop_map(Cell::Integer),
            (-50i64..50).prop_map(|i| Cell::Real(i as f64)),
            (-5000i64..5000).prop_map(|i| Cell::Real(i as f64 / 8.0)),
            "[a-c]{0,2}".prop_map(Cell::Text),
        ]
    }

    proptest! {
        #[test]
        fn groups_partition_candidates(sigs in proptest::collection::vec("[A-C]|err:[xy]", 1..8)) {
            let refs: Vec<&str> = sigs.iter().map(String::as_str).collect();
            let c = candidates(&refs);
            let g = group_votes(&c);
            prop_assert_eq!(g.iter().map(VoteGroup::count).sum::<usize>(), c.len());
            let mut all: Vec<usize> = g.iter().flat_map(|g| g.members.clone()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..c.len()).collect::<Vec<_>>());
            prop_assert!(g.windows(2).all(|w| (std::cmp::Reverse(w[0].count()), w[0].representative()) < (std::cmp::Reverse(w[1].count()), w[1].representative())));
        }

        #[test]
        fn signature_ignores_row_order(rows in proptest::collection::vec(proptest::collection::vec(arb_cell(), 2), 0..6), seed in any::<u64>()) {
            let mut shuffled = rows.clone();
            let n = shuffled.len();
            if n > 1 {
                shuffled.rotate_left((seed as usize) % n);
                shuffled.swap(0, n - 1);
            }
            prop_assert_eq!(normalize_result(&rows, 6), normalize_result(&shuffled, 6));
        }

        #[test]
        fn favourite_wins_every_presentation_order(m in 2usize..6, fav in 0usize..5, rot in 0usize..5) {
            let fav = fav % m;
            let mut f = finalists(m);
            f.rotate_left(rot % m);
            let tag = format!("c{fav} ");
            let judge = Favours(&tag, Default::default());
            let t = pairwise_select(&f, &judge, 3);
            prop_assert_eq!(f[t.winner].spec_index, fav);
            prop_assert_eq!(t.calls, m * (m - 1));
        }

        #[test]
        fn never_picks_error_group_when_ok_exists(sigs in proptest::collection::vec("[A-C]|err:[xy]", 5)) {
            let refs: Vec<&str> = sigs.iter().map(String::as_str).collect();
            let c = candidates(&refs);
            let out = select(&c, &ConfidencePolicy::default(), &FirstListed, 1).unwrap();
            let any_ok = c.iter().any(|c| c.execution.as_ref().unwrap().is_ok());
            let chosen_ok = c[out.chosen_index].execution.as_ref().unwrap().is_ok();
            prop_assert!(!any_ok || chosen_ok);
            prop_assert_eq!(out.method == Method::PairwiseLLM, out.confidence == Confidence::Low);
            if out.method == Method::RegularVote {
                prop_assert_eq!(out.pairwise_calls, 0);
            }
        }
    }
}
