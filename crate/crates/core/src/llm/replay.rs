//! Deterministic replay of recorded chat completions.
//!
//! Fixture files are line-delimited JSON, one [`FixtureEntry`] per line. The
//! key is the SHA-256 of the canonical JSON encoding of the model id and the
//! full message sequence, so any prompt drift turns into a replay miss.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChatBackend, ChatMessage, ChatRequest, ChatResponse, LlmError, Usage};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub key_hash: String,
    pub response_text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

pub fn fixture_key(request: &ChatRequest) -> String {
    #[derive(Serialize)]
    struct KeyMaterial<'a> {
        model: &'a str,
        messages: &'a [ChatMessage],
    }
    let material = serde_json::to_vec(&KeyMaterial {
        model: &request.model,
        messages: &request.messages,
    })
    .expect("key material serializes");
    hex::encode(Sha256::digest(&material))
}

#[derive(Debug, Default)]
pub struct ReplayBackend {
    entries: HashMap<String, FixtureEntry>,
}

impl ReplayBackend {
    pub fn from_entries(entries: impl IntoIterator<Item = FixtureEntry>) -> Self {
        Self {
            entries: entries.into_iter().map(|e| (e.key_hash.clone(), e)).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let file = std::fs::File::open(path).map_err(|e| LlmError::Fixture(format!("{}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| LlmError::Fixture(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: FixtureEntry = serde_json::from_str(&line)
                .map_err(|e| LlmError::Fixture(format!("{}:{}: {e}", path.display(), n + 1)))?;
            entries.push(entry);
        }
        Ok(Self::from_entries(entries))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let key = fixture_key(request);
        match self.entries.get(&key) {
            Some(e) => Ok(ChatResponse {
                text: e.response_text.clone(),
                usage: Usage {
                    input_tokens: e.input_tokens,
                    output_tokens: e.output_tokens,
                },
            }),
            None => Err(LlmError::ReplayMiss { key }),
        }
    }
}

/// Wraps a backend and captures every successful exchange as a fixture.
pub struct RecordingBackend {
    inner: Arc<dyn ChatBackend>,
    captured: Mutex<BTreeMap<String, FixtureEntry>>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn ChatBackend>) -> Self {
        Self {
            inner,
            captured: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn entries(&self) -> Vec<FixtureEntry> {
        self.captured
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .values()
            .cloned()
            .collect()
    }

    /// Writes captured entries sorted by key.
    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for entry in self.entries() {
            serde_json::to_writer(&mut out, &entry)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }
}

impl ChatBackend for RecordingBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let response = self.inner.complete(request)?;
        let key = fixture_key(request);
        self.captured.lock().unwrap_or_else(|e| e.into_inner()).insert(
            key.clone(),
            FixtureEntry {
                key_hash: key,
                response_text: response.text.clone(),
                input_tokens: response.usage.input_tokens,
                output_tokens: response.usage.output_tokens,
            },
        );
        Ok(response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::FnBackend;

    fn request(text: &str) -> ChatRequest {
        ChatRequest::new("gpt-4o", vec![ChatMessage::system("sys"), ChatMessage::user(text)])
    }

    #[test]
    fn replays_entry_verbatim() {
        let req = request("question");
        let backend = ReplayBackend::from_entries([FixtureEntry {
            key_hash: fixture_key(&req),
            response_text: "```sql\nSELECT 1\n```".into(),
            input_tokens: 120,
            output_tokens: 9,
        }]);
        let resp = backend.complete(&req).unwrap();
        assert_eq!(resp.text, "```sql\nSELECT 1\n```");
        assert_eq!(resp.usage.input_tokens, 120);
        assert_eq!(resp.usage.output_tokens, 9);
    }

    #[test]
    fn miss_names_the_key() {
        let backend = ReplayBackend::default();
        let req = request("other");
        match backend.complete(&req) {
            Err(LlmError::ReplayMiss { key }) => assert_eq!(key, fixture_key(&req)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn key_depends_on_model_and_every_message() {
        let a = request("q");
        let mut b = a.clone();
        b.model = "gpt-4o-mini".into();
        let mut c = a.clone();
        c.messages[0].content.push(' ');
        let mut d = a.clone();
        d.temperature = 0.7;
        assert_ne!(fixture_key(&a), fixture_key(&b));
        assert_ne!(fixture_key(&a), fixture_key(&c));
        assert_eq!(fixture_key(&a), fixture_key(&d));
    }

    #[test]
    fn recording_round_trips_through_file() {
        let inner = Arc::new(FnBackend(|r: &ChatRequest| {
            Ok(ChatResponse {
                text: format!("echo {}", r.messages.len()),
                usage: Usage {
                    input_tokens: 3,
                    output_tokens: 1,
                },
            })
        }));
        let rec = RecordingBackend::new(inner);
        let req = request("hello");
        let live = rec.complete(&req).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fx.jsonl");
        rec.write_jsonl(&path).unwrap();
        let replay = ReplayBackend::load(&path).unwrap();
        assert_eq!(replay.len(), 1);
        assert_eq!(replay.complete(&req).unwrap(), live);
    }
}
