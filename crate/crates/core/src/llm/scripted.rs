use std::collections::VecDeque;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{ChatBackend, ChatMessage, LlmError};

/// One canned reply.
///
/// In JSON a plain string is a [`ScriptEntry::Text`]; `{"chunks": [...]}`
/// streams the given pieces (optionally breaking off afterwards with
/// `"interrupt": true`); `{"error": "..."}` fails the call as unreachable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptEntry {
    Text(String),
    Chunks {
        chunks: Vec<String>,
        #[serde(default)]
        interrupt: bool,
    },
    Fail {
        error: String,
    },
}

impl ScriptEntry {
    pub fn text(s: impl Into<String>) -> Self {
        ScriptEntry::Text(s.into())
    }

    pub fn chunks<S: Into<String>>(pieces: impl IntoIterator<Item = S>) -> Self {
        ScriptEntry::Chunks { chunks: pieces.into_iter().map(Into::into).collect(), interrupt: false }
    }

    pub fn fail(msg: impl Into<String>) -> Self {
        ScriptEntry::Fail { error: msg.into() }
    }
}

/// Responses for one benchmark question, selected when the question text
/// appears in the request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaybookScript {
    pub question: String,
    pub responses: Vec<ScriptEntry>,
}

/// File format behind `scripted:<path>` backends.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Playbook {
    /// Reply to any request that names no scripted question, which in
    /// practice means schema-description requests. Never exhausted.
    #[serde(default)]
    pub schema_description: Option<String>,
    #[serde(default)]
    pub scripts: Vec<PlaybookScript>,
}

impl Playbook {
    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::InvalidParams(format!("cannot read playbook {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| LlmError::InvalidParams(format!("invalid playbook {}: {e}", path.display())))
    }
}

enum Mode {
    Sequence(VecDeque<ScriptEntry>),
    Routed { playbook: Playbook, cursors: Vec<usize> },
}

struct State {
    mode: Mode,
    calls: usize,
    requests: Vec<Vec<ChatMessage>>,
}

/// Deterministic backend replaying canned responses.
///
/// A sequence playbook hands out one entry per call; calling past its end is
/// an error. A routed playbook keeps one cursor per question.
pub struct ScriptedLlm {
    state: Mutex<State>,
}

impl ScriptedLlm {
    pub fn new(entries: impl IntoIterator<Item = ScriptEntry>) -> Self {
        Self::with_mode(Mode::Sequence(entries.into_iter().collect()))
    }

    pub fn from_texts<S: Into<String>>(texts: impl IntoIterator<Item = S>) -> Self {
        Self::new(texts.into_iter().map(|t| ScriptEntry::Text(t.into())))
    }

    pub fn routed(playbook: Playbook) -> Self {
        let cursors = vec![0; playbook.scripts.len()];
        Self::with_mode(Mode::Routed { playbook, cursors })
    }

    fn with_mode(mode: Mode) -> Self {
        Self { state: Mutex::new(State { mode, calls: 0, requests: Vec::new() }) }
    }

    /// Appends an entry to a sequence playbook.
    pub fn push(&self, entry: ScriptEntry) {
        if let Mode::Sequence(q) = &mut self.state.lock().unwrap().mode {
            q.push_back(entry);
        }
    }

    pub fn calls(&self) -> usize {
        self.state.lock().unwrap().calls
    }

    /// Every request received so far, in order.
    pub fn requests(&self) -> Vec<Vec<ChatMessage>> {
        self.state.lock().unwrap().requests.clone()
    }

    fn next_entry(&self, messages: &[ChatMessage]) -> Result<ScriptEntry, LlmError> {
        if messages.is_empty() {
            return Err(LlmError::EmptyMessages);
        }
        let mut state = self.state.lock().unwrap();
        state.calls += 1;
        state.requests.push(messages.to_vec());
        let calls = state.calls;
        match &mut state.mode {
            Mode::Sequence(q) => q.pop_front().ok_or(LlmError::PlaybookExhausted { calls }),
            Mode::Routed { playbook, cursors } => {
                let matched = playbook
                    .scripts
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| messages.iter().any(|m| m.content.contains(&s.question)))
                    .max_by_key(|(_, s)| s.question.len())
                    .map(|(i, _)| i);
                match matched {
                    Some(i) => {
                        let entry = playbook.scripts[i].responses.get(cursors[i]).cloned();
                        cursors[i] += 1;
                        entry.ok_or(LlmError::PlaybookExhausted { calls })
                    }
                    None => playbook
                        .schema_description
                        .clone()
                        .map(ScriptEntry::Text)
                        .ok_or_else(|| LlmError::Protocol("no scripted question matches the request".into())),
                }
            }
        }
    }
}

impl ChatBackend for ScriptedLlm {
    fn chat(&self, messages: &[ChatMessage]) -> Result<String, LlmError> {
        match self.next_entry(messages)? {
            ScriptEntry::Text(t) => Ok(t),
            ScriptEntry::Chunks { chunks, interrupt: false } => Ok(chunks.concat()),
            ScriptEntry::Chunks { chunks, interrupt: true } => {
                Err(LlmError::Interrupted { partial: chunks.concat(), source_msg: "scripted disconnect".into() })
            }
            ScriptEntry::Fail { error } => Err(LlmError::Unreachable(error)),
        }
    }

    fn chat_stream(&self, messages: &[ChatMessage], on_chunk: &mut dyn FnMut(&str)) -> Result<String, LlmError> {
        let (pieces, interrupt): (Vec<String>, bool) = match self.next_entry(messages)? {
            ScriptEntry::Text(t) => (t.split_inclusive(char::is_whitespace).map(str::to_string).collect(), false),
            ScriptEntry::Chunks { chunks, interrupt } => (chunks, interrupt),
            ScriptEntry::Fail { error } => return Err(LlmError::Unreachable(error)),
        };
        let mut full = String::new();
        for p in pieces.iter().filter(|p| !p.is_empty()) {
            on_chunk(p);
            full.push_str(p);
        }
        if interrupt {
            return Err(LlmError::Interrupted { partial: full, source_msg: "scripted disconnect".into() });
        }
        Ok(full)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q() -> Vec<ChatMessage> {
        vec![ChatMessage::user("question")]
    }

    #[test]
    fn sequence_then_exhaustion() {
        let llm = ScriptedLlm::from_texts(["ok"]);
        assert_eq!(llm.chat(&q()).unwrap(), "ok");
        assert_eq!(llm.chat(&q()), Err(LlmError::PlaybookExhausted { calls: 2 }));
        assert_eq!(llm.calls(), 2);
    }

    #[test]
    fn stream_concatenates_chunks() {
        let llm = ScriptedLlm::new([ScriptEntry::chunks(["SEL", "ECT 1"]), ScriptEntry::chunks(Vec::<String>::new())]);
        let mut seen = Vec::new();
        let out = llm.chat_stream(&q(), &mut |c| seen.push(c.to_string())).unwrap();
        assert_eq!(seen, ["SEL", "ECT 1"]);
        assert_eq!(out, "SELECT 1");
        assert_eq!(llm.chat_stream(&q(), &mut |_| panic!("no chunks expected")).unwrap(), "");
    }

    #[test]
    fn stream_and_plain_agree() {
        let text = "The orders table\nholds one row per order.";
        let a = ScriptedLlm::from_texts([text]);
        let b = ScriptedLlm::from_texts([text]);
        let mut n = 0;
        let streamed = a.chat_stream(&q(), &mut |_| n += 1).unwrap();
        assert_eq!(streamed, b.chat(&q()).unwrap());
        assert!(n > 1);
    }

    #[test]
    fn interrupted_stream_reports_partial() {
        let llm = ScriptedLlm::new([ScriptEntry::Chunks { chunks: vec!["SEL".into()], interrupt: true }]);
        let mut seen = String::new();
        match llm.chat_stream(&q(), &mut |c| seen.push_str(c)) {
            Err(LlmError::Interrupted { partial, .. }) => assert_eq!(partial, "SEL"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(seen, "SEL");
    }

    #[test]
    fn routed_playbook_keeps_per_question_cursors() {
        let playbook: Playbook = serde_json::from_str(
            r#"{"schema_description":"desc","scripts":[
                {"question":"How many orders?","responses":["a1","a2"]},
                {"question":"How many orders were shipped?","responses":["b1"]}]}"#,
        )
        .unwrap();
        let llm = ScriptedLlm::routed(playbook);
        let ask = |s: &str| llm.chat(&[ChatMessage::system("sys"), ChatMessage::user(s)]);
        assert_eq!(ask("How many orders were shipped?").unwrap(), "b1");
        assert_eq!(ask("How many orders?").unwrap(), "a1");
        assert_eq!(ask("dump").unwrap(), "desc");
        assert_eq!(ask("How many orders?").unwrap(), "a2");
        assert!(matches!(ask("How many orders?"), Err(LlmError::PlaybookExhausted { .. })));
    }

    #[test]
    fn entry_json_shapes() {
        let entries: Vec<ScriptEntry> =
            serde_json::from_str(r#"["x", {"chunks":["a","b"]}, {"error":"down"}]"#).unwrap();
        assert_eq!(entries[0], ScriptEntry::text("x"));
        assert_eq!(entries[1], ScriptEntry::chunks(["a", "b"]));
        assert_eq!(entries[2], ScriptEntry::fail("down"));
    }
}
