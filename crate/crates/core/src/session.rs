//! Per-chat session persistence in a hash namespace `{chat_id}:SQLQueryEngine`.
//!
//! Fields inside the namespace:
//! - `<schemaKey>`: LLM-written schema description
//! - `<schemaKey>:rawDump`: the introspection dump it was built from (JSON)
//! - `history`: JSON array of `{role, content}` messages
//! - `validatorCounter`: last issued evaluation-transcript index
//! - `validatorChat:<n>`: evaluation transcripts

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::db::RawSchemaDump;
use crate::llm::ChatMessage;

pub const DEFAULT_SCHEMA_KEY: &str = "schemaDescription";
const HISTORY_FIELD: &str = "history";
const COUNTER_FIELD: &str = "validatorCounter";
const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
const IO_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("session store unreachable: {0}")]
    Unreachable(String),
    #[error("invalid session store argument: {0}")]
    InvalidArgument(String),
    #[error("corrupt session field {field}: {reason}")]
    Corrupt { field: String, reason: String },
}

/// Connection parameters for a Redis-protocol key-value store.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvParams {
    pub host: String,
    pub port: u16,
    #[serde(default)]
    pub password: String,
    #[serde(default)]
    pub db: i64,
}

impl fmt::Debug for KvParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KvParams")
            .field("host", &self.host)
            .field("port", &self.port)
            .field("password", &if self.password.is_empty() { "" } else { "<redacted>" })
            .field("db", &self.db)
            .finish()
    }
}

impl KvParams {
    pub fn new(host: impl Into<String>, port: u16) -> Self {
        Self { host: host.into(), port, password: String::new(), db: 0 }
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if self.host.trim().is_empty() {
            return Err(StoreError::InvalidArgument("kv host must not be empty".into()));
        }
        if self.port == 0 {
            return Err(StoreError::InvalidArgument("kv port must be in 1..=65535".into()));
        }
        if self.db < 0 {
            return Err(StoreError::InvalidArgument("kv db index must be >= 0".into()));
        }
        Ok(())
    }

    pub(crate) fn client(&self) -> Result<redis::Client, StoreError> {
        self.validate()?;
        let info = redis::ConnectionInfo {
            addr: redis::ConnectionAddr::Tcp(self.host.clone(), self.port),
            redis: redis::RedisConnectionInfo {
                db: self.db,
                username: None,
                password: (!self.password.is_empty()).then(|| self.password.clone()),
                protocol: redis::ProtocolVersion::RESP2,
            },
        };
        redis::Client::open(info).map_err(|e| StoreError::Unreachable(e.to_string()))
    }

    pub(crate) fn connect(&self) -> Result<redis::Connection, StoreError> {
        let con = self
            .client()?
            .get_connection_with_timeout(CONNECT_TIMEOUT)
            .map_err(|e| StoreError::Unreachable(format!("{}:{}: {e}", self.host, self.port)))?;
        con.set_read_timeout(Some(IO_TIMEOUT)).map_err(|e| StoreError::Unreachable(e.to_string()))?;
        con.set_write_timeout(Some(IO_TIMEOUT)).map_err(|e| StoreError::Unreachable(e.to_string()))?;
        Ok(con)
    }
}

/// Minimal hash operations the session layer needs.
pub trait HashStore: Send + Sync {
    fn hget(&self, key: &str, field: &str) -> Result<Option<String>, StoreError>;
    /// Sets all pairs in one round-trip.
    fn hset(&self, key: &str, pairs: &[(&str, &str)]) -> Result<(), StoreError>;
    /// Atomic increment; returns the new value.
    fn hincrby(&self, key: &str, field: &str, by: i64) -> Result<i64, StoreError>;
}

/// Operation counters, used to prove that a code path never touched the store.
#[derive(Debug, Default)]
pub struct StoreOpCounts {
    pub reads: AtomicUsize,
    pub writes: AtomicUsize,
}

impl StoreOpCounts {
    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::SeqCst)
    }

    pub fn writes(&self) -> usize {
        self.writes.load(Ordering::SeqCst)
    }
}

#[derive(Default)]
pub struct MemoryHashStore {
    data: Mutex<HashMap<String, HashMap<String, String>>>,
    counts: Arc<StoreOpCounts>,
}

impl MemoryHashStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn counts(&self) -> Arc<StoreOpCounts> {
        self.counts.clone()
    }

    /// All fields under one key, for assertions.
    pub fn snapshot(&self, key: &str) -> HashMap<String, String> {
        self.data.lock().unwrap().get(key).cloned().unwrap_or_default()
    }
}

impl HashStore for MemoryHashStore {
    fn hget(&self, key: &str, field: &str) -> Result<Option<String>, StoreError> {
        self.counts.reads.fetch_add(1, Ordering::SeqCst);
        Ok(self.data.lock().unwrap().get(key).and_then(|h| h.get(field)).cloned())
    }

    fn hset(&self, key: &str, pairs: &[(&str, &str)]) -> Result<(), StoreError> {
        self.counts.writes.fetch_add(1, Ordering::SeqCst);
        let mut data = self.data.lock().unwrap();
        let hash = data.entry(key.to_string()).or_default();
        for (f, v) in pairs {
            hash.insert(f.to_string(), v.to_string());
        }
        Ok(())
    }

    fn hincrby(&self, key: &str, field: &str, by: i64) -> Result<i64, StoreError> {
        self.counts.writes.fetch_add(1, Ordering::SeqCst);
        let mut data = self.data.lock().unwrap();
        let slot = data.entry(key.to_string()).or_default().entry(field.to_string()).or_insert_with(|| "0".into());
        let current: i64 = slot.parse().map_err(|_| StoreError::Corrupt {
            field: field.to_string(),
            reason: format!("not an integer: {slot:?}"),
        })?;
        let next = current + by;
        *slot = next.to_string();
        Ok(next)
    }
}

/// Redis-backed store. Connects on first use and reconnects after a
/// transport error.
pub struct RedisHashStore {
    params: KvParams,
    con: Mutex<Option<redis::Connection>>,
}

impl RedisHashStore {
    pub fn new(params: KvParams) -> Result<Self, StoreError> {
        params.validate()?;
        Ok(Self { params, con: Mutex::new(None) })
    }

    fn with_con<T>(&self, f: impl FnOnce(&mut redis::Connection) -> redis::RedisResult<T>) -> Result<T, StoreError> {
        let mut guard = self.con.lock().unwrap();
        if guard.is_none() {
            *guard = Some(self.params.connect()?);
        }
        let result = f(guard.as_mut().unwrap());
        result.map_err(|e| {
            if e.is_io_error() || e.is_connection_dropped() || e.is_timeout() {
                *guard = None;
            }
            StoreError::Unreachable(e.to_string())
        })
    }
}

impl HashStore for RedisHashStore {
    fn hget(&self, key: &str, field: &str) -> Result<Option<String>, StoreError> {
        self.with_con(|c| redis::cmd("HGET").arg(key).arg(field).query(c))
    }

    fn hset(&self, key: &str, pairs: &[(&str, &str)]) -> Result<(), StoreError> {
        if pairs.is_empty() {
            return Ok(());
        }
        self.with_con(|c| {
            let mut cmd = redis::cmd("HSET");
            cmd.arg(key);
            for (f, v) in pairs {
                cmd.arg(*f).arg(*v);
            }
            cmd.query::<i64>(c).map(|_| ())
        })
    }

    fn hincrby(&self, key: &str, field: &str, by: i64) -> Result<i64, StoreError> {
        self.with_con(|c| redis::cmd("HINCRBY").arg(key).arg(field).arg(by).query(c))
    }
}

/// Cached schema context for one chat and schema key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredContext {
    pub description: String,
    pub raw_dump: Option<RawSchemaDump>,
    pub history: Vec<ChatMessage>,
}

#[derive(Clone)]
pub struct SessionStore {
    backend: Arc<dyn HashStore>,
}

pub fn namespace(chat_id: &str) -> String {
    format!("{chat_id}:SQLQueryEngine")
}

fn raw_dump_field(key: &str) -> String {
    format!("{key}:rawDump")
}

fn validator_field(index: i64) -> String {
    format!("validatorChat:{index}")
}

fn check_key(key: &str) -> Result<(), StoreError> {
    if key.is_empty() {
        return Err(StoreError::InvalidArgument("schema description key must not be empty".into()));
    }
    Ok(())
}

impl SessionStore {
    pub fn new(backend: Arc<dyn HashStore>) -> Self {
        Self { backend }
    }

    pub fn in_memory() -> (Self, Arc<MemoryHashStore>) {
        let mem = Arc::new(MemoryHashStore::new());
        (Self::new(mem.clone()), mem)
    }

    /// Absent when either the namespace or the description field is missing.
    pub fn load_context(&self, chat_id: &str, key: &str) -> Result<Option<StoredContext>, StoreError> {
        check_key(key)?;
        let ns = namespace(chat_id);
        let Some(description) = self.backend.hget(&ns, key)? else {
            return Ok(None);
        };
        let raw_field = raw_dump_field(key);
        let raw_dump = match self.backend.hget(&ns, &raw_field)? {
            Some(json) => Some(
                serde_json::from_str(&json)
                    .map_err(|e| StoreError::Corrupt { field: raw_field.clone(), reason: e.to_string() })?,
            ),
            None => None,
        };
        let history = self.load_history(chat_id)?;
        Ok(Some(StoredContext { description, raw_dump, history }))
    }

    /// Writes description, dump and history in a single round-trip; a later
    /// save at the same key wins.
    pub fn save_context(
        &self,
        chat_id: &str,
        key: &str,
        description: &str,
        raw_dump: Option<&RawSchemaDump>,
        history: &[ChatMessage],
    ) -> Result<(), StoreError> {
        check_key(key)?;
        if description.trim().is_empty() {
            return Err(StoreError::InvalidArgument("schema description must not be empty".into()));
        }
        let history_json = serde_json::to_string(history).expect("messages serialize");
        let raw_field = raw_dump_field(key);
        let raw_json = raw_dump.map(|d| serde_json::to_string(d).expect("dump serializes"));
        let mut pairs: Vec<(&str, &str)> = vec![(key, description), (HISTORY_FIELD, &history_json)];
        if let Some(raw) = &raw_json {
            pairs.push((&raw_field, raw));
        }
        self.backend.hset(&namespace(chat_id), &pairs)
    }

    pub fn load_history(&self, chat_id: &str) -> Result<Vec<ChatMessage>, StoreError> {
        match self.backend.hget(&namespace(chat_id), HISTORY_FIELD)? {
            Some(json) => serde_json::from_str(&json)
                .map_err(|e| StoreError::Corrupt { field: HISTORY_FIELD.into(), reason: e.to_string() }),
            None => Ok(Vec::new()),
        }
    }

    pub fn save_history(&self, chat_id: &str, history: &[ChatMessage]) -> Result<(), StoreError> {
        let json = serde_json::to_string(history).expect("messages serialize");
        self.backend.hset(&namespace(chat_id), &[(HISTORY_FIELD, &json)])
    }

    /// Read-modify-write; callers serialize requests per chat.
    pub fn append_history(&self, chat_id: &str, messages: &[ChatMessage]) -> Result<(), StoreError> {
        let mut history = self.load_history(chat_id)?;
        history.extend_from_slice(messages);
        self.save_history(chat_id, &history)
    }

    /// Strictly increasing per chat, starting at 1, via a store-side atomic
    /// increment.
    pub fn next_validator_index(&self, chat_id: &str) -> Result<i64, StoreError> {
        self.backend.hincrby(&namespace(chat_id), COUNTER_FIELD, 1)
    }

    pub fn save_validator_history(&self, chat_id: &str, index: i64, transcript: &str) -> Result<(), StoreError> {
        let ns = namespace(chat_id);
        let issued = match self.backend.hget(&ns, COUNTER_FIELD)? {
            Some(v) => v.parse::<i64>().unwrap_or(0),
            None => 0,
        };
        if index < 1 || index > issued {
            return Err(StoreError::InvalidArgument(format!(
                "validator index {index} was never issued for this chat (last issued {issued})"
            )));
        }
        self.backend.hset(&ns, &[(&validator_field(index), transcript)])
    }

    /// Issues the next index and stores `transcript` under it without reading
    /// the store back.
    pub fn record_validator_history(&self, chat_id: &str, transcript: &str) -> Result<i64, StoreError> {
        let index = self.next_validator_index(chat_id)?;
        self.backend.hset(&namespace(chat_id), &[(&validator_field(index), transcript)])?;
        Ok(index)
    }

    pub fn load_validator_history(&self, chat_id: &str, index: i64) -> Result<Option<String>, StoreError> {
        self.backend.hget(&namespace(chat_id), &validator_field(index))
    }
}
