//! Framed progress events over per-chat pub/sub channels.
//!
//! Wire format: `</{component}:{event}><|-/|-/>{content}`. Publishing is best
//! effort: a failed publish is logged and never aborts a pipeline.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::session::{KvParams, StoreError};

pub const DELIMITER: &str = "<|-/|-/>";
pub const DEFAULT_DRAIN_IDLE: Duration = Duration::from_millis(500);

pub const GENERATOR: &str = "SQLQueryGenerator";
pub const EVALUATOR: &str = "SQLQueryEvaluator";
pub const SCHEMA_DESCRIPTION_CHAT: &str = "schemaDescriptionChat";
pub const QUERY_GENERATION: &str = "queryGeneration";
pub const FINAL_RESULT: &str = "finalResult";

pub fn query_execution_tag(i: usize) -> String {
    format!("QueryExecution#{i}")
}

pub fn query_fix_tag(i: usize) -> String {
    format!("QueryFixAttempt#{i}")
}

/// Secondary channel carrying every SSE-bound content chunk.
pub fn stream_channel(chat_id: &str) -> String {
    format!("{chat_id}:stream")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgressEvent {
    pub component: String,
    pub event: String,
    pub content: String,
}

impl ProgressEvent {
    pub fn new(component: impl Into<String>, event: impl Into<String>, content: impl Into<String>) -> Self {
        Self { component: component.into(), event: event.into(), content: content.into() }
    }
}

#[derive(Debug, Error)]
pub enum BusError {
    #[error("invalid event tag {component:?}:{event:?}")]
    InvalidTag { component: String, event: String },
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("event bus unreachable: {0}")]
    Unreachable(String),
}

impl From<StoreError> for BusError {
    fn from(e: StoreError) -> Self {
        BusError::Unreachable(e.to_string())
    }
}

pub fn frame(e: &ProgressEvent) -> Result<String, BusError> {
    if e.component.contains(['>', ':']) || e.event.contains('>') {
        return Err(BusError::InvalidTag { component: e.component.clone(), event: e.event.clone() });
    }
    Ok(format!("</{}:{}>{DELIMITER}{}", e.component, e.event, e.content))
}

/// Inverse of [`frame`]. Tags never contain `>`, so the tag ends at the
/// first `>` and the delimiter must follow it; content after that is taken
/// verbatim, delimiters included.
pub fn parse_frame(wire: &str) -> Result<ProgressEvent, BusError> {
    let malformed =
        |why: &str| BusError::MalformedFrame(format!("{why}: {:?}", wire.chars().take(80).collect::<String>()));
    let rest = wire.strip_prefix("</").ok_or_else(|| malformed("missing `</` prefix"))?;
    let close = rest.find('>').ok_or_else(|| malformed("tag not closed with `>`"))?;
    let content = rest[close + 1..].strip_prefix(DELIMITER).ok_or_else(|| malformed("missing delimiter"))?;
    let (component, event) = rest[..close].split_once(':').ok_or_else(|| malformed("tag has no `:`"))?;
    Ok(ProgressEvent::new(component, event, content))
}

/// Monotonic logical clock shared by subscriptions and publishes, so tests
/// can assert ordering without wall-clock races.
#[derive(Debug, Default)]
pub struct LogicalClock(AtomicU64);

impl LogicalClock {
    pub fn tick(&self) -> u64 {
        self.0.fetch_add(1, Ordering::SeqCst) + 1
    }
}

/// One received publish.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublishRecord {
    pub channel: String,
    pub at: u64,
    pub payload: String,
}

pub trait EventBus: Send + Sync {
    fn publish_raw(&self, channel: &str, payload: &str) -> Result<(), BusError>;
    /// Returns only after the subscription is live on the bus.
    fn subscribe(&self, channel: &str) -> Result<Subscription, BusError>;
}

/// Frames and publishes `e` on `chat_id`'s channel, logging instead of
/// failing.
pub fn publish(bus: &dyn EventBus, chat_id: &str, e: &ProgressEvent) {
    let result = frame(e).and_then(|wire| bus.publish_raw(chat_id, &wire));
    if let Err(err) = result {
        tracing::warn!(chat_id, component = %e.component, event = %e.event, "publish failed: {err}");
    }
}

/// Ordered stream of payloads from one channel. Dropping it unsubscribes.
pub struct Subscription {
    channel: String,
    registered_at: u64,
    rx: Receiver<String>,
    stop: Option<Arc<AtomicBool>>,
}

impl Subscription {
    pub fn channel(&self) -> &str {
        &self.channel
    }

    /// Logical time at which the subscription became live.
    pub fn registered_at(&self) -> u64 {
        self.registered_at
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Option<String> {
        self.rx.recv_timeout(timeout).ok()
    }

    /// Everything already queued plus whatever arrives until `idle_timeout`
    /// passes without a new message.
    pub fn drain(&self, idle_timeout: Duration) -> Vec<String> {
        let mut out = Vec::new();
        while let Some(m) = self.recv_timeout(idle_timeout) {
            out.push(m);
        }
        out
    }

    /// [`Subscription::drain`] with frames decoded; undecodable payloads are
    /// skipped.
    pub fn drain_events(&self, idle_timeout: Duration) -> Vec<ProgressEvent> {
        self.drain(idle_timeout).iter().filter_map(|w| parse_frame(w).ok()).collect()
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        if let Some(stop) = &self.stop {
            stop.store(true, Ordering::SeqCst);
        }
    }
}

/// In-process bus. Keeps a publish log for ordering assertions.
#[derive(Default)]
pub struct MemoryBus {
    clock: LogicalClock,
    subscribers: Mutex<HashMap<String, Vec<Sender<String>>>>,
    log: Mutex<Vec<PublishRecord>>,
}

impl MemoryBus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn publish_log(&self) -> Vec<PublishRecord> {
        self.log.lock().unwrap().clone()
    }

    pub fn published_on(&self, channel: &str) -> Vec<PublishRecord> {
        self.publish_log().into_iter().filter(|r| r.channel == channel).collect()
    }
}

impl EventBus for MemoryBus {
    fn publish_raw(&self, channel: &str, payload: &str) -> Result<(), BusError> {
        let mut subs = self.subscribers.lock().unwrap();
        let at = self.clock.tick();
        self.log.lock().unwrap().push(PublishRecord { channel: channel.into(), at, payload: payload.into() });
        if let Some(list) = subs.get_mut(channel) {
            list.retain(|tx| tx.send(payload.to_string()).is_ok());
        }
        Ok(())
    }

    fn subscribe(&self, channel: &str) -> Result<Subscription, BusError> {
        let (tx, rx) = mpsc::channel();
        let mut subs = self.subscribers.lock().unwrap();
        subs.entry(channel.to_string()).or_default().push(tx);
        Ok(Subscription { channel: channel.into(), registered_at: self.clock.tick(), rx, stop: None })
    }
}

const PUBSUB_POLL: Duration = Duration::from_millis(100);

/// Redis pub/sub bus. Each subscription owns a dedicated connection read by a
/// background thread.
pub struct RedisBus {
    params: KvParams,
    clock: Arc<LogicalClock>,
    publisher: Mutex<Option<redis::Connection>>,
}

impl RedisBus {
    pub fn new(params: KvParams) -> Result<Self, BusError> {
        params.validate()?;
        Ok(Self { params, clock: Arc::default(), publisher: Mutex::new(None) })
    }
}

impl EventBus for RedisBus {
    fn publish_raw(&self, channel: &str, payload: &str) -> Result<(), BusError> {
        let mut guard = self.publisher.lock().unwrap();
        if guard.is_none() {
            *guard = Some(self.params.connect()?);
        }
        self.clock.tick();
        let result: redis::RedisResult<i64> =
            redis::cmd("PUBLISH").arg(channel).arg(payload).query(guard.as_mut().unwrap());
        result.map(|_| ()).map_err(|e| {
            *guard = None;
            BusError::Unreachable(e.to_string())
        })
    }

    fn subscribe(&self, channel: &str) -> Result<Subscription, BusError> {
        let mut con = self.params.connect()?;
        let (tx, rx) = mpsc::channel();
        let (ready_tx, ready_rx) = mpsc::channel::<Result<(), String>>();
        let stop = Arc::new(AtomicBool::new(false));
        let stop_reader = stop.clone();
        let name = channel.to_string();
        thread::Builder::new()
            .name(format!("pubsub-{channel}"))
            .spawn(move || {
                let mut ps = con.as_pubsub();
                if let Err(e) = ps.subscribe(&name).and_then(|_| ps.set_read_timeout(Some(PUBSUB_POLL))) {
                    let _ = ready_tx.send(Err(e.to_string()));
                    return;
                }
                let _ = ready_tx.send(Ok(()));
                while !stop_reader.load(Ordering::SeqCst) {
                    match ps.get_message() {
                        Ok(msg) => {
                            let payload: String = msg.get_payload().unwrap_or_default();
                            if tx.send(payload).is_err() {
                                break;
                            }
                        }
                        Err(e) if e.is_timeout() => continue,
                        Err(e) => {
                            tracing::warn!(channel = %name, "pub/sub reader stopped: {e}");
                            break;
                        }
                    }
                }
            })
            .map_err(|e| BusError::Unreachable(e.to_string()))?;
        match ready_rx.recv() {
            Ok(Ok(())) => {}
            Ok(Err(e)) => return Err(BusError::Unreachable(e)),
            Err(_) => return Err(BusError::Unreachable("subscriber thread exited".into())),
        }
        Ok(Subscription { channel: channel.into(), registered_at: self.clock.tick(), rx, stop: Some(stop) })
    }
}
