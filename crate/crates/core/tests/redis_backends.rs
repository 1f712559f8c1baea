use std::sync::Arc;
use std::time::Duration;

use sqlqe_core::events::{self, frame, parse_frame, EventBus, ProgressEvent, RedisBus};
use sqlqe_core::llm::ChatMessage;
use sqlqe_core::session::{HashStore, KvParams, RedisHashStore, SessionStore, StoreError};
use sqlqe_core::testkit;

fn store() -> Option<SessionStore> {
    let r = testkit::redis()?;
    Some(SessionStore::new(Arc::new(RedisHashStore::new(r.params()).unwrap())))
}

fn chat(tag: &str) -> String {
    format!("{tag}-{}", uuid::Uuid::new_v4())
}

#[test]
fn context_round_trip() {
    let Some(store) = store() else { return };
    let id = chat("ctx");
    assert!(store.load_context(&id, "schemaDescription").unwrap().is_none());
    let history = vec![ChatMessage::user("how many?"), ChatMessage::assistant("{\"query\":\"SELECT 1\"}")];
    store.save_context(&id, "schemaDescription", "four tables", None, &history).unwrap();
    let ctx = store.load_context(&id, "schemaDescription").unwrap().unwrap();
    assert_eq!(ctx.description, "four tables");
    assert_eq!(ctx.history, history);
    assert!(store.load_context(&id, "otherKey").unwrap().is_none());

    store.append_history(&id, &[ChatMessage::user("and again")]).unwrap();
    assert_eq!(store.load_history(&id).unwrap().len(), 3);
}

#[test]
fn validator_counter_is_atomic_across_threads() {
    let Some(store) = store() else { return };
    let id = chat("ctr");
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let s = store.clone();
            let id = id.clone();
            std::thread::spawn(move || (0..25).map(|_| s.next_validator_index(&id).unwrap()).collect::<Vec<_>>())
        })
        .collect();
    let mut all: Vec<i64> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
    all.sort();
    assert_eq!(all, (1..=200).collect::<Vec<_>>());
    store.save_validator_history(&id, 17, "transcript").unwrap();
    assert_eq!(store.load_validator_history(&id, 17).unwrap().as_deref(), Some("transcript"));
    assert!(store.save_validator_history(&id, 999, "x").is_err());
}

#[test]
fn unreachable_store_is_reported() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let s = RedisHashStore::new(KvParams::new("127.0.0.1", port)).unwrap();
    assert!(matches!(s.hget("k", "f"), Err(StoreError::Unreachable(_))));
}

#[test]
fn bus_delivers_in_order() {
    let Some(r) = testkit::redis() else { return };
    let bus = RedisBus::new(r.params()).unwrap();
    let id = chat("bus");
    let sub = bus.subscribe(&id).unwrap();
    let sent: Vec<ProgressEvent> = (0..50)
        .map(|i| {
            ProgressEvent::new(events::EVALUATOR, events::query_execution_tag(i), format!("chunk {i}\nwith <|-/ noise"))
        })
        .collect();
    for e in &sent {
        events::publish(&bus, &id, e);
    }
    let got = sub.drain(Duration::from_millis(500));
    let parsed: Vec<ProgressEvent> = got.iter().map(|w| parse_frame(w).unwrap()).collect();
    assert_eq!(parsed, sent);
    assert_eq!(got[0], frame(&sent[0]).unwrap());
}

#[test]
fn unsubscribed_channels_are_isolated() {
    let Some(r) = testkit::redis() else { return };
    let bus = RedisBus::new(r.params()).unwrap();
    let (a, b) = (chat("a"), chat("b"));
    let sub_a = bus.subscribe(&a).unwrap();
    bus.publish_raw(&b, "for b").unwrap();
    bus.publish_raw(&a, "for a").unwrap();
    assert_eq!(sub_a.drain(Duration::from_millis(300)), vec!["for a".to_string()]);
}
