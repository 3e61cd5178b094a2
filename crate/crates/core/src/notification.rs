//! Upstream-to-downstream event propagation.
//!
//! Events are written to the outbox atomically with the aggregate version
//! that emits them (see [`AggregateStore::apply`]). A publisher marks them
//! published and, when services own separate stores, copies them into each
//! subscribing service's inbox. Handling cycles then feed every live
//! aggregate the events it subscribes to.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use tokio::task::JoinHandle;

use crate::aggregate::{AggregateId, AggregateStore, EventSubscription, Version};
use crate::error::{Error, Result};
use crate::messaging::{LatencySampler, LatencySpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainEvent {
    pub event_id: u64,
    pub event_type: String,
    pub publisher_aggregate_id: AggregateId,
    pub publisher_version: Version,
    pub payload: serde_json::Value,
    pub published: bool,
}

impl DomainEvent {
    /// An event not yet stored; the store assigns its id.
    pub fn new(
        event_type: impl Into<String>,
        publisher_aggregate_id: AggregateId,
        publisher_version: Version,
        payload: serde_json::Value,
    ) -> Self {
        DomainEvent {
            event_id: 0,
            event_type: event_type.into(),
            publisher_aggregate_id,
            publisher_version,
            payload,
            published: false,
        }
    }
}

/// Events matching any subscription on type, sender and
/// `publisher_version > sender_last_version`, ordered by publisher version.
pub fn filter_subscribed(events: &[DomainEvent], subs: &[EventSubscription]) -> Vec<DomainEvent> {
    let mut out: Vec<DomainEvent> = events
        .iter()
        .filter(|e| {
            subs.iter().any(|s| {
                e.event_type == s.event_type
                    && e.publisher_aggregate_id == s.sender_aggregate_id
                    && e.publisher_version > s.sender_last_version
            })
        })
        .cloned()
        .collect();
    out.sort_by_key(|e| (e.publisher_version, e.event_id));
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventTopology {
    /// One event store read directly by every service.
    #[default]
    Shared,
    /// One store per service; the publisher copies events to subscribers.
    PerService,
}

#[async_trait]
pub trait EventHandler: Send + Sync {
    async fn handle_event(&self, subscriber: AggregateId, event: &DomainEvent) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandlingFailure {
    pub subscriber: AggregateId,
    pub event_id: u64,
    pub event_type: String,
    pub error: Error,
}

type LedgerKey = (AggregateId, String, AggregateId);

pub struct NotificationService {
    store: Arc<AggregateStore>,
    topology: EventTopology,
    delivery: LatencySampler,
    inboxes: RwLock<HashMap<String, (Vec<DomainEvent>, HashSet<u64>)>>,
    routes: RwLock<HashMap<String, BTreeSet<String>>>,
    handlers: RwLock<HashMap<(String, String), Arc<dyn EventHandler>>>,
    ledger: Mutex<HashMap<LedgerKey, Version>>,
    failures: Mutex<Vec<HandlingFailure>>,
}

impl NotificationService {
    pub fn new(store: Arc<AggregateStore>, topology: EventTopology, delivery: LatencySpec, seed: u64) -> Result<Self> {
        Ok(NotificationService {
            store,
            topology,
            delivery: LatencySampler::new(delivery, seed)?,
            inboxes: RwLock::new(HashMap::new()),
            routes: RwLock::new(HashMap::new()),
            handlers: RwLock::new(HashMap::new()),
            ledger: Mutex::new(HashMap::new()),
            failures: Mutex::new(Vec::new()),
        })
    }

    pub fn shared(store: Arc<AggregateStore>) -> Self {
        Self::new(store, EventTopology::Shared, LatencySpec::default(), 0).expect("zero latency is valid")
    }

    pub fn topology(&self) -> EventTopology {
        self.topology
    }

    /// Routes `event_type` to aggregates of `subscriber_type` and installs the
    /// handler that reacts to it.
    pub fn register_event_handler(&self, subscriber_type: &str, event_type: &str, handler: Arc<dyn EventHandler>) {
        self.routes.write().entry(event_type.to_string()).or_default().insert(subscriber_type.to_string());
        self.handlers.write().insert((subscriber_type.to_string(), event_type.to_string()), handler);
    }

    /// Marks every unpublished outbox event as published and delivers it to
    /// subscribing services. Returns how many events were published.
    pub async fn publish_pending(&self) -> usize {
        let events = self.store.take_unpublished();
        if events.is_empty() || self.topology == EventTopology::Shared {
            return events.len();
        }
        self.delivery.wait().await;
        let routes = self.routes.read().clone();
        let mut inboxes = self.inboxes.write();
        for ev in &events {
            for subscriber in routes.get(&ev.event_type).into_iter().flatten() {
                let (log, seen) = inboxes.entry(subscriber.clone()).or_default();
                if seen.insert(ev.event_id) {
                    log.push(ev.clone());
                }
            }
        }
        events.len()
    }

    /// Events visible to `subscriber_type` that match `subs`.
    pub fn get_subscribed_events(&self, subscriber_type: &str, subs: &[EventSubscription]) -> Vec<DomainEvent> {
        if subs.is_empty() {
            return Vec::new();
        }
        match self.topology {
            EventTopology::Shared => {
                let published: Vec<_> = self.store.events().into_iter().filter(|e| e.published).collect();
                filter_subscribed(&published, subs)
            }
            EventTopology::PerService => {
                let inboxes = self.inboxes.read();
                inboxes.get(subscriber_type).map(|(log, _)| filter_subscribed(log, subs)).unwrap_or_default()
            }
        }
    }

    /// Events held in a subscriber's inbox (always empty in the shared topology).
    pub fn inbox(&self, subscriber_type: &str) -> Vec<DomainEvent> {
        self.inboxes.read().get(subscriber_type).map(|(log, _)| log.clone()).unwrap_or_default()
    }

    /// Highest publisher version of `sender` processed by `subscriber` for `event_type`.
    pub fn last_processed(&self, subscriber: AggregateId, event_type: &str, sender: AggregateId) -> Version {
        self.ledger.lock().get(&(subscriber, event_type.to_string(), sender)).copied().unwrap_or(0)
    }

    pub fn subscriptions_of(&self, subscriber: AggregateId, declared: &[(String, AggregateId)]) -> Vec<EventSubscription> {
        let ledger = self.ledger.lock();
        declared
            .iter()
            .map(|(event_type, sender)| EventSubscription {
                event_type: event_type.clone(),
                sender_aggregate_id: *sender,
                sender_last_version: ledger.get(&(subscriber, event_type.clone(), *sender)).copied().unwrap_or(0),
            })
            .collect()
    }

    pub fn failures(&self) -> Vec<HandlingFailure> {
        self.failures.lock().clone()
    }

    /// Feeds every live aggregate of `aggregate_type` its pending events.
    /// A failing event stops that aggregate's processing for this cycle and
    /// is retried next cycle. Returns the number of events handled.
    pub async fn run_event_handling_cycle(&self, aggregate_type: &str) -> usize {
        let mut processed = 0;
        for rec in self.store.list_live(aggregate_type) {
            let subscriber = rec.aggregate_id;
            let subs = self.subscriptions_of(subscriber, &rec.subscriptions());
            for ev in self.get_subscribed_events(aggregate_type, &subs) {
                let handler = self.handlers.read().get(&(aggregate_type.to_string(), ev.event_type.clone())).cloned();
                let outcome = match handler {
                    Some(h) => h.handle_event(subscriber, &ev).await,
                    None => Err(Error::InvalidConfig(format!("no handler for {} on {aggregate_type}", ev.event_type))),
                };
                match outcome {
                    Ok(()) => {
                        let key = (subscriber, ev.event_type.clone(), ev.publisher_aggregate_id);
                        let mut ledger = self.ledger.lock();
                        let last = ledger.entry(key).or_insert(0);
                        *last = (*last).max(ev.publisher_version);
                        processed += 1;
                    }
                    Err(error) => {
                        tracing::debug!(subscriber, event = ev.event_id, %error, "event handling failed");
                        self.failures.lock().push(HandlingFailure {
                            subscriber,
                            event_id: ev.event_id,
                            event_type: ev.event_type.clone(),
                            error,
                        });
                        break;
                    }
                }
            }
        }
        processed
    }
}

/// Background publisher and handling loops. Dropping it stops them.
pub struct EventScheduler {
    tasks: Vec<JoinHandle<()>>,
}

impl EventScheduler {
    pub fn spawn(
        notification: Arc<NotificationService>,
        aggregate_types: Vec<String>,
        publish_interval: Duration,
        handle_interval: Duration,
    ) -> Self {
        let publisher = {
            let n = notification.clone();
            tokio::spawn(async move {
                let mut tick = tokio::time::interval(publish_interval);
                loop {
                    tick.tick().await;
                    n.publish_pending().await;
                }
            })
        };
        let handler = tokio::spawn(async move {
            let mut tick = tokio::time::interval(handle_interval);
            loop {
                tick.tick().await;
                for t in &aggregate_types {
                    notification.run_event_handling_cycle(t).await;
                }
            }
        });
        EventScheduler { tasks: vec![publisher, handler] }
    }
}

impl Drop for EventScheduler {
    fn drop(&mut self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::{Aggregate, AggregateVersionRecord, WriteBatch};
    use proptest::prelude::*;
    use serde_json::json;

    #[derive(Debug, Clone, Serialize, Deserialize)]
    struct Listener {
        sender: AggregateId,
    }

    impl Aggregate for Listener {
        const TYPE: &'static str = "Listener";
        fn verify_invariants(&self) -> Result<()> {
            Ok(())
        }
        fn event_subscriptions(&self, _: AggregateId) -> Vec<(String, AggregateId)> {
            vec![("Ping".into(), self.sender)]
        }
    }

    #[derive(Default)]
    struct Recorder {
        seen: Mutex<Vec<u64>>,
        fail_first: Mutex<bool>,
    }

    #[async_trait]
    impl EventHandler for Recorder {
        async fn handle_event(&self, _: AggregateId, ev: &DomainEvent) -> Result<()> {
            let mut fail = self.fail_first.lock();
            if *fail {
                *fail = false;
                return Err(Error::infra("TransientFailure", "first delivery"));
            }
            self.seen.lock().push(ev.event_id);
            Ok(())
        }
    }

    fn ev(t: &str, sender: AggregateId, v: Version) -> DomainEvent {
        DomainEvent::new(t, sender, v, json!(null))
    }

    fn seed(store: &AggregateStore) {
        let mut listener = AggregateVersionRecord::new(1, Box::new(Listener { sender: 7 }));
        listener.version = 1;
        store
            .apply(WriteBatch {
                records: vec![listener],
                events: vec![ev("Ping", 7, 2), ev("Ping", 7, 5), ev("Pong", 7, 6), ev("Ping", 8, 3)],
                ..Default::default()
            })
            .unwrap();
    }

    #[test]
    fn filter_is_strictly_newer() {
        let events = vec![ev("UpdateStudentName", 7, 5)];
        let sub = |last| vec![EventSubscription { event_type: "UpdateStudentName".into(), sender_aggregate_id: 7, sender_last_version: last }];
        assert_eq!(filter_subscribed(&events, &sub(3)).len(), 1);
        assert!(filter_subscribed(&events, &sub(5)).is_empty());
        assert!(filter_subscribed(&events, &[]).is_empty());
    }

    #[tokio::test(start_paused = true)]
    async fn shared_cycle_handles_and_advances_ledger() {
        let store = Arc::new(AggregateStore::new());
        seed(&store);
        let n = NotificationService::shared(store.clone());
        let rec = Arc::new(Recorder::default());
        n.register_event_handler("Listener", "Ping", rec.clone());
        assert_eq!(n.run_event_handling_cycle("Listener").await, 0, "unpublished events are invisible");
        assert_eq!(n.publish_pending().await, 4);
        assert_eq!(n.publish_pending().await, 0);
        assert_eq!(n.run_event_handling_cycle("Listener").await, 2);
        assert_eq!(n.last_processed(1, "Ping", 7), 5);
        assert_eq!(n.run_event_handling_cycle("Listener").await, 0);
    }

    #[tokio::test(start_paused = true)]
    async fn per_service_copies_only_subscribed_types() {
        let store = Arc::new(AggregateStore::new());
        seed(&store);
        let n = NotificationService::new(store, EventTopology::PerService, LatencySpec::fixed_ms(3.0), 0).unwrap();
        n.register_event_handler("Listener", "Ping", Arc::new(Recorder::default()));
        n.register_event_handler("Other", "Pong", Arc::new(Recorder::default()));
        let start = tokio::time::Instant::now();
        assert_eq!(n.publish_pending().await, 4);
        assert!(start.elapsed() >= Duration::from_millis(3));
        assert!(n.inbox("Listener").iter().all(|e| e.event_type == "Ping"));
        assert_eq!(n.inbox("Listener").len(), 3);
        assert_eq!(n.inbox("Other").len(), 1);
    }

    #[tokio::test(start_paused = true)]
    async fn failed_event_is_retried_next_cycle() {
        let store = Arc::new(AggregateStore::new());
        seed(&store);
        let n = NotificationService::shared(store);
        let rec = Arc::new(Recorder { fail_first: Mutex::new(true), ..Default::default() });
        n.register_event_handler("Listener", "Ping", rec.clone());
        n.publish_pending().await;
        assert_eq!(n.run_event_handling_cycle("Listener").await, 0);
        assert_eq!(n.last_processed(1, "Ping", 7), 0);
        assert_eq!(n.failures().len(), 1);
        assert_eq!(n.run_event_handling_cycle("Listener").await, 2);
        assert_eq!(*rec.seen.lock(), vec![1, 2]);
    }

    fn arb_event() -> impl Strategy<Value = DomainEvent> {
        (0..3usize, 1u64..4, 0u64..20, any::<u32>()).prop_map(|(t, sender, v, id)| {
            let mut e = DomainEvent::new(["A", "B", "C"][t], sender, v, json!(null));
            e.event_id = id as u64;
            e
        })
    }

    fn arb_sub() -> impl Strategy<Value = EventSubscription> {
        (0..3usize, 1u64..4, 0u64..20).prop_map(|(t, sender, last)| EventSubscription {
            event_type: ["A", "B", "C"][t].into(),
            sender_aggregate_id: sender,
            sender_last_version: last,
        })
    }

    proptest! {
        #[test]
        fn filter_matches_brute_force(events in prop::collection::vec(arb_event(), 0..40), subs in prop::collection::vec(arb_sub(), 0..5)) {
            let got = filter_subscribed(&events, &subs);
            let mut expected = Vec::new();
            for e in &events {
                let mut hit = false;
                for s in &subs {
                    if e.event_type == s.event_type && e.publisher_aggregate_id == s.sender_aggregate_id && e.publisher_version > s.sender_last_version {
                        hit = true;
                    }
                }
                if hit { expected.push(e.clone()); }
            }
            prop_assert_eq!(got.len(), expected.len());
            for e in &expected { prop_assert!(got.contains(e)); }
            prop_assert!(got.windows(2).all(|w| w[0].publisher_version <= w[1].publisher_version));
        }
    }
}
