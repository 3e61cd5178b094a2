//! In-memory version chains plus the transactional outbox.
//!
//! All writes go through [`AggregateStore::apply`], which stages a whole
//! batch of records and events and installs it in one step. A crash hook can
//! abort the batch at any intermediate point; nothing staged survives.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};

use super::{AggregateId, AggregateVersionRecord, LifecycleState, SagaState, Version};
use crate::error::{Error, Result};
use crate::notification::DomainEvent;

/// Places inside a commit where a simulated crash can be injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CrashPoint {
    /// A causal commit reserved its version number but wrote nothing yet.
    VersionReserved,
    /// The i-th record of a batch has been staged.
    RecordStaged(usize),
    /// The i-th event of a batch has been staged.
    EventStaged(usize),
    /// Everything is staged, nothing installed.
    BeforePublish,
}

impl std::fmt::Display for CrashPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CrashPoint::VersionReserved => write!(f, "version-reserved"),
            CrashPoint::RecordStaged(i) => write!(f, "record-staged-{i}"),
            CrashPoint::EventStaged(i) => write!(f, "event-staged-{i}"),
            CrashPoint::BeforePublish => write!(f, "before-publish"),
        }
    }
}

/// Records and events written atomically. `expect_latest` turns the write
/// into a compare-and-set on the listed aggregates' latest versions.
#[derive(Debug, Default)]
pub struct WriteBatch {
    pub records: Vec<AggregateVersionRecord>,
    pub events: Vec<DomainEvent>,
    pub expect_latest: Vec<(AggregateId, Option<Version>)>,
}

#[derive(Default)]
struct Inner {
    chains: BTreeMap<AggregateId, Vec<Arc<AggregateVersionRecord>>>,
    events: Vec<DomainEvent>,
    next_event_id: u64,
}

/// Simulated latency of one storage round trip. Shared between the store and
/// the centralized version counter, and adjustable while running.
#[derive(Debug, Clone, Default)]
pub struct StorageCost(Arc<AtomicU64>);

impl StorageCost {
    pub fn set(&self, cost: Duration) {
        self.0.store(cost.as_micros() as u64, Ordering::Relaxed);
    }

    pub fn get(&self) -> Duration {
        Duration::from_micros(self.0.load(Ordering::Relaxed))
    }

    pub async fn charge(&self) {
        let cost = self.get();
        if !cost.is_zero() {
            tokio::time::sleep(cost).await;
        }
    }
}

#[derive(Default)]
pub struct AggregateStore {
    inner: RwLock<Inner>,
    crash: Mutex<Option<CrashPoint>>,
    cost: StorageCost,
}

impl std::fmt::Debug for AggregateStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.read();
        f.debug_struct("AggregateStore")
            .field("aggregates", &inner.chains.len())
            .field("events", &inner.events.len())
            .finish()
    }
}

impl AggregateStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Cost of one storage round trip, paid by callers via [`charge`](Self::charge).
    pub fn cost(&self) -> &StorageCost {
        &self.cost
    }

    pub async fn charge(&self) {
        self.cost.charge().await
    }

    /// Arms a one-shot crash at `point` for the next commit that reaches it.
    pub fn arm_crash(&self, point: CrashPoint) {
        *self.crash.lock() = Some(point);
    }

    pub fn disarm_crash(&self) {
        *self.crash.lock() = None;
    }

    /// Fails with `SimulatedCrash` if `point` is armed, disarming it.
    pub fn crash_check(&self, point: CrashPoint) -> Result<()> {
        let mut armed = self.crash.lock();
        if *armed == Some(point) {
            *armed = None;
            return Err(Error::SimulatedCrash(point.to_string()));
        }
        Ok(())
    }

    /// Latest record regardless of lifecycle state.
    pub fn latest(&self, id: AggregateId) -> Option<Arc<AggregateVersionRecord>> {
        self.inner.read().chains.get(&id).and_then(|c| c.last().cloned())
    }

    pub fn latest_version(&self, id: AggregateId) -> Option<Version> {
        self.latest(id).map(|r| r.version)
    }

    /// The record with the highest version, unless it is a tombstone.
    pub fn latest_committed(&self, id: AggregateId) -> Result<Arc<AggregateVersionRecord>> {
        let rec = self.latest(id).ok_or(Error::AggregateNotFound(id))?;
        if rec.is_deleted() {
            return Err(Error::AggregateDeleted(id));
        }
        Ok(rec)
    }

    /// The record with the greatest version `<= snapshot`.
    pub fn version_at_or_below(&self, id: AggregateId, snapshot: Version) -> Result<Arc<AggregateVersionRecord>> {
        let inner = self.inner.read();
        let chain = inner.chains.get(&id).ok_or(Error::AggregateNotFound(id))?;
        let idx = chain.partition_point(|r| r.version <= snapshot);
        if idx == 0 {
            return Err(Error::AggregateNotInSnapshot { aggregate_id: id, snapshot });
        }
        let rec = chain[idx - 1].clone();
        if rec.is_deleted() {
            return Err(Error::AggregateDeleted(id));
        }
        Ok(rec)
    }

    pub fn get_version(&self, id: AggregateId, version: Version) -> Option<Arc<AggregateVersionRecord>> {
        let inner = self.inner.read();
        let chain = inner.chains.get(&id)?;
        chain.binary_search_by_key(&version, |r| r.version).ok().map(|i| chain[i].clone())
    }

    pub fn chain(&self, id: AggregateId) -> Vec<Arc<AggregateVersionRecord>> {
        self.inner.read().chains.get(&id).cloned().unwrap_or_default()
    }

    /// Latest record of every non-deleted aggregate of `aggregate_type`, by id.
    pub fn list_live(&self, aggregate_type: &str) -> Vec<Arc<AggregateVersionRecord>> {
        self.inner
            .read()
            .chains
            .values()
            .filter_map(|c| c.last())
            .filter(|r| r.aggregate_type == aggregate_type && !r.is_deleted())
            .cloned()
            .collect()
    }

    pub fn aggregate_ids(&self) -> Vec<AggregateId> {
        self.inner.read().chains.keys().copied().collect()
    }

    pub fn record_count(&self) -> usize {
        self.inner.read().chains.values().map(Vec::len).sum()
    }

    pub fn events(&self) -> Vec<DomainEvent> {
        self.inner.read().events.clone()
    }

    pub fn event_count(&self) -> usize {
        self.inner.read().events.len()
    }

    /// Marks every unpublished event as published and returns them, oldest first.
    pub fn take_unpublished(&self) -> Vec<DomainEvent> {
        let mut inner = self.inner.write();
        let mut taken = Vec::new();
        for ev in inner.events.iter_mut().filter(|e| !e.published) {
            ev.published = true;
            taken.push(ev.clone());
        }
        taken
    }

    /// Atomically installs a batch. Event ids are assigned here; the
    /// returned vector holds them in batch order.
    pub fn apply(&self, batch: WriteBatch) -> Result<Vec<u64>> {
        let mut inner = self.inner.write();

        for (id, expected) in &batch.expect_latest {
            let actual = inner.chains.get(id).and_then(|c| c.last()).map(|r| r.version);
            if actual != *expected {
                return Err(Error::infra(
                    "ConcurrentUpdate",
                    format!("aggregate {id}: expected latest {expected:?}, found {actual:?}"),
                ));
            }
        }

        let mut staged: Vec<Arc<AggregateVersionRecord>> = Vec::with_capacity(batch.records.len());
        for (i, rec) in batch.records.into_iter().enumerate() {
            validate_successor(inner.chains.get(&rec.aggregate_id).and_then(|c| c.last()), &rec)?;
            staged.push(Arc::new(rec));
            self.crash_check(CrashPoint::RecordStaged(i))?;
        }

        let mut events = Vec::with_capacity(batch.events.len());
        for (i, mut ev) in batch.events.into_iter().enumerate() {
            inner.next_event_id += 1;
            ev.event_id = inner.next_event_id;
            ev.published = false;
            events.push(ev);
            if let Err(e) = self.crash_check(CrashPoint::EventStaged(i)) {
                inner.next_event_id -= i as u64 + 1;
                return Err(e);
            }
        }
        if let Err(e) = self.crash_check(CrashPoint::BeforePublish) {
            inner.next_event_id -= events.len() as u64;
            return Err(e);
        }

        for rec in staged {
            inner.chains.entry(rec.aggregate_id).or_default().push(rec);
        }
        let ids = events.iter().map(|e| e.event_id).collect();
        inner.events.extend(events);
        Ok(ids)
    }

    /// Conditionally replaces the saga state of the latest version in place and
    /// returns the previous state with the version it was attached to.
    /// Semantic locks are flags on the current row, so no version is created.
    pub fn swap_saga_state(&self, id: AggregateId, forbidden: &[SagaState], state: &SagaState) -> Result<(SagaState, Version)> {
        let mut inner = self.inner.write();
        let latest = inner.chains.get_mut(&id).and_then(|c| c.last_mut()).ok_or(Error::AggregateNotFound(id))?;
        if latest.is_deleted() {
            return Err(Error::AggregateDeleted(id));
        }
        if forbidden.contains(&latest.saga_state) {
            return Err(Error::infra("SemanticLockConflict", format!("aggregate {id} is {}", latest.saga_state)));
        }
        let previous = latest.saga_state.clone();
        if previous != *state {
            let mut flipped = (**latest).clone();
            flipped.saga_state = state.clone();
            *latest = Arc::new(flipped);
        }
        Ok((previous, latest.version))
    }

    /// Full scan of the structural and domain invariants of every chain.
    pub fn audit(&self) -> Result<()> {
        let inner = self.inner.read();
        for (id, chain) in &inner.chains {
            for (i, rec) in chain.iter().enumerate() {
                if let Some(prev) = rec.prev_version {
                    if prev >= rec.version {
                        return Err(Error::invariant("ChainOrder", format!("aggregate {id} v{} <= prev {prev}", rec.version)));
                    }
                }
                if i > 0 && chain[i - 1].is_deleted() {
                    return Err(Error::invariant("TombstoneTerminal", format!("aggregate {id} has a successor after deletion")));
                }
                if i > 0 && chain[i - 1].version >= rec.version {
                    return Err(Error::invariant("ChainOrder", format!("aggregate {id} chain not increasing")));
                }
                rec.verify_invariants()?;
            }
        }
        Ok(())
    }
}

fn validate_successor(latest: Option<&Arc<AggregateVersionRecord>>, rec: &AggregateVersionRecord) -> Result<()> {
    if rec.version == 0 {
        return Err(Error::InvalidConfig(format!("aggregate {} written without a version", rec.aggregate_id)));
    }
    if let Some(prev) = rec.prev_version {
        if rec.version <= prev {
            return Err(Error::InvalidConfig(format!(
                "aggregate {} version {} not above predecessor {prev}",
                rec.aggregate_id, rec.version
            )));
        }
    }
    if let Some(latest) = latest {
        if latest.state == LifecycleState::Deleted {
            return Err(Error::AggregateDeleted(rec.aggregate_id));
        }
        if rec.version <= latest.version {
            return Err(Error::infra(
                "ConcurrentUpdate",
                format!("aggregate {} version {} not above latest {}", rec.aggregate_id, rec.version, latest.version),
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::tests::Counter;

    fn record(id: AggregateId, version: Version, prev: Option<Version>, value: i64) -> AggregateVersionRecord {
        let mut r = AggregateVersionRecord::new(id, Box::new(Counter { value }));
        r.version = version;
        r.prev_version = prev;
        r
    }

    fn write(store: &AggregateStore, rec: AggregateVersionRecord) {
        store.apply(WriteBatch { records: vec![rec], ..Default::default() }).unwrap();
    }

    #[test]
    fn saga_state_swaps_in_place() {
        let store = AggregateStore::new();
        write(&store, record(1, 3, None, 0));
        let busy = SagaState::new("BUSY");
        assert_eq!(store.swap_saga_state(1, &[busy.clone()], &busy).unwrap(), (SagaState::not_in_saga(), 3));
        let err = store.swap_saga_state(1, &[busy.clone()], &busy).unwrap_err();
        assert_eq!(err.name(), "SemanticLockConflict");
        assert_eq!(store.chain(1).len(), 1);
        assert_eq!(store.latest(1).unwrap().saga_state, busy);
        assert_eq!(store.latest(1).unwrap().payload_json(), record(1, 3, None, 0).payload_json());
        assert_eq!(store.swap_saga_state(9, &[], &busy).unwrap_err(), Error::AggregateNotFound(9));
    }

    #[test]
    fn latest_committed_returns_max_version() {
        let store = AggregateStore::new();
        write(&store, record(1, 3, None, 0));
        write(&store, record(1, 5, Some(3), 1));
        assert_eq!(store.latest_committed(1).unwrap().version, 5);
        assert_eq!(store.latest_committed(2).unwrap_err(), Error::AggregateNotFound(2));
    }

    #[test]
    fn deleted_tip_is_reported_and_terminal() {
        let store = AggregateStore::new();
        write(&store, record(1, 2, None, 0));
        write(&store, record(1, 4, Some(2), 0));
        let mut tomb = record(1, 7, Some(4), 0);
        tomb.state = LifecycleState::Deleted;
        write(&store, tomb);
        assert_eq!(store.latest_committed(1).unwrap_err(), Error::AggregateDeleted(1));
        let err = store.apply(WriteBatch { records: vec![record(1, 9, Some(7), 0)], ..Default::default() });
        assert_eq!(err.unwrap_err(), Error::AggregateDeleted(1));
        assert_eq!(store.chain(1).len(), 3);
    }

    #[test]
    fn snapshot_lookup_picks_greatest_at_or_below() {
        let store = AggregateStore::new();
        write(&store, record(1, 4, None, 4));
        write(&store, record(1, 9, Some(4), 9));
        write(&store, record(1, 12, Some(9), 12));
        assert_eq!(store.version_at_or_below(1, 10).unwrap().version, 9);
        assert_eq!(store.version_at_or_below(1, 12).unwrap().version, 12);
        assert!(matches!(store.version_at_or_below(1, 3), Err(Error::AggregateNotInSnapshot { .. })));
    }

    #[test]
    fn cas_rejects_stale_expectation() {
        let store = AggregateStore::new();
        write(&store, record(1, 1, None, 0));
        let batch = WriteBatch {
            records: vec![record(1, 2, Some(1), 1)],
            expect_latest: vec![(1, Some(0))],
            ..Default::default()
        };
        assert!(store.apply(batch).unwrap_err().is_retryable());
        assert_eq!(store.chain(1).len(), 1);
    }

    #[test]
    fn crash_leaves_nothing_behind() {
        let store = AggregateStore::new();
        for point in [CrashPoint::RecordStaged(0), CrashPoint::RecordStaged(1), CrashPoint::EventStaged(0), CrashPoint::BeforePublish] {
            store.arm_crash(point);
            let batch = WriteBatch {
                records: vec![record(1, 1, None, 0), record(2, 1, None, 0)],
                events: vec![DomainEvent::new("E", 1, 1, serde_json::json!({}))],
                ..Default::default()
            };
            assert!(matches!(store.apply(batch), Err(Error::SimulatedCrash(_))));
            assert_eq!(store.record_count(), 0);
            assert_eq!(store.event_count(), 0);
        }
    }

    #[test]
    fn take_unpublished_marks_once() {
        let store = AggregateStore::new();
        let batch = WriteBatch {
            records: vec![record(1, 1, None, 0)],
            events: vec![DomainEvent::new("E", 1, 1, serde_json::json!(1)), DomainEvent::new("E", 1, 1, serde_json::json!(2))],
            ..Default::default()
        };
        assert_eq!(store.apply(batch).unwrap(), vec![1, 2]);
        assert_eq!(store.take_unpublished().len(), 2);
        assert!(store.take_unpublished().is_empty());
    }
}
