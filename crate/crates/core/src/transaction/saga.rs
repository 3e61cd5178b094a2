//! Saga units of work: immediate persistence, semantic locks, compensations.
//!
//! A lock whose acquire state is also forbidden is exclusive. Contenders for
//! an exclusive lock wait in a fair per-aggregate queue for up to the
//! configured lock wait before failing with a retryable conflict.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use tokio::sync::OwnedMutexGuard;

use super::{
    Compensation, LockRecord, PendingEvent, TransactionModel, UnitOfWorkService, UowHandle, UowId, UowRegistry, UowStatus,
};
use crate::aggregate::{AggregateId, AggregateStore, AggregateVersionRecord, SagaState, Version, WriteBatch};
use crate::error::{Error, Result};
use crate::versioning::VersionService;

/// What to do when a compensation fails during abort.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum CompensationPolicy {
    /// Record the failure and keep running the remaining compensations.
    #[default]
    Continue,
    /// Record the failure and skip the remaining compensations.
    Halt,
}

pub struct SagaUnitOfWorkService {
    store: Arc<AggregateStore>,
    versions: Arc<dyn VersionService>,
    registry: UowRegistry,
    policy: CompensationPolicy,
    lock_wait: Duration,
    queues: Mutex<HashMap<AggregateId, Arc<tokio::sync::Mutex<()>>>>,
    held: Mutex<HashMap<UowId, Vec<OwnedMutexGuard<()>>>>,
}

impl SagaUnitOfWorkService {
    pub fn new(store: Arc<AggregateStore>, versions: Arc<dyn VersionService>) -> Self {
        SagaUnitOfWorkService {
            store,
            versions,
            registry: UowRegistry::default(),
            policy: CompensationPolicy::default(),
            lock_wait: Duration::ZERO,
            queues: Mutex::default(),
            held: Mutex::default(),
        }
    }

    /// How long a contender queues for an exclusive lock. Zero fails at once.
    pub fn with_lock_wait(mut self, wait: Duration) -> Self {
        self.lock_wait = wait;
        self
    }

    pub fn with_compensation_policy(mut self, policy: CompensationPolicy) -> Self {
        self.policy = policy;
        self
    }

    /// Moves `id` into `acquire` unless its current saga state is forbidden.
    /// Re-entrant for a unit that already holds the aggregate.
    pub async fn acquire_lock(
        &self,
        uow: &UowHandle,
        id: AggregateId,
        forbidden: &[SagaState],
        acquire: &SagaState,
    ) -> Result<()> {
        {
            let u = uow.lock();
            u.ensure_open()?;
            if u.holds_lock(id) {
                return Ok(());
            }
        }
        let turn = if forbidden.contains(acquire) { Some(self.queue_for(id).await?) } else { None };
        self.store.charge().await;
        let (previous_state, previous_version) = self.store.swap_saga_state(id, forbidden, acquire)?;
        let mut u = uow.lock();
        u.locks.push(LockRecord { aggregate_id: id, previous_state, previous_version });
        if let Some(turn) = turn {
            self.held.lock().entry(u.id).or_default().push(turn);
        }
        Ok(())
    }

    /// Takes this aggregate's turn, waiting behind earlier contenders.
    async fn queue_for(&self, id: AggregateId) -> Result<OwnedMutexGuard<()>> {
        let queue = self.queues.lock().entry(id).or_default().clone();
        let conflict = || Error::infra("SemanticLockConflict", format!("aggregate {id} is locked by another saga"));
        match queue.clone().try_lock_owned() {
            Ok(turn) => Ok(turn),
            Err(_) if self.lock_wait.is_zero() => Err(conflict()),
            Err(_) => tokio::time::timeout(self.lock_wait, queue.lock_owned()).await.map_err(|_| conflict()),
        }
    }

    /// Writes one version with its events, as a compare-and-set against `expect`.
    async fn write(
        &self,
        mut record: AggregateVersionRecord,
        events: Vec<PendingEvent>,
        expect: Option<Version>,
    ) -> Result<AggregateVersionRecord> {
        let version = self.versions.increment_and_get().await?;
        record.version = version;
        let id = record.aggregate_id;
        let written = record.clone();
        self.store.charge().await;
        self.store.apply(WriteBatch {
            records: vec![record],
            events: events.iter().map(|e| e.at_version(version)).collect(),
            expect_latest: vec![(id, expect)],
        })?;
        Ok(written)
    }

    async fn release_locks(&self, uow: &UowHandle) -> Result<()> {
        let locks = std::mem::take(&mut uow.lock().locks);
        let mut result = Ok(());
        for lock in locks.iter().rev() {
            self.store.charge().await;
            match self.store.swap_saga_state(lock.aggregate_id, &[], &SagaState::not_in_saga()) {
                Ok(_) | Err(Error::AggregateDeleted(_)) | Err(Error::AggregateNotFound(_)) => {}
                Err(e) if result.is_ok() => result = Err(e),
                Err(_) => {}
            }
        }
        let id = uow.lock().id;
        self.held.lock().remove(&id);
        result
    }

    /// Writes events registered after their aggregate's last write.
    async fn flush_orphan_events(&self, uow: &UowHandle) -> Result<()> {
        let pending = std::mem::take(&mut uow.lock().pending_events);
        for ev in pending {
            let version = match uow.lock().changed.get(&ev.publisher_aggregate_id) {
                Some(r) => r.version,
                None => self.store.latest_committed(ev.publisher_aggregate_id)?.version,
            };
            let mut written = self.store.apply(WriteBatch { events: vec![ev.at_version(version)], ..Default::default() })?;
            let mut stored = ev.at_version(version);
            stored.event_id = written.pop().unwrap_or_default();
            uow.lock().emitted_events.push(stored);
        }
        Ok(())
    }

    pub fn versions(&self) -> &Arc<dyn VersionService> {
        &self.versions
    }
}

#[async_trait]
impl UnitOfWorkService for SagaUnitOfWorkService {
    fn model(&self) -> TransactionModel {
        TransactionModel::Saga
    }

    fn store(&self) -> &Arc<AggregateStore> {
        &self.store
    }

    fn registry(&self) -> &UowRegistry {
        &self.registry
    }

    async fn create_unit_of_work(&self, functionality: &str) -> Result<UowHandle> {
        Ok(self.registry.create(functionality, TransactionModel::Saga, 0))
    }

    async fn aggregate_load(&self, uow: &UowHandle, id: AggregateId) -> Result<AggregateVersionRecord> {
        uow.lock().ensure_open()?;
        self.store.charge().await;
        let latest = self.store.latest_committed(id)?;
        uow.lock().read_set.insert(id, latest.version);
        Ok(latest.working_copy())
    }

    async fn register_changed(&self, uow: &UowHandle, record: AggregateVersionRecord) -> Result<()> {
        record.verify_invariants()?;
        let id = record.aggregate_id;
        let events = {
            let mut u = uow.lock();
            u.ensure_open()?;
            let (mine, rest) = std::mem::take(&mut u.pending_events).into_iter().partition(|e| e.publisher_aggregate_id == id);
            u.pending_events = rest;
            mine
        };
        let expect = record.prev_version;
        let written = match self.write(record, events.clone(), expect).await {
            Ok(w) => w,
            Err(e) => {
                let mut u = uow.lock();
                u.pending_events.extend(events);
                return Err(e);
            }
        };
        let version = written.version;
        let mut u = uow.lock();
        u.emitted_events.extend(events.iter().map(|e| e.at_version(version)));
        u.changed.insert(id, written);
        Ok(())
    }

    async fn register_event(&self, uow: &UowHandle, event: PendingEvent) -> Result<()> {
        let mut u = uow.lock();
        u.ensure_open()?;
        u.pending_events.push(event);
        Ok(())
    }

    fn register_compensation(&self, uow: &UowHandle, compensation: Compensation) {
        uow.lock().compensations.push(compensation);
    }

    async fn commit(&self, uow: &UowHandle) -> Result<()> {
        uow.lock().ensure_open()?;
        self.flush_orphan_events(uow).await?;
        self.release_locks(uow).await?;
        let id = {
            let mut u = uow.lock();
            u.compensations.clear();
            u.status = UowStatus::Committed;
            u.id
        };
        self.registry.retire(id);
        Ok(())
    }

    async fn abort(&self, uow: &UowHandle) -> Result<()> {
        let compensations = {
            let mut u = uow.lock();
            u.ensure_open()?;
            u.status = UowStatus::Aborting;
            u.pending_events.clear();
            std::mem::take(&mut u.compensations)
        };
        for comp in compensations.iter().rev() {
            if let Err(e) = (comp.action)().await {
                tracing::warn!(compensation = %comp.name, error = %e, "compensation failed");
                uow.lock().compensation_failures.push((comp.name.clone(), e));
                if self.policy == CompensationPolicy::Halt {
                    break;
                }
            }
        }
        uow.lock().pending_events.clear();
        let released = self.release_locks(uow).await;
        let id = {
            let mut u = uow.lock();
            u.status = UowStatus::Aborted;
            u.id
        };
        self.registry.retire(id);
        released
    }
}
