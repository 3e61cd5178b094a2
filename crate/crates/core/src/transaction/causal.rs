//! Causal units of work: snapshot reads, private staging, merge on commit.
//!
//! Commit runs in rounds. Each round first merges, outside the commit lock,
//! every staged aggregate whose committed head moved since it was read. It
//! then takes the lock, checks that no head moved again, reserves a version
//! and installs the batch. A head that moved in between sends the commit
//! into another round after a backoff.

use std::sync::Arc;

use async_trait::async_trait;
use parking_lot::RwLock;

use super::{PendingEvent, TransactionModel, UnitOfWorkService, UowHandle, UowRegistry, UowStatus};
use crate::aggregate::{AggregateId, AggregateStore, AggregateVersionRecord, CrashPoint, Version, WriteBatch};
use crate::error::{Error, Result};
use crate::messaging::RetryPolicy;
use crate::versioning::VersionService;

pub struct CausalUnitOfWorkService {
    store: Arc<AggregateStore>,
    versions: Arc<dyn VersionService>,
    registry: UowRegistry,
    commit_lock: tokio::sync::Mutex<()>,
    rounds: RwLock<RetryPolicy>,
}

/// One staged aggregate during commit.
struct Staged {
    record: AggregateVersionRecord,
    /// Committed head the record currently builds on.
    base: Option<Version>,
    /// Payload at `base`, the common ancestor for the next merge.
    ancestor: Option<AggregateVersionRecord>,
}

impl CausalUnitOfWorkService {
    /// Fails unless `versions` issues a single, gap-free total order.
    pub fn new(store: Arc<AggregateStore>, versions: Arc<dyn VersionService>) -> Result<Self> {
        if !versions.strategy().is_centralized() {
            return Err(Error::IncompatibleVersioningStrategy);
        }
        Ok(CausalUnitOfWorkService {
            store,
            versions,
            registry: UowRegistry::default(),
            commit_lock: tokio::sync::Mutex::new(()),
            rounds: RwLock::new(RetryPolicy::default()),
        })
    }

    /// Bounds the number of validation rounds a commit may take.
    pub fn set_commit_policy(&self, policy: RetryPolicy) {
        *self.rounds.write() = policy;
    }

    pub fn versions(&self) -> &Arc<dyn VersionService> {
        &self.versions
    }

    /// Brings every stale staged record up to the committed head by merging.
    async fn catch_up(&self, staged: &mut [Staged]) -> Result<()> {
        for s in staged.iter_mut() {
            let id = s.record.aggregate_id;
            self.store.charge().await;
            let head = self.store.latest(id);
            let head_version = head.as_ref().map(|h| h.version);
            if head_version == s.base {
                continue;
            }
            let head = head.ok_or(Error::AggregateNotFound(id))?;
            if head.is_deleted() {
                return Err(Error::AggregateDeleted(id));
            }
            let Some(ancestor) = s.ancestor.as_ref() else {
                return Err(Error::infra("ConcurrentUpdate", format!("aggregate {id} was created concurrently")));
            };
            let merged = s.record.payload.merge(head.payload.as_ref(), ancestor.payload.as_ref())?;
            merged.verify_invariants()?;
            s.record.payload = merged;
            s.base = Some(head.version);
            s.ancestor = Some((*head).clone());
        }
        Ok(())
    }

    fn heads_unchanged(&self, staged: &[Staged]) -> bool {
        staged.iter().all(|s| self.store.latest_version(s.record.aggregate_id) == s.base)
    }

    /// One locked attempt: reserve a version and install the batch.
    async fn install(&self, staged: &[Staged], events: &[PendingEvent]) -> Result<Option<Version>> {
        let _guard = self.commit_lock.lock().await;
        self.store.charge().await;
        if !self.heads_unchanged(staged) {
            return Ok(None);
        }
        let version = self.versions.increment_and_get().await?;
        let written = self.store.crash_check(CrashPoint::VersionReserved).and_then(|_| {
            let records = staged
                .iter()
                .map(|s| {
                    let mut r = s.record.clone();
                    r.version = version;
                    r.prev_version = s.base;
                    r
                })
                .collect();
            self.store.apply(WriteBatch {
                records,
                events: events.iter().map(|e| e.at_version(version)).collect(),
                expect_latest: staged.iter().map(|s| (s.record.aggregate_id, s.base)).collect(),
            })
        });
        match written {
            Ok(_) => {
                self.store.charge().await;
                Ok(Some(version))
            }
            Err(e) => {
                self.versions.decrement().await?;
                Err(e)
            }
        }
    }

    async fn try_commit(&self, uow: &UowHandle) -> Result<Version> {
        let (mut staged, events) = {
            let u = uow.lock();
            u.ensure_open()?;
            let staged: Vec<Staged> = u
                .changed
                .values()
                .map(|r| Staged {
                    record: r.clone(),
                    base: r.prev_version,
                    ancestor: u.reads.get(&r.aggregate_id).cloned(),
                })
                .collect();
            (staged, u.pending_events.clone())
        };
        let policy = self.rounds.read().clone();
        let mut round = 1;
        loop {
            self.catch_up(&mut staged).await?;
            if let Some(version) = self.install(&staged, &events).await? {
                let mut u = uow.lock();
                u.emitted_events = events.iter().map(|e| e.at_version(version)).collect();
                return Ok(version);
            }
            if round >= policy.max_attempts {
                return Err(Error::infra(
                    "CommitConflict",
                    format!("unit of work {} could not validate after {round} rounds", uow.lock().id),
                ));
            }
            tokio::time::sleep(policy.jittered_backoff(round)).await;
            round += 1;
        }
    }

    fn close(&self, uow: &UowHandle, status: UowStatus) {
        let id = {
            let mut u = uow.lock();
            u.status = status;
            u.id
        };
        self.registry.retire(id);
    }
}

#[async_trait]
impl UnitOfWorkService for CausalUnitOfWorkService {
    fn model(&self) -> TransactionModel {
        TransactionModel::Causal
    }

    fn store(&self) -> &Arc<AggregateStore> {
        &self.store
    }

    fn registry(&self) -> &UowRegistry {
        &self.registry
    }

    async fn create_unit_of_work(&self, functionality: &str) -> Result<UowHandle> {
        let snapshot = {
            let _guard = self.commit_lock.lock().await;
            self.versions.get_version_number().await?
        };
        Ok(self.registry.create(functionality, TransactionModel::Causal, snapshot))
    }

    async fn aggregate_load(&self, uow: &UowHandle, id: AggregateId) -> Result<AggregateVersionRecord> {
        let snapshot = {
            let u = uow.lock();
            u.ensure_open()?;
            if let Some(staged) = u.changed.get(&id) {
                return Ok(staged.clone());
            }
            if let Some(read) = u.reads.get(&id) {
                return Ok(read.working_copy());
            }
            u.snapshot_version
        };
        self.store.charge().await;
        let rec = self.store.version_at_or_below(id, snapshot)?;
        let mut u = uow.lock();
        let read = u.reads.entry(id).or_insert_with(|| (*rec).clone());
        let copy = read.working_copy();
        u.read_set.insert(id, copy.prev_version.unwrap_or_default());
        Ok(copy)
    }

    async fn register_changed(&self, uow: &UowHandle, record: AggregateVersionRecord) -> Result<()> {
        record.verify_invariants()?;
        let mut u = uow.lock();
        u.ensure_open()?;
        u.changed.insert(record.aggregate_id, record);
        Ok(())
    }

    async fn register_event(&self, uow: &UowHandle, event: PendingEvent) -> Result<()> {
        let mut u = uow.lock();
        u.ensure_open()?;
        u.pending_events.push(event);
        Ok(())
    }

    async fn commit(&self, uow: &UowHandle) -> Result<()> {
        let read_only = {
            let u = uow.lock();
            u.ensure_open()?;
            u.changed.is_empty() && u.pending_events.is_empty()
        };
        if read_only {
            self.close(uow, UowStatus::Committed);
            return Ok(());
        }
        match self.try_commit(uow).await {
            Ok(_) => {
                self.close(uow, UowStatus::Committed);
                Ok(())
            }
            Err(e) => {
                self.close(uow, UowStatus::Aborted);
                Err(e)
            }
        }
    }

    async fn abort(&self, uow: &UowHandle) -> Result<()> {
        uow.lock().ensure_open()?;
        {
            let mut u = uow.lock();
            u.changed.clear();
            u.pending_events.clear();
        }
        self.close(uow, UowStatus::Aborted);
        Ok(())
    }
}
