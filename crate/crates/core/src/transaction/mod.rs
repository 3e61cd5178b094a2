//! Units of work under two interchangeable transactional models.
//!
//! [`SagaUnitOfWorkService`] persists every change as soon as it is
//! registered, guards aggregates with semantic locks and undoes work through
//! compensations. [`CausalUnitOfWorkService`] reads from a snapshot, stages
//! changes privately and publishes them atomically at commit, merging with
//! whatever was committed concurrently.

mod causal;
mod decorators;
mod saga;

pub use causal::CausalUnitOfWorkService;
pub use decorators::{CausalDecorator, SagaDecorator};
pub use saga::{CompensationPolicy, SagaUnitOfWorkService};

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use async_trait::async_trait;
use futures::future::BoxFuture;
use indexmap::IndexMap;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::aggregate::{AggregateId, AggregateState, AggregateStore, AggregateVersionRecord, SagaState, Version};
use crate::error::{Error, Result};
use crate::messaging::UowId;
use crate::notification::DomainEvent;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TransactionModel {
    #[default]
    #[serde(rename = "saga")]
    Saga,
    #[serde(rename = "tcc")]
    Causal,
}

impl TransactionModel {
    pub fn as_str(self) -> &'static str {
        match self {
            TransactionModel::Saga => "saga",
            TransactionModel::Causal => "tcc",
        }
    }
}

impl fmt::Display for TransactionModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TransactionModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "saga" | "sagas" => Ok(TransactionModel::Saga),
            "tcc" | "causal" => Ok(TransactionModel::Causal),
            other => Err(Error::InvalidConfig(format!("unknown transaction model {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UowStatus {
    Active,
    /// Compensations are running; the unit still accepts writes.
    Aborting,
    Committed,
    Aborted,
}

impl UowStatus {
    fn as_str(self) -> &'static str {
        match self {
            UowStatus::Active => "active",
            UowStatus::Aborting => "aborting",
            UowStatus::Committed => "committed",
            UowStatus::Aborted => "aborted",
        }
    }
}

/// An event registered by a handler, not yet tied to a committed version.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingEvent {
    pub event_type: String,
    pub publisher_aggregate_id: AggregateId,
    pub payload: serde_json::Value,
}

impl PendingEvent {
    pub fn new(event_type: impl Into<String>, publisher: AggregateId, payload: serde_json::Value) -> Self {
        PendingEvent { event_type: event_type.into(), publisher_aggregate_id: publisher, payload }
    }

    pub(crate) fn at_version(&self, version: Version) -> DomainEvent {
        DomainEvent::new(self.event_type.clone(), self.publisher_aggregate_id, version, self.payload.clone())
    }
}

/// A semantic lock taken by a saga: enough to restore the aggregate's prior state.
#[derive(Debug, Clone, PartialEq)]
pub struct LockRecord {
    pub aggregate_id: AggregateId,
    pub previous_state: SagaState,
    pub previous_version: Version,
}

pub type CompensationFn = Arc<dyn Fn() -> BoxFuture<'static, Result<()>> + Send + Sync>;

#[derive(Clone)]
pub struct Compensation {
    pub name: String,
    pub action: CompensationFn,
}

impl fmt::Debug for Compensation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Compensation({})", self.name)
    }
}

/// Transaction context threaded through every command of one functionality.
#[derive(Debug)]
pub struct UnitOfWork {
    pub id: UowId,
    pub functionality: String,
    pub model: TransactionModel,
    /// Causal: the committed horizon visible to this unit. Saga: 0.
    pub snapshot_version: Version,
    /// Causal: staged working copies. Saga: the last version written per aggregate.
    pub changed: IndexMap<AggregateId, AggregateVersionRecord>,
    /// Aggregate id to the version this unit read.
    pub read_set: IndexMap<AggregateId, Version>,
    pub pending_events: Vec<PendingEvent>,
    /// Events already written to the outbox (saga) or at commit (causal).
    pub emitted_events: Vec<DomainEvent>,
    pub locks: Vec<LockRecord>,
    pub compensations: Vec<Compensation>,
    pub compensation_failures: Vec<(String, Error)>,
    pub status: UowStatus,
    pub(crate) reads: HashMap<AggregateId, AggregateVersionRecord>,
}

impl UnitOfWork {
    fn new(id: UowId, functionality: &str, model: TransactionModel, snapshot_version: Version) -> Self {
        UnitOfWork {
            id,
            functionality: functionality.to_string(),
            model,
            snapshot_version,
            changed: IndexMap::new(),
            read_set: IndexMap::new(),
            pending_events: Vec::new(),
            emitted_events: Vec::new(),
            locks: Vec::new(),
            compensations: Vec::new(),
            compensation_failures: Vec::new(),
            status: UowStatus::Active,
            reads: HashMap::new(),
        }
    }

    pub(crate) fn ensure_open(&self) -> Result<()> {
        match self.status {
            UowStatus::Active | UowStatus::Aborting => Ok(()),
            other => Err(Error::UnitOfWorkClosed { uow_id: self.id, state: other.as_str() }),
        }
    }

    pub fn holds_lock(&self, id: AggregateId) -> bool {
        self.locks.iter().any(|l| l.aggregate_id == id)
    }
}

pub type UowHandle = Arc<Mutex<UnitOfWork>>;

/// Live units of work by id, so that handlers reached through any transport
/// can resolve the context a command refers to.
#[derive(Debug, Default)]
pub struct UowRegistry {
    next_id: AtomicU64,
    live: Mutex<HashMap<UowId, UowHandle>>,
}

impl UowRegistry {
    fn create(&self, functionality: &str, model: TransactionModel, snapshot: Version) -> UowHandle {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed) + 1;
        let handle = Arc::new(Mutex::new(UnitOfWork::new(id, functionality, model, snapshot)));
        self.live.lock().insert(id, handle.clone());
        handle
    }

    pub fn get(&self, id: UowId) -> Result<UowHandle> {
        self.live.lock().get(&id).cloned().ok_or(Error::UnknownUnitOfWork(id))
    }

    fn retire(&self, id: UowId) {
        self.live.lock().remove(&id);
    }

    pub fn live_count(&self) -> usize {
        self.live.lock().len()
    }
}

#[async_trait]
pub trait UnitOfWorkService: Send + Sync {
    fn model(&self) -> TransactionModel;

    fn store(&self) -> &Arc<AggregateStore>;

    fn registry(&self) -> &UowRegistry;

    fn lookup(&self, id: UowId) -> Result<UowHandle> {
        self.registry().get(id)
    }

    async fn create_unit_of_work(&self, functionality: &str) -> Result<UowHandle>;

    /// A private, modifiable copy of the aggregate as this unit sees it.
    async fn aggregate_load(&self, uow: &UowHandle, id: AggregateId) -> Result<AggregateVersionRecord>;

    /// Registers a modified working copy after checking its invariants.
    async fn register_changed(&self, uow: &UowHandle, record: AggregateVersionRecord) -> Result<()>;

    /// Registers an event. Call it before the `register_changed` of the
    /// publishing aggregate so both land in the same write.
    async fn register_event(&self, uow: &UowHandle, event: PendingEvent) -> Result<()>;

    async fn commit(&self, uow: &UowHandle) -> Result<()>;

    async fn abort(&self, uow: &UowHandle) -> Result<()>;

    /// Saga only; other models ignore compensations.
    fn register_compensation(&self, _uow: &UowHandle, _compensation: Compensation) {}

    /// Registers a brand-new aggregate with no predecessor.
    async fn create_aggregate(&self, uow: &UowHandle, id: AggregateId, payload: Box<dyn AggregateState>) -> Result<()> {
        self.register_changed(uow, AggregateVersionRecord::new(id, payload)).await
    }
}
