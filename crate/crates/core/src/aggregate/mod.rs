//! Aggregates: identity, immutable version records, lifecycle state,
//! invariant checks and declared event subscriptions.
//!
//! Concrete domain types implement [`Aggregate`]; the framework handles them
//! through the object-safe [`AggregateState`] so that one store can hold
//! every aggregate type.

mod store;

pub use store::{AggregateStore, CrashPoint, StorageCost, WriteBatch};

use std::any::Any;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type AggregateId = u64;
pub type Version = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LifecycleState {
    Active,
    Inactive,
    Deleted,
}

/// Semantic lock flag carried by every record. Domain states are free-form
/// tags such as `IN_UPDATE_TOURNAMENT`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SagaState(pub String);

impl SagaState {
    pub const NOT_IN_SAGA: &'static str = "NOT_IN_SAGA";

    pub fn new(state: impl Into<String>) -> Self {
        SagaState(state.into())
    }

    pub fn not_in_saga() -> Self {
        SagaState(Self::NOT_IN_SAGA.to_string())
    }

    pub fn is_free(&self) -> bool {
        self.0 == Self::NOT_IN_SAGA
    }
}

impl Default for SagaState {
    fn default() -> Self {
        Self::not_in_saga()
    }
}

impl fmt::Display for SagaState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A subscription to events of `event_type` published by `sender_aggregate_id`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EventSubscription {
    pub event_type: String,
    pub sender_aggregate_id: AggregateId,
    pub sender_last_version: Version,
}

impl EventSubscription {
    pub fn new(event_type: impl Into<String>, sender: AggregateId) -> Self {
        EventSubscription { event_type: event_type.into(), sender_aggregate_id: sender, sender_last_version: 0 }
    }
}

/// Typed aggregate payload.
pub trait Aggregate: Clone + fmt::Debug + Serialize + DeserializeOwned + Send + Sync + 'static {
    const TYPE: &'static str;

    fn verify_invariants(&self) -> Result<()>;

    /// `(event_type, sender)` pairs this aggregate listens to.
    fn event_subscriptions(&self, _self_id: AggregateId) -> Vec<(String, AggregateId)> {
        Vec::new()
    }

    /// Three-way merge of `self` (the local staged copy) with a concurrently
    /// committed version, relative to the version both started from.
    fn merge_fields(&self, committed: &Self, _ancestor: &Self) -> Result<Self> {
        let _ = committed;
        Err(Error::MergeConflictUnresolvable(format!("{} does not support merging", Self::TYPE)))
    }
}

/// Object-safe view of an aggregate payload.
pub trait AggregateState: fmt::Debug + Send + Sync {
    fn aggregate_type(&self) -> &'static str;
    fn clone_state(&self) -> Box<dyn AggregateState>;
    fn verify_invariants(&self) -> Result<()>;
    fn event_subscriptions(&self, self_id: AggregateId) -> Vec<(String, AggregateId)>;
    fn merge(&self, committed: &dyn AggregateState, ancestor: &dyn AggregateState) -> Result<Box<dyn AggregateState>>;
    fn to_json(&self) -> serde_json::Value;
    fn as_any(&self) -> &dyn Any;
    fn as_any_mut(&mut self) -> &mut dyn Any;
}

impl<T: Aggregate> AggregateState for T {
    fn aggregate_type(&self) -> &'static str {
        T::TYPE
    }

    fn clone_state(&self) -> Box<dyn AggregateState> {
        Box::new(self.clone())
    }

    fn verify_invariants(&self) -> Result<()> {
        Aggregate::verify_invariants(self)
    }

    fn event_subscriptions(&self, self_id: AggregateId) -> Vec<(String, AggregateId)> {
        Aggregate::event_subscriptions(self, self_id)
    }

    fn merge(&self, committed: &dyn AggregateState, ancestor: &dyn AggregateState) -> Result<Box<dyn AggregateState>> {
        let downcast = |s: &dyn AggregateState| {
            s.as_any().downcast_ref::<T>().cloned().ok_or_else(|| {
                Error::MergeConflictUnresolvable(format!("cannot merge {} with {}", T::TYPE, s.aggregate_type()))
            })
        };
        let committed = downcast(committed)?;
        let ancestor = downcast(ancestor)?;
        Ok(Box::new(self.merge_fields(&committed, &ancestor)?))
    }

    fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

/// One version of an aggregate. Committed payloads are never mutated, though
/// the saga state of the latest version can be flipped in place. A working
/// copy has `version == 0` until a transaction service commits it.
#[derive(Debug)]
pub struct AggregateVersionRecord {
    pub aggregate_id: AggregateId,
    pub version: Version,
    pub state: LifecycleState,
    pub aggregate_type: String,
    pub prev_version: Option<Version>,
    pub saga_state: SagaState,
    pub payload: Box<dyn AggregateState>,
}

impl Clone for AggregateVersionRecord {
    fn clone(&self) -> Self {
        AggregateVersionRecord {
            aggregate_id: self.aggregate_id,
            version: self.version,
            state: self.state,
            aggregate_type: self.aggregate_type.clone(),
            prev_version: self.prev_version,
            saga_state: self.saga_state.clone(),
            payload: self.payload.clone_state(),
        }
    }
}

impl AggregateVersionRecord {
    /// A fresh working copy with no predecessor.
    pub fn new(aggregate_id: AggregateId, payload: Box<dyn AggregateState>) -> Self {
        AggregateVersionRecord {
            aggregate_id,
            version: 0,
            state: LifecycleState::Active,
            aggregate_type: payload.aggregate_type().to_string(),
            prev_version: None,
            saga_state: SagaState::not_in_saga(),
            payload,
        }
    }

    /// Deep copy suitable for modification: version reset to 0 and linked to
    /// this record.
    pub fn working_copy(&self) -> Self {
        let mut copy = self.clone();
        copy.prev_version = Some(self.version);
        copy.version = 0;
        copy
    }

    pub fn payload<T: Aggregate>(&self) -> Result<&T> {
        self.payload.as_any().downcast_ref::<T>().ok_or_else(|| self.type_mismatch(T::TYPE))
    }

    pub fn payload_mut<T: Aggregate>(&mut self) -> Result<&mut T> {
        let actual = self.aggregate_type.clone();
        self.payload
            .as_any_mut()
            .downcast_mut::<T>()
            .ok_or_else(|| Error::InvalidConfig(format!("aggregate is {actual}, not {}", T::TYPE)))
    }

    fn type_mismatch(&self, wanted: &str) -> Error {
        Error::InvalidConfig(format!("aggregate {} is {}, not {wanted}", self.aggregate_id, self.aggregate_type))
    }

    pub fn verify_invariants(&self) -> Result<()> {
        self.payload.verify_invariants()
    }

    pub fn is_deleted(&self) -> bool {
        self.state == LifecycleState::Deleted
    }

    pub fn subscriptions(&self) -> Vec<(String, AggregateId)> {
        self.payload.event_subscriptions(self.aggregate_id)
    }

    /// Domain payload as JSON, used for equality checks across versions.
    pub fn payload_json(&self) -> serde_json::Value {
        self.payload.to_json()
    }
}

/// Allocates aggregate ids: strictly increasing from 1, never reused.
#[derive(Debug)]
pub struct AggregateIdGenerator {
    next: AtomicU64,
}

impl Default for AggregateIdGenerator {
    fn default() -> Self {
        AggregateIdGenerator { next: AtomicU64::new(1) }
    }
}

impl AggregateIdGenerator {
    pub fn new_aggregate_id(&self) -> AggregateId {
        self.next.fetch_add(1, Ordering::Relaxed)
    }
}
