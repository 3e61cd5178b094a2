//! Error type shared by every simulator module, plus the name table used to
//! classify errors that cross a transport boundary.

use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::RwLock;

use crate::aggregate::{AggregateId, Version};

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// How the messaging layer treats a failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorKind {
    /// Business rule violation. Never retried; aborts the enclosing workflow.
    Domain,
    /// Transient infrastructure or concurrency failure. Retried with backoff.
    Infra,
    /// Programming or configuration error. Not retried.
    Fatal,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invariant {invariant} violated: {detail}")]
    InvariantViolation { invariant: String, detail: String },

    #[error("aggregate {0} not found")]
    AggregateNotFound(AggregateId),

    #[error("aggregate {0} is deleted")]
    AggregateDeleted(AggregateId),

    #[error("aggregate {aggregate_id} has no version at or below snapshot {snapshot}")]
    AggregateNotInSnapshot { aggregate_id: AggregateId, snapshot: Version },

    #[error("{operation} is not supported by the {strategy} versioning strategy")]
    UnsupportedByStrategy { operation: &'static str, strategy: &'static str },

    #[error("clock moved backwards: last issued {last_ms} ms, now {now_ms} ms")]
    ClockMovedBackwards { last_ms: u64, now_ms: u64 },

    #[error("sequence exhausted within millisecond {timestamp_ms}")]
    SequenceExhausted { timestamp_ms: u64 },

    #[error("version counter cannot go below zero")]
    CounterUnderflow,

    #[error("{name}: {message}")]
    Domain { name: String, message: String },

    #[error("{name}: {message}")]
    Infra { name: String, message: String },

    #[error("service {target} unavailable after {attempts} attempts: {cause}")]
    ServiceUnavailable { target: String, attempts: u32, cause: String },

    #[error("handler already registered for service {0}")]
    DuplicateRegistration(String),

    #[error("no handler registered for service {0}")]
    UnknownService(String),

    #[error("serialization failed: {0}")]
    Serialization(String),

    #[error("invalid latency spec: {0}")]
    InvalidLatencySpec(String),

    #[error("cannot reconfigure transport with {0} commands in flight")]
    TransportBusy(usize),

    #[error("the causal transaction model requires centralized versioning")]
    IncompatibleVersioningStrategy,

    #[error("merge conflict: {0}")]
    MergeConflictUnresolvable(String),

    #[error("unknown unit of work {0}")]
    UnknownUnitOfWork(u64),

    #[error("unit of work {uow_id} is {state}")]
    UnitOfWorkClosed { uow_id: u64, state: &'static str },

    #[error("workflow steps form a cycle through {0:?}")]
    CyclicDependencies(Vec<String>),

    #[error("duplicate step name {0}")]
    DuplicateStepName(String),

    #[error("unknown step {0}")]
    UnknownStep(String),

    #[error("step {step} depends on unknown step {dependency}")]
    UnknownDependency { step: String, dependency: String },

    #[error("workflow has no steps")]
    EmptyWorkflow,

    #[error("workflow cannot {action} while {status}")]
    InvalidWorkflowState { action: &'static str, status: &'static str },

    #[error("malformed impairment plan at line {line}: {reason}")]
    MalformedPlan { line: usize, reason: String },

    #[error("impairment generator spec is empty")]
    EmptySpec,

    #[error("span {0} is not open")]
    UnbalancedSpan(u64),

    #[error("statistics need at least one sample")]
    EmptyInput,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("simulated crash at {0}")]
    SimulatedCrash(String),

    #[error("io: {0}")]
    Io(String),

    /// A non-retryable, non-domain failure reported by a remote handler.
    #[error("{name}: {message}")]
    Remote { name: String, message: String },
}

impl Error {
    pub fn domain(name: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Domain { name: name.into(), message: message.into() }
    }

    pub fn infra(name: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Infra { name: name.into(), message: message.into() }
    }

    pub fn invariant(invariant: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::InvariantViolation { invariant: invariant.into(), detail: detail.into() }
    }

    /// Stable name used on the wire and in reports.
    pub fn name(&self) -> &str {
        match self {
            Error::InvariantViolation { .. } => "InvariantViolation",
            Error::AggregateNotFound(_) => "AggregateNotFound",
            Error::AggregateDeleted(_) => "AggregateDeleted",
            Error::AggregateNotInSnapshot { .. } => "AggregateNotInSnapshot",
            Error::UnsupportedByStrategy { .. } => "UnsupportedByStrategy",
            Error::ClockMovedBackwards { .. } => "ClockMovedBackwards",
            Error::SequenceExhausted { .. } => "SequenceExhausted",
            Error::CounterUnderflow => "CounterUnderflow",
            Error::Domain { name, .. } | Error::Infra { name, .. } | Error::Remote { name, .. } => name,
            Error::ServiceUnavailable { .. } => "ServiceUnavailable",
            Error::DuplicateRegistration(_) => "DuplicateRegistration",
            Error::UnknownService(_) => "UnknownService",
            Error::Serialization(_) => "SerializationError",
            Error::InvalidLatencySpec(_) => "InvalidLatencySpec",
            Error::TransportBusy(_) => "TransportBusy",
            Error::IncompatibleVersioningStrategy => "IncompatibleVersioningStrategy",
            Error::MergeConflictUnresolvable(_) => "MergeConflictUnresolvable",
            Error::UnknownUnitOfWork(_) => "UnknownUnitOfWork",
            Error::UnitOfWorkClosed { .. } => "UnitOfWorkClosed",
            Error::CyclicDependencies(_) => "CyclicDependencies",
            Error::DuplicateStepName(_) => "DuplicateStepName",
            Error::UnknownStep(_) => "UnknownStep",
            Error::UnknownDependency { .. } => "UnknownDependency",
            Error::EmptyWorkflow => "EmptyWorkflow",
            Error::InvalidWorkflowState { .. } => "InvalidWorkflowState",
            Error::MalformedPlan { .. } => "MalformedPlan",
            Error::EmptySpec => "EmptySpec",
            Error::UnbalancedSpan(_) => "UnbalancedSpan",
            Error::EmptyInput => "EmptyInput",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::SimulatedCrash(_) => "SimulatedCrash",
            Error::Io(_) => "Io",
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvariantViolation { .. }
            | Error::AggregateNotFound(_)
            | Error::AggregateDeleted(_)
            | Error::AggregateNotInSnapshot { .. }
            | Error::MergeConflictUnresolvable(_)
            | Error::Domain { .. } => ErrorKind::Domain,
            Error::Infra { .. } => ErrorKind::Infra,
            _ => ErrorKind::Fatal,
        }
    }

    pub fn is_retryable(&self) -> bool {
        self.kind() == ErrorKind::Infra
    }

    /// Name of the violated invariant, when this error reports one. Errors
    /// reconstructed from the wire keep the invariant in their message prefix.
    pub fn invariant_name(&self) -> Option<&str> {
        match self {
            Error::InvariantViolation { invariant, .. } => Some(invariant),
            Error::Domain { name, message } if name == "InvariantViolation" => {
                message.split(':').next().map(str::trim)
            }
            _ => None,
        }
    }

    /// Message half of the `(name, message)` wire pair.
    pub fn wire_message(&self) -> String {
        match self {
            Error::Domain { message, .. } | Error::Infra { message, .. } | Error::Remote { message, .. } => {
                message.clone()
            }
            Error::InvariantViolation { invariant, detail } => format!("{invariant}: {detail}"),
            other => other.to_string(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

/// Maps error names to their classification so that an error flattened to
/// `(name, message)` by a transport can be rebuilt on the caller's side.
/// Unregistered names are treated as infrastructure failures.
#[derive(Clone)]
pub struct ErrorRegistry {
    kinds: Arc<RwLock<HashMap<String, ErrorKind>>>,
}

impl Default for ErrorRegistry {
    fn default() -> Self {
        let registry = ErrorRegistry { kinds: Arc::new(RwLock::new(HashMap::new())) };
        for name in [
            "InvariantViolation",
            "AggregateNotFound",
            "AggregateDeleted",
            "AggregateNotInSnapshot",
            "MergeConflictUnresolvable",
            "SimulatedCrash",
            "SimulatorException",
        ] {
            registry.register(name, ErrorKind::Domain);
        }
        for name in ["SemanticLockConflict", "ConcurrentUpdate", "CommitConflict", "TransientFailure", "NetworkTimeout"] {
            registry.register(name, ErrorKind::Infra);
        }
        for name in [
            "UnsupportedByStrategy",
            "ClockMovedBackwards",
            "SequenceExhausted",
            "CounterUnderflow",
            "ServiceUnavailable",
            "UnknownService",
            "SerializationError",
            "UnknownUnitOfWork",
            "UnitOfWorkClosed",
            "InvalidConfig",
        ] {
            registry.register(name, ErrorKind::Fatal);
        }
        registry
    }
}

impl ErrorRegistry {
    pub fn register(&self, name: impl Into<String>, kind: ErrorKind) {
        self.kinds.write().insert(name.into(), kind);
    }

    pub fn register_domain(&self, name: impl Into<String>) {
        self.register(name, ErrorKind::Domain);
    }

    pub fn kind_of(&self, name: &str) -> ErrorKind {
        self.kinds.read().get(name).copied().unwrap_or(ErrorKind::Infra)
    }

    /// Rebuilds an error from its wire form. Unregistered names come back as
    /// infrastructure errors.
    pub fn reconstruct(&self, name: &str, message: &str) -> Error {
        match self.kind_of(name) {
            ErrorKind::Domain => Error::domain(name, message),
            ErrorKind::Infra => Error::infra(name, message),
            ErrorKind::Fatal => Error::Remote { name: name.into(), message: message.into() },
        }
    }
}
