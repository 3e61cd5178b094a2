//! Commands, responses, payloads and their wire form.

use std::any::Any;
use std::fmt;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::aggregate::{AggregateId, SagaState, Version};
use crate::error::{Error, ErrorRegistry, Result};
use crate::monitoring::SpanContext;

pub type CommandId = u64;
pub type UowId = u64;

/// A value that lives only in process memory and has no wire form.
#[derive(Clone)]
pub struct OpaqueValue {
    pub type_name: &'static str,
    pub value: Arc<dyn Any + Send + Sync>,
}

impl fmt::Debug for OpaqueValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Opaque({})", self.type_name)
    }
}

/// Command or response body.
#[derive(Debug, Clone)]
pub enum Payload {
    Data(serde_json::Value),
    Opaque(OpaqueValue),
}

impl PartialEq for Payload {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Payload::Data(a), Payload::Data(b)) => a == b,
            (Payload::Opaque(a), Payload::Opaque(b)) => Arc::ptr_eq(&a.value, &b.value),
            _ => false,
        }
    }
}

impl Payload {
    pub fn unit() -> Self {
        Payload::Data(serde_json::Value::Null)
    }

    pub fn encode<T: Serialize>(value: &T) -> Result<Self> {
        Ok(Payload::Data(serde_json::to_value(value)?))
    }

    /// Wraps a value that deliberately has no serialization rule.
    pub fn opaque<T: Any + Send + Sync>(value: T) -> Self {
        Payload::Opaque(OpaqueValue { type_name: std::any::type_name::<T>(), value: Arc::new(value) })
    }

    pub fn decode<T: DeserializeOwned>(&self) -> Result<T> {
        match self {
            Payload::Data(v) => Ok(serde_json::from_value(v.clone())?),
            Payload::Opaque(o) => Err(Error::Serialization(format!("{} has no serialization rule", o.type_name))),
        }
    }

    pub fn downcast_opaque<T: Any + Send + Sync>(&self) -> Option<&T> {
        match self {
            Payload::Opaque(o) => o.value.downcast_ref(),
            Payload::Data(_) => None,
        }
    }

    /// The canonical wire value; fails for opaque payloads.
    pub fn to_wire(&self) -> Result<serde_json::Value> {
        match self {
            Payload::Data(v) => Ok(v.clone()),
            Payload::Opaque(o) => Err(Error::Serialization(format!("{} has no serialization rule", o.type_name))),
        }
    }
}

/// Saga wrapper: the target aggregate must not be in any of
/// `forbidden_states`, and is moved to `acquire_state` while the saga runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SagaCommandEnvelope {
    pub forbidden_states: Vec<SagaState>,
    pub acquire_state: SagaState,
}

/// Causal wrapper: remote loads resolve against the caller's snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalCommandEnvelope {
    pub snapshot_version: Version,
    pub uow_id: UowId,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub enum Envelope {
    #[default]
    Plain,
    Saga(SagaCommandEnvelope),
    Causal(CausalCommandEnvelope),
}

#[derive(Debug, Clone)]
pub struct Command {
    /// Assigned by the gateway when zero.
    pub command_id: CommandId,
    pub target_service: String,
    pub command_type: String,
    pub aggregate_id: Option<AggregateId>,
    pub uow_ref: Option<UowId>,
    pub envelope: Envelope,
    pub payload: Payload,
    pub trace: Option<SpanContext>,
}

impl Command {
    pub fn new(target_service: impl Into<String>, command_type: impl Into<String>, payload: Payload) -> Self {
        Command {
            command_id: 0,
            target_service: target_service.into(),
            command_type: command_type.into(),
            aggregate_id: None,
            uow_ref: None,
            envelope: Envelope::Plain,
            payload,
            trace: None,
        }
    }

    pub fn for_aggregate(mut self, id: AggregateId) -> Self {
        self.aggregate_id = Some(id);
        self
    }

    pub fn in_uow(mut self, uow: UowId) -> Self {
        self.uow_ref = Some(uow);
        self
    }

    pub fn with_envelope(mut self, envelope: Envelope) -> Self {
        self.envelope = envelope;
        self
    }

    pub fn with_trace(mut self, ctx: Option<SpanContext>) -> Self {
        self.trace = ctx;
        self
    }

    pub fn saga(self, forbidden_states: Vec<SagaState>, acquire_state: SagaState) -> Self {
        self.with_envelope(Envelope::Saga(SagaCommandEnvelope { forbidden_states, acquire_state }))
    }

    pub fn causal(self, snapshot_version: Version, uow_id: UowId) -> Self {
        self.with_envelope(Envelope::Causal(CausalCommandEnvelope { snapshot_version, uow_id }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    Ok,
    DomainError,
    InfraError,
}

/// Result of one handler invocation, with errors flattened to their names.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandResponse {
    pub command_id: CommandId,
    pub outcome: Outcome,
    pub payload: Option<Payload>,
    pub error_name: Option<String>,
    pub error_message: Option<String>,
}

impl CommandResponse {
    pub fn from_result(command_id: CommandId, result: Result<Payload>, errors: &ErrorRegistry) -> Self {
        match result {
            Ok(payload) => CommandResponse {
                command_id,
                outcome: Outcome::Ok,
                payload: Some(payload),
                error_name: None,
                error_message: None,
            },
            Err(e) => {
                let name = e.name().to_string();
                let outcome = match errors.kind_of(&name) {
                    crate::error::ErrorKind::Domain => Outcome::DomainError,
                    _ => Outcome::InfraError,
                };
                CommandResponse {
                    command_id,
                    outcome,
                    payload: None,
                    error_message: Some(e.wire_message()),
                    error_name: Some(name),
                }
            }
        }
    }

    pub fn into_result(self, errors: &ErrorRegistry) -> Result<Payload> {
        match self.outcome {
            Outcome::Ok => Ok(self.payload.unwrap_or_else(Payload::unit)),
            _ => Err(errors.reconstruct(
                self.error_name.as_deref().unwrap_or("Unknown"),
                self.error_message.as_deref().unwrap_or(""),
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct WireCommand {
    pub correlation_id: u64,
    pub command_id: CommandId,
    pub target_service: String,
    pub command_type: String,
    pub aggregate_id: Option<AggregateId>,
    pub uow_ref: Option<UowId>,
    pub envelope: Envelope,
    pub payload: serde_json::Value,
    pub trace: Option<SpanContext>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct WireResponse {
    pub correlation_id: u64,
    pub command_id: CommandId,
    pub outcome: Outcome,
    pub payload: Option<serde_json::Value>,
    pub error_name: Option<String>,
    pub error_message: Option<String>,
}

/// Serializes a command to bytes. Opaque payloads fail here, at dispatch.
pub(crate) fn encode_command(cmd: &Command, correlation_id: u64) -> Result<Vec<u8>> {
    let wire = WireCommand {
        correlation_id,
        command_id: cmd.command_id,
        target_service: cmd.target_service.clone(),
        command_type: cmd.command_type.clone(),
        aggregate_id: cmd.aggregate_id,
        uow_ref: cmd.uow_ref,
        envelope: cmd.envelope.clone(),
        payload: cmd.payload.to_wire()?,
        trace: cmd.trace,
    };
    Ok(serde_json::to_vec(&wire)?)
}

pub(crate) fn decode_command(bytes: &[u8]) -> Result<(u64, Command)> {
    let w: WireCommand = serde_json::from_slice(bytes)?;
    let cmd = Command {
        command_id: w.command_id,
        target_service: w.target_service,
        command_type: w.command_type,
        aggregate_id: w.aggregate_id,
        uow_ref: w.uow_ref,
        envelope: w.envelope,
        payload: Payload::Data(w.payload),
        trace: w.trace,
    };
    Ok((w.correlation_id, cmd))
}

/// Serializes a response. A handler returning an opaque payload is reported
/// to the caller as a serialization failure.
pub(crate) fn encode_response(resp: CommandResponse, correlation_id: u64) -> Vec<u8> {
    let (outcome, payload, error_name, error_message) = match resp.payload.as_ref().map(Payload::to_wire) {
        Some(Err(e)) => (Outcome::InfraError, None, Some(e.name().to_string()), Some(e.wire_message())),
        Some(Ok(v)) => (resp.outcome, Some(v), resp.error_name, resp.error_message),
        None => (resp.outcome, None, resp.error_name, resp.error_message),
    };
    let wire = WireResponse { correlation_id, command_id: resp.command_id, outcome, payload, error_name, error_message };
    serde_json::to_vec(&wire).expect("wire response is always serializable")
}

pub(crate) fn decode_response(bytes: &[u8]) -> Result<(u64, CommandResponse)> {
    let w: WireResponse = serde_json::from_slice(bytes)?;
    Ok((
        w.correlation_id,
        CommandResponse {
            command_id: w.command_id,
            outcome: w.outcome,
            payload: w.payload.map(Payload::Data),
            error_name: w.error_name,
            error_message: w.error_message,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn opaque_payload_fails_to_encode() {
        let cmd = Command::new("svc", "Do", Payload::opaque(std::time::Instant::now()));
        assert!(matches!(encode_command(&cmd, 1), Err(Error::Serialization(_))));
    }

    #[test]
    fn domain_error_keeps_its_classification() {
        let errors = ErrorRegistry::default();
        let resp = CommandResponse::from_result(3, Err(Error::invariant("TournamentFull", "full")), &errors);
        assert_eq!(resp.outcome, Outcome::DomainError);
        let bytes = encode_response(resp, 9);
        let (corr, back) = decode_response(&bytes).unwrap();
        assert_eq!(corr, 9);
        let err = back.into_result(&errors).unwrap_err();
        assert_eq!(err.invariant_name(), Some("TournamentFull"));
        assert!(!err.is_retryable());
    }

    fn json_value() -> impl Strategy<Value = serde_json::Value> {
        let leaf = prop_oneof![
            Just(serde_json::Value::Null),
            any::<bool>().prop_map(serde_json::Value::from),
            any::<i64>().prop_map(serde_json::Value::from),
            "[a-zA-Z0-9 _-]{0,12}".prop_map(serde_json::Value::from),
        ];
        leaf.prop_recursive(3, 24, 4, |inner| {
            prop_oneof![
                prop::collection::vec(inner.clone(), 0..4).prop_map(serde_json::Value::from),
                prop::collection::btree_map("[a-z]{1,6}", inner, 0..4)
                    .prop_map(|m| serde_json::Value::Object(m.into_iter().collect())),
            ]
        })
    }

    proptest! {
        #[test]
        fn command_round_trips_losslessly(
            payload in json_value(),
            id in any::<u64>(),
            agg in proptest::option::of(any::<u64>()),
            uow in proptest::option::of(any::<u64>()),
            snapshot in any::<u64>(),
        ) {
            let mut cmd = Command::new("tournament", "AddParticipant", Payload::Data(payload.clone()))
                .causal(snapshot, uow.unwrap_or(0));
            cmd.command_id = id;
            cmd.aggregate_id = agg;
            cmd.uow_ref = uow;
            let bytes = encode_command(&cmd, 77).unwrap();
            let (corr, back) = decode_command(&bytes).unwrap();
            prop_assert_eq!(corr, 77);
            prop_assert_eq!(back.command_id, id);
            prop_assert_eq!(back.aggregate_id, agg);
            prop_assert_eq!(back.uow_ref, uow);
            prop_assert_eq!(back.envelope, cmd.envelope);
            prop_assert_eq!(back.payload, Payload::Data(payload));
        }
    }
}
