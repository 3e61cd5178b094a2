//! Simulated transports between the gateway and service handlers.
//!
//! `local` calls the handler chain directly, `local-serialized` forces a
//! byte round trip, `rpc` adds one-way latency on request and response, and
//! `broker` routes through per-service queues drained by pollers, with
//! responses matched to callers by correlation id.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;
use tokio::time::Instant;

use super::command::{
    decode_command, decode_response, encode_command, encode_response, Command, CommandResponse, Payload,
};
use super::handler::{HandlerChain, HandlerRegistry};
use crate::error::{Error, ErrorRegistry, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransportMode {
    #[default]
    Local,
    LocalSerialized,
    Rpc,
    Broker,
}

impl TransportMode {
    pub const ALL: [TransportMode; 4] =
        [TransportMode::Local, TransportMode::LocalSerialized, TransportMode::Rpc, TransportMode::Broker];

    pub fn as_str(self) -> &'static str {
        match self {
            TransportMode::Local => "local",
            TransportMode::LocalSerialized => "local-serialized",
            TransportMode::Rpc => "rpc",
            TransportMode::Broker => "broker",
        }
    }

    /// Whether services in this mode own separate event stores.
    pub fn is_distributed(self) -> bool {
        matches!(self, TransportMode::Rpc | TransportMode::Broker)
    }
}

impl fmt::Display for TransportMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TransportMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TransportMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown transport mode {s:?}")))
    }
}

/// Latency of one simulated hop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatencySpec {
    Fixed { ms: f64 },
    Uniform { min_ms: f64, max_ms: f64 },
}

impl Default for LatencySpec {
    fn default() -> Self {
        LatencySpec::Fixed { ms: 0.0 }
    }
}

impl LatencySpec {
    pub fn fixed_ms(ms: f64) -> Self {
        LatencySpec::Fixed { ms }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        match *self {
            LatencySpec::Fixed { ms } if ok(ms) => Ok(()),
            LatencySpec::Uniform { min_ms, max_ms } if ok(min_ms) && ok(max_ms) && min_ms <= max_ms => Ok(()),
            _ => Err(Error::InvalidLatencySpec(format!("{self:?}"))),
        }
    }
}

/// Draws latencies from a spec with a seeded generator.
pub(crate) struct LatencySampler {
    spec: LatencySpec,
    rng: Mutex<ChaCha8Rng>,
}

impl LatencySampler {
    pub fn new(spec: LatencySpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(LatencySampler { spec, rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)) })
    }

    pub fn sample(&self) -> Duration {
        let ms = match self.spec {
            LatencySpec::Fixed { ms } => ms,
            LatencySpec::Uniform { min_ms, max_ms } if max_ms > min_ms => self.rng.lock().gen_range(min_ms..max_ms),
            LatencySpec::Uniform { min_ms, .. } => min_ms,
        };
        Duration::from_secs_f64(ms / 1000.0)
    }

    pub async fn wait(&self) {
        let d = self.sample();
        if !d.is_zero() {
            tokio::time::sleep(d).await;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportConfig {
    pub mode: TransportMode,
    pub rpc_one_way: LatencySpec,
    pub broker_delivery: LatencySpec,
    pub broker_poll_ms: u64,
    pub response_timeout_ms: u64,
    pub seed: u64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            mode: TransportMode::Local,
            rpc_one_way: LatencySpec::fixed_ms(1.0),
            broker_delivery: LatencySpec::fixed_ms(1.0),
            broker_poll_ms: 5,
            response_timeout_ms: 10_000,
            seed: 0,
        }
    }
}

impl TransportConfig {
    pub fn with_mode(mode: TransportMode) -> Self {
        TransportConfig { mode, ..Self::default() }
    }

    /// Extra one-way latency a notification copy pays between services.
    pub fn event_delivery(&self) -> LatencySpec {
        match self.mode {
            TransportMode::Rpc => self.rpc_one_way.clone(),
            TransportMode::Broker => self.broker_delivery.clone(),
            _ => LatencySpec::default(),
        }
    }
}

#[async_trait]
pub(crate) trait Transport: Send + Sync {
    async fn dispatch(&self, cmd: &Command) -> Result<Payload>;
}

pub(crate) fn build_transport(
    config: &TransportConfig,
    registry: Arc<HandlerRegistry>,
    errors: ErrorRegistry,
) -> Result<Arc<dyn Transport>> {
    config.rpc_one_way.validate()?;
    config.broker_delivery.validate()?;
    Ok(match config.mode {
        TransportMode::Local => Arc::new(LocalTransport { registry, errors, serialize: false }),
        TransportMode::LocalSerialized => Arc::new(LocalTransport { registry, errors, serialize: true }),
        TransportMode::Rpc => Arc::new(RpcTransport {
            registry,
            errors,
            latency: LatencySampler::new(config.rpc_one_way.clone(), config.seed)?,
        }),
        TransportMode::Broker => {
            if config.broker_poll_ms == 0 {
                return Err(Error::InvalidConfig("broker poll interval must be positive".into()));
            }
            Arc::new(BrokerTransport::new(config, registry, errors)?)
        }
    })
}

struct LocalTransport {
    registry: Arc<HandlerRegistry>,
    errors: ErrorRegistry,
    serialize: bool,
}

#[async_trait]
impl Transport for LocalTransport {
    async fn dispatch(&self, cmd: &Command) -> Result<Payload> {
        let chain = self.registry.get(&cmd.target_service)?;
        if !self.serialize {
            let result = chain.dispatch(cmd).await;
            return CommandResponse::from_result(cmd.command_id, result, &self.errors).into_result(&self.errors);
        }
        let (_, decoded) = decode_command(&encode_command(cmd, 0)?)?;
        let result = chain.dispatch(&decoded).await;
        let bytes = encode_response(CommandResponse::from_result(cmd.command_id, result, &self.errors), 0);
        decode_response(&bytes)?.1.into_result(&self.errors)
    }
}

struct RpcTransport {
    registry: Arc<HandlerRegistry>,
    errors: ErrorRegistry,
    latency: LatencySampler,
}

#[async_trait]
impl Transport for RpcTransport {
    async fn dispatch(&self, cmd: &Command) -> Result<Payload> {
        let chain = self.registry.get(&cmd.target_service)?;
        let request = encode_command(cmd, 0)?;
        self.latency.wait().await;
        let (_, decoded) = decode_command(&request)?;
        let result = chain.dispatch(&decoded).await;
        let response = encode_response(CommandResponse::from_result(cmd.command_id, result, &self.errors), 0);
        self.latency.wait().await;
        decode_response(&response)?.1.into_result(&self.errors)
    }
}

struct BrokerShared {
    registry: Arc<HandlerRegistry>,
    errors: ErrorRegistry,
    delivery: LatencySampler,
    poll: Duration,
    timeout: Duration,
    pending: Mutex<HashMap<u64, oneshot::Sender<CommandResponse>>>,
    next_correlation: AtomicU64,
    origin: OnceLock<Instant>,
}

struct BrokerTransport {
    shared: Arc<BrokerShared>,
    queues: Mutex<HashMap<String, mpsc::UnboundedSender<Vec<u8>>>>,
    responses: Mutex<Option<mpsc::UnboundedSender<Vec<u8>>>>,
    tasks: Mutex<Vec<JoinHandle<()>>>,
}

impl BrokerTransport {
    fn new(config: &TransportConfig, registry: Arc<HandlerRegistry>, errors: ErrorRegistry) -> Result<Self> {
        Ok(BrokerTransport {
            shared: Arc::new(BrokerShared {
                registry,
                errors,
                delivery: LatencySampler::new(config.broker_delivery.clone(), config.seed)?,
                poll: Duration::from_millis(config.broker_poll_ms),
                timeout: Duration::from_millis(config.response_timeout_ms),
                pending: Mutex::new(HashMap::new()),
                next_correlation: AtomicU64::new(1),
                origin: OnceLock::new(),
            }),
            queues: Mutex::new(HashMap::new()),
            responses: Mutex::new(None),
            tasks: Mutex::new(Vec::new()),
        })
    }

    fn response_sender(&self) -> mpsc::UnboundedSender<Vec<u8>> {
        let mut slot = self.responses.lock();
        if let Some(tx) = slot.as_ref() {
            return tx.clone();
        }
        let (tx, mut rx) = mpsc::unbounded_channel::<Vec<u8>>();
        let shared = self.shared.clone();
        let router = tokio::spawn(async move {
            while let Some(bytes) = rx.recv().await {
                let Ok((correlation, resp)) = decode_response(&bytes) else { continue };
                if let Some(waiter) = shared.pending.lock().remove(&correlation) {
                    let _ = waiter.send(resp);
                }
            }
        });
        self.tasks.lock().push(router);
        *slot = Some(tx.clone());
        tx
    }

    fn queue_for(&self, service: &str, chain: Arc<HandlerChain>) -> mpsc::UnboundedSender<Vec<u8>> {
        let responses = self.response_sender();
        let mut queues = self.queues.lock();
        if let Some(tx) = queues.get(service) {
            return tx.clone();
        }
        let (tx, rx) = mpsc::unbounded_channel();
        let poller = tokio::spawn(poll_queue(self.shared.clone(), chain, rx, responses));
        self.tasks.lock().push(poller);
        queues.insert(service.to_string(), tx.clone());
        tx
    }
}

impl Drop for BrokerTransport {
    fn drop(&mut self) {
        for task in self.tasks.lock().drain(..) {
            task.abort();
        }
    }
}

async fn poll_queue(
    shared: Arc<BrokerShared>,
    chain: Arc<HandlerChain>,
    mut rx: mpsc::UnboundedReceiver<Vec<u8>>,
    responses: mpsc::UnboundedSender<Vec<u8>>,
) {
    let origin = *shared.origin.get_or_init(Instant::now);
    while let Some(first) = rx.recv().await {
        let since = Instant::now().saturating_duration_since(origin);
        let poll = shared.poll.as_nanos();
        let next_tick = since.as_nanos().div_ceil(poll) * poll;
        tokio::time::sleep_until(origin + Duration::from_nanos(next_tick as u64)).await;

        let mut batch = vec![first];
        while let Ok(more) = rx.try_recv() {
            batch.push(more);
        }
        for bytes in batch {
            let shared = shared.clone();
            let chain = chain.clone();
            let responses = responses.clone();
            tokio::spawn(async move {
                let Ok((correlation, cmd)) = decode_command(&bytes) else { return };
                let result = chain.dispatch(&cmd).await;
                let reply = encode_response(CommandResponse::from_result(cmd.command_id, result, &shared.errors), correlation);
                shared.delivery.wait().await;
                let _ = responses.send(reply);
            });
        }
    }
}

#[async_trait]
impl Transport for BrokerTransport {
    async fn dispatch(&self, cmd: &Command) -> Result<Payload> {
        let chain = self.shared.registry.get(&cmd.target_service)?;
        self.shared.origin.get_or_init(Instant::now);
        let correlation = self.shared.next_correlation.fetch_add(1, Ordering::Relaxed);
        let request = encode_command(cmd, correlation)?;
        let queue = self.queue_for(&cmd.target_service, chain);

        let (tx, rx) = oneshot::channel();
        self.shared.pending.lock().insert(correlation, tx);
        self.shared.delivery.wait().await;
        if queue.send(request).is_err() {
            self.shared.pending.lock().remove(&correlation);
            return Err(Error::infra("NetworkTimeout", "broker queue closed"));
        }

        match tokio::time::timeout(self.shared.timeout, rx).await {
            Ok(Ok(resp)) => resp.into_result(&self.shared.errors),
            Ok(Err(_)) => Err(Error::infra("NetworkTimeout", "response channel dropped")),
            Err(_) => {
                self.shared.pending.lock().remove(&correlation);
                Err(Error::ServiceUnavailable {
                    target: cmd.target_service.clone(),
                    attempts: 1,
                    cause: format!("no response within {:?}", self.shared.timeout),
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latency_specs_are_validated() {
        assert!(LatencySpec::fixed_ms(-1.0).validate().is_err());
        assert!(LatencySpec::Uniform { min_ms: 5.0, max_ms: 1.0 }.validate().is_err());
        assert!(LatencySpec::Uniform { min_ms: 1.0, max_ms: 5.0 }.validate().is_ok());
    }

    #[test]
    fn uniform_samples_stay_in_range_and_repeat_per_seed() {
        let spec = LatencySpec::Uniform { min_ms: 2.0, max_ms: 4.0 };
        let a = LatencySampler::new(spec.clone(), 7).unwrap();
        let b = LatencySampler::new(spec, 7).unwrap();
        for _ in 0..100 {
            let (x, y) = (a.sample(), b.sample());
            assert_eq!(x, y);
            assert!(x >= Duration::from_millis(2) && x < Duration::from_millis(4));
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for mode in TransportMode::ALL {
            assert_eq!(mode.as_str().parse::<TransportMode>().unwrap(), mode);
        }
        assert!("carrier-pigeon".parse::<TransportMode>().is_err());
    }
}
