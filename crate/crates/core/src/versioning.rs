//! Commit version numbers: a centralized counter, a Snowflake generator, and
//! a remote proxy that reaches the counter through the command gateway.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use async_trait::async_trait;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::aggregate::{StorageCost, Version};
use crate::error::{Error, Result};
use crate::messaging::{Command, CommandGateway, CommandHandler, Payload};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VersioningStrategy {
    #[default]
    Centralized,
    Snowflake,
    CentralizedRemote,
}

impl VersioningStrategy {
    pub const ALL: [VersioningStrategy; 3] =
        [VersioningStrategy::Centralized, VersioningStrategy::Snowflake, VersioningStrategy::CentralizedRemote];

    pub fn as_str(self) -> &'static str {
        match self {
            VersioningStrategy::Centralized => "centralized",
            VersioningStrategy::Snowflake => "snowflake",
            VersioningStrategy::CentralizedRemote => "centralized-remote",
        }
    }

    /// Whether the strategy has a single global counter that can be read.
    pub fn is_centralized(self) -> bool {
        self != VersioningStrategy::Snowflake
    }
}

impl fmt::Display for VersioningStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VersioningStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VersioningStrategy::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown versioning strategy {s:?}")))
    }
}

#[async_trait]
pub trait VersionService: Send + Sync {
    fn strategy(&self) -> VersioningStrategy;

    /// Current value without mutation.
    async fn get_version_number(&self) -> Result<Version>;

    /// The value the next increment would return.
    async fn get_next_version_number(&self) -> Result<Version>;

    async fn increment_and_get(&self) -> Result<Version>;

    /// Gives back a version reserved by an aborted commit.
    async fn decrement(&self) -> Result<Version>;
}

/// A single persisted counter, charged one storage round trip per operation.
/// Updates hold the counter row for the whole round trip, so concurrent
/// increments queue behind each other.
#[derive(Debug, Default)]
pub struct CentralizedVersionService {
    counter: AtomicU64,
    cost: StorageCost,
    row: tokio::sync::Mutex<()>,
}

impl CentralizedVersionService {
    pub fn new(cost: StorageCost) -> Self {
        CentralizedVersionService { counter: AtomicU64::new(0), cost, row: tokio::sync::Mutex::new(()) }
    }

    pub fn starting_at(value: Version) -> Self {
        CentralizedVersionService { counter: AtomicU64::new(value), cost: StorageCost::default(), row: tokio::sync::Mutex::new(()) }
    }

    pub fn current(&self) -> Version {
        self.counter.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl VersionService for CentralizedVersionService {
    fn strategy(&self) -> VersioningStrategy {
        VersioningStrategy::Centralized
    }

    async fn get_version_number(&self) -> Result<Version> {
        self.cost.charge().await;
        Ok(self.counter.load(Ordering::SeqCst))
    }

    async fn get_next_version_number(&self) -> Result<Version> {
        self.cost.charge().await;
        Ok(self.counter.load(Ordering::SeqCst) + 1)
    }

    async fn increment_and_get(&self) -> Result<Version> {
        let _row = self.row.lock().await;
        self.cost.charge().await;
        Ok(self.counter.fetch_add(1, Ordering::SeqCst) + 1)
    }

    async fn decrement(&self) -> Result<Version> {
        let _row = self.row.lock().await;
        self.cost.charge().await;
        self.counter
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |v| v.checked_sub(1))
            .map(|prev| prev - 1)
            .map_err(|_| Error::CounterUnderflow)
    }
}

/// Bit layout and identity of a Snowflake generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnowflakeConfig {
    pub epoch_origin_ms: u64,
    pub machine_id: u64,
    pub timestamp_bits: u32,
    pub machine_bits: u32,
    pub sequence_bits: u32,
}

impl Default for SnowflakeConfig {
    fn default() -> Self {
        // 2024-01-01T00:00:00Z
        SnowflakeConfig { epoch_origin_ms: 1_704_067_200_000, machine_id: 0, timestamp_bits: 41, machine_bits: 10, sequence_bits: 12 }
    }
}

impl SnowflakeConfig {
    pub fn with_machine(machine_id: u64) -> Self {
        SnowflakeConfig { machine_id, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.timestamp_bits + self.machine_bits + self.sequence_bits != 63 {
            return Err(Error::InvalidConfig("snowflake bit widths must sum to 63".into()));
        }
        if self.machine_id >= 1u64 << self.machine_bits {
            return Err(Error::InvalidConfig(format!(
                "machine id {} does not fit in {} bits",
                self.machine_id, self.machine_bits
            )));
        }
        Ok(())
    }

    fn max_sequence(&self) -> u64 {
        (1u64 << self.sequence_bits) - 1
    }
}

/// Millisecond wall clock used by the Snowflake generator.
pub trait TimeSource: Send + Sync {
    fn now_ms(&self) -> u64;

    /// A frozen clock never advances on its own, so the generator must not
    /// wait for the next millisecond.
    fn is_frozen(&self) -> bool {
        false
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemTimeSource;

impl TimeSource for SystemTimeSource {
    fn now_ms(&self) -> u64 {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Manually driven clock for tests.
#[derive(Debug, Default)]
pub struct ManualTimeSource {
    now: AtomicU64,
}

impl ManualTimeSource {
    pub fn new(now_ms: u64) -> Self {
        ManualTimeSource { now: AtomicU64::new(now_ms) }
    }

    pub fn set(&self, now_ms: u64) {
        self.now.store(now_ms, Ordering::SeqCst);
    }
}

impl TimeSource for ManualTimeSource {
    fn now_ms(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }

    fn is_frozen(&self) -> bool {
        true
    }
}

pub struct SnowflakeGenerator {
    config: SnowflakeConfig,
    clock: Arc<dyn TimeSource>,
    // (last timestamp issued, sequence within it)
    state: Mutex<Option<(u64, u64)>>,
}

impl fmt::Debug for SnowflakeGenerator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SnowflakeGenerator").field("config", &self.config).finish()
    }
}

impl SnowflakeGenerator {
    pub fn new(config: SnowflakeConfig, clock: Arc<dyn TimeSource>) -> Result<Self> {
        config.validate()?;
        Ok(SnowflakeGenerator { config, clock, state: Mutex::new(None) })
    }

    pub fn config(&self) -> &SnowflakeConfig {
        &self.config
    }

    pub fn next_id(&self) -> Result<u64> {
        let cfg = &self.config;
        let mut state = self.state.lock();
        let mut now = self.clock.now_ms();
        let (ts, seq) = match *state {
            Some((last, _)) if now < last => return Err(Error::ClockMovedBackwards { last_ms: last, now_ms: now }),
            Some((last, seq)) if now == last => {
                if seq < cfg.max_sequence() {
                    (now, seq + 1)
                } else if self.clock.is_frozen() {
                    return Err(Error::SequenceExhausted { timestamp_ms: now });
                } else {
                    while now <= last {
                        std::hint::spin_loop();
                        now = self.clock.now_ms();
                    }
                    (now, 0)
                }
            }
            _ => (now, 0),
        };
        if ts < cfg.epoch_origin_ms {
            return Err(Error::ClockMovedBackwards { last_ms: cfg.epoch_origin_ms, now_ms: ts });
        }
        let offset = ts - cfg.epoch_origin_ms;
        if offset >= 1u64 << cfg.timestamp_bits {
            return Err(Error::InvalidConfig("snowflake timestamp overflowed its bit width".into()));
        }
        *state = Some((ts, seq));
        Ok(offset << (cfg.machine_bits + cfg.sequence_bits) | cfg.machine_id << cfg.sequence_bits | seq)
    }

    /// Splits an id into `(timestamp offset, machine id, sequence)`.
    pub fn decompose(&self, id: u64) -> (u64, u64, u64) {
        let cfg = &self.config;
        let seq = id & cfg.max_sequence();
        let machine = (id >> cfg.sequence_bits) & ((1u64 << cfg.machine_bits) - 1);
        (id >> (cfg.machine_bits + cfg.sequence_bits), machine, seq)
    }
}

/// Decentralized versions: every increment is a fresh Snowflake id.
#[derive(Debug)]
pub struct SnowflakeVersionService {
    generator: SnowflakeGenerator,
}

impl SnowflakeVersionService {
    pub fn new(generator: SnowflakeGenerator) -> Self {
        SnowflakeVersionService { generator }
    }
}

#[async_trait]
impl VersionService for SnowflakeVersionService {
    fn strategy(&self) -> VersioningStrategy {
        VersioningStrategy::Snowflake
    }

    async fn get_version_number(&self) -> Result<Version> {
        Err(Error::UnsupportedByStrategy { operation: "getVersionNumber", strategy: "snowflake" })
    }

    async fn get_next_version_number(&self) -> Result<Version> {
        Err(Error::UnsupportedByStrategy { operation: "getNextVersionNumber", strategy: "snowflake" })
    }

    async fn increment_and_get(&self) -> Result<Version> {
        self.generator.next_id()
    }

    async fn decrement(&self) -> Result<Version> {
        Err(Error::UnsupportedByStrategy { operation: "decrementVersionNumber", strategy: "snowflake" })
    }
}

pub const VERSIONING_SERVICE: &str = "versioning";

/// Serves a version service to the gateway under [`VERSIONING_SERVICE`].
pub struct VersioningHandler {
    inner: Arc<dyn VersionService>,
}

impl VersioningHandler {
    pub fn new(inner: Arc<dyn VersionService>) -> Self {
        VersioningHandler { inner }
    }
}

#[async_trait]
impl CommandHandler for VersioningHandler {
    async fn handle_domain_command(&self, cmd: &Command) -> Result<Payload> {
        let v = match cmd.command_type.as_str() {
            "GetVersionNumber" => self.inner.get_version_number().await?,
            "GetNextVersionNumber" => self.inner.get_next_version_number().await?,
            "IncrementVersion" => self.inner.increment_and_get().await?,
            "DecrementVersion" => self.inner.decrement().await?,
            other => return Err(Error::InvalidConfig(format!("versioning cannot handle {other}"))),
        };
        Payload::encode(&v)
    }
}

/// A centralized counter living behind the gateway, so every version
/// operation pays the transport's round trip.
pub struct RemoteVersionService {
    gateway: CommandGateway,
}

impl RemoteVersionService {
    pub fn new(gateway: CommandGateway) -> Self {
        RemoteVersionService { gateway }
    }

    async fn call(&self, command_type: &str) -> Result<Version> {
        self.gateway.send(Command::new(VERSIONING_SERVICE, command_type, Payload::unit())).await?.decode()
    }
}

#[async_trait]
impl VersionService for RemoteVersionService {
    fn strategy(&self) -> VersioningStrategy {
        VersioningStrategy::CentralizedRemote
    }

    async fn get_version_number(&self) -> Result<Version> {
        self.call("GetVersionNumber").await
    }

    async fn get_next_version_number(&self) -> Result<Version> {
        self.call("GetNextVersionNumber").await
    }

    async fn increment_and_get(&self) -> Result<Version> {
        self.call("IncrementVersion").await
    }

    async fn decrement(&self) -> Result<Version> {
        self.call("DecrementVersion").await
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn frozen(cfg: SnowflakeConfig, now: u64) -> (Arc<ManualTimeSource>, SnowflakeGenerator) {
        let clock = Arc::new(ManualTimeSource::new(now));
        let generator = SnowflakeGenerator::new(cfg, clock.clone()).unwrap();
        (clock, generator)
    }

    #[tokio::test]
    async fn centralized_counts_from_zero() {
        let svc = CentralizedVersionService::default();
        assert_eq!(svc.get_version_number().await.unwrap(), 0);
        for expected in 1..=3 {
            assert_eq!(svc.increment_and_get().await.unwrap(), expected);
        }
        assert_eq!(svc.get_version_number().await.unwrap(), 3);
        assert_eq!(svc.get_next_version_number().await.unwrap(), 4);
    }

    #[tokio::test]
    async fn decrement_stops_at_zero() {
        let svc = CentralizedVersionService::starting_at(5);
        assert_eq!(svc.decrement().await.unwrap(), 4);
        let empty = CentralizedVersionService::default();
        assert_eq!(empty.decrement().await.unwrap_err(), Error::CounterUnderflow);
    }

    #[tokio::test(flavor = "multi_thread", worker_threads = 2)]
    async fn concurrent_increments_and_decrements_net_out() {
        let svc = Arc::new(CentralizedVersionService::starting_at(100));
        let up = {
            let svc = svc.clone();
            tokio::spawn(async move {
                for _ in 0..60 {
                    svc.increment_and_get().await.unwrap();
                }
            })
        };
        let down = {
            let svc = svc.clone();
            tokio::spawn(async move {
                for _ in 0..50 {
                    svc.decrement().await.unwrap();
                }
            })
        };
        up.await.unwrap();
        down.await.unwrap();
        assert_eq!(svc.current(), 110);
    }

    #[test]
    fn frozen_clock_at_origin_yields_bare_sequence() {
        let cfg = SnowflakeConfig::with_machine(0);
        let (_, generator) = frozen(cfg.clone(), cfg.epoch_origin_ms);
        assert_eq!(generator.next_id().unwrap(), 0);
        assert_eq!(generator.next_id().unwrap(), 1);
    }

    #[test]
    fn frozen_clock_exhausts_the_sequence() {
        let cfg = SnowflakeConfig { timestamp_bits: 51, machine_bits: 10, sequence_bits: 2, ..SnowflakeConfig::default() };
        let (_, generator) = frozen(cfg.clone(), cfg.epoch_origin_ms + 3);
        for _ in 0..4 {
            generator.next_id().unwrap();
        }
        assert!(matches!(generator.next_id(), Err(Error::SequenceExhausted { .. })));
    }

    #[test]
    fn regressing_clock_is_rejected() {
        let cfg = SnowflakeConfig::default();
        let (clock, generator) = frozen(cfg.clone(), cfg.epoch_origin_ms + 10);
        generator.next_id().unwrap();
        clock.set(cfg.epoch_origin_ms + 9);
        assert!(matches!(generator.next_id(), Err(Error::ClockMovedBackwards { last_ms: _, now_ms: _ })));
    }

    #[test]
    fn config_must_fit() {
        assert!(SnowflakeConfig { timestamp_bits: 40, ..SnowflakeConfig::default() }.validate().is_err());
        assert!(SnowflakeConfig::with_machine(1024).validate().is_err());
    }

    #[tokio::test]
    async fn snowflake_has_no_global_read() {
        let generator = SnowflakeGenerator::new(SnowflakeConfig::default(), Arc::new(SystemTimeSource)).unwrap();
        let svc = SnowflakeVersionService::new(generator);
        assert!(matches!(svc.get_version_number().await, Err(Error::UnsupportedByStrategy { .. })));
        assert!(matches!(svc.decrement().await, Err(Error::UnsupportedByStrategy { .. })));
    }

    #[test]
    fn system_clock_ids_are_unique_across_machines() {
        let ids: Vec<Vec<u64>> = (0..4u64)
            .map(|m| {
                std::thread::spawn(move || {
                    let g = SnowflakeGenerator::new(SnowflakeConfig::with_machine(m), Arc::new(SystemTimeSource)).unwrap();
                    (0..25_000).map(|_| g.next_id().unwrap()).collect::<Vec<_>>()
                })
            })
            .map(|h| h.join().unwrap())
            .collect();
        for per_gen in &ids {
            assert!(per_gen.windows(2).all(|w| w[0] < w[1]));
        }
        let all: HashSet<u64> = ids.into_iter().flatten().collect();
        assert_eq!(all.len(), 100_000);
    }

    proptest! {
        // Replays a random walk of clock ticks against every generator and
        // checks ids against the bit-packing formula.
        #[test]
        fn ids_match_layout_and_increase(steps in prop::collection::vec(0u64..3, 1..200), machines in 1u64..5) {
            let cfg0 = SnowflakeConfig::default();
            let clock = Arc::new(ManualTimeSource::new(cfg0.epoch_origin_ms));
            let gens: Vec<_> = (0..machines)
                .map(|m| SnowflakeGenerator::new(SnowflakeConfig::with_machine(m), clock.clone()).unwrap())
                .collect();
            let mut seen = HashSet::new();
            let mut last = vec![None; gens.len()];
            let mut now = cfg0.epoch_origin_ms;
            for step in steps {
                now += step;
                clock.set(now);
                for (i, g) in gens.iter().enumerate() {
                    let id = g.next_id().unwrap();
                    let (ts, machine, _) = g.decompose(id);
                    prop_assert_eq!(ts, now - cfg0.epoch_origin_ms);
                    prop_assert_eq!(machine, i as u64);
                    if let Some(prev) = last[i] {
                        prop_assert!(id > prev);
                    }
                    last[i] = Some(id);
                    prop_assert!(seen.insert(id));
                }
            }
        }

        #[test]
        fn concurrent_increment_history_is_gap_free(n in 1usize..200) {
            let rt = tokio::runtime::Builder::new_current_thread().build().unwrap();
            let values = rt.block_on(async {
                let svc = Arc::new(CentralizedVersionService::default());
                let tasks: Vec<_> = (0..n).map(|_| {
                    let svc = svc.clone();
                    tokio::spawn(async move { svc.increment_and_get().await.unwrap() })
                }).collect();
                let mut out = Vec::new();
                for t in tasks { out.push(t.await.unwrap()); }
                out
            });
            let mut sorted = values.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (1..=n as u64).collect::<Vec<_>>());
        }
    }
}
