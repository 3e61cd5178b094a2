//! Configuration-driven assembly of the whole simulator around the sample
//! application.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::aggregate::{Aggregate, AggregateStore};
use crate::app::{AppEnvironment, QuizzesApp, Tournament};
use crate::coordination::WorkflowRuntime;
use crate::error::{Error, ErrorRegistry, Result};
use crate::impairment::ImpairmentHandler;
use crate::messaging::{CommandGateway, CommandHandlerDecorator, LatencySpec, RetryPolicy, TransportConfig, TransportMode};
use crate::monitoring::{SpanRecorder, TracingDecorator};
use crate::notification::{EventScheduler, EventTopology, NotificationService};
use crate::transaction::{
    CausalDecorator, CausalUnitOfWorkService, SagaDecorator, SagaUnitOfWorkService, TransactionModel, UnitOfWorkService,
};
use crate::versioning::{
    CentralizedVersionService, RemoteVersionService, SnowflakeConfig, SnowflakeGenerator, SnowflakeVersionService,
    SystemTimeSource, VersionService, VersioningHandler, VersioningStrategy, VERSIONING_SERVICE,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransactionSection {
    pub model: TransactionModel,
    /// How long a saga queues for a semantic lock before a retryable conflict.
    pub saga_lock_wait_ms: u64,
}

impl Default for TransactionSection {
    fn default() -> Self {
        TransactionSection { model: TransactionModel::default(), saga_lock_wait_ms: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RpcSection {
    pub one_way_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BrokerSection {
    pub delivery_ms: f64,
    pub poll_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportSection {
    pub mode: TransportMode,
    pub rpc: RpcSection,
    pub broker: BrokerSection,
    pub response_timeout_ms: u64,
}

impl Default for RpcSection {
    fn default() -> Self {
        RpcSection { one_way_ms: 1.0 }
    }
}

impl Default for BrokerSection {
    fn default() -> Self {
        BrokerSection { delivery_ms: 1.0, poll_ms: 5 }
    }
}

impl Default for TransportSection {
    fn default() -> Self {
        TransportSection {
            mode: TransportMode::Local,
            rpc: RpcSection::default(),
            broker: BrokerSection::default(),
            response_timeout_ms: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrySection {
    pub max_attempts: u32,
    pub base_ms: u64,
    pub multiplier: f64,
    /// Fraction of each backoff that is randomized.
    pub jitter: f64,
    /// Retry without limit; `max_attempts` is ignored.
    pub unbounded: bool,
}

impl Default for RetrySection {
    fn default() -> Self {
        let p = RetryPolicy::default();
        RetrySection {
            max_attempts: p.max_attempts,
            base_ms: p.base_backoff_ms,
            multiplier: p.multiplier,
            jitter: p.jitter,
            unbounded: false,
        }
    }
}

impl RetrySection {
    pub fn policy(&self, seed: u64) -> RetryPolicy {
        let policy = if self.unbounded {
            let mut p = RetryPolicy::unbounded();
            p.base_backoff_ms = self.base_ms;
            p.multiplier = self.multiplier;
            p
        } else {
            RetryPolicy::new(self.max_attempts, self.base_ms, self.multiplier)
        };
        policy.with_jitter(self.jitter).with_seed(seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VersioningSection {
    pub strategy: VersioningStrategy,
    pub machine_id: u64,
    pub epoch_origin_ms: u64,
}

impl Default for VersioningSection {
    fn default() -> Self {
        let sf = SnowflakeConfig::default();
        VersioningSection { strategy: VersioningStrategy::Centralized, machine_id: 1, epoch_origin_ms: sf.epoch_origin_ms }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EventsSection {
    pub publish_interval_ms: u64,
    pub handle_interval_ms: u64,
    /// Cycles only run when invoked explicitly.
    pub manual_mode: bool,
}

impl Default for EventsSection {
    fn default() -> Self {
        EventsSection { publish_interval_ms: 50, handle_interval_ms: 50, manual_mode: true }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoordinationSection {
    pub parallel_steps: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImpairmentSection {
    pub plan_dir: Option<PathBuf>,
    pub report_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StorageSection {
    /// Simulated latency of one storage round trip.
    pub access_ms: f64,
}

impl Default for StorageSection {
    fn default() -> Self {
        StorageSection { access_ms: 1.0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MessagingSection {
    /// Worker pool size for asynchronous sends; 0 means hardware parallelism.
    pub async_pool: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitoringSection {
    pub trace_path: Option<PathBuf>,
}

/// Every knob of a simulation, loadable from TOML.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub transaction: TransactionSection,
    pub transport: TransportSection,
    pub retry: RetrySection,
    pub versioning: VersioningSection,
    pub events: EventsSection,
    pub coordination: CoordinationSection,
    pub impairment: ImpairmentSection,
    pub storage: StorageSection,
    pub messaging: MessagingSection,
    pub monitoring: MonitoringSection,
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn transport_config(&self) -> TransportConfig {
        TransportConfig {
            mode: self.transport.mode,
            rpc_one_way: LatencySpec::fixed_ms(self.transport.rpc.one_way_ms),
            broker_delivery: LatencySpec::fixed_ms(self.transport.broker.delivery_ms),
            broker_poll_ms: self.transport.broker.poll_ms,
            response_timeout_ms: self.transport.response_timeout_ms,
            seed: self.seed,
        }
    }

    /// Services own separate event stores exactly when they talk over a network.
    pub fn event_topology(&self) -> EventTopology {
        if self.transport.mode.is_distributed() {
            EventTopology::PerService
        } else {
            EventTopology::Shared
        }
    }

    pub fn storage_cost(&self) -> Result<Duration> {
        let ms = self.storage.access_ms;
        if !ms.is_finite() || ms < 0.0 {
            return Err(Error::InvalidConfig(format!("storage.access_ms must be non-negative, got {ms}")));
        }
        Ok(Duration::from_secs_f64(ms / 1000.0))
    }

    /// Rejects combinations the simulator cannot run.
    pub fn validate(&self) -> Result<()> {
        if self.transaction.model == TransactionModel::Causal && !self.versioning.strategy.is_centralized() {
            return Err(Error::IncompatibleVersioningStrategy);
        }
        if !(0.0..=1.0).contains(&self.retry.jitter) {
            return Err(Error::InvalidConfig("retry.jitter must lie in [0, 1]".into()));
        }
        if self.retry.max_attempts == 0 && !self.retry.unbounded {
            return Err(Error::InvalidConfig("retry.max_attempts must be at least 1".into()));
        }
        self.storage_cost()?;
        Ok(())
    }
}

/// A fully wired simulator running the quizzes application.
pub struct Simulator {
    pub config: SimConfig,
    pub store: Arc<AggregateStore>,
    pub gateway: CommandGateway,
    pub versions: Arc<dyn VersionService>,
    pub uows: Arc<dyn UnitOfWorkService>,
    pub notifications: Arc<NotificationService>,
    pub recorder: Arc<SpanRecorder>,
    pub impairments: Arc<ImpairmentHandler>,
    pub app: QuizzesApp,
    scheduler: Mutex<Option<EventScheduler>>,
}

impl Simulator {
    /// Must be called inside a Tokio runtime: the broker transport spawns tasks.
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        let errors = ErrorRegistry::default();
        let store = Arc::new(AggregateStore::new());
        store.cost().set(config.storage_cost()?);
        let retry = config.retry.policy(config.seed);
        let gateway = CommandGateway::new(config.transport_config(), retry.clone(), errors.clone())?;
        if config.messaging.async_pool > 0 {
            gateway.set_async_pool_size(config.messaging.async_pool);
        }

        let versions: Arc<dyn VersionService> = match config.versioning.strategy {
            VersioningStrategy::Centralized => Arc::new(CentralizedVersionService::new(store.cost().clone())),
            VersioningStrategy::Snowflake => {
                let sf = SnowflakeConfig {
                    epoch_origin_ms: config.versioning.epoch_origin_ms,
                    ..SnowflakeConfig::with_machine(config.versioning.machine_id)
                };
                Arc::new(SnowflakeVersionService::new(SnowflakeGenerator::new(sf, Arc::new(SystemTimeSource))?))
            }
            VersioningStrategy::CentralizedRemote => {
                let backend = Arc::new(CentralizedVersionService::new(store.cost().clone()));
                gateway.register_handler(VERSIONING_SERVICE, Arc::new(VersioningHandler::new(backend)), Vec::new())?;
                Arc::new(RemoteVersionService::new(gateway.clone()))
            }
        };

        let recorder = Arc::new(SpanRecorder::new());
        let mut decorators: Vec<Arc<dyn CommandHandlerDecorator>> = vec![Arc::new(TracingDecorator::new(recorder.clone()))];
        let uows: Arc<dyn UnitOfWorkService> = match config.transaction.model {
            TransactionModel::Saga => {
                let saga = Arc::new(
                    SagaUnitOfWorkService::new(store.clone(), versions.clone())
                        .with_lock_wait(Duration::from_millis(config.transaction.saga_lock_wait_ms)),
                );
                decorators.push(Arc::new(SagaDecorator::new(saga.clone())));
                saga
            }
            TransactionModel::Causal => {
                let causal = Arc::new(CausalUnitOfWorkService::new(store.clone(), versions.clone())?);
                causal.set_commit_policy(retry.clone());
                decorators.push(Arc::new(CausalDecorator::new(causal.clone())));
                causal
            }
        };

        let transport = config.transport_config();
        let notifications = Arc::new(NotificationService::new(
            store.clone(),
            config.event_topology(),
            transport.event_delivery(),
            config.seed,
        )?);

        let impairments = Arc::new(ImpairmentHandler::new());
        if let Some(dir) = &config.impairment.plan_dir {
            impairments.load_dir(dir)?;
        }
        impairments.set_report_path(config.impairment.report_path.clone());

        let mut runtime = WorkflowRuntime::new(uows.clone(), errors);
        runtime.impairments = Some(impairments.clone());
        runtime.recorder = Some(recorder.clone());
        runtime.step_retry = retry;
        runtime.parallel_steps = config.coordination.parallel_steps;

        let app = QuizzesApp::install(AppEnvironment {
            gateway: gateway.clone(),
            uows: uows.clone(),
            runtime,
            notifications: notifications.clone(),
            decorators,
        })?;

        let sim = Simulator {
            config,
            store,
            gateway,
            versions,
            uows,
            notifications,
            recorder,
            impairments,
            app,
            scheduler: Mutex::new(None),
        };
        if !sim.config.events.manual_mode {
            sim.start_scheduler();
        }
        Ok(sim)
    }

    pub fn set_storage_cost(&self, cost: Duration) {
        self.store.cost().set(cost);
    }

    /// Starts background publishing and handling loops.
    pub fn start_scheduler(&self) {
        let events = &self.config.events;
        *self.scheduler.lock() = Some(EventScheduler::spawn(
            self.notifications.clone(),
            vec![Tournament::TYPE.to_string()],
            Duration::from_millis(events.publish_interval_ms.max(1)),
            Duration::from_millis(events.handle_interval_ms.max(1)),
        ));
    }

    pub fn stop_scheduler(&self) {
        self.scheduler.lock().take();
    }

    /// Writes finished spans to the configured trace file, if any.
    pub fn flush_trace(&self) -> Result<usize> {
        match &self.config.monitoring.trace_path {
            Some(path) => self.recorder.flush(path),
            None => Ok(0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_keys() {
        let text = r#"
            seed = 9
            [transaction]
            model = "tcc"
            [transport]
            mode = "rpc"
            [transport.rpc]
            one_way_ms = 10
            [retry]
            max_attempts = 3
            [versioning]
            strategy = "centralized-remote"
            [coordination]
            parallel_steps = true
            [storage]
            access_ms = 0.5
        "#;
        let cfg = SimConfig::from_toml(text).unwrap();
        assert_eq!(cfg.transaction.model, TransactionModel::Causal);
        assert_eq!(cfg.transport.mode, TransportMode::Rpc);
        assert_eq!(cfg.transport_config().rpc_one_way, LatencySpec::fixed_ms(10.0));
        assert_eq!(cfg.retry.policy(0).max_attempts, 3);
        assert_eq!(cfg.event_topology(), EventTopology::PerService);
        assert!(cfg.coordination.parallel_steps);
        assert_eq!(SimConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
        assert!(SimConfig::from_toml("[transport]\nbogus = 1").is_err());
    }

    #[tokio::test(start_paused = true)]
    async fn tcc_with_snowflake_is_refused() {
        let mut cfg = SimConfig::default();
        cfg.transaction.model = TransactionModel::Causal;
        cfg.versioning.strategy = VersioningStrategy::Snowflake;
        assert_eq!(Simulator::new(cfg).err().unwrap(), Error::IncompatibleVersioningStrategy);
    }

    #[tokio::test(start_paused = true)]
    async fn every_supported_combination_starts() {
        for model in [TransactionModel::Saga, TransactionModel::Causal] {
            for mode in TransportMode::ALL {
                for strategy in [VersioningStrategy::Centralized, VersioningStrategy::Snowflake, VersioningStrategy::CentralizedRemote] {
                    let mut cfg = SimConfig::default();
                    cfg.transaction.model = model;
                    cfg.transport.mode = mode;
                    cfg.versioning.strategy = strategy;
                    let ok = Simulator::new(cfg).is_ok();
                    assert_eq!(ok, model == TransactionModel::Saga || strategy.is_centralized(), "{model} {mode} {strategy:?}");
                }
            }
        }
    }
}
