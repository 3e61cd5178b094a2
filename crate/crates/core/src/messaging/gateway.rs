//! The command gateway: one dispatch interface over every transport.

use std::future::Future;
use std::pin::Pin;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::task::{Context, Poll};

use parking_lot::RwLock;
use tokio::sync::Semaphore;
use tokio::task::JoinHandle;

use super::command::{Command, Payload};
use super::handler::{CommandHandler, CommandHandlerDecorator, HandlerChain, HandlerRegistry};
use super::retry::RetryPolicy;
use super::transport::{build_transport, Transport, TransportConfig, TransportMode};
use crate::error::{Error, ErrorRegistry, Result};

struct Inner {
    registry: Arc<HandlerRegistry>,
    errors: ErrorRegistry,
    transport: RwLock<(TransportConfig, Arc<dyn Transport>)>,
    retry: RwLock<RetryPolicy>,
    in_flight: AtomicUsize,
    next_command_id: AtomicU64,
    pool: RwLock<Arc<Semaphore>>,
}

/// Cheaply cloneable handle; clones share handlers, transport and counters.
#[derive(Clone)]
pub struct CommandGateway {
    inner: Arc<Inner>,
}

struct InFlight<'a>(&'a AtomicUsize);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::AcqRel);
    }
}

impl CommandGateway {
    pub fn new(transport: TransportConfig, retry: RetryPolicy, errors: ErrorRegistry) -> Result<Self> {
        let registry = Arc::new(HandlerRegistry::default());
        let built = build_transport(&transport, registry.clone(), errors.clone())?;
        let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        Ok(CommandGateway {
            inner: Arc::new(Inner {
                registry,
                errors,
                transport: RwLock::new((transport, built)),
                retry: RwLock::new(retry),
                in_flight: AtomicUsize::new(0),
                next_command_id: AtomicU64::new(1),
                pool: RwLock::new(Arc::new(Semaphore::new(workers))),
            }),
        })
    }

    /// Local transport, default retries.
    pub fn local() -> Self {
        Self::new(TransportConfig::default(), RetryPolicy::default(), ErrorRegistry::default())
            .expect("default transport config is valid")
    }

    pub fn errors(&self) -> &ErrorRegistry {
        &self.inner.errors
    }

    pub fn register_handler(
        &self,
        service: &str,
        handler: Arc<dyn CommandHandler>,
        decorators: Vec<Arc<dyn CommandHandlerDecorator>>,
    ) -> Result<()> {
        self.inner.registry.register(service, HandlerChain::new(handler, decorators))
    }

    pub fn is_registered(&self, service: &str) -> bool {
        self.inner.registry.contains(service)
    }

    /// Swaps the transport. Refused while any command is in flight.
    pub fn configure_transport(&self, config: TransportConfig) -> Result<()> {
        let in_flight = self.inner.in_flight.load(Ordering::Acquire);
        if in_flight > 0 {
            return Err(Error::TransportBusy(in_flight));
        }
        let built = build_transport(&config, self.inner.registry.clone(), self.inner.errors.clone())?;
        *self.inner.transport.write() = (config, built);
        Ok(())
    }

    pub fn transport_mode(&self) -> TransportMode {
        self.inner.transport.read().0.mode
    }

    pub fn transport_config(&self) -> TransportConfig {
        self.inner.transport.read().0.clone()
    }

    pub fn set_retry_policy(&self, policy: RetryPolicy) {
        *self.inner.retry.write() = policy;
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        self.inner.retry.read().clone()
    }

    /// Bounds the number of `send_async` calls executing at once.
    pub fn set_async_pool_size(&self, workers: usize) {
        *self.inner.pool.write() = Arc::new(Semaphore::new(workers.max(1)));
    }

    pub fn in_flight(&self) -> usize {
        self.inner.in_flight.load(Ordering::Acquire)
    }

    /// Dispatches and waits. Infrastructure errors are retried with backoff;
    /// domain errors return at once. Exhausted retries end in
    /// `ServiceUnavailable`.
    pub async fn send(&self, mut cmd: Command) -> Result<Payload> {
        self.inner.in_flight.fetch_add(1, Ordering::AcqRel);
        let _guard = InFlight(&self.inner.in_flight);
        if cmd.command_id == 0 {
            cmd.command_id = self.inner.next_command_id.fetch_add(1, Ordering::Relaxed);
        }
        let transport = self.inner.transport.read().1.clone();
        let policy = self.retry_policy();
        let (result, attempts) = policy.run(|_| transport.dispatch(&cmd)).await;
        match result {
            Err(e) if e.is_retryable() => Err(fallback_send(&cmd, attempts, e)),
            other => other,
        }
    }

    /// Runs [`send`](Self::send) on the worker pool and returns immediately.
    pub fn send_async(&self, cmd: Command) -> PendingResponse {
        let gateway = self.clone();
        let pool = self.inner.pool.read().clone();
        PendingResponse {
            handle: tokio::spawn(async move {
                let _permit = pool.acquire_owned().await.map_err(|_| Error::infra("PoolClosed", "worker pool closed"))?;
                gateway.send(cmd).await
            }),
        }
    }
}

fn fallback_send(cmd: &Command, attempts: u32, cause: Error) -> Error {
    tracing::warn!(target = %cmd.target_service, command = %cmd.command_type, attempts, "retries exhausted");
    Error::ServiceUnavailable { target: cmd.target_service.clone(), attempts, cause: cause.to_string() }
}

/// Future returned by [`CommandGateway::send_async`].
pub struct PendingResponse {
    handle: JoinHandle<Result<Payload>>,
}

impl Future for PendingResponse {
    type Output = Result<Payload>;

    fn poll(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Self::Output> {
        Pin::new(&mut self.handle)
            .poll(cx)
            .map(|joined| joined.unwrap_or_else(|e| Err(Error::infra("TaskFailed", e.to_string()))))
    }
}
