//! Command handlers, decorator pipeline and the service registry.

use std::collections::HashMap;
use std::sync::Arc;

use async_trait::async_trait;
use parking_lot::RwLock;

use super::command::{Command, Payload};
use crate::error::{Error, Result};

#[async_trait]
pub trait CommandHandler: Send + Sync {
    async fn handle_domain_command(&self, cmd: &Command) -> Result<Payload>;
}

/// Middleware around a handler. Implementations call `next.run(cmd)` to
/// continue down the pipeline, or return early to short-circuit it.
#[async_trait]
pub trait CommandHandlerDecorator: Send + Sync {
    async fn handle(&self, cmd: &Command, next: Next<'_>) -> Result<Payload>;
}

/// The remainder of a decorator pipeline.
pub struct Next<'a> {
    decorators: &'a [Arc<dyn CommandHandlerDecorator>],
    handler: &'a dyn CommandHandler,
}

impl<'a> Next<'a> {
    pub async fn run(self, cmd: &Command) -> Result<Payload> {
        match self.decorators.split_first() {
            Some((first, rest)) => first.handle(cmd, Next { decorators: rest, handler: self.handler }).await,
            None => self.handler.handle_domain_command(cmd).await,
        }
    }
}

pub struct HandlerChain {
    decorators: Vec<Arc<dyn CommandHandlerDecorator>>,
    handler: Arc<dyn CommandHandler>,
}

impl HandlerChain {
    pub fn new(handler: Arc<dyn CommandHandler>, decorators: Vec<Arc<dyn CommandHandlerDecorator>>) -> Self {
        HandlerChain { decorators, handler }
    }

    /// Runs decorators outermost-first, then the handler.
    pub async fn dispatch(&self, cmd: &Command) -> Result<Payload> {
        Next { decorators: &self.decorators, handler: self.handler.as_ref() }.run(cmd).await
    }
}

#[derive(Default)]
pub struct HandlerRegistry {
    chains: RwLock<HashMap<String, Arc<HandlerChain>>>,
}

impl HandlerRegistry {
    pub fn register(&self, service: &str, chain: HandlerChain) -> Result<()> {
        let mut chains = self.chains.write();
        if chains.contains_key(service) {
            return Err(Error::DuplicateRegistration(service.to_string()));
        }
        chains.insert(service.to_string(), Arc::new(chain));
        Ok(())
    }

    pub fn get(&self, service: &str) -> Result<Arc<HandlerChain>> {
        self.chains.read().get(service).cloned().ok_or_else(|| Error::UnknownService(service.to_string()))
    }

    pub fn contains(&self, service: &str) -> bool {
        self.chains.read().contains_key(service)
    }
}
