//! Handler decorators that apply a command's transactional envelope on the
//! receiving side.

use std::sync::Arc;

use async_trait::async_trait;

use super::{CausalUnitOfWorkService, SagaUnitOfWorkService, UnitOfWorkService, UowHandle};
use crate::error::{Error, Result};
use crate::messaging::{Command, CommandHandlerDecorator, Envelope, Next, Payload};

pub const COMMIT_SAGA: &str = "CommitSaga";
pub const ABORT_SAGA: &str = "AbortSaga";
pub const COMMIT_CAUSAL: &str = "CommitCausal";
pub const ABORT_CAUSAL: &str = "AbortCausal";

fn resolve(svc: &dyn UnitOfWorkService, cmd: &Command) -> Result<UowHandle> {
    let id = cmd
        .uow_ref
        .ok_or_else(|| Error::InvalidConfig(format!("{} carries no unit of work", cmd.command_type)))?;
    svc.lookup(id)
}

/// Takes the semantic lock requested by a saga envelope before the handler runs.
pub struct SagaDecorator {
    service: Arc<SagaUnitOfWorkService>,
}

impl SagaDecorator {
    pub fn new(service: Arc<SagaUnitOfWorkService>) -> Self {
        SagaDecorator { service }
    }
}

#[async_trait]
impl CommandHandlerDecorator for SagaDecorator {
    async fn handle(&self, cmd: &Command, next: Next<'_>) -> Result<Payload> {
        match cmd.command_type.as_str() {
            COMMIT_SAGA => {
                self.service.commit(&resolve(self.service.as_ref(), cmd)?).await?;
                return Ok(Payload::unit());
            }
            ABORT_SAGA => {
                self.service.abort(&resolve(self.service.as_ref(), cmd)?).await?;
                return Ok(Payload::unit());
            }
            _ => {}
        }
        if let (Envelope::Saga(env), Some(id)) = (&cmd.envelope, cmd.aggregate_id) {
            let uow = resolve(self.service.as_ref(), cmd)?;
            self.service.acquire_lock(&uow, id, &env.forbidden_states, &env.acquire_state).await?;
        }
        next.run(cmd).await
    }
}

/// Checks that a causal envelope matches the unit of work it names.
pub struct CausalDecorator {
    service: Arc<CausalUnitOfWorkService>,
}

impl CausalDecorator {
    pub fn new(service: Arc<CausalUnitOfWorkService>) -> Self {
        CausalDecorator { service }
    }
}

#[async_trait]
impl CommandHandlerDecorator for CausalDecorator {
    async fn handle(&self, cmd: &Command, next: Next<'_>) -> Result<Payload> {
        match cmd.command_type.as_str() {
            COMMIT_CAUSAL => {
                self.service.commit(&resolve(self.service.as_ref(), cmd)?).await?;
                return Ok(Payload::unit());
            }
            ABORT_CAUSAL => {
                self.service.abort(&resolve(self.service.as_ref(), cmd)?).await?;
                return Ok(Payload::unit());
            }
            _ => {}
        }
        if let Envelope::Causal(env) = &cmd.envelope {
            let uow = self.service.lookup(env.uow_id)?;
            let snapshot = uow.lock().snapshot_version;
            if snapshot != env.snapshot_version {
                return Err(Error::InvalidConfig(format!(
                    "envelope snapshot {} does not match unit of work snapshot {snapshot}",
                    env.snapshot_version
                )));
            }
        }
        next.run(cmd).await
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::{AggregateStore, SagaState};
    use crate::messaging::{CommandGateway, CommandHandler};
    use crate::transaction::test_support::roster;
    use crate::versioning::CentralizedVersionService;

    struct Touch;

    #[async_trait]
    impl CommandHandler for Touch {
        async fn handle_domain_command(&self, _cmd: &Command) -> Result<Payload> {
            Ok(Payload::unit())
        }
    }

    #[tokio::test(start_paused = true)]
    async fn saga_envelope_locks_and_commit_command_releases() {
        let store = Arc::new(AggregateStore::new());
        let svc = Arc::new(SagaUnitOfWorkService::new(store.clone(), Arc::new(CentralizedVersionService::default())));
        let seed = svc.create_unit_of_work("seed").await.unwrap();
        svc.create_aggregate(&seed, 7, roster(1)).await.unwrap();
        svc.commit(&seed).await.unwrap();

        let gw = CommandGateway::local();
        gw.register_handler("svc", Arc::new(Touch), vec![Arc::new(SagaDecorator::new(svc.clone()))]).unwrap();
        let uow = svc.create_unit_of_work("f").await.unwrap();
        let uow_id = uow.lock().id;
        let busy = SagaState::new("BUSY");
        gw.send(Command::new("svc", "Touch", Payload::unit()).for_aggregate(7).in_uow(uow_id).saga(vec![busy.clone()], busy.clone()))
            .await
            .unwrap();
        assert_eq!(store.latest_committed(7).unwrap().saga_state, busy);
        gw.send(Command::new("svc", COMMIT_SAGA, Payload::unit()).in_uow(uow_id)).await.unwrap();
        assert!(store.latest_committed(7).unwrap().saga_state.is_free());
    }

    #[tokio::test(start_paused = true)]
    async fn causal_envelope_must_match_snapshot() {
        let store = Arc::new(AggregateStore::new());
        let svc = Arc::new(CausalUnitOfWorkService::new(store, Arc::new(CentralizedVersionService::default())).unwrap());
        let gw = CommandGateway::local();
        gw.register_handler("svc", Arc::new(Touch), vec![Arc::new(CausalDecorator::new(svc.clone()))]).unwrap();
        let uow = svc.create_unit_of_work("f").await.unwrap();
        let (id, snap) = {
            let u = uow.lock();
            (u.id, u.snapshot_version)
        };
        gw.send(Command::new("svc", "Touch", Payload::unit()).causal(snap, id)).await.unwrap();
        let err = gw.send(Command::new("svc", "Touch", Payload::unit()).causal(snap + 5, id)).await.unwrap_err();
        assert_eq!(err.name(), "InvalidConfig");
    }
}
