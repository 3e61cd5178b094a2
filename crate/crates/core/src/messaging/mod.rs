//! Downstream-to-upstream command dispatch.

mod command;
mod gateway;
mod handler;
mod retry;
mod transport;

pub use command::{
    CausalCommandEnvelope, Command, CommandId, CommandResponse, Envelope, OpaqueValue, Outcome, Payload,
    SagaCommandEnvelope, UowId,
};
pub use gateway::{CommandGateway, PendingResponse};
pub use handler::{CommandHandler, CommandHandlerDecorator, HandlerChain, HandlerRegistry, Next};
pub use retry::RetryPolicy;
pub use transport::{LatencySpec, TransportConfig, TransportMode};

pub(crate) use transport::LatencySampler;
