//! Discrete-event simulator for transactional microservice workflows.

pub mod aggregate;
pub mod app;
pub mod bench;
pub mod coordination;
pub mod error;
pub mod impairment;
pub mod messaging;
pub mod monitoring;
pub mod notification;
pub mod sim;
pub mod transaction;
pub mod versioning;

pub use error::{Error, ErrorKind, ErrorRegistry, Result};
