//! Fixtures shared by the criterion benches.

use microsim::bench::BenchConfig;
use microsim::messaging::TransportMode;
use microsim::transaction::TransactionModel;

/// Current-thread runtime on paused virtual time, as the simulator expects.
pub fn virtual_runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_current_thread()
        .enable_time()
        .start_paused(true)
        .build()
        .expect("tokio runtime")
}

/// A small storm: enough contention to exercise retries without long runs.
pub fn small_storm(model: TransactionModel, transport: TransportMode) -> BenchConfig {
    BenchConfig { model, transport, clients: 4, requests_per_client: 4, ..BenchConfig::default() }
}
