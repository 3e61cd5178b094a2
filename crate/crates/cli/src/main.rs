//! `sim-bench`: concurrent participant-addition storms against the simulator.

use std::path::PathBuf;

use anyhow::Context;
use clap::Parser;
use microsim::bench::{run_bench, BenchConfig};
use microsim::messaging::TransportMode;
use microsim::sim::SimConfig;
use microsim::transaction::TransactionModel;
use microsim::versioning::VersioningStrategy;

#[derive(Debug, Parser)]
#[command(name = "sim-bench", version, about = "Contention benchmark for the microservice simulator")]
struct Args {
    /// Transaction model: saga or tcc.
    #[arg(long, default_value = "saga")]
    model: TransactionModel,
    /// local, local-serialized, rpc or broker.
    #[arg(long, default_value = "local")]
    transport: TransportMode,
    /// centralized, snowflake or centralized-remote.
    #[arg(long, default_value = "centralized")]
    versioning: VersioningStrategy,
    #[arg(long, default_value_t = 16)]
    clients: usize,
    /// Requests issued sequentially by each client.
    #[arg(long, default_value_t = 25)]
    requests: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Directory of impairment plan CSV files.
    #[arg(long)]
    impairments: Option<PathBuf>,
    /// Append finished spans to this JSONL file.
    #[arg(long, env = "SIM_TRACE_PATH")]
    trace_out: Option<PathBuf>,
    /// Write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    runs: usize,
    /// Base simulator configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// One-way RPC latency in milliseconds.
    #[arg(long)]
    one_way_ms: Option<f64>,
    /// Simulated storage access latency in milliseconds.
    #[arg(long)]
    storage_ms: Option<f64>,
    /// Attempts per retried operation.
    #[arg(long)]
    max_attempts: Option<u32>,
    /// Measure wall-clock time on a multi-threaded runtime instead of virtual time.
    #[arg(long)]
    real_time: bool,
    /// Print the JSON report to stdout instead of the table.
    #[arg(long)]
    json: bool,
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let base = match &args.config {
        Some(path) => SimConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => SimConfig::default(),
    };
    let cfg = BenchConfig {
        model: args.model,
        transport: args.transport,
        versioning: args.versioning,
        clients: args.clients,
        requests_per_client: args.requests,
        seed: args.seed,
        impairments_dir: args.impairments,
        runs: args.runs,
        deterministic: !args.real_time,
        one_way_ms: args.one_way_ms,
        storage_ms: args.storage_ms,
        max_attempts: args.max_attempts,
        trace_out: args.trace_out,
        base,
    };
    let report = run_bench(&cfg)?;
    if let Some(path) = &args.report {
        report.write_json(path).with_context(|| format!("writing {}", path.display()))?;
    }
    if args.json {
        println!("{}", report.to_json()?);
    } else {
        print!("{}", report.render_table());
    }
    Ok(())
}
