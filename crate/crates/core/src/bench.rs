//! Contention benchmark: concurrent participant additions against a single
//! tournament, summarized as latency percentiles and success rates.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::time::Instant;

use crate::app::Tournament;
use crate::error::{Error, Result};
use crate::messaging::{TransportConfig, TransportMode};
use crate::sim::{SimConfig, Simulator};
use crate::transaction::TransactionModel;
use crate::versioning::VersioningStrategy;

/// Lower median and nearest-rank 95th percentile of `latencies`.
pub fn compute_stats(latencies: &[f64]) -> Result<(f64, f64)> {
    if latencies.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut sorted = latencies.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = (95 * n).div_ceil(100);
    Ok((sorted[(n - 1) / 2], sorted[rank - 1]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub model: TransactionModel,
    pub transport: TransportMode,
    pub versioning: VersioningStrategy,
    pub clients: usize,
    pub requests_per_client: usize,
    pub seed: u64,
    pub impairments_dir: Option<PathBuf>,
    pub runs: usize,
    /// Run on a single-threaded runtime with virtual time.
    pub deterministic: bool,
    /// Overrides `transport.rpc.one_way_ms` of the base configuration.
    pub one_way_ms: Option<f64>,
    /// Overrides `storage.access_ms` of the base configuration.
    pub storage_ms: Option<f64>,
    /// Overrides `retry.max_attempts` of the base configuration.
    pub max_attempts: Option<u32>,
    pub trace_out: Option<PathBuf>,
    /// Remaining simulator settings.
    pub base: SimConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            model: TransactionModel::Saga,
            transport: TransportMode::Local,
            versioning: VersioningStrategy::Centralized,
            clients: 16,
            requests_per_client: 25,
            seed: 1,
            impairments_dir: None,
            runs: 1,
            deterministic: true,
            one_way_ms: None,
            storage_ms: None,
            max_attempts: None,
            trace_out: None,
            base: SimConfig::default(),
        }
    }
}

impl BenchConfig {
    pub fn total_requests(&self) -> usize {
        self.clients * self.requests_per_client
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 || self.requests_per_client == 0 || self.runs == 0 {
            return Err(Error::InvalidConfig("clients, requests and runs must be positive".into()));
        }
        if self.model == TransactionModel::Causal && !self.versioning.is_centralized() {
            return Err(Error::InvalidConfig(format!(
                "the {} model needs centralized versioning, not {}",
                self.model, self.versioning
            )));
        }
        self.sim_config(0).validate().map_err(|e| match e {
            Error::InvalidConfig(_) => e,
            other => Error::InvalidConfig(other.to_string()),
        })
    }

    /// Simulator configuration for run `run`.
    pub fn sim_config(&self, run: usize) -> SimConfig {
        let mut cfg = self.base.clone();
        cfg.seed = self.seed.wrapping_add(run as u64);
        cfg.transaction.model = self.model;
        cfg.transport.mode = self.transport;
        cfg.versioning.strategy = self.versioning;
        cfg.events.manual_mode = true;
        if let Some(ms) = self.one_way_ms {
            cfg.transport.rpc.one_way_ms = ms;
        }
        if let Some(ms) = self.storage_ms {
            cfg.storage.access_ms = ms;
        }
        if let Some(n) = self.max_attempts {
            cfg.retry.max_attempts = n;
            cfg.retry.unbounded = false;
        }
        if self.impairments_dir.is_some() {
            cfg.impairment.plan_dir = self.impairments_dir.clone();
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: usize,
    pub seed: u64,
    /// One sample per request, grouped by client in issue order.
    pub latencies_ms: Vec<f64>,
    pub median_ms: f64,
    pub p95_ms: f64,
    /// Percentage of requests that committed.
    pub success_rate: f64,
    pub committed: usize,
    pub total: usize,
    /// Participants in the final committed tournament state.
    pub final_participants: usize,
    /// Failed requests by error name.
    pub errors: BTreeMap<String, usize>,
}

impl RunReport {
    /// Whether the tournament holds exactly the users whose request committed.
    pub fn conserved(&self) -> bool {
        self.final_participants == self.committed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub runs: Vec<RunReport>,
}

impl BenchReport {
    /// Lower median of the per-run medians.
    pub fn median_of_medians(&self) -> f64 {
        let medians: Vec<f64> = self.runs.iter().map(|r| r.median_ms).collect();
        compute_stats(&medians).map(|(m, _)| m).unwrap_or(f64::NAN)
    }

    /// Success rate over every request of every run.
    pub fn success_rate(&self) -> f64 {
        let committed: usize = self.runs.iter().map(|r| r.committed).sum();
        let total: usize = self.runs.iter().map(|r| r.total).sum();
        if total == 0 {
            return f64::NAN;
        }
        committed as f64 * 100.0 / total as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn render_table(&self) -> String {
        let c = &self.config;
        let mut out = format!(
            "model={} transport={} versioning={} clients={} requests={} seed={}\n",
            c.model, c.transport, c.versioning, c.clients, c.requests_per_client, c.seed
        );
        let _ = writeln!(out, "{:>4} {:>9} {:>10} {:>10} {:>9}", "run", "requests", "median_ms", "p95_ms", "succ_%");
        for r in &self.runs {
            let _ = writeln!(
                out,
                "{:>4} {:>9} {:>10.2} {:>10.2} {:>9.1}",
                r.run_id, r.total, r.median_ms, r.p95_ms, r.success_rate
            );
        }
        if self.runs.len() > 1 {
            let _ = writeln!(
                out,
                "{:>4} {:>9} {:>10.2} {:>10} {:>9.1}",
                "all",
                self.runs.iter().map(|r| r.total).sum::<usize>(),
                self.median_of_medians(),
                "",
                self.success_rate()
            );
        }
        out
    }
}

/// Runs every configured storm, each on a fresh runtime and simulator.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let mut runs = Vec::with_capacity(cfg.runs);
    for run in 0..cfg.runs {
        let rt = if cfg.deterministic {
            tokio::runtime::Builder::new_current_thread().enable_time().start_paused(true).build()?
        } else {
            tokio::runtime::Builder::new_multi_thread().enable_time().build()?
        };
        runs.push(rt.block_on(run_once(cfg, run))?);
    }
    Ok(BenchReport { config: cfg.clone(), runs })
}

async fn run_once(cfg: &BenchConfig, run: usize) -> Result<RunReport> {
    let sim_cfg = cfg.sim_config(run);
    let seed = sim_cfg.seed;
    let sim = Simulator::new(sim_cfg)?;
    let total = cfg.total_requests();

    // Seeding is setup, not measurement: no latency anywhere.
    sim.set_storage_cost(Duration::ZERO);
    sim.gateway.configure_transport(TransportConfig::default())?;
    let seeded = sim.app.seed_course(total, total).await?;
    sim.gateway.configure_transport(sim.config.transport_config())?;
    sim.set_storage_cost(sim.config.storage_cost()?);

    let workers: Vec<_> = seeded
        .students
        .chunks(cfg.requests_per_client)
        .map(|users| {
            let app = sim.app.clone();
            let users = users.to_vec();
            let (tournament, execution) = (seeded.tournament, seeded.execution);
            tokio::spawn(async move {
                let mut samples = Vec::with_capacity(users.len());
                for user in users {
                    let start = Instant::now();
                    let res = app.add_participant(tournament, execution, user).await;
                    samples.push((start.elapsed().as_secs_f64() * 1000.0, user, res.err().map(|e| e.name().to_string())));
                }
                samples
            })
        })
        .collect();

    let mut latencies = Vec::with_capacity(total);
    let mut committed_users = BTreeSet::new();
    let mut errors = BTreeMap::new();
    for worker in workers {
        let samples = worker.await.map_err(|e| Error::Io(format!("client task failed: {e}")))?;
        for (ms, user, err) in samples {
            latencies.push(ms);
            match err {
                None => {
                    committed_users.insert(user);
                }
                Some(name) => *errors.entry(name).or_insert(0) += 1,
            }
        }
    }

    let record = sim.store.latest_committed(seeded.tournament)?;
    let final_set: BTreeSet<_> = record.payload::<Tournament>()?.participants.keys().copied().collect();
    if final_set != committed_users {
        tracing::warn!(
            run,
            committed = committed_users.len(),
            present = final_set.len(),
            "tournament state disagrees with reported commits"
        );
    }
    if let Some(path) = &cfg.trace_out {
        sim.recorder.flush(path)?;
    }

    let (median_ms, p95_ms) = compute_stats(&latencies)?;
    let committed = committed_users.len();
    Ok(RunReport {
        run_id: run,
        seed,
        latencies_ms: latencies,
        median_ms,
        p95_ms,
        success_rate: committed as f64 * 100.0 / total as f64,
        committed,
        total,
        final_participants: final_set.len(),
        errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn stats_examples() {
        assert_eq!(compute_stats(&[48.0]).unwrap(), (48.0, 48.0));
        let hundred: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(compute_stats(&hundred).unwrap(), (50.0, 95.0));
        assert_eq!(compute_stats(&[5.0; 4]).unwrap(), (5.0, 5.0));
        assert_eq!(compute_stats(&[]).unwrap_err(), Error::EmptyInput);
    }

    proptest! {
        #[test]
        fn stats_match_rank_counting(xs in proptest::collection::vec(0u32..1000, 1..200)) {
            let v: Vec<f64> = xs.iter().map(|&x| f64::from(x)).collect();
            let (median, p95) = compute_stats(&v).unwrap();
            let n = v.len();
            // The nearest-rank sample at fraction q has at least ceil(q n)
            // samples at or below it and fewer than that strictly below.
            let check = |value: f64, rank: usize| {
                v.iter().filter(|&&x| x <= value).count() >= rank && v.iter().filter(|&&x| x < value).count() < rank
            };
            prop_assert!(check(median, n.div_ceil(2)));
            prop_assert!(check(p95, (95 * n).div_ceil(100)));
        }
    }

    #[test]
    fn causal_with_snowflake_is_invalid() {
        let cfg = BenchConfig {
            model: TransactionModel::Causal,
            versioning: VersioningStrategy::Snowflake,
            ..BenchConfig::default()
        };
        assert!(matches!(run_bench(&cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn single_request_succeeds() {
        let cfg = BenchConfig { clients: 1, requests_per_client: 1, ..BenchConfig::default() };
        let report = run_bench(&cfg).unwrap();
        let run = &report.runs[0];
        assert_eq!(run.latencies_ms.len(), 1);
        assert_eq!(run.success_rate, 100.0);
        assert!(run.conserved());
        assert!(report.render_table().contains("100.0"));
    }

    #[test]
    fn deterministic_runs_repeat() {
        let cfg = BenchConfig {
            model: TransactionModel::Causal,
            clients: 6,
            requests_per_client: 4,
            max_attempts: Some(2),
            ..BenchConfig::default()
        };
        let a = run_bench(&cfg).unwrap();
        let b = run_bench(&cfg).unwrap();
        assert_eq!(a.runs, b.runs);
        assert!(a.runs[0].conserved());
    }
}
