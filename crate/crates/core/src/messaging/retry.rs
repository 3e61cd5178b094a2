//! Exponential backoff retry policy.

use std::fmt;
use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
    pub multiplier: f64,
    /// Upper bound on a single backoff; `None` means uncapped.
    pub max_backoff_ms: Option<u64>,
    /// Fraction of each backoff drawn uniformly at random, in `[0, 1]`.
    #[serde(default)]
    pub jitter: f64,
    #[serde(skip)]
    rng: JitterRng,
}

/// Seeded generator shared by every clone of a policy.
#[derive(Clone)]
struct JitterRng(Arc<Mutex<ChaCha8Rng>>);

impl JitterRng {
    fn seeded(seed: u64) -> Self {
        JitterRng(Arc::new(Mutex::new(ChaCha8Rng::seed_from_u64(seed))))
    }
}

impl Default for JitterRng {
    fn default() -> Self {
        JitterRng::seeded(0)
    }
}

impl fmt::Debug for JitterRng {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("JitterRng")
    }
}

impl PartialEq for JitterRng {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_backoff_ms: 20,
            multiplier: 2.0,
            max_backoff_ms: None,
            jitter: 0.5,
            rng: JitterRng::default(),
        }
    }
}

impl RetryPolicy {
    pub fn new(max_attempts: u32, base_backoff_ms: u64, multiplier: f64) -> Self {
        RetryPolicy { max_attempts: max_attempts.max(1), base_backoff_ms, multiplier: multiplier.max(1.0), ..Self::default() }
    }

    /// Reseeds the jitter generator; clones made afterwards share it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng = JitterRng::seeded(seed);
        self
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.jitter = jitter.clamp(0.0, 1.0);
        self
    }

    /// The backoff after `attempt` with its random share applied.
    pub fn jittered_backoff(&self, attempt: u32) -> Duration {
        let nominal = self.backoff(attempt);
        if self.jitter <= 0.0 {
            return nominal;
        }
        let u: f64 = self.rng.0.lock().gen();
        nominal.mul_f64(1.0 - self.jitter * u)
    }

    /// Retries forever; backoffs are capped at one second.
    pub fn unbounded() -> Self {
        RetryPolicy { max_attempts: u32::MAX, max_backoff_ms: Some(1000), ..Self::default() }
    }

    pub fn no_retry() -> Self {
        RetryPolicy::new(1, 0, 1.0).with_jitter(0.0)
    }

    /// Delay after failed attempt `attempt` (1-based): `base * multiplier^(attempt-1)`.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let exp = attempt.saturating_sub(1).min(64) as i32;
        let mut ms = self.base_backoff_ms as f64 * self.multiplier.powi(exp);
        if let Some(cap) = self.max_backoff_ms {
            ms = ms.min(cap as f64);
        }
        Duration::from_secs_f64(ms.min(86_400_000.0) / 1000.0)
    }

    /// Runs `op` until it succeeds, fails with a non-retryable error, or the
    /// attempts run out. Returns the final result and the attempt count.
    pub async fn run<T, F, Fut>(&self, mut op: F) -> (Result<T>, u32)
    where
        F: FnMut(u32) -> Fut,
        Fut: Future<Output = Result<T>>,
    {
        let mut attempt = 1;
        loop {
            match op(attempt).await {
                Err(e) if e.is_retryable() && attempt < self.max_attempts => {
                    tokio::time::sleep(self.jittered_backoff(attempt)).await;
                    attempt += 1;
                }
                other => return (other, attempt),
            }
        }
    }
}
