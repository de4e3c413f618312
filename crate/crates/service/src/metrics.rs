use std::fmt::Write;
use std::sync::atomic::{AtomicU64, Ordering};

use capreward_core::backend::{BackendRegistry, StatsSnapshot};

type StatField = fn(&StatsSnapshot) -> u64;

/// Upper bounds (ms) of the reward latency histogram buckets.
pub const LATENCY_BUCKETS_MS: [u64; 11] = [5, 10, 25, 50, 100, 250, 500, 1000, 2500, 5000, 10000];

#[derive(Debug, Default)]
pub struct Endpoint {
    pub requests: AtomicU64,
    pub errors: AtomicU64,
    pub rejected: AtomicU64,
}

#[derive(Debug, Default)]
pub struct Metrics {
    pub reward: Endpoint,
    pub filter: Endpoint,
    latency_buckets: [AtomicU64; LATENCY_BUCKETS_MS.len()],
    latency_count: AtomicU64,
    latency_sum_ms: AtomicU64,
}

impl Metrics {
    pub fn observe_reward_latency(&self, ms: u64) {
        for (bound, bucket) in LATENCY_BUCKETS_MS.iter().zip(&self.latency_buckets) {
            if ms <= *bound {
                bucket.fetch_add(1, Ordering::Relaxed);
            }
        }
        self.latency_count.fetch_add(1, Ordering::Relaxed);
        self.latency_sum_ms.fetch_add(ms, Ordering::Relaxed);
    }

    /// Prometheus text exposition.
    pub fn render(&self, backends: &BackendRegistry) -> String {
        let mut out = String::new();
        let load = |a: &AtomicU64| a.load(Ordering::Relaxed);

        out.push_str("# TYPE capreward_requests_total counter\n");
        for (name, e) in [("reward", &self.reward), ("filter", &self.filter)] {
            let _ = writeln!(out, "capreward_requests_total{{endpoint=\"{name}\"}} {}", load(&e.requests));
        }
        out.push_str("# TYPE capreward_request_errors_total counter\n");
        for (name, e) in [("reward", &self.reward), ("filter", &self.filter)] {
            let _ = writeln!(out, "capreward_request_errors_total{{endpoint=\"{name}\"}} {}", load(&e.errors));
        }
        out.push_str("# TYPE capreward_requests_rejected_total counter\n");
        for (name, e) in [("reward", &self.reward), ("filter", &self.filter)] {
            let _ = writeln!(out, "capreward_requests_rejected_total{{endpoint=\"{name}\"}} {}", load(&e.rejected));
        }

        let series: [(&str, StatField); 5] = [
            ("capreward_backend_calls_total", |s| s.calls),
            ("capreward_backend_retries_total", |s| s.retries),
            ("capreward_backend_failures_total", |s| s.failures),
            ("capreward_cache_hits_total", |s| s.cache_hits),
            ("capreward_cache_misses_total", |s| s.cache_misses),
        ];
        for (metric, get) in series {
            let _ = writeln!(out, "# TYPE {metric} counter");
            for client in backends.iter() {
                let _ = writeln!(out, "{metric}{{backend=\"{}\"}} {}", client.profile().name, get(&client.stats()));
            }
        }

        out.push_str("# TYPE capreward_reward_latency_ms histogram\n");
        for (bound, bucket) in LATENCY_BUCKETS_MS.iter().zip(&self.latency_buckets) {
            let _ = writeln!(out, "capreward_reward_latency_ms_bucket{{le=\"{bound}\"}} {}", load(bucket));
        }
        let count = load(&self.latency_count);
        let _ = writeln!(out, "capreward_reward_latency_ms_bucket{{le=\"+Inf\"}} {count}");
        let _ = writeln!(out, "capreward_reward_latency_ms_sum {}", load(&self.latency_sum_ms));
        let _ = writeln!(out, "capreward_reward_latency_ms_count {count}");
        out
    }
}
