//! Metric catalog of the monitored database host.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct MetricDef {
    pub name: String,
    /// Human-readable name used in summaries ("CPU usage").
    pub display: String,
    pub unit: String,
    pub baseline: f64,
    /// Half-width of the uniform noise band around the baseline.
    pub noise: f64,
    /// Static alert threshold; values strictly above it are abnormal.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCatalog {
    metrics: Vec<MetricDef>,
}

macro_rules! metric {
    ($name:expr, $display:expr, $unit:expr, $base:expr, $noise:expr, $thr:expr) => {
        MetricDef {
            name: $name.into(),
            display: $display.into(),
            unit: $unit.into(),
            baseline: $base,
            noise: $noise,
            threshold: $thr,
        }
    };
}

impl Default for MetricCatalog {
    fn default() -> Self {
        Self {
            metrics: vec![
                metric!("cpu_usage", "CPU usage", "fraction", 0.30, 0.02, 0.85),
                metric!("node_procs_running", "number of running processes", "count", 4.0, 1.0, 40.0),
                metric!("memory_usage", "memory usage", "fraction", 0.45, 0.01, 0.90),
                metric!("swap_usage", "swap usage", "fraction", 0.01, 0.002, 0.30),
                metric!("io_wait", "IO wait", "fraction", 0.05, 0.005, 0.30),
                metric!("disk_read_mb_s", "disk read throughput", "MB/s", 30.0, 3.0, 300.0),
                metric!("disk_write_mb_s", "disk write throughput", "MB/s", 20.0, 2.0, 200.0),
                metric!("active_sessions", "number of active sessions", "count", 8.0, 1.0, 60.0),
                metric!("lock_waits", "number of lock waits", "count", 0.5, 0.5, 20.0),
                metric!("qps", "queries per second", "1/s", 1200.0, 50.0, 5000.0),
                metric!("query_latency_p95_ms", "p95 query latency", "ms", 20.0, 2.0, 500.0),
                metric!("rows_fetched_per_s", "rows fetched per second", "rows/s", 5000.0, 300.0, 200_000.0),
                metric!("rows_inserted_per_s", "rows inserted per second", "rows/s", 500.0, 50.0, 50_000.0),
                metric!("seq_scans_per_s", "sequential scans per second", "1/s", 2.0, 0.5, 50.0),
            ],
        }
    }
}

impl MetricCatalog {
    pub fn new(metrics: Vec<MetricDef>) -> Self {
        Self { metrics }
    }

    pub fn get(&self, name: &str) -> Option<&MetricDef> {
        self.metrics.iter().find(|m| m.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn iter(&self) -> impl Iterator<Item = &MetricDef> {
        self.metrics.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.metrics.iter().map(|m| m.name.as_str())
    }

    /// Display name, falling back to the raw metric name.
    pub fn display<'a>(&'a self, name: &'a str) -> &'a str {
        self.get(name).map_or(name, |m| m.display.as_str())
    }
}

/// View column names that may be cited alongside metrics.
pub const VIEW_FIELDS: &[&str] = &[
    "live_tuples",
    "dead_tuples",
    "table_size",
    "table_size_mb",
    "dead_rate",
    "n_indexes",
    "seq_scans",
    "idx_scans",
    "mod_since_analyze",
    "total_time",
    "total_time_ms",
    "cpu_fraction",
    "wait_event",
    "calls",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_names_unique() {
        let catalog = MetricCatalog::default();
        let mut names: Vec<_> = catalog.names().collect();
        let total = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), total);
        assert_eq!(catalog.display("cpu_usage"), "CPU usage");
        assert_eq!(catalog.display("nope"), "nope");
    }
}
