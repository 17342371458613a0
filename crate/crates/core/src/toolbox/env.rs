//! Data sources behind the observation tools: the simulated database host
//! and the (stubbed) live adapter.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::catalog::MetricCatalog;
use super::scenario::AnomalyScenario;
use super::series::MetricSeries;
use super::views::{ActivityRow, StatementRow, TableStatRow, ViewRows};
use crate::causes::CauseLabel;
use crate::llm::fnv1a64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProbeError {
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("data source unavailable: {0}")]
    Unavailable(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("a scenario ({0}) is already injected; reset the environment first")]
    AlreadyInjected(CauseLabel),
    #[error("scenario references unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("{0}")]
    InvalidScenario(String),
}

/// Read access to metrics and statistics views of one database host.
pub trait DatabaseProbe: Send + Sync {
    fn catalog(&self) -> &MetricCatalog;
    /// One point per second over `[start, end]`.
    fn series(&self, metric: &str, start: i64, end: i64) -> Result<MetricSeries, ProbeError>;
    fn statements(&self, start: i64, end: i64) -> Result<Vec<StatementRow>, ProbeError>;
    fn activity(&self, start: i64, end: i64) -> Result<Vec<ActivityRow>, ProbeError>;
    fn table_stats(&self) -> Result<Vec<TableStatRow>, ProbeError>;
}

/// Baseline workload present whether or not a scenario is injected.
pub fn default_baseline() -> ViewRows {
    ViewRows {
        activity: vec![
            ActivityRow {
                pid: 4101,
                state: "active".into(),
                wait_event: None,
                query: "SELECT * FROM users WHERE id = $1".into(),
                duration_s: 0.002,
            },
            ActivityRow {
                pid: 4102,
                state: "idle".into(),
                wait_event: Some("Client:ClientRead".into()),
                query: "COMMIT".into(),
                duration_s: 0.0,
            },
        ],
        statements: vec![
            StatementRow {
                query: "SELECT * FROM users WHERE id = $1".into(),
                calls: 120_000,
                total_time_ms: 900.0,
                cpu_fraction: 0.05,
                rows: 1,
                plan: Some("Index Scan using users_pkey on users".into()),
                predicates: vec![vec!["id".into()]],
            },
            StatementRow {
                query: "UPDATE accounts SET balance = balance + $1 WHERE id = $2".into(),
                calls: 40_000,
                total_time_ms: 1_500.0,
                cpu_fraction: 0.04,
                rows: 1,
                plan: Some("Update on accounts -> Index Scan using accounts_pkey".into()),
                predicates: vec![vec!["id".into()]],
            },
        ],
        table_stats: vec![
            TableStatRow {
                table: "users".into(),
                live_tuples: 50_000,
                dead_tuples: 400,
                table_size_mb: 12.0,
                n_indexes: 2,
                seq_scans: 10,
                idx_scans: 90_000,
                mod_since_analyze: 300,
            },
            TableStatRow {
                table: "accounts".into(),
                live_tuples: 900,
                dead_tuples: 50,
                table_size_mb: 10.0,
                n_indexes: 1,
                seq_scans: 4,
                idx_scans: 40_000,
                mod_since_analyze: 20,
            },
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub seed: u64,
    #[serde(default = "default_baseline")]
    pub baseline: ViewRows,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            baseline: default_baseline(),
        }
    }
}

/// Deterministic simulated host. Metric values are the catalog baseline plus
/// seeded noise, plus the injected scenario's deltas inside its window.
#[derive(Debug, Clone)]
pub struct SimulatedEnv {
    catalog: MetricCatalog,
    config: EnvConfig,
    injected: Option<AnomalyScenario>,
}

impl Default for SimulatedEnv {
    fn default() -> Self {
        Self::new(MetricCatalog::default(), EnvConfig::default())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SimulatedEnv {
    pub fn new(catalog: MetricCatalog, config: EnvConfig) -> Self {
        Self {
            catalog,
            config,
            injected: None,
        }
    }

    pub fn with_seed(seed: u64) -> Self {
        Self::new(
            MetricCatalog::default(),
            EnvConfig {
                seed,
                ..EnvConfig::default()
            },
        )
    }

    pub fn inject_scenario(&mut self, scenario: &AnomalyScenario) -> Result<(), EnvError> {
        if let Some(current) = &self.injected {
            return Err(EnvError::AlreadyInjected(current.label));
        }
        scenario
            .validate()
            .map_err(|e| EnvError::InvalidScenario(e.to_string()))?;
        if let Some(unknown) = scenario
            .metric_deltas
            .keys()
            .find(|m| !self.catalog.contains(m))
        {
            return Err(EnvError::UnknownMetric(unknown.clone()));
        }
        self.injected = Some(scenario.clone());
        Ok(())
    }

    pub fn reset(&mut self) {
        self.injected = None;
    }

    pub fn is_idle(&self) -> bool {
        self.injected.is_none()
    }

    /// Window of the injected scenario, if any.
    pub fn anomaly_window(&self) -> Option<[i64; 2]> {
        self.injected.as_ref().map(|s| s.window)
    }

    /// The injected label, for evaluation only.
    pub fn ground_truth(&self) -> Option<CauseLabel> {
        self.injected.as_ref().map(|s| s.label)
    }

    pub fn value_at(&self, metric: &str, t: i64) -> Result<f64, ProbeError> {
        let def = self
            .catalog
            .get(metric)
            .ok_or_else(|| ProbeError::UnknownMetric(metric.to_string()))?;
        let h = splitmix64(self.config.seed ^ fnv1a64(metric.as_bytes()) ^ splitmix64(t as u64));
        let unit = (h >> 11) as f64 / (1u64 << 53) as f64;
        let mut value = def.baseline + def.noise * (2.0 * unit - 1.0);
        if let Some(scenario) = &self.injected {
            if (scenario.window[0]..=scenario.window[1]).contains(&t) {
                value += scenario.metric_deltas.get(metric).copied().unwrap_or(0.0);
            }
        }
        Ok(value.max(0.0))
    }

    fn overlaps(&self, start: i64, end: i64) -> Option<&AnomalyScenario> {
        self.injected
            .as_ref()
            .filter(|s| start <= s.window[1] && s.window[0] <= end)
    }
}

impl DatabaseProbe for SimulatedEnv {
    fn catalog(&self) -> &MetricCatalog {
        &self.catalog
    }

    fn series(&self, metric: &str, start: i64, end: i64) -> Result<MetricSeries, ProbeError> {
        let def = self
            .catalog
            .get(metric)
            .ok_or_else(|| ProbeError::UnknownMetric(metric.to_string()))?;
        let points = (start..=end)
            .map(|t| self.value_at(metric, t).map(|v| (t, v)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(MetricSeries::new(metric, def.unit.clone(), points).expect("generated in order"))
    }

    fn statements(&self, start: i64, end: i64) -> Result<Vec<StatementRow>, ProbeError> {
        let mut rows = self.config.baseline.statements.clone();
        if let Some(scenario) = self.overlaps(start, end) {
            rows.extend(scenario.view_rows.statements.iter().cloned());
        }
        Ok(rows)
    }

    fn activity(&self, start: i64, end: i64) -> Result<Vec<ActivityRow>, ProbeError> {
        let mut rows = self.config.baseline.activity.clone();
        if let Some(scenario) = self.overlaps(start, end) {
            rows.extend(scenario.view_rows.activity.iter().cloned());
        }
        Ok(rows)
    }

    fn table_stats(&self) -> Result<Vec<TableStatRow>, ProbeError> {
        let mut rows = self.config.baseline.table_stats.clone();
        if let Some(scenario) = &self.injected {
            for row in &scenario.view_rows.table_stats {
                match rows.iter_mut().find(|r| r.table == row.table) {
                    Some(existing) => *existing = row.clone(),
                    None => rows.push(row.clone()),
                }
            }
        }
        Ok(rows)
    }
}

/// Connection settings for a live host: a Prometheus-style metrics endpoint
/// and a SQL connection string for the statistics views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveTarget {
    pub metrics_endpoint: String,
    pub dsn: String,
}

/// Live adapter with the same surface as [`SimulatedEnv`]. Scraping and SQL
/// access are not bundled; every call reports the source as unavailable.
#[derive(Debug, Clone)]
pub struct LiveProbe {
    target: LiveTarget,
    catalog: MetricCatalog,
}

impl LiveProbe {
    pub fn new(target: LiveTarget) -> Self {
        Self {
            target,
            catalog: MetricCatalog::default(),
        }
    }

    fn unavailable<T>(&self, what: &str) -> Result<T, ProbeError> {
        Err(ProbeError::Unavailable(format!(
            "{what} from {} is not implemented by the bundled live adapter",
            if what == "metrics" {
                &self.target.metrics_endpoint
            } else {
                &self.target.dsn
            }
        )))
    }
}

impl DatabaseProbe for LiveProbe {
    fn catalog(&self) -> &MetricCatalog {
        &self.catalog
    }

    fn series(&self, _metric: &str, _start: i64, _end: i64) -> Result<MetricSeries, ProbeError> {
        self.unavailable("metrics")
    }

    fn statements(&self, _start: i64, _end: i64) -> Result<Vec<StatementRow>, ProbeError> {
        self.unavailable("statement statistics")
    }

    fn activity(&self, _start: i64, _end: i64) -> Result<Vec<ActivityRow>, ProbeError> {
        self.unavailable("session activity")
    }

    fn table_stats(&self) -> Result<Vec<TableStatRow>, ProbeError> {
        self.unavailable("table statistics")
    }
}
