//! Rows of the statistics views: session activity, statement statistics and
//! per-table statistics.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatementRow {
    /// Normalized query template.
    pub query: String,
    pub calls: u64,
    pub total_time_ms: f64,
    /// Fraction of host CPU consumed by this template.
    pub cpu_fraction: f64,
    /// Rows returned or affected per call.
    #[serde(default)]
    pub rows: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<String>,
    /// Column sets appearing together in predicates.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub predicates: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityRow {
    pub pid: u32,
    pub state: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wait_event: Option<String>,
    pub query: String,
    #[serde(default)]
    pub duration_s: f64,
}

impl ActivityRow {
    pub fn waits_on(&self, prefix: &str) -> bool {
        self.wait_event
            .as_deref()
            .is_some_and(|w| w.starts_with(prefix))
    }
}

/// Per-table statistics. `dead_rate` is derived, never stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableStatRow {
    pub table: String,
    pub live_tuples: u64,
    pub dead_tuples: u64,
    pub table_size_mb: f64,
    #[serde(default)]
    pub n_indexes: u32,
    #[serde(default)]
    pub seq_scans: u64,
    #[serde(default)]
    pub idx_scans: u64,
    /// Rows modified since the last statistics refresh.
    #[serde(default)]
    pub mod_since_analyze: u64,
}

impl TableStatRow {
    /// `dead / (live + dead)`, or 0 for an empty table.
    pub fn dead_rate(&self) -> f64 {
        let total = self.live_tuples + self.dead_tuples;
        if total == 0 {
            0.0
        } else {
            self.dead_tuples as f64 / total as f64
        }
    }

    /// JSON form including the derived `dead_rate` column.
    pub fn to_view_json(&self) -> serde_json::Value {
        let mut value = serde_json::to_value(self).expect("table row serializes");
        value["dead_rate"] = serde_json::json!(self.dead_rate());
        value
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewName {
    Activity,
    Statements,
    TableStats,
}

/// Rows injected into (or present at baseline in) the statistics views.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ViewRows {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub activity: Vec<ActivityRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub statements: Vec<StatementRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub table_stats: Vec<TableStatRow>,
}

impl ViewRows {
    pub fn is_empty(&self) -> bool {
        self.activity.is_empty() && self.statements.is_empty() && self.table_stats.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(live: u64, dead: u64) -> TableStatRow {
        TableStatRow {
            table: "t".into(),
            live_tuples: live,
            dead_tuples: dead,
            table_size_mb: 1.0,
            n_indexes: 1,
            seq_scans: 0,
            idx_scans: 0,
            mod_since_analyze: 0,
        }
    }

    #[test]
    fn dead_rate_definition() {
        assert_eq!(row(0, 0).dead_rate(), 0.0);
        assert!((row(100_000, 5000).dead_rate() - 5000.0 / 105_000.0).abs() < 1e-15);
        assert_eq!(row(100_000, 5000).to_view_json()["dead_rate"], 5000.0 / 105_000.0);
    }
}
