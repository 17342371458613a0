//! Root-cause labels and normalization of free-text cause names.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The single-cause anomaly classes the simulator can inject.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, schemars::JsonSchema,
)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CauseLabel {
    InsertLargeData,
    FetchLargeData,
    RedundantIndex,
    LackStatisticInfo,
    MissingIndexes,
    PoorJoinPerformance,
    CorrelatedSubquery,
    LockContention,
    WorkloadContention,
    CpuContention,
    IoContention,
}

impl CauseLabel {
    pub const ALL: [CauseLabel; 11] = [
        CauseLabel::InsertLargeData,
        CauseLabel::FetchLargeData,
        CauseLabel::RedundantIndex,
        CauseLabel::LackStatisticInfo,
        CauseLabel::MissingIndexes,
        CauseLabel::PoorJoinPerformance,
        CauseLabel::CorrelatedSubquery,
        CauseLabel::LockContention,
        CauseLabel::WorkloadContention,
        CauseLabel::CpuContention,
        CauseLabel::IoContention,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CauseLabel::InsertLargeData => "INSERT_LARGE_DATA",
            CauseLabel::FetchLargeData => "FETCH_LARGE_DATA",
            CauseLabel::RedundantIndex => "REDUNDANT_INDEX",
            CauseLabel::LackStatisticInfo => "LACK_STATISTIC_INFO",
            CauseLabel::MissingIndexes => "MISSING_INDEXES",
            CauseLabel::PoorJoinPerformance => "POOR_JOIN_PERFORMANCE",
            CauseLabel::CorrelatedSubquery => "CORRELATED_SUBQUERY",
            CauseLabel::LockContention => "LOCK_CONTENTION",
            CauseLabel::WorkloadContention => "WORKLOAD_CONTENTION",
            CauseLabel::CpuContention => "CPU_CONTENTION",
            CauseLabel::IoContention => "IO_CONTENTION",
        }
    }

    /// Short operator-facing description.
    pub fn describe(self) -> &'static str {
        match self {
            CauseLabel::InsertLargeData => "bulk inserts writing a very large number of rows",
            CauseLabel::FetchLargeData => "queries reading a very large number of rows",
            CauseLabel::RedundantIndex => "too many overlapping indexes slowing down writes",
            CauseLabel::LackStatisticInfo => "stale planner statistics producing bad plans",
            CauseLabel::MissingIndexes => "filters on unindexed columns forcing full scans",
            CauseLabel::PoorJoinPerformance => "an inefficient join strategy",
            CauseLabel::CorrelatedSubquery => "a subquery re-evaluated for every outer row",
            CauseLabel::LockContention => "sessions blocked waiting on row or table locks",
            CauseLabel::WorkloadContention => "too many concurrent sessions competing for resources",
            CauseLabel::CpuContention => "CPU consumed by processes outside the database",
            CauseLabel::IoContention => "saturated storage delaying reads and writes",
        }
    }
}

impl fmt::Display for CauseLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CauseLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CauseLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| format!("unknown cause label `{s}`"))
    }
}

/// Experience names and phrasings that denote a label under another name.
const ALIASES: &[(&str, CauseLabel)] = &[
    ("LARGE_DATA_INSERT", CauseLabel::InsertLargeData),
    ("BULK_INSERT", CauseLabel::InsertLargeData),
    ("LARGE_DATA_FETCH", CauseLabel::FetchLargeData),
    ("REDUNDANT_INDEXES", CauseLabel::RedundantIndex),
    ("STALE_STATISTICS", CauseLabel::LackStatisticInfo),
    ("MISSING_INDEX", CauseLabel::MissingIndexes),
    ("POOR_JOIN", CauseLabel::PoorJoinPerformance),
    ("CORRELATED_SUBQUERIES", CauseLabel::CorrelatedSubquery),
    ("LOCK_WAIT", CauseLabel::LockContention),
    ("HIGH_CONCURRENCY", CauseLabel::WorkloadContention),
    ("CPU_RESOURCE_CONTENTION", CauseLabel::CpuContention),
    ("EXTERNAL_CPU_CONTENTION", CauseLabel::CpuContention),
    ("IO_RESOURCE_CONTENTION", CauseLabel::IoContention),
];

/// Uppercase with underscores: `"cpu contention"` → `"CPU_CONTENTION"`.
pub fn canonical_form(text: &str) -> String {
    let mut out = String::new();
    for part in text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|p| !p.is_empty())
    {
        if !out.is_empty() {
            out.push('_');
        }
        out.push_str(&part.to_uppercase());
    }
    out
}

/// Maps a cause name to its label when it denotes one.
pub fn to_label(text: &str) -> Option<CauseLabel> {
    let canonical = canonical_form(text);
    canonical.parse().ok().or_else(|| {
        ALIASES
            .iter()
            .find(|(alias, _)| *alias == canonical)
            .map(|(_, label)| *label)
    })
}

/// Normalized cause string: the label name when the text denotes a label,
/// otherwise the trimmed free text (so unlabeled findings stay readable).
pub fn normalize_cause(text: &str) -> String {
    let text = text.trim().trim_end_matches('.').trim();
    match to_label(text) {
        Some(label) => label.to_string(),
        None => text.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_round_trip() {
        for label in CauseLabel::ALL {
            assert_eq!(label.as_str().parse::<CauseLabel>().unwrap(), label);
            let json = serde_json::to_string(&label).unwrap();
            assert_eq!(json, format!("\"{label}\""));
        }
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_cause("missing indexes"), "MISSING_INDEXES");
        assert_eq!(normalize_cause(" cpu-contention. "), "CPU_CONTENTION");
        assert_eq!(normalize_cause("io resource contention"), "IO_CONTENTION");
        assert_eq!(
            normalize_cause("high number of running processes"),
            "high number of running processes"
        );
        assert_eq!(to_label("many_dead_tuples"), None);
    }
}
