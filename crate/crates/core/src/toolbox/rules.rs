//! Threshold rules and optimization advisors. All functions are pure.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::views::{StatementRow, TableStatRow};

/// Statements consuming more than this fraction of CPU are suspects.
pub const CPU_HEAVY_FRACTION: f64 = 0.80;
/// Below this CPU usage the database itself is unlikely to be the bottleneck.
pub const APP_PRESSURE_CPU: f64 = 0.10;
/// "A few" active sessions.
pub const FEW_ACTIVE_SESSIONS: u32 = 5;
pub const DEAD_TUPLE_COUNT_LIMIT: u64 = 1000;
pub const DEAD_TUPLE_SIZE_LIMIT_MB: f64 = 50.0;
pub const DEAD_RATE_THRESHOLD: f64 = 0.02;
pub const KNOB_MEMORY_CEILING: f64 = 0.60;
pub const DEAD_TUPLE_ADVICE: &str = "clean up dead tuples in time";
pub const BUFFER_POOL_ADVICE: &str = "+5% buffer pool";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuleError {
    #[error("index advice needs at least one predicate")]
    NoPredicates,
    #[error("predicate {0} has no columns")]
    EmptyPredicate(usize),
    #[error("{0} must be a fraction in [0, 1]")]
    NotAFraction(&'static str),
}

/// Rows whose `cpu_fraction` is strictly above 0.80.
pub fn flag_cpu_heavy(rows: &[StatementRow]) -> Vec<StatementRow> {
    rows.iter()
        .filter(|r| r.cpu_fraction > CPU_HEAVY_FRACTION)
        .cloned()
        .collect()
}

/// True when the database looks idle enough that the slowdown is more likely
/// on the application side.
pub fn check_application_pressure(cpu_usage: f64, active_sessions: u32, few_threshold: u32) -> bool {
    cpu_usage < APP_PRESSURE_CPU && active_sessions <= few_threshold
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum DeadTupleOutcome {
    Clear,
    Cause { cause: String, advice: String },
}

impl DeadTupleOutcome {
    pub fn is_cause(&self) -> bool {
        matches!(self, DeadTupleOutcome::Cause { .. })
    }
}

/// Small tables are always clear; larger ones are flagged when more than 2%
/// of their tuples are dead.
pub fn dead_tuple_check(row: &TableStatRow) -> DeadTupleOutcome {
    let small = row.live_tuples + row.dead_tuples <= DEAD_TUPLE_COUNT_LIMIT
        && row.table_size_mb <= DEAD_TUPLE_SIZE_LIMIT_MB;
    if !small && row.dead_rate() > DEAD_RATE_THRESHOLD {
        DeadTupleOutcome::Cause {
            cause: "many_dead_tuples".into(),
            advice: DEAD_TUPLE_ADVICE.into(),
        }
    } else {
        DeadTupleOutcome::Clear
    }
}

/// Buffer-pool advice: grow by 5% when memory is under 60% used and the
/// workload is slow.
pub fn knob_advice(memory_usage: f64, slow: bool) -> Result<Vec<String>, RuleError> {
    if !(0.0..=1.0).contains(&memory_usage) {
        return Err(RuleError::NotAFraction("memory_usage"));
    }
    Ok(if memory_usage < KNOB_MEMORY_CEILING && slow {
        vec![BUFFER_POOL_ADVICE.to_string()]
    } else {
        Vec::new()
    })
}

/// One index per predicate; columns of a multi-column predicate form one
/// composite index. Column order inside a predicate is kept, duplicate
/// candidates are dropped.
pub fn index_advice(predicates: &[Vec<String>]) -> Result<Vec<Vec<String>>, RuleError> {
    if predicates.is_empty() {
        return Err(RuleError::NoPredicates);
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, predicate) in predicates.iter().enumerate() {
        let mut columns: Vec<String> = Vec::new();
        for column in predicate {
            if !columns.contains(column) {
                columns.push(column.clone());
            }
        }
        if columns.is_empty() {
            return Err(RuleError::EmptyPredicate(i));
        }
        if seen.insert(columns.clone()) {
            out.push(columns);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stmt(cpu: f64) -> StatementRow {
        StatementRow {
            query: format!("q{cpu}"),
            calls: 1,
            total_time_ms: 1.0,
            cpu_fraction: cpu,
            rows: 0,
            plan: None,
            predicates: vec![],
        }
    }

    fn table(live: u64, dead: u64, size: f64) -> TableStatRow {
        TableStatRow {
            table: "t".into(),
            live_tuples: live,
            dead_tuples: dead,
            table_size_mb: size,
            n_indexes: 1,
            seq_scans: 0,
            idx_scans: 0,
            mod_since_analyze: 0,
        }
    }

    #[test]
    fn cpu_heavy_boundary() {
        let rows = vec![stmt(0.85), stmt(0.5), stmt(0.80)];
        let flagged = flag_cpu_heavy(&rows);
        assert_eq!(flagged, vec![stmt(0.85)]);
        assert!(flag_cpu_heavy(&[stmt(0.1)]).is_empty());
    }

    #[test]
    fn application_pressure_examples() {
        assert!(check_application_pressure(0.05, 2, 5));
        assert!(!check_application_pressure(0.50, 2, 5));
        assert!(!check_application_pressure(0.05, 50, 5));
        assert!(!check_application_pressure(0.10, 2, 5));
        assert!(check_application_pressure(0.05, 5, 5));
    }

    #[test]
    fn dead_tuple_examples() {
        assert_eq!(dead_tuple_check(&table(900, 50, 10.0)), DeadTupleOutcome::Clear);
        assert!(dead_tuple_check(&table(100_000, 5000, 200.0)).is_cause());
        assert_eq!(dead_tuple_check(&table(100_000, 1000, 200.0)), DeadTupleOutcome::Clear);
    }

    #[test]
    fn knob_examples() {
        assert_eq!(knob_advice(0.40, true).unwrap(), vec![BUFFER_POOL_ADVICE]);
        assert!(knob_advice(0.70, true).unwrap().is_empty());
        assert!(knob_advice(0.40, false).unwrap().is_empty());
        assert!(knob_advice(0.60, true).unwrap().is_empty());
        assert!(knob_advice(1.5, true).is_err());
    }

    #[test]
    fn index_examples() {
        let s = |cols: &[&str]| cols.iter().map(|c| c.to_string()).collect::<Vec<_>>();
        assert_eq!(index_advice(&[s(&["a", "b"])]).unwrap(), vec![s(&["a", "b"])]);
        assert_eq!(index_advice(&[s(&["a"]), s(&["a"])]).unwrap(), vec![s(&["a"])]);
        assert_eq!(index_advice(&[]), Err(RuleError::NoPredicates));
        assert_eq!(index_advice(&[s(&[])]), Err(RuleError::EmptyPredicate(0)));
    }
}
