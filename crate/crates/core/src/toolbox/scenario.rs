//! Declarative anomaly scenarios, one JSON fixture per cause label.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::views::ViewRows;
use crate::causes::CauseLabel;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario fixture {path}: {message}")]
    Fixture { path: PathBuf, message: String },
    #[error("scenario `{0}` not found")]
    NotFound(String),
    #[error("invalid scenario {label}: {message}")]
    Invalid { label: CauseLabel, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyScenario {
    pub label: CauseLabel,
    pub description: String,
    /// `[start, end]` epoch seconds, inclusive.
    pub window: [i64; 2],
    /// Additive offsets applied to metric values inside the window.
    #[serde(default)]
    pub metric_deltas: BTreeMap<String, f64>,
    #[serde(default)]
    pub view_rows: ViewRows,
}

impl AnomalyScenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |message: &str| ScenarioError::Invalid {
            label: self.label,
            message: message.to_string(),
        };
        if self.window[0] >= self.window[1] {
            return Err(invalid("window start must precede end"));
        }
        if self.description.trim().is_empty() {
            return Err(invalid("empty description"));
        }
        if self.metric_deltas.is_empty() && self.view_rows.is_empty() {
            return Err(invalid("scenario has no effects"));
        }
        Ok(())
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self, ScenarioError> {
        let scenario: AnomalyScenario =
            serde_json::from_str(text).map_err(|e| ScenarioError::Fixture {
                path: origin.to_path_buf(),
                message: e.to_string(),
            })?;
        scenario.validate()?;
        Ok(scenario)
    }
}

macro_rules! fixture {
    ($name:literal) => {
        (
            $name,
            include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/scenarios/", $name, ".json")),
        )
    };
}

const BUILTIN: [(&str, &str); 11] = [
    fixture!("INSERT_LARGE_DATA"),
    fixture!("FETCH_LARGE_DATA"),
    fixture!("REDUNDANT_INDEX"),
    fixture!("LACK_STATISTIC_INFO"),
    fixture!("MISSING_INDEXES"),
    fixture!("POOR_JOIN_PERFORMANCE"),
    fixture!("CORRELATED_SUBQUERY"),
    fixture!("LOCK_CONTENTION"),
    fixture!("WORKLOAD_CONTENTION"),
    fixture!("CPU_CONTENTION"),
    fixture!("IO_CONTENTION"),
];

/// The shipped scenarios in label order.
pub fn builtin_scenarios() -> Vec<AnomalyScenario> {
    BUILTIN
        .iter()
        .map(|(name, text)| {
            AnomalyScenario::from_json(text, Path::new(name)).expect("builtin scenario is valid")
        })
        .collect()
}

pub fn builtin_scenario(label: CauseLabel) -> AnomalyScenario {
    builtin_scenarios()
        .into_iter()
        .find(|s| s.label == label)
        .expect("every label has a builtin scenario")
}

/// Loads every `*.json` file of `dir`, sorted by label.
pub fn load_scenario_dir(dir: &Path) -> Result<Vec<AnomalyScenario>, ScenarioError> {
    let entries = fs::read_dir(dir).map_err(|e| ScenarioError::Fixture {
        path: dir.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut scenarios = Vec::new();
    for path in paths {
        let text = fs::read_to_string(&path).map_err(|e| ScenarioError::Fixture {
            path: path.clone(),
            message: e.to_string(),
        })?;
        scenarios.push(AnomalyScenario::from_json(&text, &path)?);
    }
    scenarios.sort_by_key(|s| s.label);
    Ok(scenarios)
}

/// Resolves a scenario by label name (case-insensitive) in `scenarios`.
pub fn find_scenario<'a>(
    scenarios: &'a [AnomalyScenario],
    name: &str,
) -> Result<&'a AnomalyScenario, ScenarioError> {
    let canonical = crate::causes::canonical_form(name);
    scenarios
        .iter()
        .find(|s| s.label.as_str() == canonical)
        .ok_or_else(|| ScenarioError::NotFound(name.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_cover_every_label() {
        let scenarios = builtin_scenarios();
        let labels: Vec<_> = scenarios.iter().map(|s| s.label).collect();
        assert_eq!(labels, CauseLabel::ALL.to_vec());
    }

    #[test]
    fn directory_loader_matches_builtins() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/scenarios");
        assert_eq!(load_scenario_dir(&dir).unwrap(), builtin_scenarios());
    }

    #[test]
    fn lookup_by_name() {
        let scenarios = builtin_scenarios();
        assert_eq!(
            find_scenario(&scenarios, "cpu_contention").unwrap().label,
            CauseLabel::CpuContention
        );
        assert!(matches!(
            find_scenario(&scenarios, "DISK_FULL"),
            Err(ScenarioError::NotFound(_))
        ));
    }
}
