//! Tool registry, observation tools, optimization advisors and the simulated
//! database environment.
//!
//! Every tool call goes through [`Toolbox::invoke`], which checks that the
//! tool exists, that the caller's [`Scope`] covers it, and that the arguments
//! match the declared schema, in that order. Calls are appended to a session
//! log whether they succeed or not.

pub mod catalog;
pub mod env;
pub mod rules;
pub mod scenario;
pub mod series;
pub mod views;

use std::collections::BTreeMap;
use std::sync::Mutex;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::tools::{validate_registry, ArgError, ToolCategory, ToolSpec, ToolSpecError};
pub use catalog::{MetricCatalog, MetricDef};
pub use env::{DatabaseProbe, EnvConfig, EnvError, LiveProbe, LiveTarget, ProbeError, SimulatedEnv};
pub use scenario::{builtin_scenario, builtin_scenarios, AnomalyScenario, ScenarioError};
pub use series::{DetectorConfig, MetricSeries, Verdict};

const BUILTIN_MANIFEST: &str = include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/tools.json"));

/// The shipped tool manifest.
pub fn builtin_registry() -> Vec<ToolSpec> {
    serde_json::from_str(BUILTIN_MANIFEST).expect("builtin tool manifest parses")
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ToolError {
    #[error("unknown tool `{0}`")]
    UnknownTool(String),
    #[error("tool `{tool}` is outside the scope of {caller}")]
    Scope { tool: String, caller: String },
    #[error("invalid arguments for `{tool}`: {source}")]
    Schema { tool: String, source: ArgError },
    #[error("`{tool}` failed: {message}")]
    Runtime { tool: String, message: String },
}

/// Which metrics and tool categories a caller may touch. Empty lists mean
/// unrestricted.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize, schemars::JsonSchema)]
pub struct Scope {
    #[serde(default)]
    pub metric_prefixes: Vec<String>,
    #[serde(default)]
    pub categories: Vec<ToolCategory>,
}

impl Scope {
    pub fn unrestricted() -> Self {
        Self::default()
    }

    pub fn metrics(prefixes: &[&str]) -> Self {
        Self {
            metric_prefixes: prefixes.iter().map(|p| p.to_string()).collect(),
            categories: Vec::new(),
        }
    }

    pub fn allows_metric(&self, metric: &str) -> bool {
        self.metric_prefixes.is_empty() || self.metric_prefixes.iter().any(|p| metric.starts_with(p.as_str()))
    }

    /// A family-bound tool is allowed when one of the prefixes belongs to
    /// that family (`cpu_` covers family `cpu`).
    pub fn allows_tool(&self, tool: &ToolSpec) -> bool {
        let category_ok = self.categories.is_empty() || self.categories.contains(&tool.category);
        let family_ok = match &tool.family {
            None => true,
            Some(family) => {
                self.metric_prefixes.is_empty()
                    || self.metric_prefixes.iter().any(|p| p.starts_with(family.as_str()))
            }
        };
        category_ok && family_ok
    }

    pub fn filter_tools(&self, tools: &[ToolSpec]) -> Vec<ToolSpec> {
        tools.iter().filter(|t| self.allows_tool(t)).cloned().collect()
    }
}

/// Result of a tool call. `text` is the short natural-language verdict; the
/// rendered form appends the structured payload as JSON on the next line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub text: String,
    pub data: Value,
    /// Metrics this observation found abnormal.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub abnormal_metrics: Vec<String>,
    /// Experience-level cause reported directly by a rule tool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause: Option<String>,
}

impl Observation {
    fn new(text: impl Into<String>, data: Value) -> Self {
        Self {
            text: text.into(),
            data,
            abnormal_metrics: Vec::new(),
            cause: None,
        }
    }

    pub fn render(&self) -> String {
        format!("{}\n{}", self.text, self.data)
    }

    /// Splits a rendered observation back into verdict line and payload.
    pub fn parse_rendered(rendered: &str) -> (&str, Option<Value>) {
        match rendered.split_once('\n') {
            Some((text, rest)) => (text, serde_json::from_str(rest).ok()),
            None => (rendered, None),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolLogEntry {
    pub caller: String,
    pub tool: String,
    pub args: Map<String, Value>,
    pub ok: bool,
    pub result: String,
}

/// Registry plus data source for one session.
pub struct Toolbox {
    registry: Vec<ToolSpec>,
    probe: Box<dyn DatabaseProbe>,
    detector: DetectorConfig,
    few_sessions: u32,
    log: Mutex<Vec<ToolLogEntry>>,
}

impl std::fmt::Debug for Toolbox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Toolbox")
            .field("tools", &self.registry.len())
            .finish_non_exhaustive()
    }
}

fn correlated_marker() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?is)\bwhere\b.*\(\s*select\b").expect("valid regex"))
}

/// True when a query template filters on a nested SELECT.
pub fn has_correlated_subquery(query: &str) -> bool {
    correlated_marker().is_match(query)
}

impl Toolbox {
    pub fn new(probe: Box<dyn DatabaseProbe>, registry: Vec<ToolSpec>) -> Result<Self, ToolSpecError> {
        validate_registry(&registry)?;
        Ok(Self {
            registry,
            probe,
            detector: DetectorConfig::default(),
            few_sessions: rules::FEW_ACTIVE_SESSIONS,
            log: Mutex::new(Vec::new()),
        })
    }

    /// Simulated environment with the builtin manifest.
    pub fn simulated(env: SimulatedEnv) -> Self {
        Self::new(Box::new(env), builtin_registry()).expect("builtin registry is valid")
    }

    /// Fresh simulated environment with `scenario` injected.
    pub fn for_scenario(scenario: &AnomalyScenario) -> Result<Self, EnvError> {
        let mut env = SimulatedEnv::default();
        env.inject_scenario(scenario)?;
        Ok(Self::simulated(env))
    }

    pub fn with_detector(mut self, detector: DetectorConfig) -> Self {
        self.detector = detector;
        self
    }

    pub fn with_few_sessions(mut self, few: u32) -> Self {
        self.few_sessions = few;
        self
    }

    pub fn registry(&self) -> &[ToolSpec] {
        &self.registry
    }

    pub fn spec(&self, name: &str) -> Option<&ToolSpec> {
        self.registry.iter().find(|t| t.name == name)
    }

    pub fn catalog(&self) -> &MetricCatalog {
        self.probe.catalog()
    }

    pub fn log(&self) -> Vec<ToolLogEntry> {
        self.log.lock().expect("tool log poisoned").clone()
    }

    /// Verdict for every in-scope metric over the window, ordered by
    /// descending severity (ties by name).
    pub fn scan_metrics(&self, start: i64, end: i64, scope: &Scope) -> Result<Vec<Verdict>, ProbeError> {
        let mut verdicts = Vec::new();
        for def in self.catalog().iter().filter(|m| scope.allows_metric(&m.name)) {
            if let Some(v) = self.verdict(&def.name, start, end)? {
                verdicts.push(v);
            }
        }
        verdicts.sort_by(|a, b| {
            b.severity()
                .total_cmp(&a.severity())
                .then_with(|| a.metric.cmp(&b.metric))
        });
        Ok(verdicts)
    }

    pub fn verdict(&self, metric: &str, start: i64, end: i64) -> Result<Option<Verdict>, ProbeError> {
        let def = self
            .catalog()
            .get(metric)
            .ok_or_else(|| ProbeError::UnknownMetric(metric.to_string()))?;
        let series = self.probe.series(
            metric,
            start - self.detector.trailing_points as i64,
            end,
        )?;
        Ok(series::detect(&series, start, end, def.threshold, self.detector))
    }

    /// Dispatches one call on behalf of `caller`.
    pub fn invoke(
        &self,
        caller: &str,
        scope: &Scope,
        tool: &str,
        args: &Map<String, Value>,
    ) -> Result<Observation, ToolError> {
        let result = self.invoke_inner(caller, scope, tool, args);
        let entry = ToolLogEntry {
            caller: caller.to_string(),
            tool: tool.to_string(),
            args: args.clone(),
            ok: result.is_ok(),
            result: match &result {
                Ok(obs) => obs.render(),
                Err(e) => e.to_string(),
            },
        };
        self.log.lock().expect("tool log poisoned").push(entry);
        result
    }

    fn invoke_inner(
        &self,
        caller: &str,
        scope: &Scope,
        tool: &str,
        args: &Map<String, Value>,
    ) -> Result<Observation, ToolError> {
        let spec = self
            .spec(tool)
            .ok_or_else(|| ToolError::UnknownTool(tool.to_string()))?;
        let scope_error = || ToolError::Scope {
            tool: tool.to_string(),
            caller: caller.to_string(),
        };
        if !scope.allows_tool(spec) {
            return Err(scope_error());
        }
        spec.check_args(args).map_err(|source| ToolError::Schema {
            tool: tool.to_string(),
            source,
        })?;
        if let Some(metric) = args.get("metric_name").and_then(Value::as_str) {
            if !scope.allows_metric(metric) {
                return Err(scope_error());
            }
        }
        let runtime = |message: String| ToolError::Runtime {
            tool: tool.to_string(),
            message,
        };
        let window = || -> Result<(i64, i64), ToolError> {
            let start = args.get("start_time").and_then(Value::as_i64);
            let end = args.get("end_time").and_then(Value::as_i64);
            match (start, end) {
                (Some(s), Some(e)) if s < e => Ok((s, e)),
                (Some(_), Some(_)) => Err(runtime("start_time must be before end_time".into())),
                _ => Err(runtime("missing time window".into())),
            }
        };
        let probe = |e: ProbeError| runtime(e.to_string());
        match tool {
            "list_abnormal_metrics" => {
                let (start, end) = window()?;
                let abnormal: Vec<Verdict> = self
                    .scan_metrics(start, end, scope)
                    .map_err(probe)?
                    .into_iter()
                    .filter(|v| v.abnormal)
                    .collect();
                let names: Vec<String> = abnormal.iter().map(|v| v.metric.clone()).collect();
                let text = if names.is_empty() {
                    "No abnormal metrics in the window".to_string()
                } else {
                    format!("Abnormal metrics: {}", names.join(", "))
                };
                let rows: Vec<Value> = abnormal
                    .iter()
                    .map(|v| {
                        json!({
                            "metric": v.metric,
                            "peak": round4(v.peak),
                            "threshold": v.threshold,
                            "severity": round4(v.severity()),
                        })
                    })
                    .collect();
                let mut obs = Observation::new(
                    text,
                    json!({"start_time": start, "end_time": end, "abnormal": rows}),
                );
                obs.abnormal_metrics = names;
                Ok(obs)
            }
            "is_abnormal_metric" => {
                let (start, end) = window()?;
                let metric = args["metric_name"].as_str().unwrap_or_default();
                let verdict = self
                    .verdict(metric, start, end)
                    .map_err(probe)?
                    .ok_or_else(|| runtime("empty window".into()))?;
                let text = if verdict.abnormal {
                    "The metric is abnormal"
                } else {
                    "The metric is normal"
                };
                let evidence: Vec<Value> = verdict
                    .evidence
                    .iter()
                    .take(5)
                    .map(|p| json!({"timestamp": p.timestamp, "value": round4(p.value), "trigger": p.trigger}))
                    .collect();
                let mut obs = Observation::new(
                    text,
                    json!({
                        "metric": metric,
                        "start_time": start,
                        "end_time": end,
                        "abnormal": verdict.abnormal,
                        "peak": round4(verdict.peak),
                        "threshold": verdict.threshold,
                        "trailing_mean": round4(verdict.trailing_mean),
                        "trailing_std": round4(verdict.trailing_std),
                        "evidence_points": verdict.evidence.len(),
                        "evidence": evidence,
                    }),
                );
                if verdict.abnormal {
                    obs.abnormal_metrics = vec![metric.to_string()];
                }
                Ok(obs)
            }
            "get_metric_summary" => {
                let (start, end) = window()?;
                let metric = args["metric_name"].as_str().unwrap_or_default();
                let data = self.metric_summary(metric, start, end).map_err(probe)?;
                Ok(Observation::new(
                    format!("Summary of {metric} over the window"),
                    data,
                ))
            }
            "get_cpu_stats" | "get_memory_stats" => {
                let (start, end) = window()?;
                let metrics: &[&str] = if tool == "get_cpu_stats" {
                    &["cpu_usage", "node_procs_running"]
                } else {
                    &["memory_usage", "swap_usage"]
                };
                let mut data = Map::new();
                for metric in metrics {
                    data.insert(
                        metric.to_string(),
                        self.metric_summary(metric, start, end).map_err(probe)?,
                    );
                }
                let side = if tool == "get_cpu_stats" { "CPU" } else { "Memory" };
                Ok(Observation::new(format!("{side} statistics over the window"), Value::Object(data)))
            }
            "get_slow_queries" => {
                let (start, end) = window()?;
                let rows = self.slow_queries(start, end).map_err(probe)?;
                let text = if rows.is_empty() {
                    "No statements recorded in the window".to_string()
                } else {
                    format!("Top {} slow query templates by total time", rows.len())
                };
                Ok(Observation::new(text, json!({"statements": rows})))
            }
            "get_activity" => {
                let (start, end) = window()?;
                let rows = self.probe.activity(start, end).map_err(probe)?;
                let active = rows.iter().filter(|r| r.state == "active").count();
                let mut waits: BTreeMap<String, usize> = BTreeMap::new();
                for row in rows.iter().filter(|r| r.state == "active") {
                    if let Some(w) = &row.wait_event {
                        *waits.entry(w.clone()).or_default() += 1;
                    }
                }
                let wait_text = if waits.is_empty() {
                    "no wait events".to_string()
                } else {
                    waits
                        .iter()
                        .map(|(w, n)| format!("{w} x{n}"))
                        .collect::<Vec<_>>()
                        .join(", ")
                };
                Ok(Observation::new(
                    format!("{active} active sessions; {wait_text}"),
                    json!({"active_sessions": active, "wait_events": waits, "sessions": rows}),
                ))
            }
            "get_table_stats" => {
                let rows = self.tables(args)?;
                let data: Vec<Value> = rows.iter().map(|r| r.to_view_json()).collect();
                Ok(Observation::new(
                    format!("Statistics for {} tables", rows.len()),
                    json!({"tables": data}),
                ))
            }
            "flag_cpu_heavy" => {
                let (start, end) = window()?;
                let rows = self.slow_queries(start, end).map_err(probe)?;
                let heavy = rules::flag_cpu_heavy(&rows);
                let text = if heavy.is_empty() {
                    "No slow query uses more than 80% CPU".to_string()
                } else {
                    format!("{} slow query templates use more than 80% CPU", heavy.len())
                };
                Ok(Observation::new(text, json!({"cpu_heavy": heavy})))
            }
            "check_application_pressure" => {
                let (start, end) = window()?;
                let cpu = self
                    .probe
                    .series("cpu_usage", start, end)
                    .map_err(probe)?
                    .mean(start, end)
                    .unwrap_or(0.0);
                let sessions = self
                    .probe
                    .series("active_sessions", start, end)
                    .map_err(probe)?
                    .max(start, end)
                    .unwrap_or(0.0)
                    .round() as u32;
                let application_side = rules::check_application_pressure(cpu, sessions, self.few_sessions);
                let text = if application_side {
                    "The database is lightly loaded; investigate the application side"
                } else {
                    "The database is busy; the application side is not the first suspect"
                };
                Ok(Observation::new(
                    text,
                    json!({
                        "cpu_usage": round4(cpu),
                        "active_sessions": sessions,
                        "application_side": application_side,
                    }),
                ))
            }
            "dead_tuple_check" => {
                let rows = self.tables(args)?;
                let mut flagged = Vec::new();
                let mut results = Vec::new();
                for row in &rows {
                    let outcome = rules::dead_tuple_check(row);
                    if outcome.is_cause() {
                        flagged.push(row.table.clone());
                    }
                    results.push(json!({
                        "table": row.table,
                        "dead_rate": round4(row.dead_rate()),
                        "result": outcome,
                    }));
                }
                let mut obs = if flagged.is_empty() {
                    Observation::new("Dead tuples: all tables clear", json!({"tables": results}))
                } else {
                    Observation::new(
                        format!(
                            "Dead tuples: many_dead_tuples on {}; {}",
                            flagged.join(", "),
                            rules::DEAD_TUPLE_ADVICE
                        ),
                        json!({"tables": results}),
                    )
                };
                if !flagged.is_empty() {
                    obs.cause = Some("many_dead_tuples".into());
                }
                Ok(obs)
            }
            "knob_advice" => {
                let (start, end) = window()?;
                let memory = self
                    .probe
                    .series("memory_usage", start, end)
                    .map_err(probe)?
                    .mean(start, end)
                    .unwrap_or(0.0)
                    .clamp(0.0, 1.0);
                let slow = self
                    .verdict("query_latency_p95_ms", start, end)
                    .map_err(probe)?
                    .is_some_and(|v| v.abnormal);
                let advice = rules::knob_advice(memory, slow).map_err(|e| runtime(e.to_string()))?;
                let text = if advice.is_empty() {
                    "No knob change recommended".to_string()
                } else {
                    format!("Knob advice: {}", advice.join("; "))
                };
                Ok(Observation::new(
                    text,
                    json!({"memory_usage": round4(memory), "slow": slow, "advice": advice}),
                ))
            }
            "index_advice" => {
                let predicates: Vec<Vec<String>> = serde_json::from_value(args["predicates"].clone())
                    .map_err(|e| runtime(e.to_string()))?;
                let indexes = rules::index_advice(&predicates).map_err(|e| runtime(e.to_string()))?;
                let text = format!(
                    "Candidate indexes: {}",
                    indexes
                        .iter()
                        .map(|cols| format!("({})", cols.join(", ")))
                        .collect::<Vec<_>>()
                        .join("; ")
                );
                Ok(Observation::new(text, json!({"indexes": indexes})))
            }
            "query_rewrite_advice" => {
                let (start, end) = window()?;
                let mut advice = Vec::new();
                for row in self.slow_queries(start, end).map_err(probe)? {
                    if has_correlated_subquery(&row.query) {
                        advice.push(json!({"query": row.query, "advice": "rewrite the correlated subquery as a join"}));
                    } else if row.plan.as_deref().is_some_and(|p| p.contains("Nested Loop")) {
                        advice.push(json!({"query": row.query, "advice": "replace the nested-loop join with a hash join on the join keys"}));
                    }
                }
                let text = if advice.is_empty() {
                    "No rewrite recommended".to_string()
                } else {
                    format!("{} query rewrites recommended", advice.len())
                };
                Ok(Observation::new(text, json!({"rewrites": advice})))
            }
            other => Err(runtime(format!("no implementation bound to `{other}`"))),
        }
    }

    fn metric_summary(&self, metric: &str, start: i64, end: i64) -> Result<Value, ProbeError> {
        let def = self
            .catalog()
            .get(metric)
            .ok_or_else(|| ProbeError::UnknownMetric(metric.to_string()))?;
        let series = self.probe.series(metric, start, end)?;
        let points = series.window(start, end);
        let min = points.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
        Ok(json!({
            "metric": metric,
            "min": round4(min),
            "mean": round4(series.mean(start, end).unwrap_or(0.0)),
            "max": round4(series.max(start, end).unwrap_or(0.0)),
            "baseline": def.baseline,
            "threshold": def.threshold,
            "unit": def.unit,
        }))
    }

    /// Statements ranked by total time, descending, at most five.
    pub fn slow_queries(&self, start: i64, end: i64) -> Result<Vec<views::StatementRow>, ProbeError> {
        let mut rows = self.probe.statements(start, end)?;
        rows.sort_by(|a, b| {
            b.total_time_ms
                .total_cmp(&a.total_time_ms)
                .then_with(|| a.query.cmp(&b.query))
        });
        rows.truncate(5);
        Ok(rows)
    }

    fn tables(&self, args: &Map<String, Value>) -> Result<Vec<views::TableStatRow>, ToolError> {
        let mut rows = self.probe.table_stats().map_err(|e| ToolError::Runtime {
            tool: "table_stats".into(),
            message: e.to_string(),
        })?;
        if let Some(table) = args.get("table").and_then(Value::as_str) {
            rows.retain(|r| r.table == table);
        }
        Ok(rows)
    }
}

fn round4(x: f64) -> f64 {
    (x * 10_000.0).round() / 10_000.0
}
