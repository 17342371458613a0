//! Final diagnosis report and the advice attached to it.

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::causes::{normalize_cause, to_label, CauseLabel};
use crate::toolbox::{Scope, Toolbox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosisMethod {
    /// Tree search with experience and retrieved tools.
    Full,
    /// Chief plus scoped specialists.
    MultiAgent,
    /// One pass over the abnormal metrics, no knowledge and no search.
    MetricsOnlyBaseline,
}

impl DiagnosisMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::MultiAgent => "multi_agent",
            Self::MetricsOnlyBaseline => "metrics_only_baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct ReportedCause {
    /// Normalized label (scenario label or experience name).
    pub label: String,
    /// Agent that confirmed it.
    pub agent: String,
    /// Observation lines supporting it.
    pub evidence: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum AdviceStatus {
    Pending,
    Confirmed,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct Advice {
    /// "A1", "A2", ... in report order.
    pub id: String,
    pub cause: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool: Option<String>,
    pub status: AdviceStatus,
}

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("unknown advice id `{0}`")]
    UnknownAdvice(String),
    #[error("advice `{0}` was already decided")]
    AlreadyDecided(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct DiagnosisReport {
    pub method: DiagnosisMethod,
    pub window: [i64; 2],
    pub causes: Vec<ReportedCause>,
    pub abnormal_metrics: Vec<String>,
    pub tools_used: Vec<String>,
    /// One-paragraph answer for the user.
    pub conclusion: String,
    /// Backend-written analysis.
    pub analysis: String,
    pub advice: Vec<Advice>,
    /// The step cap stopped the search before it terminated on its own.
    pub truncated: bool,
    pub steps: usize,
}

impl DiagnosisReport {
    pub fn empty(method: DiagnosisMethod, window: [i64; 2]) -> Self {
        Self {
            method,
            window,
            causes: Vec::new(),
            abnormal_metrics: Vec::new(),
            tools_used: Vec::new(),
            conclusion: String::new(),
            analysis: String::new(),
            advice: Vec::new(),
            truncated: false,
            steps: 0,
        }
    }

    pub fn cause_labels(&self) -> Vec<String> {
        self.causes.iter().map(|c| normalize_cause(&c.label)).collect()
    }

    /// Adds `label` unless already present; returns whether it was new.
    pub fn add_cause(&mut self, label: &str, agent: &str, evidence: Vec<String>) -> bool {
        let label = normalize_cause(label);
        if self.causes.iter().any(|c| c.label == label) {
            return false;
        }
        self.causes.push(ReportedCause {
            label,
            agent: agent.to_string(),
            evidence,
        });
        true
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// SHA-256 of the canonical JSON; replay compares it byte for byte.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn pending_advice(&self) -> impl Iterator<Item = &Advice> {
        self.advice.iter().filter(|a| a.status == AdviceStatus::Pending)
    }

    pub fn has_pending_advice(&self) -> bool {
        self.pending_advice().next().is_some()
    }

    pub fn decide(&mut self, id: &str, approve: bool) -> Result<(), ReportError> {
        let advice = self
            .advice
            .iter_mut()
            .find(|a| a.id == id)
            .ok_or_else(|| ReportError::UnknownAdvice(id.to_string()))?;
        if advice.status != AdviceStatus::Pending {
            return Err(ReportError::AlreadyDecided(id.to_string()));
        }
        advice.status = if approve {
            AdviceStatus::Confirmed
        } else {
            AdviceStatus::Rejected
        };
        Ok(())
    }

    /// Plain-text rendering for the CLI.
    pub fn render_text(&self) -> String {
        let mut out = format!(
            "method: {}\nwindow: [{}, {}]\n",
            self.method.as_str(),
            self.window[0],
            self.window[1]
        );
        if self.causes.is_empty() {
            out.push_str("causes: none\n");
        }
        for cause in &self.causes {
            out.push_str(&format!("cause: {} (by {})\n", cause.label, cause.agent));
            for line in &cause.evidence {
                out.push_str(&format!("  evidence: {line}\n"));
            }
        }
        if !self.abnormal_metrics.is_empty() {
            out.push_str(&format!("abnormal metrics: {}\n", self.abnormal_metrics.join(", ")));
        }
        for advice in &self.advice {
            out.push_str(&format!("advice {} [{:?}]: {}\n", advice.id, advice.status, advice.text));
        }
        if self.truncated {
            out.push_str("truncated: step cap reached\n");
        }
        out.push_str(&format!("conclusion: {}\n", self.conclusion));
        out
    }
}

/// Conclusion sentence derived from the cause list.
pub fn conclusion_for(causes: &[ReportedCause], window: [i64; 2]) -> String {
    if causes.is_empty() {
        return format!(
            "No root cause found in [{}, {}]. The database side looks clean, so check the application side next.",
            window[0], window[1]
        );
    }
    let labels: Vec<String> = causes.iter().map(|c| c.label.clone()).collect();
    format!("Root causes in [{}, {}]: {}.", window[0], window[1], labels.join(", "))
}

fn invoke_text(toolbox: &Toolbox, tool: &str, args: Map<String, Value>) -> Option<String> {
    match toolbox.invoke("advisor", &Scope::unrestricted(), tool, &args) {
        Ok(obs) => Some(obs.text),
        Err(e) => {
            tracing::warn!(tool, error = %e, "advisor failed");
            None
        }
    }
}

fn window_args(window: [i64; 2]) -> Map<String, Value> {
    let mut args = Map::new();
    args.insert("start_time".into(), json!(window[0]));
    args.insert("end_time".into(), json!(window[1]));
    args
}

/// Runs the optimization advisors matching the report's causes and appends
/// their output as pending advice.
pub fn attach_advice(report: &mut DiagnosisReport, toolbox: &Toolbox) {
    let window = report.window;
    let mut items: Vec<(String, String, Option<String>)> = Vec::new();
    for cause in &report.causes {
        let label = cause.label.clone();
        match to_label(&label) {
            Some(CauseLabel::MissingIndexes) => {
                let predicates: Vec<Vec<String>> = toolbox
                    .slow_queries(window[0], window[1])
                    .unwrap_or_default()
                    .into_iter()
                    .flat_map(|s| s.predicates)
                    .collect();
                if predicates.is_empty() {
                    continue;
                }
                let mut args = Map::new();
                args.insert("predicates".into(), json!(predicates));
                if let Some(text) = invoke_text(toolbox, "index_advice", args) {
                    items.push((label, text, Some("index_advice".into())));
                }
            }
            Some(CauseLabel::PoorJoinPerformance) | Some(CauseLabel::CorrelatedSubquery) => {
                if let Some(text) = invoke_text(toolbox, "query_rewrite_advice", window_args(window)) {
                    items.push((label, text, Some("query_rewrite_advice".into())));
                }
            }
            Some(CauseLabel::LackStatisticInfo) => items.push((
                label,
                "Refresh planner statistics (ANALYZE) on the tables with many modifications since the last analyze".into(),
                None,
            )),
            _ if label == "many_dead_tuples" => {
                items.push((label, crate::toolbox::rules::DEAD_TUPLE_ADVICE.into(), None));
            }
            _ => {}
        }
    }
    if report.abnormal_metrics.iter().any(|m| m == "query_latency_p95_ms") {
        if let Some(text) = invoke_text(toolbox, "knob_advice", window_args(window)) {
            if text != "No knob change recommended" {
                let cause = report
                    .causes
                    .first()
                    .map_or_else(|| "query_latency_p95_ms".to_string(), |c| c.label.clone());
                items.push((cause, text, Some("knob_advice".into())));
            }
        }
    }
    let start = report.advice.len();
    for (i, (cause, text, tool)) in items.into_iter().enumerate() {
        report.advice.push(Advice {
            id: format!("A{}", start + i + 1),
            cause,
            text,
            tool,
            status: AdviceStatus::Pending,
        });
    }
}
