//! Offline chat backend that behaves like a careful DBA following the
//! prompt it is given.
//!
//! With an experience-following template it lists the abnormal metrics,
//! then for the metric in focus walks the shown experience segments that
//! read it, runs the check tools their steps name, and confirms a cause only
//! when the observation satisfies the segment's rule. With any other
//! template, and in the metrics-only baseline, it names the cause suggested
//! by the most severe abnormal metric. Every answer is a pure function of
//! the request, so runs can be recorded and replayed.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde_json::{json, Map, Value};

use crate::causes::{to_label, CauseLabel};
use crate::llm::{ChatBackend, CompletionRequest, CompletionResponse, LlmError, Role};
use crate::prompts;
use crate::toolbox::rules;
use crate::toolbox::views::{StatementRow, TableStatRow};
use crate::toolbox::{has_correlated_subquery, MetricCatalog, Observation};
use crate::tools::{ToolCategory, ToolSpec};

const PINNED: [&str; 2] = ["list_abnormal_metrics", "is_abnormal_metric"];

/// What the most severe abnormal metric suggests when nothing else is known.
pub fn metric_hint(metric: &str) -> &'static str {
    match metric {
        "cpu_usage" => "CPU_CONTENTION",
        "rows_fetched_per_s" => "FETCH_LARGE_DATA",
        "seq_scans_per_s" => "MISSING_INDEXES",
        "active_sessions" => "WORKLOAD_CONTENTION",
        "lock_waits" => "LOCK_CONTENTION",
        "io_wait" => "IO_CONTENTION",
        "rows_inserted_per_s" => "INSERT_LARGE_DATA",
        "node_procs_running" => "high number of running processes",
        "disk_write_mb_s" => "heavy disk write traffic",
        "disk_read_mb_s" => "heavy disk read traffic",
        "memory_usage" | "swap_usage" => "memory pressure",
        "qps" => "high query rate",
        _ => "slow query execution",
    }
}

#[derive(Debug, Clone, Default)]
pub struct SimulatedDba {
    catalog: MetricCatalog,
}

struct Segment {
    name: String,
    metrics: Vec<String>,
    steps: String,
}

struct ToolStep {
    tool: String,
    args: Map<String, Value>,
    line: String,
    data: Value,
}

fn experience_block() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?m)^\[experience \d+\] name: (\S+)\nmetrics: (.*)\ncontent: .*\nsteps: (.*)$").expect("valid regex")
    })
}

fn follows_experience() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(follow|apply|use)\b[^.]*\bexperience\b").expect("valid regex"))
}

fn above_threshold() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\bwhen (\w+) is above its threshold").expect("valid regex"))
}

fn window_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"Window: \[(-?\d+), (-?\d+)\]").expect("valid regex"))
}

/// Value of a `Key: value` line.
fn field<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(':')))
        .map(str::trim)
}

fn list_field(text: &str, key: &str) -> Vec<String> {
    match field(text, key) {
        None | Some("none") | Some("") => Vec::new(),
        Some(v) => v.split(", ").map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
    }
}

fn window_of(text: &str) -> Option<[i64; 2]> {
    let c = window_line().captures(text)?;
    Some([c[1].parse().ok()?, c[2].parse().ok()?])
}

fn text(s: impl Into<String>) -> Result<CompletionResponse, LlmError> {
    Ok(CompletionResponse::text(s))
}

/// Rule each cause label is checked by: the tool whose observation decides
/// it, and the decision.
type CauseRule = (&'static str, fn(&ToolStep) -> bool);

fn cause_rule(label: &str) -> Option<CauseRule> {
    fn top_statement(step: &ToolStep) -> Option<StatementRow> {
        step.data
            .get("statements")
            .and_then(|s| s.get(0))
            .and_then(|s| serde_json::from_value(s.clone()).ok())
    }
    fn statements(step: &ToolStep) -> Vec<StatementRow> {
        step.data
            .get("statements")
            .and_then(|s| serde_json::from_value(s.clone()).ok())
            .unwrap_or_default()
    }
    fn tables(step: &ToolStep) -> Vec<TableStatRow> {
        step.data
            .get("tables")
            .and_then(|s| serde_json::from_value(s.clone()).ok())
            .unwrap_or_default()
    }
    fn waits(step: &ToolStep, prefix: &str) -> u64 {
        step.data
            .get("wait_events")
            .and_then(Value::as_object)
            .map(|m| {
                m.iter()
                    .filter(|(k, _)| k.starts_with(prefix))
                    .filter_map(|(_, v)| v.as_u64())
                    .sum()
            })
            .unwrap_or(0)
    }
    Some(match to_label(label) {
        Some(CauseLabel::InsertLargeData) => ("get_slow_queries", |s| {
            top_statement(s).is_some_and(|t| t.query.trim_start().to_uppercase().starts_with("INSERT") && t.rows >= 100_000)
        }),
        Some(CauseLabel::FetchLargeData) => ("get_slow_queries", |s| {
            top_statement(s).is_some_and(|t| t.query.trim_start().to_uppercase().starts_with("SELECT") && t.rows >= 1_000_000)
        }),
        Some(CauseLabel::PoorJoinPerformance) => ("get_slow_queries", |s| {
            statements(s).iter().any(|t| {
                t.query.to_uppercase().contains(" JOIN ")
                    && t.plan.as_deref().is_some_and(|p| p.contains("Nested Loop"))
                    && t.cpu_fraction > rules::CPU_HEAVY_FRACTION
            })
        }),
        Some(CauseLabel::CorrelatedSubquery) => {
            ("get_slow_queries", |s| top_statement(s).is_some_and(|t| has_correlated_subquery(&t.query)))
        }
        Some(CauseLabel::MissingIndexes) => ("get_table_stats", |s| {
            tables(s)
                .iter()
                .any(|t| t.n_indexes == 0 && t.seq_scans > 10_000 && t.idx_scans == 0)
        }),
        Some(CauseLabel::LackStatisticInfo) => ("get_table_stats", |s| {
            tables(s)
                .iter()
                .any(|t| t.mod_since_analyze as f64 > 0.1 * t.live_tuples as f64)
        }),
        Some(CauseLabel::WorkloadContention) => ("get_activity", |s| waits(s, "Lock") == 0),
        Some(CauseLabel::IoContention) => ("get_activity", |s| waits(s, "IO") >= 5),
        Some(CauseLabel::CpuContention) => ("flag_cpu_heavy", |s| {
            s.data
                .get("cpu_heavy")
                .and_then(Value::as_array)
                .is_some_and(|a| a.is_empty())
        }),
        Some(_) => return None,
        None if label == "many_dead_tuples" => ("dead_tuple_check", |s| s.line.contains("many_dead_tuples")),
        None => return None,
    })
}

fn cause_name(segment: &str) -> Option<String> {
    match to_label(segment) {
        Some(label) => Some(label.as_str().to_string()),
        None if segment == "many_dead_tuples" => Some(segment.to_string()),
        None => None,
    }
}

impl SimulatedDba {
    pub fn new() -> Self {
        Self::default()
    }

    fn tool_steps(request: &CompletionRequest) -> Vec<ToolStep> {
        request
            .messages
            .iter()
            .filter(|m| m.role == Role::Tool)
            .filter_map(|m| {
                let call = m.tool_call.as_ref()?;
                let (line, data) = Observation::parse_rendered(&m.content);
                Some(ToolStep {
                    tool: call.tool.clone(),
                    args: call.args.clone(),
                    line: line.to_string(),
                    data: data.unwrap_or(Value::Null),
                })
            })
            .collect()
    }

    fn call(spec: &ToolSpec, window: [i64; 2], metric: Option<&str>) -> CompletionResponse {
        let mut args = Map::new();
        for arg in &spec.arg_schema {
            match arg.name.as_str() {
                "start_time" => {
                    args.insert(arg.name.clone(), json!(window[0]));
                }
                "end_time" => {
                    args.insert(arg.name.clone(), json!(window[1]));
                }
                "metric_name" => {
                    if let Some(m) = metric {
                        args.insert(arg.name.clone(), json!(m));
                    }
                }
                _ => {}
            }
        }
        CompletionResponse::call(spec.name.clone(), Value::Object(args))
    }

    fn step(&self, request: &CompletionRequest, user: &str) -> Result<CompletionResponse, LlmError> {
        let system = request
            .messages
            .iter()
            .find(|m| m.role == Role::System)
            .map_or("", |m| m.content.as_str());
        let window = window_of(user).unwrap_or([0, 1]);
        let confirmed = list_field(user, "Confirmed root causes");
        let focus = field(user, "Focus metric").filter(|f| *f != "none").map(str::to_string);
        let steps = Self::tool_steps(request);
        let offered = |name: &str| request.available_tools.iter().find(|t| t.name == name);
        let done = |tool: &str, metric: Option<&str>| {
            steps.iter().any(|s| {
                s.tool == tool && metric.is_none_or(|m| s.args.get("metric_name").and_then(Value::as_str) == Some(m))
            })
        };

        let Some(list) = steps.iter().find(|s| s.tool == "list_abnormal_metrics") else {
            return match offered("list_abnormal_metrics") {
                Some(spec) => Ok(Self::call(spec, window, None)),
                None => text("No tool can list the abnormal metrics, so no cause can be confirmed."),
            };
        };
        let rows: Vec<(String, f64, f64)> = list
            .data
            .get("abnormal")
            .and_then(Value::as_array)
            .map(|a| {
                a.iter()
                    .filter_map(|r| {
                        Some((
                            r.get("metric")?.as_str()?.to_string(),
                            r.get("peak")?.as_f64()?,
                            r.get("threshold")?.as_f64()?,
                        ))
                    })
                    .collect()
            })
            .unwrap_or_default();

        let Some(focus) = focus.or_else(|| rows.first().map(|r| r.0.clone())) else {
            if let Some(spec) = offered("check_application_pressure") {
                if !done("check_application_pressure", None) {
                    return Ok(Self::call(spec, window, None));
                }
            }
            return text("No abnormal metric found in the window; nothing to confirm on the database side.");
        };

        let last_instruction = system.rsplit("\n\n").next().unwrap_or("");
        if !follows_experience().is_match(last_instruction) {
            let top = rows.first().map_or(focus.as_str(), |r| r.0.as_str());
            return text(format!(
                "{top} is the most severe abnormal metric.\n{} {}",
                prompts::ROOT_CAUSE_PREFIX,
                metric_hint(top)
            ));
        }

        let segments: Vec<Segment> = experience_block()
            .captures_iter(system)
            .map(|c| Segment {
                name: c[1].to_string(),
                metrics: c[2].split(", ").map(str::to_string).collect(),
                steps: c[3].to_string(),
            })
            .collect();
        for segment in segments.iter().filter(|s| s.metrics.contains(&focus)) {
            let Some(cause) = cause_name(&segment.name) else { continue };
            if confirmed.contains(&cause) {
                continue;
            }
            let Some((decider, holds)) = cause_rule(&cause) else { continue };
            if let Some(c) = above_threshold().captures(&segment.steps) {
                let metric = &c[1];
                if !rows.iter().any(|(m, peak, thr)| m == metric && peak > thr) {
                    continue;
                }
            }
            let mut checks: Vec<&ToolSpec> = Vec::new();
            for token in segment.steps.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_')) {
                if let Some(spec) = offered(token) {
                    if spec.category == ToolCategory::Observation
                        && !PINNED.contains(&token)
                        && !checks.iter().any(|c| c.name == token)
                    {
                        checks.push(spec);
                    }
                }
            }
            if !checks.iter().any(|c| c.name == decider) {
                continue;
            }
            if let Some(obs) = steps.iter().find(|s| s.tool == decider) {
                if holds(obs) {
                    return text(format!(
                        "The {decider} check supports {}.\n{} {cause}",
                        segment.name,
                        prompts::ROOT_CAUSE_PREFIX
                    ));
                }
                continue;
            }
            if let Some(next) = checks.iter().find(|c| !done(&c.name, None)) {
                return Ok(Self::call(next, window, None));
            }
        }
        if let Some(spec) = offered("is_abnormal_metric") {
            if !done("is_abnormal_metric", Some(&focus)) {
                return Ok(Self::call(spec, window, Some(&focus)));
            }
        }
        text(format!("No root cause found for {focus}."))
    }

    fn reflect(user: &str) -> Result<CompletionResponse, LlmError> {
        let step = field(user, "Step").unwrap_or("");
        let observation = field(user, "Observation").unwrap_or("");
        let useless = observation.starts_with("The metric is normal")
            || step.starts_with("No root cause found")
            || step.starts_with("No abnormal metric")
            || observation.starts_with("No abnormal metrics");
        text(if useless { "useless" } else { "useful" })
    }

    fn final_report(user: &str) -> Result<CompletionResponse, LlmError> {
        let causes = list_field(user, "Confirmed root causes");
        let abnormal = list_field(user, "Abnormal metrics");
        let window = window_of(user).unwrap_or([0, 1]);
        let metrics = if abnormal.is_empty() {
            "no metric left its normal range".to_string()
        } else {
            format!("the abnormal metrics were {}", abnormal.join(", "))
        };
        if causes.is_empty() {
            return text(format!(
                "No root cause was confirmed for [{}, {}]; {metrics}.",
                window[0], window[1]
            ));
        }
        let lines: Vec<String> = causes
            .iter()
            .map(|c| format!("{} {c}", prompts::ROOT_CAUSE_PREFIX))
            .collect();
        text(format!(
            "{}\nEach cause was confirmed by a tool check over [{}, {}]; {metrics}.",
            lines.join("\n"),
            window[0],
            window[1]
        ))
    }

    fn baseline(user: &str) -> Result<CompletionResponse, LlmError> {
        let abnormal = list_field(user, "Abnormal metrics");
        match abnormal.first() {
            None => text("No abnormal metric in the window; no cause can be named from metrics."),
            Some(top) => text(format!(
                "{top} is the most severe abnormal metric.\n{} {}",
                prompts::ROOT_CAUSE_PREFIX,
                metric_hint(top)
            )),
        }
    }

    fn schedule(request: &CompletionRequest, user: &str) -> Result<CompletionResponse, LlmError> {
        let roster = list_field(user, "Roster");
        let chief = field(user, "Chief").unwrap_or("chief").to_string();
        let mut said: BTreeMap<String, Vec<&str>> = BTreeMap::new();
        for m in &request.messages {
            if let Role::Agent(name) = &m.role {
                said.entry(name.clone()).or_default().push(m.content.as_str());
            }
        }
        let any_cause = said.values().flatten().any(|c| c.contains(prompts::ROOT_CAUSE_PREFIX));
        let instructions = list_field(user, "Pending instructions");
        let note = if instructions.is_empty() {
            String::new()
        } else {
            format!(" Instruction noted: {}.", instructions.join("; "))
        };
        let pick = |who: &str, why: &str| text(format!("Next: {who}\nRationale: {why}{note}"));
        if let Some(agent) = roster.iter().find(|a| !said.contains_key(*a)) {
            return pick(agent, "has not reported yet.");
        }
        if let Some(agent) = roster.iter().find(|a| {
            said.get(*a).is_some_and(|m| {
                m.len() == 1 && m[0].contains(" is abnormal") && !m[0].contains(prompts::ROOT_CAUSE_PREFIX)
            })
        }) {
            return pick(agent, "found abnormal metrics without a cause; look deeper.");
        }
        if !any_cause && !said.contains_key(&chief) {
            return pick(&chief, "the specialists found nothing; check the application side.");
        }
        pick("DONE", "the findings are settled.")
    }

    fn team_message(user: &str) -> Result<CompletionResponse, LlmError> {
        let window = window_of(user).unwrap_or([0, 1]);
        let abnormal = list_field(user, "Abnormal metrics");
        let causes = list_field(user, "Confirmed root causes");
        let blocked = list_field(user, "Blocked tools");
        let side = field(user, "Role").unwrap_or("database");
        let mut lines = Vec::new();
        for tool in &blocked {
            lines.push(format!("The tool {tool} is outside my scope."));
        }
        if let Some(metric) = abnormal.first() {
            let tail = if causes.is_empty() { ", but no cause was confirmed" } else { "" };
            lines.push(format!("{metric} over [{}, {}] is abnormal{tail}.", window[0], window[1]));
        }
        for cause in &causes {
            lines.push(format!("{} {cause}", prompts::ROOT_CAUSE_PREFIX));
        }
        if causes.is_empty() {
            lines.push(format!("no {side}-side cause found"));
        }
        text(lines.join("\n"))
    }

    fn summary(&self, user: &str) -> Result<CompletionResponse, LlmError> {
        let mut bullets = Vec::new();
        let mut in_calls = false;
        for line in user.lines() {
            if line.starts_with("New tool calls:") {
                in_calls = true;
                continue;
            }
            let Some(entry) = line.strip_prefix("- ").filter(|_| in_calls) else { continue };
            let parts: Vec<&str> = entry.splitn(3, " | ").collect();
            let [tool, metric, result] = parts[..] else { continue };
            let finding = match (metric, result) {
                (m, r) if m != "-" && r.starts_with("The metric is abnormal") => {
                    format!("the {} is abnormal", self.catalog.display(m))
                }
                (m, r) if m != "-" && r.starts_with("The metric is normal") => {
                    format!("the {} is normal", self.catalog.display(m))
                }
                (_, r) => {
                    let mut chars = r.chars();
                    match chars.next() {
                        Some(c) => format!("{}{}", c.to_lowercase(), chars.as_str()),
                        None => "nothing new".into(),
                    }
                }
            };
            bullets.push(format!("- I searched for {tool}, and I now know that {finding}."));
        }
        text(if bullets.is_empty() { "- nothing new".to_string() } else { bullets.join("\n") })
    }

    fn consolidate(user: &str) -> Result<CompletionResponse, LlmError> {
        let mut lines = Vec::new();
        let mut in_causes = false;
        for line in user.lines() {
            if line.starts_with("Accepted causes:") {
                in_causes = true;
                continue;
            }
            if in_causes {
                match line.strip_prefix("- ") {
                    Some(entry) => {
                        let (cause, agent) = entry.split_once(" by ").unwrap_or((entry, "the team"));
                        let agent = agent.replace('_', " ");
                        lines.push(format!("{} {cause} (found by the {agent})", prompts::ROOT_CAUSE_PREFIX));
                    }
                    None => in_causes = false,
                }
            }
        }
        if lines.is_empty() {
            return text(
                "No root cause was found on the database side. With little CPU load and only a few \
                 sessions at work, the slowdown most likely starts in the application: review its \
                 connection handling, request bursts and client-side retries.",
            );
        }
        text(lines.join("\n"))
    }

    fn summarize_chunk(user: &str) -> Result<CompletionResponse, LlmError> {
        let body = user.split_once("\n\n").map_or(user, |(_, b)| b);
        let words: Vec<&str> = body
            .split_whitespace()
            .filter(|w| !w.starts_with('#'))
            .take(25)
            .collect();
        text(if words.is_empty() { "empty section".to_string() } else { words.join(" ") })
    }

    fn propose(user: &str) -> Result<CompletionResponse, LlmError> {
        let index: usize = field(user, "Candidate").and_then(|v| v.parse().ok()).unwrap_or(1);
        let base = if index % 2 == 1 {
            prompts::DEFAULT_DIAGNOSIS_TEMPLATE
        } else {
            prompts::METRIC_ONLY_TEMPLATE
        };
        let (first, rest) = base.split_once('\n').unwrap_or((base, ""));
        text(format!("{first} (draft {index})\n{rest}"))
    }
}

impl ChatBackend for SimulatedDba {
    fn complete_raw(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let user = request.last_user_content().unwrap_or("");
        let lead = user.lines().next().unwrap_or("");
        if lead.starts_with(prompts::STEP_LEAD) {
            self.step(request, user)
        } else if lead.starts_with(prompts::REFLECT_LEAD) {
            Self::reflect(user)
        } else if lead.starts_with(prompts::FINAL_LEAD) {
            Self::final_report(user)
        } else if lead.starts_with(prompts::BASELINE_LEAD) {
            Self::baseline(user)
        } else if lead.starts_with(prompts::SCHEDULE_LEAD) {
            Self::schedule(request, user)
        } else if lead.starts_with(prompts::TEAM_MESSAGE_LEAD) {
            Self::team_message(user)
        } else if lead.starts_with(prompts::SUMMARY_LEAD) {
            self.summary(user)
        } else if lead.starts_with(prompts::CONSOLIDATE_LEAD) {
            Self::consolidate(user)
        } else if lead.starts_with(prompts::SUMMARIZE_LEAD) {
            Self::summarize_chunk(user)
        } else if lead.starts_with(prompts::EXTRACT_LEAD) {
            text("[]")
        } else if lead.starts_with(prompts::PROPOSE_LEAD) {
            Self::propose(user)
        } else {
            Err(LlmError::Unscripted(format!(
                "simulated DBA has no rule for `{}`",
                lead.chars().take(60).collect::<String>()
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{complete, ChatMessage};

    fn ask(user: &str) -> String {
        let request = CompletionRequest::new(vec![ChatMessage::user(user)]);
        complete(&SimulatedDba::new(), &request).unwrap().text_or_empty().to_string()
    }

    #[test]
    fn baseline_names_top_metric_hint() {
        let out = ask("Metrics-only diagnosis.\nWindow: [0, 10]\nAbnormal metrics: node_procs_running, rows_inserted_per_s");
        assert!(out.ends_with("Root cause: high number of running processes"));
    }

    #[test]
    fn reflection_flags_normal_metrics() {
        let useless = ask(&prompts::fill(
            prompts::REFLECT_TEMPLATE,
            &[("action", "is_abnormal_metric(...)"), ("observation", "The metric is normal\n{}")],
        ));
        assert_eq!(useless, "useless");
    }

    #[test]
    fn summary_bullet_uses_display_name() {
        let out = ask("Update the running summary.\nCurrent summary:\n- I know the start and end time of the anomaly.\nNew tool calls:\n- is_abnormal_metric | cpu_usage | The metric is abnormal");
        assert_eq!(out, "- I searched for is_abnormal_metric, and I now know that the CPU usage is abnormal.");
    }

    #[test]
    fn unknown_lead_is_unscripted() {
        let request = CompletionRequest::new(vec![ChatMessage::user("hello")]);
        assert!(matches!(SimulatedDba::new().complete_raw(&request), Err(LlmError::Unscripted(_))));
    }
}
