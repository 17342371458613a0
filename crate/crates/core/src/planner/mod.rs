//! Tree search over tool-calling diagnosis steps.
//!
//! Each simulation selects a node, asks the backend for one action
//! constrained to the offered tools, runs it, backpropagates any newly
//! confirmed cause, and reviews the path for useless steps. The search stops
//! after `stall_threshold` consecutive simulations without a new cause, when
//! nothing is left to select, or at the step cap.

mod tree;

pub use tree::{uct_value, DiagnosisNode, DiagnosisTree, NoCandidates, NodeAction, NodeStatus, TreeConfig};

use serde_json::{Map, Value};

use crate::llm::{complete, ChatBackend, ChatMessage, CompletionRequest, LlmError};
use crate::prompts;
use crate::report::{conclusion_for, DiagnosisMethod, DiagnosisReport};
use crate::toolbox::{Observation, Scope, Toolbox};
use crate::tools::{ToolInvocation, ToolSpec};

/// Everything one search needs besides the tree.
pub struct PlannerContext<'a> {
    pub backend: &'a dyn ChatBackend,
    pub toolbox: &'a Toolbox,
    pub scope: Scope,
    /// Name recorded in the tool log and on reported causes.
    pub caller: String,
    /// Enriched diagnosis prompt.
    pub system_prompt: String,
    pub offered: Vec<ToolSpec>,
    pub window: [i64; 2],
    /// Extra context shown before each step (human instructions, team
    /// summary).
    pub notes: Vec<String>,
    pub observer: Option<&'a (dyn Fn(&DiagnosisNode) + Sync)>,
}

impl PlannerContext<'_> {
    fn emit(&self, node: &DiagnosisNode) {
        if let Some(observer) = self.observer {
            observer(node);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Stalled,
    NoCandidates,
    StepCap,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub tree: DiagnosisTree,
    pub stop: StopReason,
}

impl SearchOutcome {
    pub fn truncated(&self) -> bool {
        self.stop == StopReason::StepCap
    }
}

fn action_message(call: &ToolInvocation) -> String {
    format!("Action: {}\nAction Input: {}", call.tool, Value::Object(call.args.clone()))
}

/// Chat history for the executed nodes on the path to `upto`.
pub fn path_history(tree: &DiagnosisTree, upto: usize) -> Vec<ChatMessage> {
    let mut messages = Vec::new();
    for id in tree.path(upto) {
        let node = tree.node(id);
        match &node.action {
            Some(NodeAction::Tool { call }) => {
                let bare = ToolInvocation::new(call.tool.clone(), call.args.clone());
                messages.push(ChatMessage::assistant(action_message(call)).with_tool_call(bare));
                messages.push(ChatMessage::tool_result(call.clone()));
            }
            Some(NodeAction::Analysis { text }) => messages.push(ChatMessage::assistant(text.clone())),
            None => {}
        }
    }
    messages
}

fn join_or_none<'a>(items: impl IntoIterator<Item = &'a String>) -> String {
    let items: Vec<&str> = items.into_iter().map(String::as_str).collect();
    if items.is_empty() {
        "none".into()
    } else {
        items.join(", ")
    }
}

fn step_prompt(tree: &DiagnosisTree, id: usize, window: [i64; 2]) -> String {
    format!(
        "{}\nFocus metric: {}\nConfirmed root causes: {}\nWindow: [{}, {}]",
        prompts::STEP_LEAD,
        tree.node(id).focus.as_deref().unwrap_or("none"),
        join_or_none(tree.detected_causes()),
        window[0],
        window[1]
    )
}

fn error_observation(message: &str) -> String {
    format!("Error: {message}")
}

/// Runs node `id`: one completion, then the tool call if any. Returns the
/// causes confirmed here that were not known before. Transport-level backend
/// errors propagate; invalid actions and tool errors fail the node.
pub fn execute_step(tree: &mut DiagnosisTree, id: usize, ctx: &PlannerContext<'_>) -> Result<Vec<String>, LlmError> {
    let parent = tree.node(id).parent.expect("the root is never executed");
    let mut messages = vec![ChatMessage::system(ctx.system_prompt.clone())];
    messages.extend(path_history(tree, parent));
    messages.extend(ctx.notes.iter().map(ChatMessage::human));
    messages.push(ChatMessage::user(step_prompt(tree, id, ctx.window)));
    let request = CompletionRequest::new(messages).with_tools(ctx.offered.clone());

    let known = tree.detected_causes().clone();
    let mut confirmed: Vec<String> = Vec::new();
    let mut failed = false;
    let mut abnormal = Vec::new();
    let (action, observation) = match complete(ctx.backend, &request) {
        Ok(response) => match (&response.tool_call, &response.refusal) {
            (Some(call), _) => {
                let args = call.arguments.clone();
                let invocation = ToolInvocation::new(call.name.clone(), args.clone());
                match ctx.toolbox.invoke(&ctx.caller, &ctx.scope, &call.name, &args) {
                    Ok(obs) => {
                        abnormal = obs.abnormal_metrics.clone();
                        if let Some(cause) = &obs.cause {
                            confirmed.push(crate::causes::normalize_cause(cause));
                        }
                        let rendered = obs.render();
                        (
                            NodeAction::Tool {
                                call: invocation.with_observation(rendered.clone()),
                            },
                            Some(rendered),
                        )
                    }
                    Err(e) => {
                        failed = true;
                        let text = error_observation(&e.to_string());
                        (NodeAction::Tool { call: invocation.with_observation(text.clone()) }, Some(text))
                    }
                }
            }
            (None, Some(reason)) => {
                failed = true;
                (NodeAction::Analysis { text: format!("Refused: {reason}") }, None)
            }
            (None, None) => {
                let text = response.text_or_empty().to_string();
                confirmed.extend(prompts::parse_root_causes(&text));
                (NodeAction::Analysis { text }, None)
            }
        },
        Err(LlmError::UnknownTool(name)) => {
            failed = true;
            // A registered tool outside the offer still goes through the
            // toolbox so that scope violations are logged as such.
            let message = if ctx.toolbox.spec(&name).is_some() {
                match ctx.toolbox.invoke(&ctx.caller, &ctx.scope, &name, &Map::new()) {
                    Err(e) => e.to_string(),
                    Ok(_) => format!("tool `{name}` was not offered"),
                }
            } else {
                format!("unknown tool `{name}`")
            };
            let text = error_observation(&message);
            let call = ToolInvocation::new(name, Map::new()).with_observation(text.clone());
            (NodeAction::Tool { call }, Some(text))
        }
        Err(LlmError::Malformed(message)) => {
            failed = true;
            (NodeAction::Analysis { text: error_observation(&message) }, None)
        }
        Err(e) => return Err(e),
    };

    let fresh: Vec<String> = if failed {
        Vec::new()
    } else {
        let mut fresh = Vec::new();
        for cause in confirmed {
            if !known.contains(&cause) && !fresh.contains(&cause) {
                fresh.push(cause);
            }
        }
        fresh
    };
    {
        let node = tree.node_mut(id);
        node.action = Some(action);
        node.observation = observation;
        node.abnormal_metrics = abnormal;
        node.status = NodeStatus::Live;
    }
    tree.record_visit(id);
    if failed {
        tree.fail(id);
    } else if !fresh.is_empty() {
        tree.backpropagate_cause(id, &fresh);
        tree.node_mut(id).status = NodeStatus::Terminal;
    }
    ctx.emit(tree.node(id));
    Ok(fresh)
}

/// Asks once per unjudged executed node on `path` whether the step was
/// useful; useless steps are demoted. Returns the demoted ids. Backend
/// errors skip the node.
pub fn reflect(tree: &mut DiagnosisTree, path: &[usize], ctx: &PlannerContext<'_>) -> Vec<usize> {
    let mut demoted = Vec::new();
    for &id in path {
        let node = tree.node(id);
        if node.parent.is_none() || node.judged || matches!(node.status, NodeStatus::Failed | NodeStatus::Pending) {
            continue;
        }
        let Some(action) = &node.action else { continue };
        let text = prompts::fill(
            prompts::REFLECT_TEMPLATE,
            &[
                ("action", &action.describe()),
                ("observation", node.observation.as_deref().unwrap_or("(no tool output)")),
            ],
        );
        let request = CompletionRequest::new(vec![ChatMessage::user(text)]);
        match complete(ctx.backend, &request) {
            Ok(response) => {
                tree.node_mut(id).judged = true;
                let verdict = response.text_or_empty().to_lowercase();
                if verdict.contains("useless") && tree.demote(id) {
                    demoted.push(id);
                    ctx.emit(tree.node(id));
                }
            }
            Err(e) => tracing::warn!(node = id, error = %e, "reflection skipped"),
        }
    }
    demoted
}

/// Select → execute → reflect until the search stops.
pub fn run_search(config: TreeConfig, ctx: &PlannerContext<'_>) -> Result<SearchOutcome, LlmError> {
    let mut tree = DiagnosisTree::new(config);
    let stop = loop {
        if tree.executed_steps() as usize >= config.max_steps {
            break StopReason::StepCap;
        }
        let Ok(id) = tree.select_node() else {
            break StopReason::NoCandidates;
        };
        let fresh = execute_step(&mut tree, id, ctx)?;
        let path = tree.path(id);
        reflect(&mut tree, &path, ctx);
        if fresh.is_empty() {
            tree.stall_counter += 1;
        } else {
            tree.stall_counter = 0;
        }
        if tree.stall_counter >= config.stall_threshold {
            break StopReason::Stalled;
        }
    };
    Ok(SearchOutcome { tree, stop })
}

/// Evidence lines for the node that confirmed `cause`: its own output and
/// the nearest tool observation above it.
pub fn cause_evidence(tree: &DiagnosisTree, cause: &str) -> Vec<String> {
    let Some(node) = tree
        .nodes
        .iter()
        .filter(|n| n.status != NodeStatus::Failed && n.detected_causes.contains(cause))
        .max_by_key(|n| (n.depth, std::cmp::Reverse(n.id)))
    else {
        return Vec::new();
    };
    let mut lines = Vec::new();
    for id in tree.path(node.id).into_iter().rev() {
        let n = tree.node(id);
        match &n.action {
            Some(NodeAction::Tool { call }) => {
                if let Some(obs) = &n.observation {
                    let (line, _) = Observation::parse_rendered(obs);
                    lines.push(format!("{}: {}", call.tool, line));
                }
                break;
            }
            Some(NodeAction::Analysis { text }) if lines.is_empty() => {
                lines.push(text.lines().next().unwrap_or_default().to_string());
            }
            _ => {}
        }
    }
    lines.reverse();
    lines
}

/// Metrics reported abnormal anywhere in the tree, first occurrence order.
pub fn abnormal_metrics(tree: &DiagnosisTree) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for node in &tree.nodes {
        for m in &node.abnormal_metrics {
            if !out.contains(m) {
                out.push(m.clone());
            }
        }
    }
    out
}

/// Tools invoked successfully, first occurrence order.
pub fn tools_used(tree: &DiagnosisTree) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for node in tree.nodes.iter().filter(|n| n.status != NodeStatus::Failed) {
        if let Some(call) = node.action.as_ref().and_then(NodeAction::tool) {
            if !out.contains(&call.tool) {
                out.push(call.tool.clone());
            }
        }
    }
    out
}

/// Report skeleton from a finished search; `analysis` is left empty.
pub fn report_from_tree(outcome: &SearchOutcome, caller: &str, window: [i64; 2]) -> DiagnosisReport {
    let tree = &outcome.tree;
    let mut report = DiagnosisReport::empty(DiagnosisMethod::Full, window);
    // Causes in confirmation order.
    let mut ordered: Vec<(usize, String)> = Vec::new();
    for node in tree.nodes.iter().filter(|n| n.status == NodeStatus::Terminal || n.status == NodeStatus::Reflected) {
        for cause in &node.detected_causes {
            if !ordered.iter().any(|(_, c)| c == cause) {
                ordered.push((node.id, cause.clone()));
            }
        }
    }
    for cause in tree.detected_causes() {
        if !ordered.iter().any(|(_, c)| c == cause) {
            ordered.push((usize::MAX, cause.clone()));
        }
    }
    ordered.sort_by_key(|(id, _)| *id);
    for (_, cause) in ordered {
        let evidence = cause_evidence(tree, &cause);
        report.add_cause(&cause, caller, evidence);
    }
    report.abnormal_metrics = abnormal_metrics(tree);
    report.tools_used = tools_used(tree);
    report.truncated = outcome.truncated();
    report.steps = tree.executed_steps() as usize;
    report.conclusion = conclusion_for(&report.causes, window);
    report
}

/// Final report request built from the detected causes.
pub fn final_request(system_prompt: &str, report: &DiagnosisReport) -> CompletionRequest {
    let causes: Vec<String> = report.causes.iter().map(|c| c.label.clone()).collect();
    let evidence: Vec<String> = report
        .causes
        .iter()
        .flat_map(|c| c.evidence.iter().map(move |e| format!("- {}: {e}", c.label)))
        .collect();
    let text = format!(
        "{}\nConfirmed root causes: {}\nAbnormal metrics: {}\nWindow: [{}, {}]\nEvidence:\n{}",
        prompts::FINAL_LEAD,
        join_or_none(&causes),
        join_or_none(&report.abnormal_metrics),
        report.window[0],
        report.window[1],
        if evidence.is_empty() { "none".to_string() } else { evidence.join("\n") }
    );
    CompletionRequest::new(vec![ChatMessage::system(system_prompt.to_string()), ChatMessage::user(text)])
}

pub struct DiagnosisRun {
    pub tree: DiagnosisTree,
    pub report: DiagnosisReport,
}

/// Full search plus the closing report call.
pub fn run_diagnosis(config: TreeConfig, ctx: &PlannerContext<'_>) -> Result<DiagnosisRun, LlmError> {
    let outcome = run_search(config, ctx)?;
    let mut report = report_from_tree(&outcome, &ctx.caller, ctx.window);
    let response = complete(ctx.backend, &final_request(&ctx.system_prompt, &report))?;
    report.analysis = response.text_or_empty().trim().to_string();
    Ok(DiagnosisRun {
        tree: outcome.tree,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::causes::CauseLabel;
    use crate::llm::{CompletionResponse, FnBackend};
    use crate::toolbox::builtin_scenario;
    use serde_json::json;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn ctx<'a>(backend: &'a dyn ChatBackend, toolbox: &'a Toolbox, window: [i64; 2]) -> PlannerContext<'a> {
        PlannerContext {
            backend,
            toolbox,
            scope: Scope::unrestricted(),
            caller: "chief".into(),
            system_prompt: "diagnose".into(),
            offered: toolbox.registry().to_vec(),
            window,
            notes: Vec::new(),
            observer: None,
        }
    }

    #[test]
    fn never_confirming_backend_stalls_after_five() {
        let scenario = builtin_scenario(CauseLabel::CpuContention);
        let toolbox = Toolbox::for_scenario(&scenario).unwrap();
        let backend = FnBackend(|_: &CompletionRequest| Ok(CompletionResponse::text("nothing conclusive")));
        let run = run_diagnosis(TreeConfig::default(), &ctx(&backend, &toolbox, scenario.window)).unwrap();
        assert_eq!(run.report.steps, 5);
        assert!(run.report.causes.is_empty());
        assert!(!run.report.truncated);
        assert_eq!(run.tree.node(0).n, 5);
    }

    #[test]
    fn unknown_tool_fails_node() {
        let scenario = builtin_scenario(CauseLabel::CpuContention);
        let toolbox = Toolbox::for_scenario(&scenario).unwrap();
        let backend = FnBackend(|r: &CompletionRequest| {
            if r.last_user_content().unwrap().starts_with(prompts::STEP_LEAD) {
                Ok(CompletionResponse::call("pg_magic", json!({})))
            } else {
                Ok(CompletionResponse::text("useful"))
            }
        });
        let c = ctx(&backend, &toolbox, scenario.window);
        let mut tree = DiagnosisTree::new(TreeConfig::default());
        let id = tree.select_node().unwrap();
        execute_step(&mut tree, id, &c).unwrap();
        let node = tree.node(id);
        assert_eq!(node.status, NodeStatus::Failed);
        assert_eq!(node.w, -1.0);
        assert!(node.observation.as_deref().unwrap().contains("unknown tool `pg_magic`"));
    }

    #[test]
    fn scope_violation_fails_node() {
        let scenario = builtin_scenario(CauseLabel::CpuContention);
        let toolbox = Toolbox::for_scenario(&scenario).unwrap();
        let backend = FnBackend(|_: &CompletionRequest| Ok(CompletionResponse::call("get_cpu_stats", json!({}))));
        let mut c = ctx(&backend, &toolbox, scenario.window);
        c.scope = Scope::metrics(&["memory_", "swap_"]);
        c.offered = c.scope.filter_tools(toolbox.registry());
        let mut tree = DiagnosisTree::new(TreeConfig::default());
        let id = tree.select_node().unwrap();
        execute_step(&mut tree, id, &c).unwrap();
        assert_eq!(tree.node(id).status, NodeStatus::Failed);
        let log = toolbox.log();
        assert!(!log[0].ok);
    }

    #[test]
    fn confirmation_backpropagates_and_step_cap_truncates() {
        let scenario = builtin_scenario(CauseLabel::CpuContention);
        let toolbox = Toolbox::for_scenario(&scenario).unwrap();
        let counter = AtomicUsize::new(0);
        let backend = FnBackend(move |r: &CompletionRequest| {
            let last = r.last_user_content().unwrap();
            if last.starts_with(prompts::STEP_LEAD) {
                let i = counter.fetch_add(1, Ordering::SeqCst);
                if i.is_multiple_of(2) {
                    Ok(CompletionResponse::call(
                        "get_cpu_stats",
                        json!({"start_time": 1684600070, "end_time": 1684600074}),
                    ))
                } else {
                    Ok(CompletionResponse::text(format!("Root cause: finding {i}")))
                }
            } else {
                Ok(CompletionResponse::text("useful"))
            }
        });
        let config = TreeConfig {
            max_steps: 4,
            ..TreeConfig::default()
        };
        let run = run_diagnosis(config, &ctx(&backend, &toolbox, scenario.window)).unwrap();
        assert!(run.report.truncated);
        assert_eq!(run.report.steps, 4);
        assert_eq!(run.report.causes.len(), 2);
        assert_eq!(run.tree.node(0).w, 2.0);
        assert_eq!(run.tree.node(0).n, 4);
    }
}
