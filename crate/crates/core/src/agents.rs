//! Multi-agent diagnosis: a chief schedules role-scoped specialists over a
//! shared chat record, a selector screens their messages, and a running
//! summary compresses the tool history.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::engine::{DiagnosisInput, Engine, EngineError};
use crate::eval::{cited_identifiers, Vocabulary};
use crate::llm::{complete, ChatBackend, ChatMessage, CompletionRequest, Role};
use crate::planner::{self, DiagnosisNode, NodeAction, NodeStatus, PlannerContext, TreeConfig};
use crate::prompts;
use crate::report::{attach_advice, conclusion_for, DiagnosisMethod, DiagnosisReport};
use crate::tokens::estimate as estimate_tokens;
use crate::toolbox::{Observation, Scope, Toolbox};

/// Name the chief answers with to end the session.
pub const DONE: &str = "DONE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    Chief,
    Cpu,
    Memory,
    Human,
}

impl AgentRole {
    /// Side of the system the agent speaks for in its messages.
    pub fn side(self) -> &'static str {
        match self {
            Self::Chief => "application",
            Self::Cpu => "cpu",
            Self::Memory => "memory",
            Self::Human => "operator",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct AgentProfile {
    pub name: String,
    pub role: AgentRole,
    pub scope: Scope,
    #[serde(default)]
    pub memory: Vec<String>,
    /// Breaks ties in the round-robin fallback; higher goes first.
    #[serde(default)]
    pub priority: i32,
}

impl AgentProfile {
    pub fn chief() -> Self {
        Self {
            name: "chief".into(),
            role: AgentRole::Chief,
            scope: Scope::unrestricted(),
            memory: Vec::new(),
            priority: 0,
        }
    }

    pub fn cpu() -> Self {
        Self {
            name: "cpu_agent".into(),
            role: AgentRole::Cpu,
            scope: Scope::metrics(&["cpu_", "node_procs_"]),
            memory: Vec::new(),
            priority: 2,
        }
    }

    pub fn memory() -> Self {
        Self {
            name: "memory_agent".into(),
            role: AgentRole::Memory,
            scope: Scope::metrics(&["memory_", "swap_"]),
            memory: Vec::new(),
            priority: 1,
        }
    }
}

/// Chief plus specialists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roster {
    pub chief: AgentProfile,
    pub specialists: Vec<AgentProfile>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RosterError {
    #[error("agent names must be unique and differ from `{DONE}`")]
    DuplicateName,
    #[error("specialists `{0}` and `{1}` share a metric family")]
    OverlappingScopes(String, String),
    #[error("specialists must have a role other than chief or human")]
    BadRole,
}

impl Default for Roster {
    fn default() -> Self {
        Self {
            chief: AgentProfile::chief(),
            specialists: vec![AgentProfile::cpu(), AgentProfile::memory()],
        }
    }
}

impl Roster {
    pub fn validate(&self) -> Result<(), RosterError> {
        let mut names = BTreeSet::from([self.chief.name.as_str(), DONE]);
        for s in &self.specialists {
            if !names.insert(s.name.as_str()) {
                return Err(RosterError::DuplicateName);
            }
            if matches!(s.role, AgentRole::Chief | AgentRole::Human) {
                return Err(RosterError::BadRole);
            }
        }
        for (i, a) in self.specialists.iter().enumerate() {
            for b in &self.specialists[i + 1..] {
                let overlap = a.scope.metric_prefixes.iter().any(|p| {
                    b.scope
                        .metric_prefixes
                        .iter()
                        .any(|q| p.starts_with(q.as_str()) || q.starts_with(p.as_str()))
                });
                if overlap || a.scope.metric_prefixes.is_empty() || b.scope.metric_prefixes.is_empty() {
                    return Err(RosterError::OverlappingScopes(a.name.clone(), b.name.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&AgentProfile> {
        std::iter::once(&self.chief)
            .chain(&self.specialists)
            .find(|a| a.name == name)
    }

    fn get_mut(&mut self, name: &str) -> Option<&mut AgentProfile> {
        std::iter::once(&mut self.chief)
            .chain(&mut self.specialists)
            .find(|a| a.name == name)
    }

    /// Everyone the chief may schedule, highest priority first.
    fn by_priority(&self) -> Vec<&AgentProfile> {
        let mut all: Vec<&AgentProfile> = self.specialists.iter().chain(std::iter::once(&self.chief)).collect();
        all.sort_by(|a, b| b.priority.cmp(&a.priority).then_with(|| a.name.cmp(&b.name)));
        all
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct ChatEntry {
    pub iteration: usize,
    pub message: ChatMessage,
}

/// A message the selector kept out of the record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct Rejection {
    pub decision: usize,
    pub speaker: String,
    pub reason: String,
    pub content: String,
}

/// Shared, append-only transcript. `iteration` counts accepted agent turns;
/// each iteration holds exactly one agent message, preceded by the tool
/// calls behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct ChatRecord {
    pub entries: Vec<ChatEntry>,
    pub iteration: usize,
    pub visibility_group: String,
    #[serde(default)]
    pub rejected: Vec<Rejection>,
}

impl Default for ChatRecord {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
            iteration: 0,
            visibility_group: "default".into(),
            rejected: Vec::new(),
        }
    }
}

impl ChatRecord {
    fn push(&mut self, message: ChatMessage) {
        self.entries.push(ChatEntry {
            iteration: self.iteration,
            message,
        });
    }

    /// Agent and human messages, the part every agent sees.
    pub fn conversation(&self) -> impl Iterator<Item = &ChatMessage> {
        self.entries
            .iter()
            .map(|e| &e.message)
            .filter(|m| m.role.is_agent() || m.role == Role::Human)
    }

    pub fn messages_of<'a>(&'a self, agent: &'a str) -> impl Iterator<Item = &'a ChatMessage> + 'a {
        self.entries
            .iter()
            .map(|e| &e.message)
            .filter(move |m| matches!(&m.role, Role::Agent(n) if n == agent))
    }

    /// Agent entries per iteration.
    pub fn speakers_per_iteration(&self) -> BTreeMap<usize, Vec<String>> {
        let mut out: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for e in &self.entries {
            if let Role::Agent(name) = &e.message.role {
                out.entry(e.iteration).or_default().push(name.clone());
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize, schemars::JsonSchema)]
pub struct ChatSummary {
    pub bullets: Vec<String>,
    pub covered_tools: BTreeSet<String>,
}

impl ChatSummary {
    /// The summary every session starts from.
    pub fn opening() -> Self {
        Self {
            bullets: vec!["- I know the start and end time of the anomaly.".into()],
            covered_tools: BTreeSet::new(),
        }
    }

    pub fn render(&self) -> String {
        if self.bullets.is_empty() {
            "- (empty)".into()
        } else {
            self.bullets.join("\n")
        }
    }

    pub fn tokens(&self) -> usize {
        estimate_tokens(&self.bullets.join("\n"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeamConfig {
    pub iteration_cap: usize,
    pub memory_cap: usize,
    pub summary_cap_tokens: usize,
    /// Bounds of each agent's sub-search.
    pub turn_tree: TreeConfig,
}

impl Default for TeamConfig {
    fn default() -> Self {
        Self {
            iteration_cap: 12,
            memory_cap: 8,
            summary_cap_tokens: 1500,
            turn_tree: TreeConfig {
                max_steps: 16,
                ..TreeConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "agent", rename_all = "snake_case")]
pub enum Next {
    Agent(String),
    Done,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleDecision {
    pub next: Next,
    pub rationale: String,
    /// The chief's answer was unusable twice and round-robin picked.
    pub fallback: bool,
}

fn next_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^\s*Next:\s*(\S+)").expect("valid regex"))
}

fn parse_choice(text: &str) -> (Option<String>, String) {
    let name = next_line()
        .captures(text)
        .map(|c| c[1].trim_end_matches(['.', ',']).to_string())
        .or_else(|| {
            let t = text.trim();
            (!t.is_empty() && !t.contains(char::is_whitespace)).then(|| t.to_string())
        });
    let rationale = text
        .lines()
        .find_map(|l| l.trim().strip_prefix("Rationale:"))
        .map(|r| r.trim().to_string())
        .unwrap_or_default();
    (name, rationale)
}

/// Who the chief may pick this time: specialists minus those that sat
/// quietly last turn, plus the chief itself.
fn eligible<'a>(roster: &'a Roster, quiet: &BTreeSet<String>) -> Vec<&'a AgentProfile> {
    roster
        .by_priority()
        .into_iter()
        .filter(|a| !quiet.contains(&a.name))
        .collect()
}

/// One scheduling decision. Quiet agents (nothing useful last turn) are not
/// offered; a name outside the offer is re-asked once, then round-robin
/// after `last_speaker` takes over.
pub fn schedule_next(
    backend: &dyn ChatBackend,
    roster: &Roster,
    record: &ChatRecord,
    quiet: &BTreeSet<String>,
    pending_instructions: &[String],
    last_speaker: Option<&str>,
) -> ScheduleDecision {
    let offer = eligible(roster, quiet);
    let specialists: Vec<&str> = offer
        .iter()
        .filter(|a| a.role != AgentRole::Chief)
        .map(|a| a.name.as_str())
        .collect();
    let user = format!(
        "{}\nRoster: {}\nChief: {}\nIteration: {}\nPending instructions: {}\n\
         Answer `Next: <name>` with a roster name, the chief, or {DONE}, then `Rationale: <why>`.",
        prompts::SCHEDULE_LEAD,
        if specialists.is_empty() { "none".to_string() } else { specialists.join(", ") },
        roster.chief.name,
        record.iteration + 1,
        if pending_instructions.is_empty() { "none".to_string() } else { pending_instructions.join("; ") },
    );
    let mut messages = vec![ChatMessage::system(
        "You are the Chief DBA coordinating a diagnosis team. Pick the agent whose analysis is most \
         likely to move the diagnosis forward, and acknowledge operator instructions in your rationale.",
    )];
    messages.extend(record.conversation().cloned());
    messages.push(ChatMessage::user(user));
    let valid = |name: &str| name == DONE || offer.iter().any(|a| a.name == name);

    for _attempt in 0..2 {
        let request = CompletionRequest::new(messages.clone());
        let answer = complete(backend, &request).map(|r| r.text_or_empty().to_string());
        let Ok(text) = answer else { continue };
        let (name, rationale) = parse_choice(&text);
        match name {
            Some(name) if valid(&name) => {
                let next = if name == DONE { Next::Done } else { Next::Agent(name) };
                return ScheduleDecision {
                    next,
                    rationale,
                    fallback: false,
                };
            }
            other => {
                messages.push(ChatMessage::assistant(text.clone()));
                messages.push(ChatMessage::user(format!(
                    "`{}` is not on the roster. Answer `Next: <name>` with one of: {}, {DONE}.",
                    other.unwrap_or_default(),
                    offer.iter().map(|a| a.name.as_str()).collect::<Vec<_>>().join(", ")
                )));
            }
        }
    }
    // Round-robin over the offer in priority order, starting after the last
    // speaker.
    let start = last_speaker
        .and_then(|s| offer.iter().position(|a| a.name == s))
        .map_or(0, |i| i + 1);
    let pick = &offer[start % offer.len()];
    ScheduleDecision {
        next: Next::Agent(pick.name.clone()),
        rationale: "no valid choice from the chief; round-robin".into(),
        fallback: true,
    }
}

/// What an agent produced in one turn.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentTurn {
    pub message: ChatMessage,
    /// Tool calls of the sub-search, in node order.
    pub tool_entries: Vec<ChatMessage>,
    pub causes: Vec<String>,
    pub evidence: BTreeMap<String, Vec<String>>,
    pub abnormal_metrics: Vec<String>,
    pub blocked_tools: Vec<String>,
    pub tree: planner::DiagnosisTree,
}

impl AgentTurn {
    /// Something worth another turn: an abnormal metric or a cause.
    pub fn useful(&self) -> bool {
        !self.causes.is_empty() || !self.abnormal_metrics.is_empty()
    }
}

fn join_or_none(items: &[String]) -> String {
    if items.is_empty() {
        "none".into()
    } else {
        items.join(", ")
    }
}

/// Context an agent sees: its memory, the running summary and operator
/// messages.
fn visible_notes(agent: &AgentProfile, summary: &ChatSummary, record: &ChatRecord) -> Vec<String> {
    let mut notes = Vec::new();
    if !agent.memory.is_empty() {
        notes.push(format!("Your notes:\n{}", agent.memory.join("\n")));
    }
    if summary.bullets.len() > 1 || !summary.covered_tools.is_empty() {
        notes.push(format!("Team summary:\n{}", summary.render()));
    }
    notes.extend(
        record
            .entries
            .iter()
            .filter(|e| e.message.role == Role::Human)
            .map(|e| format!("Operator: {}", e.message.content)),
    );
    notes
}

/// One agent turn: a bounded sub-search inside the agent's scope, then one
/// message to the team.
#[allow(clippy::too_many_arguments)]
pub fn agent_turn(
    agent: &AgentProfile,
    engine: &Engine,
    backend: &dyn ChatBackend,
    toolbox: &Toolbox,
    input: &DiagnosisInput,
    record: &ChatRecord,
    summary: &ChatSummary,
    config: &TeamConfig,
    observer: Option<&(dyn Fn(&DiagnosisNode) + Sync)>,
) -> Result<AgentTurn, EngineError> {
    let prepared = engine.prepare(toolbox, input, &agent.scope)?;
    let ctx = PlannerContext {
        backend,
        toolbox,
        scope: agent.scope.clone(),
        caller: agent.name.clone(),
        system_prompt: prepared.prompt,
        offered: prepared.offered,
        window: input.window,
        notes: visible_notes(agent, summary, record),
        observer,
    };
    let outcome = planner::run_search(config.turn_tree, &ctx)?;
    let tree = outcome.tree;
    let causes: Vec<String> = tree.detected_causes().iter().cloned().collect();
    let evidence = causes
        .iter()
        .map(|c| (c.clone(), planner::cause_evidence(&tree, c)))
        .collect();
    let abnormal_metrics: Vec<String> = planner::abnormal_metrics(&tree)
        .into_iter()
        .filter(|m| agent.scope.allows_metric(m))
        .collect();
    let mut blocked_tools: Vec<String> = Vec::new();
    let mut tool_entries = Vec::new();
    for node in &tree.nodes {
        let Some(call) = node.action.as_ref().and_then(NodeAction::tool) else { continue };
        let mut call = call.clone();
        call.observation = node.observation.clone();
        if node.status == NodeStatus::Failed {
            let outside = toolbox.spec(&call.tool).is_some_and(|s| !agent.scope.allows_tool(s))
                || node.observation.as_deref().is_some_and(|o| o.contains("outside the scope"));
            if outside && !blocked_tools.contains(&call.tool) {
                blocked_tools.push(call.tool.clone());
            }
        }
        tool_entries.push(ChatMessage::tool_result(call));
    }

    let user = format!(
        "{}\nAgent: {}\nWindow: [{}, {}]\nAbnormal metrics: {}\nConfirmed root causes: {}\nBlocked tools: {}\nRole: {}\n\
         State what you checked and found in a few lines; put each confirmed cause on a `Root cause:` line.",
        prompts::TEAM_MESSAGE_LEAD,
        agent.name,
        input.window[0],
        input.window[1],
        join_or_none(&abnormal_metrics),
        join_or_none(&causes),
        join_or_none(&blocked_tools),
        agent.role.side(),
    );
    let request = CompletionRequest::new(vec![
        ChatMessage::system(format!(
            "You are {}, the {} specialist of a database diagnosis team.",
            agent.name,
            agent.role.side()
        )),
        ChatMessage::user(user),
    ]);
    let text = complete(backend, &request)?.text_or_empty().trim().to_string();
    Ok(AgentTurn {
        message: ChatMessage::new(Role::agent(agent.name.clone()), text),
        tool_entries,
        causes,
        evidence,
        abnormal_metrics,
        blocked_tools,
        tree,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "reason", rename_all = "snake_case")]
pub enum FilterVerdict {
    Accept,
    Reject(String),
}

fn claim() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"\b([a-z][a-z0-9_]*) over \[(-?\d+), ?(-?\d+)\] is (abnormal|normal)\b").expect("valid regex")
    })
}

/// Literal `(metric, window) -> abnormal` facts already on record: checker
/// observations and earlier accepted claims.
fn recorded_facts(record: &ChatRecord) -> BTreeMap<(String, i64, i64), bool> {
    let mut facts = BTreeMap::new();
    for entry in &record.entries {
        let m = &entry.message;
        if let Some(call) = &m.tool_call {
            if call.tool != "is_abnormal_metric" {
                continue;
            }
            let metric = call.args.get("metric_name").and_then(|v| v.as_str());
            let start = call.args.get("start_time").and_then(|v| v.as_i64());
            let end = call.args.get("end_time").and_then(|v| v.as_i64());
            let (line, _) = Observation::parse_rendered(call.observation.as_deref().unwrap_or(""));
            let verdict = if line.starts_with("The metric is abnormal") {
                Some(true)
            } else if line.starts_with("The metric is normal") {
                Some(false)
            } else {
                None
            };
            if let (Some(metric), Some(start), Some(end), Some(v)) = (metric, start, end, verdict) {
                facts.insert((metric.to_string(), start, end), v);
            }
        } else if m.role.is_agent() {
            for c in claim().captures_iter(&m.content) {
                let (Ok(s), Ok(e)) = (c[2].parse(), c[3].parse()) else { continue };
                facts.entry((c[1].to_string(), s, e)).or_insert(&c[4] == "abnormal");
            }
        }
    }
    facts
}

/// Screens a message before it enters the record. Rejects empty text,
/// identifiers that name no known tool or metric, and literal contradictions
/// of recorded metric verdicts.
pub fn select_filter(message: &ChatMessage, vocabulary: &Vocabulary, record: &ChatRecord) -> FilterVerdict {
    if message.role == Role::Human {
        return FilterVerdict::Accept;
    }
    let text = message.content.trim();
    if text.is_empty() {
        return FilterVerdict::Reject("empty message".into());
    }
    for token in cited_identifiers(text) {
        if vocabulary.contains(token) {
            continue;
        }
        let as_tool = text.contains(&format!("tool {token}")) || text.contains(&format!("{token}("));
        return FilterVerdict::Reject(if as_tool {
            format!("unknown tool {token}")
        } else {
            format!("unknown metric {token}")
        });
    }
    let facts = recorded_facts(record);
    for c in claim().captures_iter(text) {
        let (Ok(s), Ok(e)) = (c[2].parse::<i64>(), c[3].parse::<i64>()) else { continue };
        if let Some(&known) = facts.get(&(c[1].to_string(), s, e)) {
            if known != (&c[4] == "abnormal") {
                return FilterVerdict::Reject(format!("contradicts observation on {}", &c[1]));
            }
        }
    }
    FilterVerdict::Accept
}

/// Adds one line distilled from an accepted turn; oldest lines go first
/// once the cap is reached.
pub fn update_memory(agent: &mut AgentProfile, turn: &AgentTurn, window: [i64; 2], cap: usize) {
    let note = if !turn.causes.is_empty() {
        format!("confirmed {} at [{},{}]", turn.causes.join(", "), window[0], window[1])
    } else if !turn.abnormal_metrics.is_empty() {
        format!(
            "saw {} abnormal at [{},{}] without a cause",
            turn.abnormal_metrics.join(", "),
            window[0],
            window[1]
        )
    } else {
        format!("nothing found at [{},{}]", window[0], window[1])
    };
    agent.memory.push(note);
    while agent.memory.len() > cap {
        agent.memory.remove(0);
    }
}

fn call_line(call: &crate::tools::ToolInvocation) -> String {
    let metric = call
        .args
        .get("metric_name")
        .and_then(|v| v.as_str())
        .unwrap_or("-");
    let (line, _) = Observation::parse_rendered(call.observation.as_deref().unwrap_or(""));
    format!("- {} | {} | {}", call.tool, metric, line.trim())
}

/// Extends `prev` with one bullet per tool call in `entries`. Calls the
/// backend leaves out are summarized from their observation line. On a
/// backend error `prev` is kept and the caller should retry the entries
/// later.
pub fn summarize_progressively(
    prev: &ChatSummary,
    entries: &[ChatMessage],
    backend: &dyn ChatBackend,
    cap_tokens: usize,
) -> Result<ChatSummary, crate::llm::LlmError> {
    let calls: Vec<&crate::tools::ToolInvocation> = entries.iter().filter_map(|m| m.tool_call.as_ref()).collect();
    if calls.is_empty() {
        return Ok(prev.clone());
    }
    let user = format!(
        "{}\nCurrent summary:\n{}\nNew tool calls:\n{}\n\nFor each call, add one bullet `- I searched for <tool>, and I now know that <finding>.`",
        prompts::SUMMARY_LEAD,
        prev.render(),
        calls.iter().map(|c| call_line(c)).collect::<Vec<_>>().join("\n")
    );
    let request = CompletionRequest::new(vec![
        ChatMessage::system("You keep a short running summary of a diagnosis session."),
        ChatMessage::user(user),
    ]);
    let response = complete(backend, &request)?;
    let mut fresh: Vec<String> = response
        .text_or_empty()
        .lines()
        .map(str::trim)
        .filter(|l| l.starts_with("- ") && *l != "- nothing new")
        .map(str::to_string)
        .collect();
    let mut seen = BTreeSet::new();
    for call in &calls {
        if !seen.insert(call.tool.as_str()) {
            continue;
        }
        if !fresh.iter().any(|b| b.contains(call.tool.as_str())) {
            let (line, _) = Observation::parse_rendered(call.observation.as_deref().unwrap_or(""));
            let line = line.trim().trim_end_matches('.');
            let mut chars = line.chars();
            let finding = match chars.next() {
                Some(c) => format!("{}{}", c.to_lowercase(), chars.as_str()),
                None => "it returned nothing".into(),
            };
            fresh.push(format!("- I searched for {}, and I now know that {finding}.", call.tool));
        }
    }
    let mut next = prev.clone();
    next.bullets.extend(fresh);
    next.covered_tools.extend(calls.iter().map(|c| c.tool.clone()));
    while next.tokens() > cap_tokens && next.bullets.len() > 1 {
        next.bullets.remove(0);
    }
    Ok(next)
}

/// A cause accepted into the record, with who found it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptedCause {
    pub cause: String,
    pub agent: String,
    pub evidence: Vec<String>,
}

/// The chief's final report over the accepted findings.
pub fn consolidate_report(
    backend: &dyn ChatBackend,
    toolbox: &Toolbox,
    record: &ChatRecord,
    summary: &ChatSummary,
    accepted: &[AcceptedCause],
    abnormal_metrics: &[String],
    window: [i64; 2],
) -> DiagnosisReport {
    let mut report = DiagnosisReport::empty(DiagnosisMethod::MultiAgent, window);
    for a in accepted {
        report.add_cause(&a.cause, &a.agent, a.evidence.clone());
    }
    report.abnormal_metrics = abnormal_metrics.to_vec();
    for entry in &record.entries {
        if let Some(call) = &entry.message.tool_call {
            let ok = !call.observation.as_deref().unwrap_or("").starts_with("Error:");
            if ok && toolbox.spec(&call.tool).is_some() && !report.tools_used.contains(&call.tool) {
                report.tools_used.push(call.tool.clone());
            }
        }
    }
    let causes_block = if report.causes.is_empty() {
        "(none)".to_string()
    } else {
        report
            .causes
            .iter()
            .map(|c| format!("- {} by {}", c.label, c.agent))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let user = format!(
        "{}\nWindow: [{}, {}]\nSummary:\n{}\n\nAccepted causes:\n{}\n\n\
         Put each cause on a `Root cause:` line and name the agent that found it.",
        prompts::CONSOLIDATE_LEAD,
        window[0],
        window[1],
        summary.render(),
        causes_block
    );
    let request = CompletionRequest::new(vec![
        ChatMessage::system("You are the Chief DBA reporting the team's diagnosis to the user."),
        ChatMessage::user(user),
    ]);
    report.conclusion = conclusion_for(&report.causes, window);
    report.analysis = match complete(backend, &request) {
        Ok(r) if !r.text_or_empty().trim().is_empty() => r.text_or_empty().trim().to_string(),
        _ => report.conclusion.clone(),
    };
    report.steps = record.iteration;
    attach_advice(&mut report, toolbox);
    report
}

/// Something that happened in a session, in order.
#[derive(Debug, Clone, PartialEq)]
pub enum TeamEvent {
    Scheduled { decision: usize, choice: ScheduleDecision },
    Message(ChatEntry),
    Rejected(Rejection),
    SummaryUpdated(ChatSummary),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeamOutcome {
    pub record: ChatRecord,
    pub summary: ChatSummary,
    pub roster: Roster,
    pub decisions: Vec<ScheduleDecision>,
    pub report: DiagnosisReport,
}

/// Hooks into a running session: operator input, event sink and tree-node
/// observer. All optional.
#[derive(Default)]
pub struct TeamHooks<'a> {
    /// Drained at each iteration boundary.
    pub feedback: Option<&'a (dyn Fn() -> Vec<String> + Sync)>,
    pub on_event: Option<&'a (dyn Fn(&TeamEvent) + Sync)>,
    pub on_node: Option<&'a (dyn Fn(&DiagnosisNode) + Sync)>,
}

/// Runs a team session until the chief says DONE or the cap is reached.
pub fn run_team(
    engine: &Engine,
    backend: &dyn ChatBackend,
    toolbox: &Toolbox,
    input: &DiagnosisInput,
    mut roster: Roster,
    config: &TeamConfig,
    hooks: &TeamHooks<'_>,
) -> Result<TeamOutcome, EngineError> {
    let emit = |e: TeamEvent| {
        if let Some(f) = hooks.on_event {
            f(&e);
        }
    };
    let mut vocabulary = crate::eval::Vocabulary::new(toolbox.catalog(), toolbox.registry(), &engine.kb);
    vocabulary
        .other
        .extend(std::iter::once(&roster.chief).chain(&roster.specialists).map(|a| a.name.clone()));

    let mut record = ChatRecord::default();
    let mut summary = ChatSummary::opening();
    let mut deferred: Vec<ChatMessage> = Vec::new();
    let mut quiet: BTreeSet<String> = BTreeSet::new();
    let mut instructions: VecDeque<String> = VecDeque::new();
    let mut decisions = Vec::new();
    let mut accepted: Vec<AcceptedCause> = Vec::new();
    let mut abnormal: Vec<String> = Vec::new();
    let mut last_speaker: Option<String> = None;

    for decision_index in 1..=config.iteration_cap {
        if let Some(feedback) = hooks.feedback {
            for text in feedback() {
                let message = ChatMessage::human(text.clone());
                record.push(message.clone());
                emit(TeamEvent::Message(ChatEntry {
                    iteration: record.iteration,
                    message,
                }));
                instructions.push_back(text);
            }
        }
        let pending: Vec<String> = instructions.drain(..).collect();
        let choice = schedule_next(backend, &roster, &record, &quiet, &pending, last_speaker.as_deref());
        emit(TeamEvent::Scheduled {
            decision: decision_index,
            choice: choice.clone(),
        });
        decisions.push(choice.clone());
        let Next::Agent(name) = choice.next else { break };
        // Agents that sat out this round may speak again next round.
        quiet.clear();

        let agent = roster.get(&name).expect("scheduled agents are on the roster").clone();
        let turn = agent_turn(
            &agent,
            engine,
            backend,
            toolbox,
            input,
            &record,
            &summary,
            config,
            hooks.on_node,
        )?;
        last_speaker = Some(name.clone());
        match select_filter(&turn.message, &vocabulary, &record) {
            FilterVerdict::Reject(reason) => {
                let rejection = Rejection {
                    decision: decision_index,
                    speaker: name.clone(),
                    reason,
                    content: turn.message.content.clone(),
                };
                record.rejected.push(rejection.clone());
                emit(TeamEvent::Rejected(rejection));
                quiet.insert(name);
            }
            FilterVerdict::Accept => {
                record.iteration += 1;
                for m in turn.tool_entries.iter().chain(std::iter::once(&turn.message)) {
                    record.push(m.clone());
                    emit(TeamEvent::Message(ChatEntry {
                        iteration: record.iteration,
                        message: m.clone(),
                    }));
                }
                for cause in &turn.causes {
                    let label = crate::causes::normalize_cause(cause);
                    if !accepted.iter().any(|a| a.cause == label) {
                        accepted.push(AcceptedCause {
                            cause: label,
                            agent: name.clone(),
                            evidence: turn.evidence.get(cause).cloned().unwrap_or_default(),
                        });
                    }
                }
                for m in &turn.abnormal_metrics {
                    if !abnormal.contains(m) {
                        abnormal.push(m.clone());
                    }
                }
                if let Some(profile) = roster.get_mut(&name) {
                    update_memory(profile, &turn, input.window, config.memory_cap);
                }
                if !turn.useful() {
                    quiet.insert(name);
                }
                deferred.extend(turn.tool_entries.iter().cloned());
                if let Ok(next) = summarize_progressively(&summary, &deferred, backend, config.summary_cap_tokens) {
                    if next != summary {
                        summary = next;
                        emit(TeamEvent::SummaryUpdated(summary.clone()));
                    }
                    deferred.clear();
                }
            }
        }
    }
    let report = consolidate_report(backend, toolbox, &record, &summary, &accepted, &abnormal, input.window);
    Ok(TeamOutcome {
        record,
        summary,
        roster,
        decisions,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::causes::CauseLabel;
    use crate::llm::{CompletionResponse, FnBackend, LlmError};
    use crate::sim::SimulatedDba;
    use crate::toolbox::builtin_scenario;
    use crate::tools::ToolInvocation;
    use serde_json::json;

    fn setup(label: CauseLabel) -> (Toolbox, DiagnosisInput) {
        let s = builtin_scenario(label);
        (
            Toolbox::for_scenario(&s).unwrap(),
            DiagnosisInput {
                description: s.description.clone(),
                window: s.window,
            },
        )
    }

    fn vocab(toolbox: &Toolbox) -> Vocabulary {
        Vocabulary::new(toolbox.catalog(), toolbox.registry(), &crate::knowledge::KnowledgeBase::seed())
    }

    #[test]
    fn default_roster_is_valid() {
        assert_eq!(Roster::default().validate(), Ok(()));
        let mut r = Roster::default();
        r.specialists[1].scope = Scope::metrics(&["cpu_usage"]);
        assert!(matches!(r.validate(), Err(RosterError::OverlappingScopes(..))));
    }

    #[test]
    fn cpu_scenario_team_session() {
        let (toolbox, input) = setup(CauseLabel::CpuContention);
        let out = run_team(
            &Engine::default(),
            &SimulatedDba::new(),
            &toolbox,
            &input,
            Roster::default(),
            &TeamConfig::default(),
            &TeamHooks::default(),
        )
        .unwrap();
        assert_eq!(out.report.cause_labels(), vec!["CPU_CONTENTION"]);
        assert_eq!(out.report.causes[0].agent, "cpu_agent");
        let memory_msg = out.record.messages_of("memory_agent").next().unwrap();
        assert!(memory_msg.content.contains("no memory-side cause found"), "{}", memory_msg.content);
        assert_eq!(out.decisions.last().unwrap().next, Next::Done);
        for speakers in out.record.speakers_per_iteration().values() {
            assert_eq!(speakers.len(), 1);
        }
        assert!(out.roster.get("cpu_agent").unwrap().memory[0].starts_with("confirmed CPU_CONTENTION at ["));
    }

    #[test]
    fn chief_takes_over_when_specialists_find_nothing() {
        let (toolbox, input) = setup(CauseLabel::LockContention);
        let out = run_team(
            &Engine::default(),
            &SimulatedDba::new(),
            &toolbox,
            &input,
            Roster::default(),
            &TeamConfig::default(),
            &TeamHooks::default(),
        )
        .unwrap();
        let picks: Vec<&Next> = out.decisions.iter().map(|d| &d.next).collect();
        assert!(picks.contains(&&Next::Agent("chief".into())), "{picks:?}");
        assert!(out.report.causes.is_empty());
        assert!(out.report.analysis.contains("application"));
    }

    #[test]
    fn invalid_name_reasked_then_round_robin() {
        let calls = std::sync::atomic::AtomicUsize::new(0);
        let backend = FnBackend(|_: &CompletionRequest| {
            calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            Ok(CompletionResponse::text("Next: gpu_agent"))
        });
        let d = schedule_next(&backend, &Roster::default(), &ChatRecord::default(), &BTreeSet::new(), &[], Some("cpu_agent"));
        assert_eq!(calls.load(std::sync::atomic::Ordering::SeqCst), 2);
        assert!(d.fallback);
        assert_eq!(d.next, Next::Agent("memory_agent".into()));
    }

    #[test]
    fn quiet_agents_are_not_offered() {
        let backend = FnBackend(|_: &CompletionRequest| Ok(CompletionResponse::text("Next: memory_agent")));
        let quiet = BTreeSet::from(["memory_agent".to_string()]);
        let d = schedule_next(&backend, &Roster::default(), &ChatRecord::default(), &quiet, &[], None);
        assert!(d.fallback);
        assert_ne!(d.next, Next::Agent("memory_agent".into()));
    }

    #[test]
    fn selector_rules() {
        let (toolbox, _) = setup(CauseLabel::CpuContention);
        let v = vocab(&toolbox);
        let mut record = ChatRecord::default();
        let msg = |t: &str| ChatMessage::new(Role::agent("cpu_agent"), t);
        assert_eq!(select_filter(&msg("   "), &v, &record), FilterVerdict::Reject("empty message".into()));
        assert_eq!(
            select_filter(&msg("quantum_flux is high"), &v, &record),
            FilterVerdict::Reject("unknown metric quantum_flux".into())
        );
        assert_eq!(
            select_filter(&msg("I ran the tool warp_drive_check"), &v, &record),
            FilterVerdict::Reject("unknown tool warp_drive_check".into())
        );
        let mut call = ToolInvocation::new(
            "is_abnormal_metric",
            json!({"metric_name": "cpu_usage", "start_time": 10, "end_time": 20})
                .as_object()
                .unwrap()
                .clone(),
        );
        call.observation = Some("The metric is abnormal\n{}".into());
        record.push(ChatMessage::tool_result(call));
        assert!(matches!(
            select_filter(&msg("cpu_usage over [10, 20] is normal."), &v, &record),
            FilterVerdict::Reject(r) if r.starts_with("contradicts observation")
        ));
        assert_eq!(select_filter(&msg("cpu_usage over [10, 20] is abnormal."), &v, &record), FilterVerdict::Accept);
        assert_eq!(select_filter(&ChatMessage::human("quantum_flux!"), &v, &record), FilterVerdict::Accept);
    }

    #[test]
    fn memory_is_capped() {
        let (toolbox, input) = setup(CauseLabel::CpuContention);
        let mut agent = AgentProfile::cpu();
        let turn = agent_turn(
            &agent,
            &Engine::default(),
            &SimulatedDba::new(),
            &toolbox,
            &input,
            &ChatRecord::default(),
            &ChatSummary::opening(),
            &TeamConfig::default(),
            None,
        )
        .unwrap();
        for _ in 0..10 {
            update_memory(&mut agent, &turn, [1, 2], 3);
        }
        assert_eq!(agent.memory.len(), 3);
    }

    #[test]
    fn memory_agent_blocked_from_cpu_tool() {
        let (toolbox, input) = setup(CauseLabel::CpuContention);
        let backend = FnBackend(|req: &CompletionRequest| {
            let user = req.last_user_content().unwrap_or("");
            if user.starts_with(prompts::STEP_LEAD) {
                Ok(CompletionResponse::call("flag_cpu_heavy", json!({"start_time": 1, "end_time": 2})))
            } else if user.starts_with(prompts::TEAM_MESSAGE_LEAD) {
                SimulatedDba::new().complete_raw(req)
            } else if user.starts_with(prompts::REFLECT_LEAD) {
                Ok(CompletionResponse::text("useless"))
            } else {
                Err(LlmError::Unscripted(String::new()))
            }
        });
        let turn = agent_turn(
            &AgentProfile::memory(),
            &Engine::default(),
            &backend,
            &toolbox,
            &input,
            &ChatRecord::default(),
            &ChatSummary::opening(),
            &TeamConfig::default(),
            None,
        )
        .unwrap();
        assert_eq!(turn.blocked_tools, vec!["flag_cpu_heavy"]);
        assert!(turn.message.content.contains("The tool flag_cpu_heavy is outside my scope."));
        assert!(turn.tree.nodes.iter().any(|n| n.status == NodeStatus::Failed));
    }

    #[test]
    fn summary_bullet_and_coverage() {
        let mut call = ToolInvocation::new(
            "is_abnormal_metric",
            json!({"metric_name": "cpu_usage", "start_time": 1, "end_time": 2}).as_object().unwrap().clone(),
        );
        call.observation = Some("The metric is abnormal\n{}".into());
        let entries = vec![ChatMessage::tool_result(call)];
        let prev = ChatSummary::opening();
        let next = summarize_progressively(&prev, &entries, &SimulatedDba::new(), 1500).unwrap();
        assert_eq!(
            next.bullets,
            vec![
                "- I know the start and end time of the anomaly.".to_string(),
                "- I searched for is_abnormal_metric, and I now know that the CPU usage is abnormal.".to_string()
            ]
        );
        assert_eq!(next.covered_tools, BTreeSet::from(["is_abnormal_metric".to_string()]));
        assert_eq!(summarize_progressively(&prev, &[], &SimulatedDba::new(), 1500).unwrap(), prev);
        let failing = FnBackend(|_: &CompletionRequest| Err(LlmError::Transport("down".into())));
        assert!(summarize_progressively(&prev, &entries, &failing, 1500).is_err());
    }

    #[test]
    fn summary_fills_in_missed_tools() {
        let entries: Vec<ChatMessage> = ["get_slow_queries", "get_activity", "get_table_stats"]
            .iter()
            .map(|t| {
                let mut c = ToolInvocation::new(*t, serde_json::Map::new());
                c.observation = Some(format!("Output of {t}\n{{}}"));
                ChatMessage::tool_result(c)
            })
            .collect();
        let lazy = FnBackend(|_: &CompletionRequest| Ok(CompletionResponse::text("- nothing new")));
        let next = summarize_progressively(&ChatSummary::default(), &entries, &lazy, 1500).unwrap();
        assert_eq!(next.covered_tools.len(), 3);
        assert_eq!(next.bullets.len(), 3);
    }
}
