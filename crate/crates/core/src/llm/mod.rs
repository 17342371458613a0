//! Chat-completion backends.
//!
//! Every component talks to a model through [`ChatBackend`] and goes through
//! [`complete`], which validates the request and rejects any tool call that
//! names a tool the request did not offer. Three implementations ship:
//!
//! - [`ScriptedBackend`]: a pure lookup from the canonical request key to a
//!   fixed response, loaded from a JSON script. Used by tests and the
//!   benchmark.
//! - [`LiveBackend`]: an OpenAI-compatible HTTP endpoint.
//! - [`crate::sim::SimulatedDba`]: a rule-following stand-in used to record
//!   scripts offline.
//!
//! [`RecordingBackend`] wraps any backend and captures the exchanges as a
//! script.

mod embed;
mod live;
mod scripted;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tools::{ToolInvocation, ToolSpec};

pub use embed::{cosine, Embedder, EmbedderConfig};
pub(crate) use embed::fnv1a64;
pub use live::{LiveBackend, LiveConfig};
pub use scripted::{BackendScript, MatchRule, ScriptEntry, ScriptedBackend};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("unscripted request (key {0})")]
    Unscripted(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("malformed provider payload: {0}")]
    Malformed(String),
    #[error("response called tool `{0}` which was not offered")]
    UnknownTool(String),
    #[error("embedding failed: {0}")]
    Embedding(String),
    #[error("script file: {0}")]
    Script(String),
}

/// Who produced a chat message.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Role {
    System,
    Assistant,
    User,
    Tool,
    /// Operator feedback injected into a session.
    Human,
    /// A named diagnosis agent.
    Agent(String),
}

impl Role {
    pub fn agent(name: impl Into<String>) -> Self {
        Role::Agent(name.into())
    }

    pub fn as_str(&self) -> &str {
        match self {
            Role::System => "system",
            Role::Assistant => "assistant",
            Role::User => "user",
            Role::Tool => "tool",
            Role::Human => "human",
            Role::Agent(name) => name,
        }
    }

    pub fn is_agent(&self) -> bool {
        matches!(self, Role::Agent(_))
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Agent(name) => write!(f, "agent:{name}"),
            other => f.write_str(other.as_str()),
        }
    }
}

impl From<Role> for String {
    fn from(role: Role) -> Self {
        role.to_string()
    }
}

impl TryFrom<String> for Role {
    type Error = String;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Ok(match value.as_str() {
            "system" => Role::System,
            "assistant" => Role::Assistant,
            "user" => Role::User,
            "tool" => Role::Tool,
            "human" => Role::Human,
            other => match other.strip_prefix("agent:") {
                Some(name) if !name.is_empty() => Role::Agent(name.to_string()),
                _ => return Err(format!("unknown role `{other}`")),
            },
        })
    }
}

impl schemars::JsonSchema for Role {
    fn schema_name() -> String {
        "Role".into()
    }

    fn json_schema(gen: &mut schemars::gen::SchemaGenerator) -> schemars::schema::Schema {
        String::json_schema(gen)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct ChatMessage {
    pub role: Role,
    #[serde(default)]
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call: Option<ToolInvocation>,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
            tool_call: None,
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }

    pub fn human(content: impl Into<String>) -> Self {
        Self::new(Role::Human, content)
    }

    /// A tool-role message recording `call` and its observation.
    pub fn tool_result(call: ToolInvocation) -> Self {
        let content = call.observation.clone().unwrap_or_default();
        Self {
            role: Role::Tool,
            content,
            tool_call: Some(call),
        }
    }

    pub fn with_tool_call(mut self, call: ToolInvocation) -> Self {
        self.tool_call = Some(call);
        self
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.role == Role::Tool && self.tool_call.is_none() {
            return Err(LlmError::InvalidRequest(
                "tool message without a tool call reference".into(),
            ));
        }
        if self.content.trim().is_empty() && self.tool_call.is_none() {
            return Err(LlmError::InvalidRequest(format!(
                "{} message has neither content nor tool call",
                self.role
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: Vec<ChatMessage>,
    #[serde(default)]
    pub available_tools: Vec<ToolSpec>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

fn default_max_tokens() -> u32 {
    1024
}

impl CompletionRequest {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        Self {
            messages,
            available_tools: Vec::new(),
            temperature: 0.0,
            max_tokens: default_max_tokens(),
        }
    }

    pub fn with_tools(mut self, tools: Vec<ToolSpec>) -> Self {
        self.available_tools = tools;
        self
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.messages.is_empty() {
            return Err(LlmError::InvalidRequest("no messages".into()));
        }
        for message in &self.messages {
            message.validate()?;
        }
        if !(0.0..=1.0).contains(&self.temperature) {
            return Err(LlmError::InvalidRequest(format!(
                "temperature {} outside [0, 1]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_tokens must be positive".into()));
        }
        let mut names: Vec<&str> = self.available_tools.iter().map(|t| t.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(LlmError::InvalidRequest(format!(
                "tool `{}` offered twice",
                w[0]
            )));
        }
        Ok(())
    }

    /// Content of the last user-like (user or human) message.
    pub fn last_user_content(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| matches!(m.role, Role::User | Role::Human))
            .map(|m| m.content.as_str())
    }

    /// Canonical script key: SHA-256 over the sorted tool names and the
    /// whitespace-normalized `(role, content)` pairs. A message's tool call is
    /// rendered into its content component so that two histories differing
    /// only in call arguments get different keys.
    pub fn canonical_key(&self) -> String {
        let mut hasher = Sha256::new();
        let mut tools: Vec<&str> = self.available_tools.iter().map(|t| t.name.as_str()).collect();
        tools.sort_unstable();
        for tool in tools {
            hasher.update(b"tool\x1f");
            hasher.update(tool.as_bytes());
            hasher.update(b"\x1e");
        }
        for message in &self.messages {
            let mut content = collapse_whitespace(&message.content);
            if let Some(call) = &message.tool_call {
                content.push_str(" \x1dcall ");
                content.push_str(&call.tool);
                content.push(' ');
                content.push_str(&Value::Object(call.args.clone()).to_string());
            }
            hasher.update(message.role.to_string().as_bytes());
            hasher.update(b"\x1f");
            hasher.update(content.as_bytes());
            hasher.update(b"\x1e");
        }
        hex::encode(hasher.finalize())
    }
}

pub fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// A tool call requested by the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCallRequest {
    pub name: String,
    #[serde(default)]
    pub arguments: Map<String, Value>,
}

impl ToolCallRequest {
    pub fn into_invocation(self) -> ToolInvocation {
        ToolInvocation::new(self.name, self.arguments)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CompletionResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call: Option<ToolCallRequest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refusal: Option<String>,
}

impl CompletionResponse {
    pub fn text(content: impl Into<String>) -> Self {
        Self {
            content: Some(content.into()),
            ..Self::default()
        }
    }

    pub fn call(name: impl Into<String>, arguments: Value) -> Self {
        Self {
            tool_call: Some(ToolCallRequest {
                name: name.into(),
                arguments: arguments.as_object().cloned().unwrap_or_default(),
            }),
            ..Self::default()
        }
    }

    pub fn refusal(reason: impl Into<String>) -> Self {
        Self {
            refusal: Some(reason.into()),
            ..Self::default()
        }
    }

    pub fn text_or_empty(&self) -> &str {
        self.content.as_deref().unwrap_or("")
    }
}

/// A chat-completion provider.
pub trait ChatBackend: Send + Sync {
    /// Produces a response for an already validated request. Callers should
    /// go through [`complete`] rather than calling this directly.
    fn complete_raw(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for Arc<B> {
    fn complete_raw(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        (**self).complete_raw(request)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn complete_raw(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        (**self).complete_raw(request)
    }
}

/// Validates `request`, asks `backend`, and checks the response shape.
pub fn complete(
    backend: &dyn ChatBackend,
    request: &CompletionRequest,
) -> Result<CompletionResponse, LlmError> {
    request.validate()?;
    let response = backend.complete_raw(request)?;
    if let Some(call) = &response.tool_call {
        if !request.available_tools.iter().any(|t| t.name == call.name) {
            return Err(LlmError::UnknownTool(call.name.clone()));
        }
    }
    let has_text = response
        .content
        .as_deref()
        .is_some_and(|c| !c.trim().is_empty());
    if !has_text && response.tool_call.is_none() && response.refusal.is_none() {
        return Err(LlmError::Malformed("empty response".into()));
    }
    Ok(response)
}

/// Backend driven by a closure; handy for tests and adapters.
pub struct FnBackend<F>(pub F);

impl<F> ChatBackend for FnBackend<F>
where
    F: Fn(&CompletionRequest) -> Result<CompletionResponse, LlmError> + Send + Sync,
{
    fn complete_raw(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        (self.0)(request)
    }
}

/// Wraps a backend and records every exchange keyed by the canonical request
/// key, so that a run can be replayed through a [`ScriptedBackend`].
pub struct RecordingBackend<B> {
    inner: B,
    recorded: Mutex<BTreeMap<String, CompletionResponse>>,
}

impl<B: ChatBackend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            recorded: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn script(&self) -> BackendScript {
        let recorded = self.recorded.lock().expect("recording lock poisoned");
        BackendScript {
            entries: recorded
                .iter()
                .map(|(key, response)| ScriptEntry {
                    rule: MatchRule::key(key),
                    response: response.clone(),
                })
                .collect(),
        }
    }
}

impl<B: ChatBackend> ChatBackend for RecordingBackend<B> {
    fn complete_raw(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let response = self.inner.complete_raw(request)?;
        self.recorded
            .lock()
            .expect("recording lock poisoned")
            .insert(request.canonical_key(), response.clone());
        Ok(response)
    }
}

/// Which chat backend to build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChatConfig {
    Scripted {
        script_path: PathBuf,
    },
    Live(LiveConfig),
    /// The offline rule-following DBA.
    #[default]
    Simulated,
}

/// Chat and embedding slots are configured independently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct BackendConfig {
    #[serde(default)]
    pub chat: ChatConfig,
    #[serde(default)]
    pub embedder: EmbedderConfig,
}

/// Builds a chat backend from its configuration.
pub fn build_chat_backend(config: &ChatConfig) -> Result<Arc<dyn ChatBackend>, LlmError> {
    Ok(match config {
        ChatConfig::Scripted { script_path } => Arc::new(ScriptedBackend::load(script_path)?),
        ChatConfig::Live(live) => Arc::new(LiveBackend::new(live.clone())?),
        ChatConfig::Simulated => Arc::new(crate::sim::SimulatedDba::default()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tools::{ToolCategory, ToolSpec};
    use serde_json::json;

    fn tool(name: &str) -> ToolSpec {
        ToolSpec {
            name: name.into(),
            description: format!("{name} tool"),
            arg_schema: vec![],
            category: ToolCategory::Observation,
            cost_hint: 0,
            family: None,
        }
    }

    #[test]
    fn role_round_trips_through_strings() {
        for role in [
            Role::System,
            Role::Assistant,
            Role::User,
            Role::Tool,
            Role::Human,
            Role::agent("cpu_agent"),
        ] {
            let text = serde_json::to_string(&role).unwrap();
            let back: Role = serde_json::from_str(&text).unwrap();
            assert_eq!(back, role);
        }
        assert!(serde_json::from_str::<Role>("\"wizard\"").is_err());
    }

    #[test]
    fn tool_message_requires_call() {
        let bad = ChatMessage::new(Role::Tool, "The metric is abnormal");
        assert!(bad.validate().is_err());
        let empty = ChatMessage::user("   ");
        assert!(empty.validate().is_err());
    }

    #[test]
    fn key_ignores_tool_order_and_whitespace() {
        let a = CompletionRequest::new(vec![ChatMessage::user("check  the\ncpu")])
            .with_tools(vec![tool("a"), tool("b")]);
        let b = CompletionRequest::new(vec![ChatMessage::user("check the cpu")])
            .with_tools(vec![tool("b"), tool("a")]);
        assert_eq!(a.canonical_key(), b.canonical_key());

        let c = CompletionRequest::new(vec![ChatMessage::assistant("check the cpu")])
            .with_tools(vec![tool("a"), tool("b")]);
        assert_ne!(a.canonical_key(), c.canonical_key());
    }

    #[test]
    fn key_distinguishes_call_arguments() {
        let call = |metric: &str| {
            ChatMessage::assistant("").with_tool_call(ToolInvocation::new(
                "is_abnormal_metric",
                json!({"metric_name": metric}).as_object().unwrap().clone(),
            ))
        };
        let a = CompletionRequest::new(vec![ChatMessage::user("go"), call("cpu_usage")]);
        let b = CompletionRequest::new(vec![ChatMessage::user("go"), call("io_wait")]);
        assert_ne!(a.canonical_key(), b.canonical_key());
    }

    #[test]
    fn duplicate_tools_rejected() {
        let request = CompletionRequest::new(vec![ChatMessage::user("x")])
            .with_tools(vec![tool("a"), tool("a")]);
        assert!(matches!(request.validate(), Err(LlmError::InvalidRequest(_))));
    }

    #[test]
    fn unknown_tool_call_never_propagates() {
        let backend = FnBackend(|_: &CompletionRequest| {
            Ok(CompletionResponse::call("pg_magic", json!({})))
        });
        let request =
            CompletionRequest::new(vec![ChatMessage::user("x")]).with_tools(vec![tool("a")]);
        match complete(&backend, &request) {
            Err(LlmError::UnknownTool(name)) => assert_eq!(name, "pg_magic"),
            other => panic!("expected unknown tool, got {other:?}"),
        }
    }

    #[test]
    fn empty_response_is_malformed() {
        let backend = FnBackend(|_: &CompletionRequest| Ok(CompletionResponse::default()));
        let request = CompletionRequest::new(vec![ChatMessage::user("x")]);
        assert!(matches!(complete(&backend, &request), Err(LlmError::Malformed(_))));
    }

    #[test]
    fn recording_replays_through_script() {
        let recorder = RecordingBackend::new(FnBackend(|r: &CompletionRequest| {
            Ok(CompletionResponse::text(format!(
                "echo {}",
                r.last_user_content().unwrap_or("")
            )))
        }));
        let req = CompletionRequest::new(vec![ChatMessage::user("hello")]);
        let live = complete(&recorder, &req).unwrap();
        let scripted = ScriptedBackend::new(recorder.script());
        assert_eq!(complete(&scripted, &req).unwrap(), live);
    }
}
