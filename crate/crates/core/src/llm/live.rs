use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{ChatBackend, CompletionRequest, CompletionResponse, LlmError, Role, ToolCallRequest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveConfig {
    /// Base URL, e.g. `https://api.openai.com/v1`.
    pub endpoint: String,
    #[serde(default)]
    pub api_key: Option<String>,
    pub model: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    120
}

/// OpenAI-compatible chat-completions client.
pub struct LiveBackend {
    config: LiveConfig,
    client: reqwest::blocking::Client,
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(Self { config, client })
    }
}

impl ChatBackend for LiveBackend {
    fn complete_raw(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let url = format!(
            "{}/chat/completions",
            self.config.endpoint.trim_end_matches('/')
        );
        let mut http = self.client.post(url).json(&request_body(&self.config.model, request));
        if let Some(key) = &self.config.api_key {
            http = http.bearer_auth(key);
        }
        let response = http
            .send()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(LlmError::Transport(format!("HTTP {status}: {text}")));
        }
        let payload: Value =
            serde_json::from_str(&text).map_err(|e| LlmError::Malformed(e.to_string()))?;
        parse_response(&payload)
    }
}

fn sanitize_name(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect()
}

/// Provider payload for `request`. Agent messages become named assistant
/// messages; human feedback becomes a named user message; each tool result is
/// preceded by the assistant call it answers.
pub(crate) fn request_body(model: &str, request: &CompletionRequest) -> Value {
    let mut messages = Vec::new();
    for (i, message) in request.messages.iter().enumerate() {
        let call_id = format!("call_{i}");
        match &message.role {
            Role::Tool => {
                let call = message.tool_call.as_ref().expect("validated tool message");
                messages.push(json!({
                    "role": "assistant",
                    "content": Value::Null,
                    "tool_calls": [{
                        "id": call_id,
                        "type": "function",
                        "function": {
                            "name": call.tool,
                            "arguments": Value::Object(call.args.clone()).to_string(),
                        }
                    }]
                }));
                messages.push(json!({
                    "role": "tool",
                    "tool_call_id": call_id,
                    "content": message.content,
                }));
            }
            role => {
                let (provider_role, name) = match role {
                    Role::System => ("system", None),
                    Role::User => ("user", None),
                    Role::Human => ("user", Some("human".to_string())),
                    Role::Assistant => ("assistant", None),
                    Role::Agent(agent) => ("assistant", Some(sanitize_name(agent))),
                    Role::Tool => unreachable!(),
                };
                let mut content = message.content.clone();
                if let Some(call) = &message.tool_call {
                    if !content.is_empty() {
                        content.push('\n');
                    }
                    content.push_str(&format!("[called {call}]"));
                }
                let mut m = json!({"role": provider_role, "content": content});
                if let Some(name) = name {
                    m["name"] = Value::String(name);
                }
                messages.push(m);
            }
        }
    }
    let mut body = json!({
        "model": model,
        "messages": messages,
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    });
    if !request.available_tools.is_empty() {
        body["tools"] = Value::Array(
            request
                .available_tools
                .iter()
                .map(|t| {
                    json!({
                        "type": "function",
                        "function": {
                            "name": t.name,
                            "description": t.description,
                            "parameters": t.parameters_schema(),
                        }
                    })
                })
                .collect(),
        );
    }
    body
}

pub(crate) fn parse_response(payload: &Value) -> Result<CompletionResponse, LlmError> {
    let message = payload
        .get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("message"))
        .ok_or_else(|| LlmError::Malformed("missing choices[0].message".into()))?;
    let content = message
        .get("content")
        .and_then(Value::as_str)
        .filter(|s| !s.is_empty())
        .map(str::to_string);
    let refusal = message
        .get("refusal")
        .and_then(Value::as_str)
        .map(str::to_string);
    let tool_call = match message
        .get("tool_calls")
        .and_then(Value::as_array)
        .and_then(|calls| calls.first())
    {
        None => None,
        Some(call) => {
            let function = call
                .get("function")
                .ok_or_else(|| LlmError::Malformed("tool call without function".into()))?;
            let name = function
                .get("name")
                .and_then(Value::as_str)
                .ok_or_else(|| LlmError::Malformed("tool call without name".into()))?;
            let arguments = match function.get("arguments") {
                Some(Value::String(raw)) if raw.trim().is_empty() => Map::new(),
                Some(Value::String(raw)) => serde_json::from_str::<Value>(raw)
                    .ok()
                    .and_then(|v| v.as_object().cloned())
                    .ok_or_else(|| LlmError::Malformed(format!("tool arguments not an object: {raw}")))?,
                Some(Value::Object(map)) => map.clone(),
                None | Some(Value::Null) => Map::new(),
                Some(other) => {
                    return Err(LlmError::Malformed(format!("tool arguments: {other}")))
                }
            };
            Some(ToolCallRequest {
                name: name.to_string(),
                arguments,
            })
        }
    };
    Ok(CompletionResponse {
        content,
        tool_call,
        refusal,
    })
}
