use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ChatBackend, CompletionRequest, CompletionResponse, LlmError};

/// How a script entry is matched against a request.
///
/// `key` matches the canonical request key exactly. `last_user_contains`
/// matches when the last user message contains the given text; these rules are
/// tried in file order after key lookup fails. An entry with `default: true`
/// is the fallback.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_user_contains: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub default: bool,
}

impl MatchRule {
    pub fn key(key: impl Into<String>) -> Self {
        Self {
            key: Some(key.into()),
            ..Self::default()
        }
    }

    pub fn contains(text: impl Into<String>) -> Self {
        Self {
            last_user_contains: Some(text.into()),
            ..Self::default()
        }
    }

    pub fn fallback() -> Self {
        Self {
            default: true,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(rename = "match")]
    pub rule: MatchRule,
    pub response: CompletionResponse,
}

/// The on-disk script: a top-level JSON array of entries.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BackendScript {
    pub entries: Vec<ScriptEntry>,
}

impl BackendScript {
    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = fs::read_to_string(path)
            .map_err(|e| LlmError::Script(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| LlmError::Script(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), LlmError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| LlmError::Script(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| LlmError::Script(format!("{}: {e}", path.display())))
    }

    pub fn push(&mut self, rule: MatchRule, response: CompletionResponse) {
        self.entries.push(ScriptEntry { rule, response });
    }

    /// Appends the entries of `other`.
    pub fn merge(&mut self, other: BackendScript) {
        self.entries.extend(other.entries);
    }
}

/// Deterministic backend answering from a [`BackendScript`]. Immutable after
/// construction, so a handle can be shared across sessions.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    by_key: HashMap<String, CompletionResponse>,
    patterns: Vec<(String, CompletionResponse)>,
    fallback: Option<CompletionResponse>,
}

impl ScriptedBackend {
    pub fn new(script: BackendScript) -> Self {
        let mut by_key = HashMap::new();
        let mut patterns = Vec::new();
        let mut fallback = None;
        for entry in script.entries {
            let ScriptEntry { rule, response } = entry;
            if let Some(key) = rule.key {
                by_key.entry(key).or_insert(response);
            } else if let Some(text) = rule.last_user_contains {
                patterns.push((text, response));
            } else if rule.default && fallback.is_none() {
                fallback = Some(response);
            }
        }
        Self {
            by_key,
            patterns,
            fallback,
        }
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        BackendScript::load(path).map(Self::new)
    }

    /// A script with only a fallback response.
    pub fn constant(response: CompletionResponse) -> Self {
        let mut script = BackendScript::default();
        script.push(MatchRule::fallback(), response);
        Self::new(script)
    }

    pub fn len(&self) -> usize {
        self.by_key.len() + self.patterns.len() + usize::from(self.fallback.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete_raw(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let key = request.canonical_key();
        if let Some(response) = self.by_key.get(&key) {
            return Ok(response.clone());
        }
        if let Some(last) = request.last_user_content() {
            if let Some((_, response)) = self.patterns.iter().find(|(p, _)| last.contains(p.as_str())) {
                return Ok(response.clone());
            }
        }
        self.fallback.clone().ok_or(LlmError::Unscripted(key))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{complete, ChatMessage};
    use proptest::prelude::*;

    #[test]
    fn key_lookup_returns_script_entry_verbatim() {
        let request = CompletionRequest::new(vec![ChatMessage::user("diagnose")]);
        let mut script = BackendScript::default();
        script.push(
            MatchRule::key(request.canonical_key()),
            CompletionResponse::text("look at cpu_usage"),
        );
        let backend = ScriptedBackend::new(script);
        assert_eq!(
            complete(&backend, &request).unwrap(),
            CompletionResponse::text("look at cpu_usage")
        );
    }

    #[test]
    fn unknown_key_without_fallback_is_unscripted() {
        let backend = ScriptedBackend::new(BackendScript::default());
        let request = CompletionRequest::new(vec![ChatMessage::user("diagnose")]);
        let err = complete(&backend, &request).unwrap_err();
        assert!(matches!(err, LlmError::Unscripted(_)));
        assert!(err.to_string().contains("unscripted request"));
    }

    #[test]
    fn patterns_then_fallback() {
        let mut script = BackendScript::default();
        script.push(MatchRule::contains("Summarize"), CompletionResponse::text("summary"));
        script.push(MatchRule::fallback(), CompletionResponse::text("default"));
        let backend = ScriptedBackend::new(script);
        let a = CompletionRequest::new(vec![ChatMessage::user("Summarize this")]);
        let b = CompletionRequest::new(vec![ChatMessage::user("other")]);
        assert_eq!(backend.complete_raw(&a).unwrap().text_or_empty(), "summary");
        assert_eq!(backend.complete_raw(&b).unwrap().text_or_empty(), "default");
    }

    #[test]
    fn script_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.json");
        let mut script = BackendScript::default();
        script.push(MatchRule::key("abc"), CompletionResponse::text("x"));
        script.push(MatchRule::fallback(), CompletionResponse::refusal("no"));
        script.save(&path).unwrap();
        let raw: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert!(raw.is_array());
        assert_eq!(raw[0]["match"]["key"], "abc");
        assert_eq!(BackendScript::load(&path).unwrap(), script);
    }

    fn arb_request() -> impl Strategy<Value = CompletionRequest> {
        prop::collection::vec(("[a-z ]{1,20}", 0u8..3), 1..5).prop_map(|parts| {
            CompletionRequest::new(
                parts
                    .into_iter()
                    .map(|(text, role)| match role {
                        0 => ChatMessage::user(format!("u {text}")),
                        1 => ChatMessage::assistant(format!("a {text}")),
                        _ => ChatMessage::system(format!("s {text}")),
                    })
                    .collect(),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn scripted_lookup_is_pure(requests in prop::collection::vec(arb_request(), 1..8)) {
            let mut script = BackendScript::default();
            for (i, request) in requests.iter().enumerate() {
                script.push(MatchRule::key(request.canonical_key()), CompletionResponse::text(format!("r{i}")));
            }
            let backend = ScriptedBackend::new(script);
            for request in &requests {
                let first = backend.complete_raw(request).unwrap();
                let second = backend.complete_raw(&request.clone()).unwrap();
                prop_assert_eq!(first, second);
            }
        }
    }
}
