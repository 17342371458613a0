//! Tool descriptions and tool invocations shared by the backend, retrieval and
//! toolbox layers.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Whether a tool only reads database state or proposes a change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum ToolCategory {
    Observation,
    Optimization,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum ArgType {
    Integer,
    Number,
    String,
    Boolean,
    StringList,
    /// A list of column sets, e.g. `[["a","b"],["c"]]`.
    ColumnSets,
}

impl ArgType {
    fn accepts(self, value: &Value) -> bool {
        match self {
            ArgType::Integer => value.is_i64() || value.is_u64(),
            ArgType::Number => value.is_number(),
            ArgType::String => value.is_string(),
            ArgType::Boolean => value.is_boolean(),
            ArgType::StringList => value
                .as_array()
                .is_some_and(|items| items.iter().all(Value::is_string)),
            ArgType::ColumnSets => value.as_array().is_some_and(|sets| {
                sets.iter().all(|set| {
                    set.as_array()
                        .is_some_and(|cols| cols.iter().all(Value::is_string))
                })
            }),
        }
    }

    fn json_schema(self) -> Value {
        match self {
            ArgType::Integer => serde_json::json!({"type": "integer"}),
            ArgType::Number => serde_json::json!({"type": "number"}),
            ArgType::String => serde_json::json!({"type": "string"}),
            ArgType::Boolean => serde_json::json!({"type": "boolean"}),
            ArgType::StringList => serde_json::json!({"type": "array", "items": {"type": "string"}}),
            ArgType::ColumnSets => serde_json::json!({
                "type": "array",
                "items": {"type": "array", "items": {"type": "string"}}
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct ArgSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ArgType,
    #[serde(default = "default_true")]
    pub required: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
}

fn default_true() -> bool {
    true
}

/// A callable tool API and its description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    #[serde(default)]
    pub arg_schema: Vec<ArgSpec>,
    pub category: ToolCategory,
    /// Ordinal cost hint, 0 = cheapest.
    #[serde(default)]
    pub cost_hint: u8,
    /// Metric family the tool is bound to (e.g. `cpu`), if any. Agents whose
    /// scope does not cover the family may not call it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ToolSpecError {
    #[error("duplicate tool name `{0}`")]
    DuplicateTool(String),
    #[error("tool `{0}` has an empty description")]
    EmptyDescription(String),
    #[error("tool `{tool}` declares parameter `{param}` twice")]
    DuplicateParam { tool: String, param: String },
    #[error("tool name must be nonempty")]
    EmptyName,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArgError {
    #[error("missing required argument `{0}`")]
    Missing(String),
    #[error("argument `{name}` must be of type {expected:?}")]
    WrongType { name: String, expected: ArgType },
    #[error("unexpected argument `{0}`")]
    Unexpected(String),
}

impl ToolSpec {
    pub fn validate(&self) -> Result<(), ToolSpecError> {
        if self.name.trim().is_empty() {
            return Err(ToolSpecError::EmptyName);
        }
        if self.description.trim().is_empty() {
            return Err(ToolSpecError::EmptyDescription(self.name.clone()));
        }
        let mut seen = BTreeSet::new();
        for arg in &self.arg_schema {
            if !seen.insert(arg.name.as_str()) {
                return Err(ToolSpecError::DuplicateParam {
                    tool: self.name.clone(),
                    param: arg.name.clone(),
                });
            }
        }
        Ok(())
    }

    /// Checks `args` against the declared parameter list.
    pub fn check_args(&self, args: &Map<String, Value>) -> Result<(), ArgError> {
        for spec in &self.arg_schema {
            match args.get(&spec.name) {
                None if spec.required => return Err(ArgError::Missing(spec.name.clone())),
                None => {}
                Some(value) if !spec.ty.accepts(value) => {
                    return Err(ArgError::WrongType {
                        name: spec.name.clone(),
                        expected: spec.ty,
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = args
            .keys()
            .find(|k| !self.arg_schema.iter().any(|a| &a.name == *k))
        {
            return Err(ArgError::Unexpected(extra.clone()));
        }
        Ok(())
    }

    /// JSON schema of the argument object, in the shape function-calling
    /// providers expect.
    pub fn parameters_schema(&self) -> Value {
        let mut properties = Map::new();
        for arg in &self.arg_schema {
            let mut schema = arg.ty.json_schema();
            if !arg.description.is_empty() {
                schema["description"] = Value::String(arg.description.clone());
            }
            properties.insert(arg.name.clone(), schema);
        }
        let required: Vec<Value> = self
            .arg_schema
            .iter()
            .filter(|a| a.required)
            .map(|a| Value::String(a.name.clone()))
            .collect();
        serde_json::json!({
            "type": "object",
            "properties": properties,
            "required": required,
        })
    }

    /// One-line rendering used inside prompts.
    pub fn prompt_line(&self) -> String {
        let args: Vec<String> = self
            .arg_schema
            .iter()
            .map(|a| format!("{}: {:?}", a.name, a.ty).to_lowercase())
            .collect();
        format!("{}({}): {}", self.name, args.join(", "), self.description)
    }
}

/// Validates a tool list: nonempty descriptions, unique names and parameters.
pub fn validate_registry(tools: &[ToolSpec]) -> Result<(), ToolSpecError> {
    let mut names = BTreeSet::new();
    for tool in tools {
        tool.validate()?;
        if !names.insert(tool.name.as_str()) {
            return Err(ToolSpecError::DuplicateTool(tool.name.clone()));
        }
    }
    Ok(())
}

/// One concrete tool call, optionally carrying the observation it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct ToolInvocation {
    pub tool: String,
    #[serde(default)]
    #[schemars(with = "std::collections::BTreeMap<String, serde_json::Value>")]
    pub args: Map<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<String>,
}

impl ToolInvocation {
    pub fn new(tool: impl Into<String>, args: Map<String, Value>) -> Self {
        Self {
            tool: tool.into(),
            args,
            observation: None,
        }
    }

    pub fn with_observation(mut self, observation: impl Into<String>) -> Self {
        self.observation = Some(observation.into());
        self
    }

    pub fn arg_str(&self, name: &str) -> Option<&str> {
        self.args.get(name).and_then(Value::as_str)
    }

    pub fn arg_i64(&self, name: &str) -> Option<i64> {
        self.args.get(name).and_then(Value::as_i64)
    }
}

impl fmt::Display for ToolInvocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.tool, Value::Object(self.args.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn spec() -> ToolSpec {
        ToolSpec {
            name: "is_abnormal_metric".into(),
            description: "check a metric".into(),
            arg_schema: vec![
                ArgSpec {
                    name: "start_time".into(),
                    ty: ArgType::Integer,
                    required: true,
                    description: String::new(),
                },
                ArgSpec {
                    name: "metric_name".into(),
                    ty: ArgType::String,
                    required: true,
                    description: String::new(),
                },
            ],
            category: ToolCategory::Observation,
            cost_hint: 0,
            family: None,
        }
    }

    #[test]
    fn args_are_checked_against_schema() {
        let tool = spec();
        let ok = json!({"start_time": 1684600070, "metric_name": "cpu_usage"});
        assert!(tool.check_args(ok.as_object().unwrap()).is_ok());

        let missing = json!({"start_time": 1});
        assert_eq!(
            tool.check_args(missing.as_object().unwrap()),
            Err(ArgError::Missing("metric_name".into()))
        );

        let wrong = json!({"start_time": "soon", "metric_name": "cpu_usage"});
        assert!(matches!(
            tool.check_args(wrong.as_object().unwrap()),
            Err(ArgError::WrongType { .. })
        ));

        let extra = json!({"start_time": 1, "metric_name": "x", "bogus": 1});
        assert_eq!(
            tool.check_args(extra.as_object().unwrap()),
            Err(ArgError::Unexpected("bogus".into()))
        );
    }

    #[test]
    fn registry_rejects_duplicates() {
        let tools = vec![spec(), spec()];
        assert_eq!(
            validate_registry(&tools),
            Err(ToolSpecError::DuplicateTool("is_abnormal_metric".into()))
        );
        let mut dup_param = spec();
        dup_param.arg_schema.push(dup_param.arg_schema[0].clone());
        assert!(matches!(
            dup_param.validate(),
            Err(ToolSpecError::DuplicateParam { .. })
        ));
    }

    #[test]
    fn parameters_schema_lists_required() {
        let schema = spec().parameters_schema();
        assert_eq!(schema["required"], json!(["start_time", "metric_name"]));
        assert_eq!(schema["properties"]["start_time"]["type"], "integer");
    }
}
