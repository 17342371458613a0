//! JSON schemas of every API response and request body.

use schemars::{schema_for, JsonSchema};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::session::{
    CreateSessionRequest, FeedbackAck, FeedbackRequest, KbView, ReplayOutcome, ScenarioSummary, SessionState,
};
use crate::store::{Event, SessionMeta};

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
pub struct ScenarioList {
    pub scenarios: Vec<ScenarioSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
pub struct SessionList {
    pub sessions: Vec<SessionMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
pub struct ErrorBody {
    pub error: String,
}

/// Schema documents keyed by type name.
pub fn all() -> Value {
    json!({
        "SessionState": schema_for!(SessionState),
        "SessionList": schema_for!(SessionList),
        "CreateSessionRequest": schema_for!(CreateSessionRequest),
        "FeedbackRequest": schema_for!(FeedbackRequest),
        "FeedbackAck": schema_for!(FeedbackAck),
        "Event": schema_for!(Event),
        "KbView": schema_for!(KbView),
        "ScenarioList": schema_for!(ScenarioList),
        "ReplayOutcome": schema_for!(ReplayOutcome),
        "Error": schema_for!(ErrorBody),
    })
}
