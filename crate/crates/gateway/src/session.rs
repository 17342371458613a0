//! Running sessions: creation, the background diagnosis, operator feedback
//! and replay.

use std::sync::{Arc, Mutex, RwLock};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use dbdiag_core::agents::{run_team, Roster, TeamEvent, TeamHooks};
use dbdiag_core::engine::{DiagnosisInput, Engine};
use dbdiag_core::llm::{BackendScript, ChatBackend, ChatConfig, RecordingBackend, ScriptedBackend};
use dbdiag_core::report::{DiagnosisReport, ReportError};
use dbdiag_core::toolbox::{AnomalyScenario, DetectorConfig, Toolbox};

use crate::config::Config;
use crate::store::{now_millis, EventKind, Session, SessionMeta, SessionMode, SessionStatus, SessionStore};

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Unauthorized(String),
    #[error(transparent)]
    Internal(#[from] anyhow::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct CreateSessionRequest {
    /// Scenario label, e.g. `CPU_CONTENTION`.
    pub scenario: String,
    #[serde(default = "default_mode")]
    pub mode: SessionMode,
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

fn default_mode() -> SessionMode {
    SessionMode::Tree
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackKind {
    Instruction,
    Approve,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct FeedbackRequest {
    pub kind: FeedbackKind,
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub advice_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct FeedbackAck {
    pub accepted: bool,
    pub seq: u64,
    pub status: SessionStatus,
}

/// What `GET /api/sessions/{id}` returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SessionState {
    #[serde(flatten)]
    pub meta: SessionMeta,
    pub last_seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<DiagnosisReport>,
    /// Diagnosis tree trace (tree mode) once the search finished.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree: Option<Value>,
    /// Shared chat record (multi-agent mode) once the session finished.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<Value>,
    pub events_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ScenarioSummary {
    pub label: String,
    pub description: String,
    pub window: [i64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct KbView {
    pub version: u64,
    pub fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub segments: Vec<dbdiag_core::knowledge::ExperienceSegment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ReplayOutcome {
    pub session: String,
    pub expected_hash: Option<String>,
    pub actual_hash: Option<String>,
    pub report_identical: bool,
    pub trace_identical: bool,
    /// Set when the knowledge base changed since the session ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kb_warning: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ReplayOutcome {
    pub fn identical(&self) -> bool {
        self.report_identical && self.trace_identical && self.error.is_none()
    }
}

/// Artifact file names inside a session directory.
const TRANSCRIPT: &str = "transcript.json";
const TRACE: &str = "trace.json";
const SCENARIO: &str = "scenario.json";
const RUN_REPORT: &str = "run_report.json";
const REPORT: &str = "report.json";

pub struct AppState {
    pub config: Config,
    pub store: SessionStore,
    pub engine: RwLock<Arc<Engine>>,
    pub scenarios: Vec<AnomalyScenario>,
    pub backend: Arc<dyn ChatBackend>,
}

fn backend_label(config: &ChatConfig) -> String {
    match config {
        ChatConfig::Simulated => "simulated".into(),
        ChatConfig::Scripted { script_path } => format!("scripted:{}", script_path.display()),
        ChatConfig::Live(live) => format!("live:{}", live.model),
    }
}

impl AppState {
    pub fn new(config: Config) -> anyhow::Result<Self> {
        let engine = config.engine()?;
        let scenarios = config.scenarios()?;
        let backend = config.chat_backend()?;
        let store = SessionStore::open(&config.data_dir)?;
        Ok(Self {
            config,
            store,
            engine: RwLock::new(Arc::new(engine)),
            scenarios,
            backend,
        })
    }

    pub fn engine(&self) -> Arc<Engine> {
        self.engine.read().expect("engine lock").clone()
    }

    pub fn kb_view(&self) -> KbView {
        let engine = self.engine();
        KbView {
            version: engine.kb.version(),
            fingerprint: engine.kb.fingerprint(),
            path: self.config.kb_path.as_ref().map(|p| p.display().to_string()),
            segments: engine.kb.segments().to_vec(),
        }
    }

    /// Re-reads the knowledge base. Running sessions keep the engine they
    /// started with.
    pub fn reload_kb(&self) -> Result<KbView, ApiError> {
        let engine = self.config.engine().map_err(|e| ApiError::Unprocessable(format!("{e:#}")))?;
        *self.engine.write().expect("engine lock") = Arc::new(engine);
        Ok(self.kb_view())
    }

    pub fn scenario_list(&self) -> Vec<ScenarioSummary> {
        self.scenarios
            .iter()
            .map(|s| ScenarioSummary {
                label: s.label.as_str().to_string(),
                description: s.description.clone(),
                window: s.window,
            })
            .collect()
    }

    pub fn session_state(&self, id: &str) -> Result<SessionState, ApiError> {
        let session = self.session(id)?;
        let meta = session.meta();
        let tree = match meta.mode {
            SessionMode::Tree => session.read_artifact::<Value>(TRACE)?,
            SessionMode::MultiAgent => None,
        };
        let record = match meta.mode {
            SessionMode::MultiAgent => session.read_artifact::<Value>(TRACE)?,
            SessionMode::Tree => None,
        };
        let report = session.report.lock().expect("report lock").clone();
        Ok(SessionState {
            last_seq: session.last_seq(),
            report,
            tree,
            record,
            events_url: format!("/api/sessions/{}/events?from=0", meta.id),
            meta,
        })
    }

    pub fn session(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        self.store
            .get(id)
            .ok_or_else(|| ApiError::NotFound(format!("unknown session {id}")))
    }

    /// Registers the session and returns it with `true` when it is new; the
    /// caller starts [`run_session`] for new sessions.
    pub fn create_session(&self, request: &CreateSessionRequest) -> Result<(Arc<Session>, bool), ApiError> {
        if let Some(key) = &request.idempotency_key {
            if let Some(existing) = self.store.by_idempotency_key(key) {
                return Ok((existing, false));
            }
        }
        let scenario = dbdiag_core::toolbox::scenario::find_scenario(&self.scenarios, &request.scenario)
            .map_err(|e| ApiError::NotFound(e.to_string()))?
            .clone();
        let engine = self.engine();
        let meta = SessionMeta {
            id: uuid::Uuid::new_v4().to_string(),
            mode: request.mode,
            scenario: scenario.label.as_str().to_string(),
            status: SessionStatus::Running,
            created_at: now_millis(),
            idempotency_key: request.idempotency_key.clone(),
            backend: backend_label(&self.config.backend),
            kb_fingerprint: engine.kb.fingerprint(),
            kb_version: engine.kb.version(),
            tree_config: engine.config.tree,
            team_config: self.config.caps.team(),
            report_hash: None,
            error: None,
        };
        let session = self.store.create(meta)?;
        session.write_artifact(SCENARIO, &scenario)?;
        session.append(EventKind::Status, json!({ "status": SessionStatus::Running }))?;
        Ok((session, true))
    }

    pub fn post_feedback(&self, id: &str, request: &FeedbackRequest) -> Result<FeedbackAck, ApiError> {
        let session = self.session(id)?;
        let status = session.status();
        if status.is_terminal() {
            return Err(ApiError::Conflict(format!("session {id} is {status:?}").to_lowercase()));
        }
        match request.kind {
            FeedbackKind::Instruction => {
                let text = request
                    .text
                    .as_deref()
                    .map(str::trim)
                    .filter(|t| !t.is_empty())
                    .ok_or_else(|| ApiError::BadRequest("instruction text is empty".into()))?;
                if status == SessionStatus::Running {
                    session.queue.lock().expect("queue lock").push(text.to_string());
                }
                let event = session.append(
                    EventKind::Feedback,
                    json!({ "kind": "instruction", "text": text, "queued": status == SessionStatus::Running }),
                )?;
                Ok(FeedbackAck {
                    accepted: true,
                    seq: event.seq,
                    status,
                })
            }
            FeedbackKind::Approve | FeedbackKind::Reject => {
                let approve = request.kind == FeedbackKind::Approve;
                let advice_id = request
                    .advice_id
                    .as_deref()
                    .ok_or_else(|| ApiError::BadRequest("advice_id is required".into()))?;
                let report = {
                    let mut guard = session.report.lock().expect("report lock");
                    let report = guard
                        .as_mut()
                        .ok_or_else(|| ApiError::Unprocessable(format!("unknown advice {advice_id}: no report yet")))?;
                    report.decide(advice_id, approve).map_err(|e| match e {
                        ReportError::UnknownAdvice(_) => ApiError::Unprocessable(e.to_string()),
                        ReportError::AlreadyDecided(_) => ApiError::Conflict(e.to_string()),
                    })?;
                    report.clone()
                };
                session.inputs.lock().expect("inputs lock").decisions.push((advice_id.to_string(), approve));
                session.save_inputs()?;
                session.write_artifact(REPORT, &report)?;
                let event = session.append(
                    EventKind::Feedback,
                    json!({ "kind": if approve { "approve" } else { "reject" }, "advice_id": advice_id, "text": request.text }),
                )?;
                session.append(EventKind::Report, json!({ "report": report, "hash": report.hash() }))?;
                let mut status = session.status();
                if status == SessionStatus::AwaitingFeedback && !report.has_pending_advice() {
                    session.set_status(SessionStatus::Done)?;
                    status = SessionStatus::Done;
                }
                Ok(FeedbackAck {
                    accepted: true,
                    seq: event.seq,
                    status,
                })
            }
        }
    }
}

fn toolbox_for(scenario: &AnomalyScenario, detector: DetectorConfig) -> anyhow::Result<Toolbox> {
    Ok(Toolbox::for_scenario(scenario)?.with_detector(detector))
}

/// Output of one diagnosis, comparable across runs.
struct RunArtifacts {
    report: DiagnosisReport,
    /// Pretty JSON of the tree trace or of the chat record.
    trace: String,
}

/// The diagnosis itself, shared by live sessions and replays. `feedback`
/// is asked for instructions at every iteration boundary, numbered from 0.
#[allow(clippy::too_many_arguments)]
fn diagnose(
    mode: SessionMode,
    engine: &Engine,
    backend: &dyn ChatBackend,
    toolbox: &Toolbox,
    input: &DiagnosisInput,
    team_config: &dbdiag_core::agents::TeamConfig,
    feedback: &(dyn Fn(usize) -> Vec<String> + Sync),
    session: Option<&Session>,
) -> anyhow::Result<RunArtifacts> {
    let emit = |kind: EventKind, data: Value| {
        if let Some(s) = session {
            if let Err(e) = s.append(kind, data) {
                tracing::error!(error = %e, "event append failed");
            }
        }
    };
    let on_node = |node: &dbdiag_core::planner::DiagnosisNode| emit(EventKind::TreeNode, json!(node));
    match mode {
        SessionMode::Tree => {
            let notes = feedback(0);
            let run = engine.diagnose(backend, toolbox, input, notes, Some(&on_node))?;
            Ok(RunArtifacts {
                report: run.report,
                trace: serde_json::to_string_pretty(&run.tree.trace())? + "\n",
            })
        }
        SessionMode::MultiAgent => {
            let boundary = Mutex::new(0usize);
            let drain = || {
                let mut b = boundary.lock().expect("boundary lock");
                let out = feedback(*b);
                *b += 1;
                out
            };
            let on_event = |e: &TeamEvent| match e {
                TeamEvent::Scheduled { decision, choice } => {
                    emit(EventKind::Schedule, json!({ "decision": decision, "choice": choice }))
                }
                TeamEvent::Message(entry) => emit(EventKind::Message, json!(entry)),
                TeamEvent::Rejected(r) => emit(EventKind::Rejection, json!(r)),
                TeamEvent::SummaryUpdated(s) => emit(EventKind::SummaryUpdate, json!(s)),
            };
            let hooks = TeamHooks {
                feedback: Some(&drain),
                on_event: Some(&on_event),
                on_node: Some(&on_node),
            };
            let outcome = run_team(engine, backend, toolbox, input, Roster::default(), team_config, &hooks)?;
            let trace = json!({ "record": outcome.record, "summary": outcome.summary });
            Ok(RunArtifacts {
                report: outcome.report,
                trace: serde_json::to_string_pretty(&trace)? + "\n",
            })
        }
    }
}

/// Background body of a session: runs the diagnosis, persists transcript,
/// trace and report, then waits for operator decisions if advice is
/// pending.
pub fn run_session(state: &AppState, session: &Session) {
    if let Err(e) = run_session_inner(state, session) {
        tracing::error!(session = %session.id(), error = %format!("{e:#}"), "session failed");
        let _ = session.update_meta(|m| m.error = Some(format!("{e:#}")));
        let _ = session.set_status(SessionStatus::Aborted);
    }
}

fn run_session_inner(state: &AppState, session: &Session) -> anyhow::Result<()> {
    let meta = session.meta();
    let scenario: AnomalyScenario = session
        .read_artifact(SCENARIO)?
        .ok_or_else(|| anyhow::anyhow!("scenario artifact missing"))?;
    let engine = state.engine();
    let toolbox = toolbox_for(&scenario, state.config.detector)?;
    let input = DiagnosisInput {
        description: scenario.description.clone(),
        window: scenario.window,
    };
    let recorder = RecordingBackend::new(state.backend.clone());
    let feedback = |boundary: usize| {
        let texts: Vec<String> = std::mem::take(&mut *session.queue.lock().expect("queue lock"));
        if !texts.is_empty() {
            session
                .inputs
                .lock()
                .expect("inputs lock")
                .instructions
                .push((boundary, texts.clone()));
        }
        texts
    };
    let result = diagnose(
        meta.mode,
        &engine,
        &recorder,
        &toolbox,
        &input,
        &meta.team_config,
        &feedback,
        Some(session),
    );
    // The transcript is worth keeping even when the run failed.
    session.write_artifact(TRANSCRIPT, &recorder.script())?;
    session.save_inputs()?;
    let artifacts = result?;
    session.write_text_artifact(TRACE, &artifacts.trace)?;
    session.write_text_artifact(RUN_REPORT, &artifacts.report.to_json())?;
    session.write_artifact(REPORT, &artifacts.report)?;
    let hash = artifacts.report.hash();
    session.update_meta(|m| m.report_hash = Some(hash.clone()))?;
    let pending = artifacts.report.has_pending_advice();
    session.append(EventKind::Report, json!({ "report": artifacts.report, "hash": hash }))?;
    *session.report.lock().expect("report lock") = Some(artifacts.report);
    session.set_status(if pending {
        SessionStatus::AwaitingFeedback
    } else {
        SessionStatus::Done
    })?;
    Ok(())
}

/// Re-runs a stored session against its recorded transcript and compares
/// the report hash and the trace byte for byte.
pub fn replay(state: &AppState, id: &str) -> Result<ReplayOutcome, ApiError> {
    let session = state.session(id)?;
    let meta = session.meta();
    let engine = state.engine();
    let kb_warning = (engine.kb.fingerprint() != meta.kb_fingerprint).then(|| {
        format!(
            "knowledge base changed since the session ran (version {} then, {} now)",
            meta.kb_version,
            engine.kb.version()
        )
    });
    let mut outcome = ReplayOutcome {
        session: id.to_string(),
        expected_hash: meta.report_hash.clone(),
        actual_hash: None,
        report_identical: false,
        trace_identical: false,
        kb_warning,
        error: None,
    };
    let (Some(script), Some(scenario)) = (
        session.read_artifact::<BackendScript>(TRANSCRIPT)?,
        session.read_artifact::<AnomalyScenario>(SCENARIO)?,
    ) else {
        return Err(ApiError::NotFound(format!("session {id} has no recorded transcript")));
    };
    let stored_trace = session.read_text_artifact(TRACE)?;
    let inputs = session.inputs.lock().expect("inputs lock").clone();
    let backend = ScriptedBackend::new(script);
    let toolbox = toolbox_for(&scenario, state.config.detector)?;
    let input = DiagnosisInput {
        description: scenario.description.clone(),
        window: scenario.window,
    };
    let feedback = |boundary: usize| {
        inputs
            .instructions
            .iter()
            .filter(|(b, _)| *b == boundary)
            .flat_map(|(_, t)| t.clone())
            .collect()
    };
    // Replays run with the engine settings the session recorded.
    let engine = Engine {
        kb: engine.kb.clone(),
        embedder: engine.embedder.clone(),
        dense: engine.dense.clone(),
        template: engine.template.clone(),
        config: dbdiag_core::engine::EngineConfig {
            tree: meta.tree_config,
            ..engine.config
        },
    };
    match diagnose(meta.mode, &engine, &backend, &toolbox, &input, &meta.team_config, &feedback, None) {
        Ok(run) => {
            let hash = run.report.hash();
            outcome.report_identical = meta.report_hash.as_deref() == Some(hash.as_str());
            outcome.trace_identical = stored_trace.as_deref() == Some(run.trace.as_str());
            outcome.actual_hash = Some(hash);
        }
        Err(e) => outcome.error = Some(format!("{e:#}")),
    }
    Ok(outcome)
}
