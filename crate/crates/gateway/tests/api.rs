use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use dbdiag::config::Config;
use dbdiag::server::router;
use dbdiag::session::AppState;
use dbdiag_core::knowledge::{ExperienceSegment, KnowledgeBase};

fn config(dir: &Path) -> Config {
    Config {
        data_dir: dir.join("data"),
        ..Config::default()
    }
}

fn app(config: Config) -> (Arc<AppState>, Router) {
    let state = Arc::new(AppState::new(config).unwrap());
    (state.clone(), router(state))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, text) = call_raw(app, method, uri, body, None).await;
    let value = if text.is_empty() { Value::Null } else { serde_json::from_str(&text).unwrap() };
    (status, value)
}

async fn call_raw(
    app: &Router,
    method: &str,
    uri: &str,
    body: Option<Value>,
    token: Option<&str>,
) -> (StatusCode, String) {
    let mut builder = Request::builder().method(method).uri(uri);
    if let Some(token) = token {
        builder = builder.header("authorization", format!("Bearer {token}"));
    }
    let request = match body {
        Some(b) => builder
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => builder.body(Body::empty()).unwrap(),
    };
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = response.into_body().collect().await.unwrap().to_bytes();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

/// Polls until the session leaves `running`.
async fn settle(app: &Router, id: &str) -> Value {
    let start = Instant::now();
    loop {
        let (status, body) = call(app, "GET", &format!("/api/sessions/{id}"), None).await;
        assert_eq!(status, StatusCode::OK);
        if body["status"] != "running" {
            return body;
        }
        assert!(start.elapsed() < Duration::from_secs(30), "session {id} never settled");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

async fn start(app: &Router, scenario: &str, mode: &str) -> String {
    let (status, body) = call(app, "POST", "/api/sessions", Some(json!({ "scenario": scenario, "mode": mode }))).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    body["id"].as_str().unwrap().to_string()
}

fn sse_events(text: &str) -> Vec<Value> {
    text.lines()
        .filter_map(|l| l.strip_prefix("data:"))
        .map(|d| serde_json::from_str(d.trim()).unwrap())
        .collect()
}

#[tokio::test(flavor = "multi_thread")]
async fn tree_session_runs_to_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app(config(dir.path()));
    let id = start(&app, "CPU_CONTENTION", "tree").await;
    let state = settle(&app, &id).await;
    assert_eq!(state["status"], "awaiting_feedback");
    assert_eq!(state["mode"], "tree");
    let causes: Vec<&str> = state["report"]["causes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["label"].as_str().unwrap())
        .collect();
    assert_eq!(causes, ["CPU_CONTENTION"]);
    assert!(state["tree"]["nodes"].as_array().is_some_and(|n| !n.is_empty()), "{}", state["tree"]);
    assert!(state["report_hash"].is_string());

    let (status, list) = call(&app, "GET", "/api/sessions", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(list["sessions"].as_array().unwrap().len(), 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn multi_agent_session_streams_chat() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app(config(dir.path()));
    let id = start(&app, "CPU_CONTENTION", "multi_agent").await;
    let state = settle(&app, &id).await;
    assert!(state["record"]["record"]["entries"].is_array(), "{state}");
    assert!(state["record"]["summary"]["bullets"].is_array());
    let (status, text) = call_raw(&app, "GET", &format!("/api/sessions/{id}/events?from=0&follow=false"), None, None).await;
    assert_eq!(status, StatusCode::OK);
    let events = sse_events(&text);
    let kinds: Vec<&str> = events.iter().map(|e| e["kind"].as_str().unwrap()).collect();
    assert!(kinds.contains(&"schedule"));
    assert!(kinds.contains(&"message"));
    assert!(kinds.contains(&"summary_update"));
    assert_eq!(kinds.last(), Some(&"status"));
    let seqs: Vec<u64> = events.iter().map(|e| e["seq"].as_u64().unwrap()).collect();
    assert_eq!(seqs, (1..=seqs.len() as u64).collect::<Vec<_>>());
}

#[tokio::test(flavor = "multi_thread")]
async fn events_resume_after_a_sequence_number() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app(config(dir.path()));
    let id = start(&app, "IO_CONTENTION", "tree").await;
    let state = settle(&app, &id).await;
    let last = state["last_seq"].as_u64().unwrap();
    assert!(last > 3);
    let uri = |from: u64| format!("/api/sessions/{id}/events?from={from}&follow=false");
    let all = sse_events(&call_raw(&app, "GET", &uri(0), None, None).await.1);
    assert_eq!(all.len() as u64, last);
    let tail = sse_events(&call_raw(&app, "GET", &uri(last - 2), None, None).await.1);
    assert_eq!(tail, all[all.len() - 2..]);
    let none = sse_events(&call_raw(&app, "GET", &uri(last), None, None).await.1);
    assert!(none.is_empty());
}

#[tokio::test(flavor = "multi_thread")]
async fn live_tail_ends_on_a_terminal_status() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app(config(dir.path()));
    let id = start(&app, "CPU_CONTENTION", "tree").await;
    // Follows from the start; must stay open through awaiting_feedback and
    // end by itself once the last advice is decided.
    let follower = {
        let app = app.clone();
        let uri = format!("/api/sessions/{id}/events?from=0");
        tokio::spawn(async move { call_raw(&app, "GET", &uri, None, None).await })
    };
    let state = settle(&app, &id).await;
    assert_eq!(state["status"], "awaiting_feedback");
    tokio::time::sleep(Duration::from_millis(50)).await;
    assert!(!follower.is_finished());
    for advice in state["report"]["advice"].as_array().unwrap() {
        let (status, _) = call(
            &app,
            "POST",
            &format!("/api/sessions/{id}/feedback"),
            Some(json!({ "kind": "approve", "advice_id": advice["id"] })),
        )
        .await;
        assert_eq!(status, StatusCode::ACCEPTED);
    }
    let (_, text) = tokio::time::timeout(Duration::from_secs(30), follower)
        .await
        .expect("stream ended")
        .unwrap();
    let events = sse_events(&text);
    let kinds: Vec<&str> = events.iter().map(|e| e["kind"].as_str().unwrap()).collect();
    assert!(kinds.contains(&"tree_node"));
    assert!(kinds.contains(&"report"));
    assert!(kinds.contains(&"feedback"));
    let last = events.last().unwrap();
    assert_eq!(last["kind"], "status");
    assert_eq!(last["data"]["status"], "done");
    assert_eq!(last["seq"].as_u64(), Some(events.len() as u64));
}

#[tokio::test(flavor = "multi_thread")]
async fn idempotent_creation() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app(config(dir.path()));
    let body = json!({ "scenario": "MISSING_INDEXES", "idempotency_key": "k-1" });
    let (s1, b1) = call(&app, "POST", "/api/sessions", Some(body.clone())).await;
    let (s2, b2) = call(&app, "POST", "/api/sessions", Some(body)).await;
    assert_eq!(s1, StatusCode::CREATED);
    assert_eq!(s2, StatusCode::OK);
    assert_eq!(b1["id"], b2["id"]);

    // The header works as well.
    let request = Request::builder()
        .method("POST")
        .uri("/api/sessions")
        .header("content-type", "application/json")
        .header("idempotency-key", "k-1")
        .body(Body::from(json!({ "scenario": "MISSING_INDEXES" }).to_string()))
        .unwrap();
    let response = app.clone().oneshot(request).await.unwrap();
    assert_eq!(response.status(), StatusCode::OK);
    settle(&app, b1["id"].as_str().unwrap()).await;
}

#[tokio::test]
async fn unknown_things_are_404() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app(config(dir.path()));
    let (status, body) = call(&app, "POST", "/api/sessions", Some(json!({ "scenario": "NOT_A_THING" }))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(body["error"].is_string());
    assert_eq!(call(&app, "GET", "/api/sessions/nope", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "GET", "/api/sessions/nope/events", None).await.0, StatusCode::NOT_FOUND);
    let fb = json!({ "kind": "instruction", "text": "x" });
    assert_eq!(call(&app, "POST", "/api/sessions/nope/feedback", Some(fb)).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn advice_feedback_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app(config(dir.path()));
    let id = start(&app, "CPU_CONTENTION", "tree").await;
    let state = settle(&app, &id).await;
    assert_eq!(state["status"], "awaiting_feedback");
    let advice: Vec<String> = state["report"]["advice"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["id"].as_str().unwrap().to_string())
        .collect();
    assert!(!advice.is_empty());
    let feedback = format!("/api/sessions/{id}/feedback");

    let (status, _) = call(&app, "POST", &feedback, Some(json!({ "kind": "approve" }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "POST", &feedback, Some(json!({ "kind": "instruction", "text": "  " }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "POST", &feedback, Some(json!({ "kind": "approve", "advice_id": "Z9" }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    // An instruction after the run is logged but changes nothing.
    let (status, ack) = call(&app, "POST", &feedback, Some(json!({ "kind": "instruction", "text": "check io" }))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(ack["status"], "awaiting_feedback");

    let (last, rest) = advice.split_last().unwrap();
    for a in rest {
        let (status, ack) = call(&app, "POST", &feedback, Some(json!({ "kind": "reject", "advice_id": a }))).await;
        assert_eq!(status, StatusCode::ACCEPTED);
        assert_eq!(ack["status"], "awaiting_feedback");
    }
    let (status, ack) = call(&app, "POST", &feedback, Some(json!({ "kind": "approve", "advice_id": last }))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(ack["status"], "done");

    let state = settle(&app, &id).await;
    assert_eq!(state["status"], "done");
    let decided = state["report"]["advice"].as_array().unwrap();
    assert_eq!(decided.last().unwrap()["status"], "confirmed");

    let (status, _) = call(&app, "POST", &feedback, Some(json!({ "kind": "approve", "advice_id": last }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = call(&app, "POST", &feedback, Some(json!({ "kind": "instruction", "text": "more" }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn kb_view_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    let kb_path = dir.path().join("kb.json");
    KnowledgeBase::seed().save(&kb_path).unwrap();
    let mut cfg = config(dir.path());
    cfg.kb_path = Some(kb_path.clone());
    let (_, app) = app(cfg);

    let (status, before) = call(&app, "GET", "/api/kb", None).await;
    assert_eq!(status, StatusCode::OK);
    let n = before["segments"].as_array().unwrap().len();
    assert_eq!(n, KnowledgeBase::seed().len());

    let mut kb = KnowledgeBase::seed();
    kb.insert(ExperienceSegment {
        name: "replica_lag_from_long_transactions".into(),
        content: "Replica lag grows while a long transaction holds the apply thread.".into(),
        metrics: vec!["active_sessions".into()],
        steps: "Find the oldest open transaction and its start time.".into(),
        provenance: vec!["test".into()],
    })
    .unwrap();
    kb.save(&kb_path).unwrap();

    let (status, after) = call(&app, "POST", "/api/kb/reload", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(after["segments"].as_array().unwrap().len(), n + 1);
    assert_ne!(after["fingerprint"], before["fingerprint"]);
    assert_eq!(call(&app, "GET", "/api/kb", None).await.1, after);
}

#[tokio::test]
async fn scenario_listing() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app(config(dir.path()));
    let (status, body) = call(&app, "GET", "/api/scenarios", None).await;
    assert_eq!(status, StatusCode::OK);
    let labels: Vec<&str> = body["scenarios"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["label"].as_str().unwrap())
        .collect();
    assert_eq!(labels.len(), 11);
    assert!(labels.contains(&"LOCK_CONTENTION"));
}

#[tokio::test]
async fn bearer_token_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.server.token = Some("s3cret".into());
    let (_, app) = app(cfg);
    assert_eq!(call_raw(&app, "GET", "/api/kb", None, None).await.0, StatusCode::UNAUTHORIZED);
    assert_eq!(call_raw(&app, "GET", "/api/kb", None, Some("wrong")).await.0, StatusCode::UNAUTHORIZED);
    assert_eq!(call_raw(&app, "GET", "/api/kb", None, Some("s3cret")).await.0, StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread")]
async fn responses_match_published_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let (_, app) = app(config(dir.path()));
    let (_, schemas) = call(&app, "GET", "/api/schemas", None).await;
    let check = |name: &str, instance: &Value| {
        let compiled = jsonschema::JSONSchema::compile(&schemas[name]).unwrap_or_else(|e| panic!("{name}: {e}"));
        let errors: Vec<String> = match compiled.validate(instance) {
            Ok(()) => Vec::new(),
            Err(errors) => errors.map(|e| e.to_string()).collect(),
        };
        assert!(errors.is_empty(), "{name} rejects {instance}: {errors:?}");
    };

    check("CreateSessionRequest", &json!({ "scenario": "CPU_CONTENTION", "mode": "multi_agent" }));
    check("FeedbackRequest", &json!({ "kind": "approve", "advice_id": "A1" }));
    for mode in ["tree", "multi_agent"] {
        let id = start(&app, "CPU_CONTENTION", mode).await;
        let state = settle(&app, &id).await;
        check("SessionState", &state);
        let text = call_raw(&app, "GET", &format!("/api/sessions/{id}/events?from=0&follow=false"), None, None).await.1;
        for event in sse_events(&text) {
            check("Event", &event);
        }
        let (_, ack) = call(
            &app,
            "POST",
            &format!("/api/sessions/{id}/feedback"),
            Some(json!({ "kind": "instruction", "text": "noted" })),
        )
        .await;
        if let Some(advice) = state["report"]["advice"][0]["id"].as_str() {
            check("FeedbackAck", &ack);
            let (_, ack) = call(
                &app,
                "POST",
                &format!("/api/sessions/{id}/feedback"),
                Some(json!({ "kind": "reject", "advice_id": advice })),
            )
            .await;
            check("FeedbackAck", &ack);
        } else {
            check("Error", &ack);
        }
        let (_, replay) = call(&app, "POST", &format!("/api/sessions/{id}/replay"), None).await;
        check("ReplayOutcome", &replay);
    }
    check("SessionList", &call(&app, "GET", "/api/sessions", None).await.1);
    check("KbView", &call(&app, "GET", "/api/kb", None).await.1);
    check("ScenarioList", &call(&app, "GET", "/api/scenarios", None).await.1);
    check("Error", &call(&app, "GET", "/api/sessions/missing", None).await.1);
}

#[tokio::test(flavor = "multi_thread")]
async fn replay_is_identical_and_flags_kb_drift() {
    let dir = tempfile::tempdir().unwrap();
    let kb_path = dir.path().join("kb.json");
    KnowledgeBase::seed().save(&kb_path).unwrap();
    let mut cfg = config(dir.path());
    cfg.kb_path = Some(kb_path.clone());
    let (_, app) = app(cfg);

    for (scenario, mode) in [("MISSING_INDEXES", "tree"), ("CPU_CONTENTION", "multi_agent"), ("LOCK_CONTENTION", "multi_agent")] {
        let id = start(&app, scenario, mode).await;
        settle(&app, &id).await;
        let (status, outcome) = call(&app, "POST", &format!("/api/sessions/{id}/replay"), None).await;
        assert_eq!(status, StatusCode::OK, "{outcome}");
        assert_eq!(outcome["report_identical"], true, "{scenario}: {outcome}");
        assert_eq!(outcome["trace_identical"], true, "{scenario}: {outcome}");
        assert_eq!(outcome["expected_hash"], outcome["actual_hash"]);
        assert!(outcome.get("kb_warning").is_none());
    }

    let id = start(&app, "IO_CONTENTION", "tree").await;
    settle(&app, &id).await;
    let mut kb = KnowledgeBase::seed();
    kb.insert(ExperienceSegment {
        name: "disk_queue_depth".into(),
        content: "Deep device queues slow every read.".into(),
        metrics: vec!["disk_io_util".into()],
        steps: "Compare queue depth with device utilisation.".into(),
        provenance: vec!["test".into()],
    })
    .unwrap();
    kb.save(&kb_path).unwrap();
    call(&app, "POST", "/api/kb/reload", None).await;
    let (_, outcome) = call(&app, "POST", &format!("/api/sessions/{id}/replay"), None).await;
    assert!(outcome["kb_warning"].is_string(), "{outcome}");
}

#[tokio::test(flavor = "multi_thread")]
async fn instructions_queued_during_a_run_are_replayed() {
    let dir = tempfile::tempdir().unwrap();
    let (state, app) = app(config(dir.path()));
    // Registered but not started, so the instruction is queued before the
    // first boundary.
    let (session, created) = state
        .create_session(&dbdiag::session::CreateSessionRequest {
            scenario: "WORKLOAD_CONTENTION".into(),
            mode: dbdiag::store::SessionMode::MultiAgent,
            idempotency_key: None,
        })
        .unwrap();
    assert!(created);
    let id = session.id();
    let (status, ack) = call(
        &app,
        "POST",
        &format!("/api/sessions/{id}/feedback"),
        Some(json!({ "kind": "instruction", "text": "Look at the memory side first." })),
    )
    .await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(ack["status"], "running");
    let st = state.clone();
    tokio::task::spawn_blocking(move || dbdiag::session::run_session(&st, &session))
        .await
        .unwrap();
    let view = settle(&app, &id).await;
    let entries = view["record"]["record"]["entries"].as_array().unwrap();
    assert!(
        entries
            .iter()
            .any(|e| e["message"]["role"] == "human" && e["message"]["content"] == "Look at the memory side first."),
        "{entries:?}"
    );
    let (_, outcome) = call(&app, "POST", &format!("/api/sessions/{id}/replay"), None).await;
    assert_eq!(outcome["report_identical"], true, "{outcome}");
    assert_eq!(outcome["trace_identical"], true, "{outcome}");
}

#[tokio::test]
async fn restart_aborts_interrupted_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let id = {
        let state = AppState::new(config(dir.path())).unwrap();
        let (session, _) = state
            .create_session(&dbdiag::session::CreateSessionRequest {
                scenario: "CPU_CONTENTION".into(),
                mode: dbdiag::store::SessionMode::Tree,
                idempotency_key: Some("again".into()),
            })
            .unwrap();
        session.id()
    };
    let (_, app) = app(config(dir.path()));
    let (status, view) = call(&app, "GET", &format!("/api/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(view["status"], "aborted");
    assert!(view["error"].as_str().unwrap().contains("restart"));
    let text = call_raw(&app, "GET", &format!("/api/sessions/{id}/events?from=0"), None, None).await.1;
    let events = sse_events(&text);
    assert_eq!(events.last().unwrap()["data"]["status"], "aborted");
    // The key still maps to the old session.
    let (status, again) =
        call(&app, "POST", "/api/sessions", Some(json!({ "scenario": "CPU_CONTENTION", "idempotency_key": "again" }))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(again["id"], id.as_str());
}
