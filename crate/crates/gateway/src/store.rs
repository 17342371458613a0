//! Session persistence: one directory per session holding an append-only
//! `events.jsonl`, plus `index.json` at the root listing every session.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use schemars::JsonSchema;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::broadcast;

use dbdiag_core::agents::TeamConfig;
use dbdiag_core::planner::TreeConfig;
use dbdiag_core::report::DiagnosisReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum SessionMode {
    Tree,
    MultiAgent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Running,
    AwaitingFeedback,
    Done,
    /// Interrupted by a restart or a backend failure.
    Aborted,
}

impl SessionStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Done | Self::Aborted)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Status,
    Schedule,
    Message,
    Rejection,
    SummaryUpdate,
    TreeNode,
    Report,
    Feedback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Event {
    /// Starts at 1 and increases by one per event.
    pub seq: u64,
    pub kind: EventKind,
    /// Unix milliseconds.
    pub at: u64,
    pub data: Value,
}

/// Index entry of one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SessionMeta {
    pub id: String,
    pub mode: SessionMode,
    pub scenario: String,
    pub status: SessionStatus,
    pub created_at: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
    pub backend: String,
    pub kb_fingerprint: String,
    pub kb_version: u64,
    #[schemars(with = "Value")]
    pub tree_config: TreeConfig,
    #[schemars(with = "Value")]
    pub team_config: TeamConfig,
    /// Hash of the report as the diagnosis produced it, before operator
    /// decisions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Operator input a replay has to feed back in the same places.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SessionInputs {
    /// `(boundary, texts)`: instructions drained at the n-th iteration
    /// boundary (0 = before the search started).
    pub instructions: Vec<(usize, Vec<String>)>,
    /// `(advice id, approve)` in decision order.
    pub decisions: Vec<(String, bool)>,
}

pub fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

struct EventLog {
    file: File,
    events: Vec<Event>,
}

/// A live session: metadata, event log and the artifacts of its run.
pub struct Session {
    pub dir: PathBuf,
    meta: Mutex<SessionMeta>,
    log: Mutex<EventLog>,
    tx: broadcast::Sender<Event>,
    pub report: Mutex<Option<DiagnosisReport>>,
    pub inputs: Mutex<SessionInputs>,
    /// Instructions waiting for the next iteration boundary.
    pub queue: Mutex<Vec<String>>,
    index: Arc<IndexWriter>,
}

impl Session {
    pub fn id(&self) -> String {
        self.meta.lock().expect("meta lock").id.clone()
    }

    pub fn meta(&self) -> SessionMeta {
        self.meta.lock().expect("meta lock").clone()
    }

    pub fn status(&self) -> SessionStatus {
        self.meta.lock().expect("meta lock").status
    }

    /// Writes and syncs the event before anyone can observe it.
    pub fn append(&self, kind: EventKind, data: Value) -> Result<Event> {
        let mut log = self.log.lock().expect("log lock");
        let event = Event {
            seq: log.events.len() as u64 + 1,
            kind,
            at: now_millis(),
            data,
        };
        let mut line = serde_json::to_string(&event)?;
        line.push('\n');
        log.file.write_all(line.as_bytes())?;
        log.file.sync_data()?;
        log.events.push(event.clone());
        let _ = self.tx.send(event.clone());
        Ok(event)
    }

    /// Events with `seq > from`.
    pub fn events_after(&self, from: u64) -> Vec<Event> {
        let log = self.log.lock().expect("log lock");
        log.events.iter().filter(|e| e.seq > from).cloned().collect()
    }

    /// A receiver for new events plus everything after `from` so far, taken
    /// atomically so nothing falls in between.
    pub fn subscribe_from(&self, from: u64) -> (Vec<Event>, broadcast::Receiver<Event>) {
        let log = self.log.lock().expect("log lock");
        let rx = self.tx.subscribe();
        let history = log.events.iter().filter(|e| e.seq > from).cloned().collect();
        (history, rx)
    }

    pub fn last_seq(&self) -> u64 {
        self.log.lock().expect("log lock").events.len() as u64
    }

    pub fn update_meta(&self, f: impl FnOnce(&mut SessionMeta)) -> Result<()> {
        let snapshot = {
            let mut meta = self.meta.lock().expect("meta lock");
            f(&mut meta);
            meta.clone()
        };
        self.index.upsert(snapshot)
    }

    /// Sets the status and logs a status event.
    pub fn set_status(&self, status: SessionStatus) -> Result<Event> {
        self.update_meta(|m| m.status = status)?;
        self.append(EventKind::Status, serde_json::json!({ "status": status }))
    }

    pub fn write_artifact<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> Result<()> {
        write_json_atomic(&self.dir.join(name), value)
    }

    pub fn write_text_artifact(&self, name: &str, text: &str) -> Result<()> {
        let path = self.dir.join(name);
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, text)?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    pub fn read_artifact<T: DeserializeOwned>(&self, name: &str) -> Result<Option<T>> {
        read_json(&self.dir.join(name))
    }

    pub fn read_text_artifact(&self, name: &str) -> Result<Option<String>> {
        let path = self.dir.join(name);
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(fs::read_to_string(path)?))
    }

    pub fn save_inputs(&self) -> Result<()> {
        let inputs = self.inputs.lock().expect("inputs lock").clone();
        self.write_artifact("inputs.json", &inputs)
    }
}

fn write_json_atomic<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(&tmp, text).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?))
}

/// Serializes writes of `index.json`.
struct IndexWriter {
    path: PathBuf,
    entries: Mutex<BTreeMap<String, SessionMeta>>,
}

impl IndexWriter {
    fn upsert(&self, meta: SessionMeta) -> Result<()> {
        let mut entries = self.entries.lock().expect("index lock");
        entries.insert(meta.id.clone(), meta);
        let list: Vec<&SessionMeta> = entries.values().collect();
        write_json_atomic(&self.path, &list)
    }
}

pub struct SessionStore {
    root: PathBuf,
    sessions: RwLock<BTreeMap<String, Arc<Session>>>,
    index: Arc<IndexWriter>,
}

impl SessionStore {
    /// Opens or creates a store. Sessions still marked running were cut off
    /// by a restart and are marked aborted; sessions awaiting feedback get
    /// their report back and stay open.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("sessions")).with_context(|| format!("creating {}", root.display()))?;
        let index_path = root.join("index.json");
        let metas: Vec<SessionMeta> = read_json(&index_path)?.unwrap_or_default();
        let index = Arc::new(IndexWriter {
            path: index_path,
            entries: Mutex::new(metas.iter().map(|m| (m.id.clone(), m.clone())).collect()),
        });
        let store = Self {
            root,
            sessions: RwLock::new(BTreeMap::new()),
            index,
        };
        for meta in metas {
            let session = store.load_session(meta)?;
            if session.status() == SessionStatus::Running {
                session.update_meta(|m| m.error = Some("interrupted by a restart".into()))?;
                session.set_status(SessionStatus::Aborted)?;
            }
            store
                .sessions
                .write()
                .expect("sessions lock")
                .insert(session.id(), Arc::new(session));
        }
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn session_dir(&self, id: &str) -> PathBuf {
        self.root.join("sessions").join(id)
    }

    fn load_session(&self, meta: SessionMeta) -> Result<Session> {
        let dir = self.session_dir(&meta.id);
        let path = dir.join("events.jsonl");
        let mut events = Vec::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for line in reader.lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<Event>(&line) {
                    Ok(e) => events.push(e),
                    // A torn last line from a crash mid-write.
                    Err(e) => tracing::warn!(session = %meta.id, error = %e, "skipping unreadable event line"),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        let report: Option<DiagnosisReport> = read_json(&dir.join("report.json"))?;
        let inputs: SessionInputs = read_json(&dir.join("inputs.json"))?.unwrap_or_default();
        let (tx, _) = broadcast::channel(1024);
        Ok(Session {
            dir,
            meta: Mutex::new(meta),
            log: Mutex::new(EventLog { file, events }),
            tx,
            report: Mutex::new(report),
            inputs: Mutex::new(inputs),
            queue: Mutex::new(Vec::new()),
            index: self.index.clone(),
        })
    }

    pub fn create(&self, meta: SessionMeta) -> Result<Arc<Session>> {
        let dir = self.session_dir(&meta.id);
        fs::create_dir_all(&dir)?;
        self.index.upsert(meta.clone())?;
        let session = Arc::new(self.load_session(meta)?);
        session.save_inputs()?;
        self.sessions
            .write()
            .expect("sessions lock")
            .insert(session.id(), session.clone());
        Ok(session)
    }

    pub fn get(&self, id: &str) -> Option<Arc<Session>> {
        self.sessions.read().expect("sessions lock").get(id).cloned()
    }

    pub fn by_idempotency_key(&self, key: &str) -> Option<Arc<Session>> {
        self.sessions
            .read()
            .expect("sessions lock")
            .values()
            .find(|s| s.meta().idempotency_key.as_deref() == Some(key))
            .cloned()
    }

    pub fn list(&self) -> Vec<SessionMeta> {
        self.sessions
            .read()
            .expect("sessions lock")
            .values()
            .map(|s| s.meta())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(id: &str) -> SessionMeta {
        SessionMeta {
            id: id.into(),
            mode: SessionMode::Tree,
            scenario: "CPU_CONTENTION".into(),
            status: SessionStatus::Running,
            created_at: 0,
            idempotency_key: Some(format!("key-{id}")),
            backend: "simulated".into(),
            kb_fingerprint: "f".into(),
            kb_version: 1,
            tree_config: TreeConfig::default(),
            team_config: TeamConfig::default(),
            report_hash: None,
            error: None,
        }
    }

    #[test]
    fn events_survive_reopen_and_running_sessions_abort() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = SessionStore::open(dir.path()).unwrap();
            let s = store.create(meta("a")).unwrap();
            s.append(EventKind::Status, serde_json::json!({"status": "running"})).unwrap();
            s.append(EventKind::Message, serde_json::json!({"text": "hi"})).unwrap();
            let done = store.create(meta("b")).unwrap();
            done.set_status(SessionStatus::Done).unwrap();
        }
        let store = SessionStore::open(dir.path()).unwrap();
        let a = store.get("a").unwrap();
        assert_eq!(a.status(), SessionStatus::Aborted);
        let seqs: Vec<u64> = a.events_after(0).iter().map(|e| e.seq).collect();
        assert_eq!(seqs, vec![1, 2, 3]);
        assert_eq!(a.events_after(2).len(), 1);
        assert_eq!(store.get("b").unwrap().status(), SessionStatus::Done);
        assert_eq!(store.by_idempotency_key("key-b").unwrap().id(), "b");
    }

    #[test]
    fn subscription_sees_later_events_only_once() {
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::open(dir.path()).unwrap();
        let s = store.create(meta("a")).unwrap();
        s.append(EventKind::Message, Value::Null).unwrap();
        let (history, mut rx) = s.subscribe_from(0);
        s.append(EventKind::Message, Value::Null).unwrap();
        assert_eq!(history.len(), 1);
        assert_eq!(rx.try_recv().unwrap().seq, 2);
    }
}
