//! Benchmark over the single-cause scenarios: legality and success per
//! scenario for the full method and the metrics-only baseline.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::causes::{normalize_cause, CauseLabel};
use crate::engine::{DiagnosisInput, Engine, EngineError};
use crate::knowledge::KnowledgeBase;
use crate::llm::{BackendScript, ChatBackend, LlmError, ScriptedBackend};
use crate::report::DiagnosisReport;
use crate::toolbox::catalog::VIEW_FIELDS;
use crate::toolbox::{AnomalyScenario, EnvError, MetricCatalog, Toolbox};
use crate::tools::ToolSpec;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no scenarios to evaluate")]
    NoScenarios,
    #[error("missing transcript {0}")]
    MissingTranscript(PathBuf),
    #[error("scenario {label}: {source}")]
    Env { label: CauseLabel, source: EnvError },
    #[error("scenario {label}: {source}")]
    Engine { label: CauseLabel, source: EngineError },
    #[error(transparent)]
    Backend(#[from] LlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMethod {
    Full,
    Baseline,
}

impl EvalMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Baseline => "baseline",
        }
    }
}

/// Names a report may cite: metrics, tools, view columns and experience
/// names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocabulary {
    pub metrics: BTreeSet<String>,
    pub tools: BTreeSet<String>,
    pub other: BTreeSet<String>,
}

impl Vocabulary {
    pub fn new(catalog: &MetricCatalog, registry: &[ToolSpec], kb: &KnowledgeBase) -> Self {
        Self {
            metrics: catalog.names().map(str::to_string).collect(),
            tools: registry.iter().map(|t| t.name.clone()).collect(),
            other: VIEW_FIELDS
                .iter()
                .map(|s| s.to_string())
                .chain(kb.names().map(str::to_string))
                .collect(),
        }
    }

    pub fn contains(&self, token: &str) -> bool {
        self.metrics.contains(token) || self.tools.contains(token) || self.other.contains(token)
    }
}

fn snake_token() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b[a-z][a-z0-9]*(?:_[a-z0-9]+)+\b").expect("valid regex"))
}

/// Lowercase identifiers with underscores; these are treated as citations
/// of metrics, tools or fields.
pub fn cited_identifiers(text: &str) -> Vec<&str> {
    snake_token().find_iter(text).map(|m| m.as_str()).collect()
}

/// A report is legal when it survives a JSON round trip, names a cause or
/// states clearly that none was found, and cites only known metrics, tools
/// and fields.
pub fn judge_legality(report: &DiagnosisReport, vocabulary: &Vocabulary) -> bool {
    let parses = serde_json::from_str::<DiagnosisReport>(&report.to_json()).is_ok_and(|r| &r == report);
    let states_something = !report.causes.is_empty() || report.conclusion.starts_with("No root cause");
    let metrics_known = report.abnormal_metrics.iter().all(|m| vocabulary.metrics.contains(m));
    let tools_known = report.tools_used.iter().all(|t| vocabulary.tools.contains(t));
    let text_known = [report.conclusion.as_str(), report.analysis.as_str()]
        .into_iter()
        .chain(report.causes.iter().map(|c| c.label.as_str()))
        .flat_map(cited_identifiers)
        .all(|t| vocabulary.contains(t));
    parses && states_something && metrics_known && tools_known && text_known && !report.conclusion.trim().is_empty()
}

/// The ground-truth label is among the reported causes after normalization.
pub fn judge_success(report: &DiagnosisReport, truth: &str) -> bool {
    let truth = normalize_cause(truth);
    report.cause_labels().contains(&truth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioOutcome {
    pub label: CauseLabel,
    pub legal: bool,
    pub success: bool,
    pub causes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub method: EvalMethod,
    pub outcomes: Vec<ScenarioOutcome>,
    pub legality_rate: f64,
    pub success_rate: f64,
}

impl EvalRun {
    pub fn from_outcomes(method: EvalMethod, outcomes: Vec<ScenarioOutcome>) -> Self {
        let n = outcomes.len().max(1) as f64;
        let legality_rate = outcomes.iter().filter(|o| o.legal).count() as f64 / n;
        let success_rate = outcomes.iter().filter(|o| o.success).count() as f64 / n;
        Self {
            method,
            outcomes,
            legality_rate,
            success_rate,
        }
    }

    pub fn successes(&self) -> BTreeSet<CauseLabel> {
        self.outcomes.iter().filter(|o| o.success).map(|o| o.label).collect()
    }

    pub fn outcome(&self, label: CauseLabel) -> Option<&ScenarioOutcome> {
        self.outcomes.iter().find(|o| o.label == label)
    }
}

/// Where a method's checked-in transcript for `label` lives.
pub fn transcript_path(dir: &Path, method: EvalMethod, label: CauseLabel) -> PathBuf {
    dir.join(method.as_str()).join(format!("{}.json", label.as_str()))
}

/// Transcript directory shipped with the crate.
pub fn builtin_transcript_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/transcripts")
}

pub fn scenario_input(scenario: &AnomalyScenario) -> DiagnosisInput {
    DiagnosisInput {
        description: scenario.description.clone(),
        window: scenario.window,
    }
}

/// Runs one method on one scenario.
pub fn diagnose_scenario(
    method: EvalMethod,
    engine: &Engine,
    backend: &dyn ChatBackend,
    scenario: &AnomalyScenario,
) -> Result<DiagnosisReport, EvalError> {
    let toolbox = Toolbox::for_scenario(scenario).map_err(|source| EvalError::Env {
        label: scenario.label,
        source,
    })?;
    let input = scenario_input(scenario);
    let result = match method {
        EvalMethod::Full => engine.diagnose(backend, &toolbox, &input, Vec::new(), None).map(|run| run.report),
        EvalMethod::Baseline => engine.baseline(backend, &toolbox, &input),
    };
    result.map_err(|source| EvalError::Engine {
        label: scenario.label,
        source,
    })
}

pub fn judge(report: &DiagnosisReport, label: CauseLabel, vocabulary: &Vocabulary) -> ScenarioOutcome {
    let legal = judge_legality(report, vocabulary);
    ScenarioOutcome {
        label,
        legal,
        // Success requires legality so that success ⇒ legal holds by construction.
        success: legal && judge_success(report, label.as_str()),
        causes: report.cause_labels(),
        transcript: None,
    }
}

/// One diagnosis per scenario with the backend `backend_for` supplies.
pub fn run_benchmark(
    method: EvalMethod,
    scenarios: &[AnomalyScenario],
    engine: &Engine,
    mut backend_for: impl FnMut(&AnomalyScenario) -> Result<(Box<dyn ChatBackend>, Option<String>), EvalError>,
) -> Result<EvalRun, EvalError> {
    if scenarios.is_empty() {
        return Err(EvalError::NoScenarios);
    }
    let mut outcomes = Vec::new();
    for scenario in scenarios {
        let (backend, transcript) = backend_for(scenario)?;
        let report = diagnose_scenario(method, engine, backend.as_ref(), scenario)?;
        let vocabulary = Vocabulary::new(
            &MetricCatalog::default(),
            &crate::toolbox::builtin_registry(),
            &engine.kb,
        );
        let mut outcome = judge(&report, scenario.label, &vocabulary);
        outcome.transcript = transcript;
        outcomes.push(outcome);
    }
    Ok(EvalRun::from_outcomes(method, outcomes))
}

/// Replays the checked-in transcripts under `dir`.
pub fn run_scripted_benchmark(
    method: EvalMethod,
    scenarios: &[AnomalyScenario],
    engine: &Engine,
    dir: &Path,
) -> Result<EvalRun, EvalError> {
    run_benchmark(method, scenarios, engine, |scenario| {
        let path = transcript_path(dir, method, scenario.label);
        if !path.exists() {
            return Err(EvalError::MissingTranscript(path));
        }
        let script = BackendScript::load(&path)?;
        Ok((Box::new(ScriptedBackend::new(script)), Some(path.display().to_string())))
    })
}

/// Text matrix: one row per scenario, a legal and an accurate column per
/// method, rates at the bottom.
pub fn render_matrix(runs: &[&EvalRun]) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<22}", "");
    for run in runs {
        let _ = write!(out, " | {:^13}", run.method.as_str());
    }
    out.push('\n');
    let _ = write!(out, "{:<22}", "scenario");
    for _ in runs {
        let _ = write!(out, " | {:^5} {:^7}", "legal", "success");
    }
    out.push('\n');
    let labels: Vec<CauseLabel> = runs
        .first()
        .map(|r| r.outcomes.iter().map(|o| o.label).collect())
        .unwrap_or_default();
    let dot = |b: bool| if b { "●" } else { "·" };
    for label in labels {
        let _ = write!(out, "{:<22}", label.as_str());
        for run in runs {
            let (legal, success) = run.outcome(label).map_or(("-", "-"), |o| (dot(o.legal), dot(o.success)));
            let _ = write!(out, " | {legal:^5} {success:^7}");
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<22}", "rate");
    for run in runs {
        let _ = write!(out, " | {:^5.2} {:^7.2}", run.legality_rate, run.success_rate);
    }
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::DiagnosisMethod;

    fn vocab() -> Vocabulary {
        Vocabulary::new(&MetricCatalog::default(), &crate::toolbox::builtin_registry(), &KnowledgeBase::seed())
    }

    fn report(causes: &[&str], analysis: &str) -> DiagnosisReport {
        let mut r = DiagnosisReport::empty(DiagnosisMethod::Full, [0, 10]);
        for c in causes {
            r.add_cause(c, "planner", vec![]);
        }
        r.conclusion = crate::report::conclusion_for(&r.causes, [0, 10]);
        r.analysis = analysis.into();
        r
    }

    #[test]
    fn legality_clauses() {
        let v = vocab();
        assert!(judge_legality(&report(&["MISSING_INDEXES"], "seq_scans_per_s is abnormal"), &v));
        assert!(!judge_legality(&report(&["MISSING_INDEXES"], "quantum_flux is abnormal"), &v));
        let mut empty = report(&[], "");
        empty.conclusion.clear();
        assert!(!judge_legality(&empty, &v));
        assert!(judge_legality(&report(&[], "nothing found"), &v));
    }

    #[test]
    fn success_is_membership() {
        let r = report(&["MISSING_INDEXES", "cpu contention"], "");
        assert!(judge_success(&r, "MISSING_INDEXES"));
        assert!(judge_success(&r, "CPU_CONTENTION"));
        let r = report(&["high number of running processes"], "");
        assert!(!judge_success(&r, "INSERT_LARGE_DATA"));
    }

    #[test]
    fn rates_are_means() {
        let o = |label, legal, success| ScenarioOutcome {
            label,
            legal,
            success,
            causes: vec![],
            transcript: None,
        };
        let run = EvalRun::from_outcomes(
            EvalMethod::Full,
            vec![
                o(CauseLabel::CpuContention, true, true),
                o(CauseLabel::IoContention, true, false),
                o(CauseLabel::LockContention, false, false),
                o(CauseLabel::MissingIndexes, true, true),
            ],
        );
        assert_eq!(run.legality_rate, 0.75);
        assert_eq!(run.success_rate, 0.5);
        let text = render_matrix(&[&run]);
        assert!(text.contains("CPU_CONTENTION"));
    }
}
