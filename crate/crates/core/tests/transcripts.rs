//! Checked-in scripted transcripts. A fresh recording against the simulated
//! DBA must match the files byte for byte; set DBDIAG_BLESS=1 to rewrite them.

use std::fs;
use std::path::{Path, PathBuf};

use dbdiag_core::causes::CauseLabel;
use dbdiag_core::engine::Engine;
use dbdiag_core::eval::{builtin_transcript_dir, diagnose_scenario, run_scripted_benchmark, scenario_input, EvalMethod};
use dbdiag_core::retrieval::AnomalyQuery;
use dbdiag_core::llm::{BackendScript, RecordingBackend, ScriptedBackend};
use dbdiag_core::prompt_gen::{score_candidate, DiagnosisSample, PromptCandidate};
use dbdiag_core::sim::SimulatedDba;
use dbdiag_core::toolbox::{builtin_scenarios, AnomalyScenario, Toolbox};

fn record(method: EvalMethod, engine: &Engine, scenario: &AnomalyScenario) -> String {
    let recorder = RecordingBackend::new(SimulatedDba::new());
    diagnose_scenario(method, engine, &recorder, scenario).unwrap();
    serde_json::to_string_pretty(&recorder.script()).unwrap() + "\n"
}

fn check_dir(dir: &Path, method: EvalMethod, engine: &Engine) {
    let bless = std::env::var("DBDIAG_BLESS").is_ok_and(|v| v == "1");
    for scenario in builtin_scenarios() {
        let path = dir.join(format!("{}.json", scenario.label.as_str()));
        let fresh = record(method, engine, &scenario);
        if bless {
            fs::create_dir_all(dir).unwrap();
            fs::write(&path, &fresh).unwrap();
            continue;
        }
        let stored = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(stored, fresh, "{} drifted; rerun with DBDIAG_BLESS=1", path.display());
    }
}

fn metric_only_dir() -> PathBuf {
    builtin_transcript_dir().join("metric_only_prompt")
}

#[test]
fn stored_transcripts_match_fresh_recordings() {
    let dir = builtin_transcript_dir();
    check_dir(&dir.join("full"), EvalMethod::Full, &Engine::default());
    check_dir(&dir.join("baseline"), EvalMethod::Baseline, &Engine::default());
    let metric_only = Engine::default().with_template(PromptCandidate::metric_only_template());
    check_dir(&metric_only_dir(), EvalMethod::Full, &metric_only);
}

#[test]
fn scripted_replay_reproduces_matrix() {
    let scenarios = builtin_scenarios();
    let engine = Engine::default();
    let full = run_scripted_benchmark(EvalMethod::Full, &scenarios, &engine, &builtin_transcript_dir()).unwrap();
    assert_eq!(full.legality_rate, 1.0);
    assert_eq!(full.successes().len(), 9);
    assert!(!full.successes().contains(&CauseLabel::LockContention));
}

#[test]
fn candidate_scores_from_transcripts() {
    let scenarios = builtin_scenarios();
    let samples: Vec<DiagnosisSample> = scenarios
        .iter()
        .map(|s| DiagnosisSample {
            anomaly: AnomalyQuery::new(s.description.clone(), Vec::new(), s.window),
            ground_truth_causes: vec![s.label.as_str().to_string()],
            reference_solution: String::new(),
        })
        .collect();
    let score = |candidate: PromptCandidate, dir: PathBuf| {
        let engine = Engine::default().with_template(candidate.clone());
        score_candidate(&candidate, &samples, |_, sample| {
            let scenario = scenarios
                .iter()
                .find(|s| s.description == sample.anomaly.text)
                .unwrap();
            let script = BackendScript::load(&dir.join(format!("{}.json", scenario.label.as_str())))
                .map_err(|e| e.to_string())?;
            let toolbox = Toolbox::for_scenario(scenario).unwrap();
            let run = engine
                .diagnose(&ScriptedBackend::new(script), &toolbox, &scenario_input(scenario), Vec::new(), None)
                .map_err(|e| e.to_string())?;
            Ok::<_, String>(run.report.cause_labels())
        })
        .unwrap()
    };
    let a = score(PromptCandidate::default_template(), builtin_transcript_dir().join("full"));
    let b = score(PromptCandidate::metric_only_template(), metric_only_dir());
    assert!((a - 9.0 / 11.0).abs() < 1e-12, "{a}");
    assert!((b - 4.0 / 11.0).abs() < 1e-12, "{b}");
    assert!(a > b);
}
