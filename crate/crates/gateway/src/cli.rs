//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dbdiag_core::engine::{DiagnosisInput, Engine};
use dbdiag_core::eval::{self, EvalMethod, EvalRun};
use dbdiag_core::knowledge::{ingest, IngestConfig};
use dbdiag_core::llm::{ChatBackend, ChatConfig, ScriptedBackend};
use dbdiag_core::prompt_gen::{
    propose_candidates, score_candidate, select_template, CandidateStore, DiagnosisSample, PromptGenConfig,
};
use dbdiag_core::retrieval::AnomalyQuery;
use dbdiag_core::sim::SimulatedDba;
use dbdiag_core::toolbox::scenario::{find_scenario, load_scenario_dir};
use dbdiag_core::toolbox::{AnomalyScenario, Toolbox};

use crate::config::{parse_backend, Config};
use crate::session::{replay, AppState};
use crate::store::SessionMode;

#[derive(Debug, Parser)]
#[command(name = "dbdiag", version, about = "Root-cause diagnosis for database performance anomalies")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, env = "DBDIAG_CONFIG")]
    pub config: Option<PathBuf>,
    /// Chat backend: simulated, scripted[:path] or live[:model].
    #[arg(long, global = true)]
    pub backend: Option<String>,
    /// Knowledge base file (JSON).
    #[arg(long, global = true)]
    pub kb: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Tree,
    MultiAgent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Full,
    Baseline,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract experience from maintenance documents into a knowledge base.
    Ingest {
        /// Markdown or text files, or directories of them.
        #[arg(required = true)]
        docs: Vec<PathBuf>,
        /// Output KB; defaults to --kb, else kb.json.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Start from an empty KB instead of the current one.
        #[arg(long)]
        fresh: bool,
        #[arg(long, default_value_t = 1000)]
        max_chunk_tokens: usize,
    },
    /// Propose, score and select diagnosis prompt templates.
    PromptGen {
        #[arg(long, default_value_t = 5)]
        pairs: usize,
        #[arg(long, default_value_t = 20)]
        candidates: usize,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        /// Candidate store to write (and to read approvals from).
        #[arg(long, default_value = "candidates.json")]
        out: PathBuf,
        /// Mark candidate ids as approved before selecting.
        #[arg(long)]
        approve: Vec<String>,
    },
    /// Diagnose one scenario.
    Diagnose {
        /// Scenario label, e.g. CPU_CONTENTION.
        #[arg(long)]
        scenario: String,
        #[arg(long, value_enum, default_value_t = ModeArg::Tree)]
        mode: ModeArg,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
        /// Print tree nodes and chat messages as they happen.
        #[arg(long)]
        follow: bool,
        /// Save the backend exchanges as a replayable script.
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Run the benchmark and print the legality/success matrix.
    Eval {
        #[arg(long, value_enum, default_value_t = MethodArg::Full)]
        method: MethodArg,
        /// Scenario fixtures directory; the built-in set by default.
        #[arg(long)]
        scenarios: Option<PathBuf>,
        /// Transcript root for the scripted backend.
        #[arg(long)]
        transcripts: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Re-run a stored session against its transcript and compare.
    Replay {
        session: String,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
}

pub fn load_config(cli: &Cli) -> Result<Config> {
    let mut config = Config::load(cli.config.as_deref())?;
    if let Some(spec) = &cli.backend {
        let live = match &config.backend {
            ChatConfig::Live(l) => Some(l.clone()),
            _ => None,
        };
        config.backend = parse_backend(spec, live.as_ref())?;
    }
    if let Some(kb) = &cli.kb {
        config.kb_path = Some(kb.clone());
    }
    Ok(config)
}

pub fn run(cli: Cli) -> Result<()> {
    let mut config = load_config(&cli)?;
    match cli.command {
        Command::Ingest {
            docs,
            out,
            fresh,
            max_chunk_tokens,
        } => cmd_ingest(&config, &docs, out, fresh, max_chunk_tokens),
        Command::PromptGen {
            pairs,
            candidates,
            top_k,
            out,
            approve,
        } => cmd_prompt_gen(&config, pairs, candidates, top_k, &out, &approve),
        Command::Diagnose {
            scenario,
            mode,
            json,
            follow,
            record,
        } => cmd_diagnose(&config, &scenario, mode, json, follow, record.as_deref()),
        Command::Eval {
            method,
            scenarios,
            transcripts,
            out,
        } => cmd_eval(&config, method, scenarios, transcripts, out.as_deref()),
        Command::Serve { bind, data_dir } => {
            if let Some(bind) = bind {
                config.server.bind = bind;
            }
            if let Some(dir) = data_dir {
                config.data_dir = dir;
            }
            cmd_serve(config)
        }
        Command::Replay { session, data_dir } => {
            if let Some(dir) = data_dir {
                config.data_dir = dir;
            }
            cmd_replay(config, &session)
        }
    }
}

fn collect_docs(paths: &[PathBuf]) -> Result<Vec<(String, String)>> {
    let mut files = Vec::new();
    for path in paths {
        if path.is_dir() {
            let mut inner: Vec<PathBuf> = fs::read_dir(path)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "md" || x == "txt"))
                .collect();
            inner.sort();
            files.extend(inner);
        } else {
            files.push(path.clone());
        }
    }
    files
        .into_iter()
        .map(|p| {
            let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            let name = p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
            Ok((name, text))
        })
        .collect()
}

fn cmd_ingest(config: &Config, docs: &[PathBuf], out: Option<PathBuf>, fresh: bool, max_chunk_tokens: usize) -> Result<()> {
    let documents = collect_docs(docs)?;
    let backend = config.chat_backend()?;
    let engine = config.engine()?;
    let mut kb = if fresh { Default::default() } else { engine.kb.clone() };
    let ingest_config = IngestConfig {
        max_chunk_tokens,
        ..IngestConfig::default()
    };
    let report = ingest(&documents, &ingest_config, backend.as_ref(), &engine.embedder, &mut kb)?;
    let out = out
        .or_else(|| config.kb_path.clone())
        .unwrap_or_else(|| PathBuf::from("kb.json"));
    kb.save(&out)?;
    println!(
        "{} chunks in {} groups; added {} segments, dropped {}; KB now has {} segments -> {}",
        report.chunks.len(),
        report.groups.len(),
        report.added.len(),
        report.dropped.len(),
        kb.len(),
        out.display()
    );
    for name in &report.added {
        println!("  + {name}");
    }
    for reason in &report.dropped {
        println!("  - {reason}");
    }
    Ok(())
}

fn samples_for(scenarios: &[AnomalyScenario]) -> Vec<DiagnosisSample> {
    scenarios
        .iter()
        .map(|s| DiagnosisSample {
            anomaly: AnomalyQuery::new(s.description.clone(), Vec::new(), s.window),
            ground_truth_causes: vec![s.label.as_str().to_string()],
            reference_solution: format!("Root cause: {}", s.label.as_str()),
        })
        .collect()
}

fn cmd_prompt_gen(
    config: &Config,
    pairs: usize,
    candidates: usize,
    top_k: usize,
    out: &Path,
    approve: &[String],
) -> Result<()> {
    let backend = config.chat_backend()?;
    let scenarios = config.scenarios()?;
    let samples = samples_for(&scenarios);
    let pg = PromptGenConfig {
        pairs_per_prompt: pairs,
        n_candidates: candidates,
        top_k,
        ..PromptGenConfig::default()
    };
    let mut proposed = propose_candidates(&samples, &pg, backend.as_ref())?;
    let base = config.engine()?;
    for candidate in &mut proposed {
        let engine = Engine::new(base.kb.clone())
            .with_embedder(config.embedder.clone())
            .with_config(base.config)
            .with_template(candidate.clone());
        let score = score_candidate(candidate, &samples, |_, sample| {
            let scenario = scenarios
                .iter()
                .find(|s| s.description == sample.anomaly.text)
                .context("sample without scenario")?;
            let toolbox = Toolbox::for_scenario(scenario)?.with_detector(config.detector);
            let input = DiagnosisInput {
                description: scenario.description.clone(),
                window: scenario.window,
            };
            let run = engine.diagnose(backend.as_ref(), &toolbox, &input, Vec::new(), None)?;
            anyhow::Ok(run.report.cause_labels())
        })?;
        candidate.score = Some(score);
    }
    let mut store = if out.exists() { CandidateStore::load(out)? } else { CandidateStore::default() };
    store.upsert(proposed);
    for id in approve {
        store.approve(id, true)?;
    }
    let selection = select_template(&store.candidates, top_k)?;
    store.candidates = selection.retained.clone();
    store.save(out)?;
    println!("{:<10} {:>6} {:>9}", "candidate", "score", "approved");
    for c in &selection.retained {
        println!(
            "{:<10} {:>6.3} {:>9}",
            c.id,
            c.score.unwrap_or(f64::NAN),
            if c.human_approved { "yes" } else { "no" }
        );
    }
    println!("selected: {} -> {}", selection.selected.id, out.display());
    Ok(())
}

fn cmd_diagnose(
    config: &Config,
    scenario: &str,
    mode: ModeArg,
    json: bool,
    follow: bool,
    record: Option<&Path>,
) -> Result<()> {
    let scenarios = config.scenarios()?;
    let scenario = find_scenario(&scenarios, scenario)?;
    let engine = config.engine()?;
    let backend = config.chat_backend()?;
    let recorder = dbdiag_core::llm::RecordingBackend::new(backend);
    let toolbox = Toolbox::for_scenario(scenario)?.with_detector(config.detector);
    let input = DiagnosisInput {
        description: scenario.description.clone(),
        window: scenario.window,
    };
    let on_node = |node: &dbdiag_core::planner::DiagnosisNode| {
        if follow {
            let action = node.action.as_ref().map(|a| a.describe()).unwrap_or_default();
            eprintln!("[node {}] {:?} w={} n={} {}", node.id, node.status, node.w, node.n, action);
        }
    };
    let report = match mode {
        ModeArg::Tree => engine.diagnose(&recorder, &toolbox, &input, Vec::new(), Some(&on_node))?.report,
        ModeArg::MultiAgent => {
            let on_event = |e: &dbdiag_core::agents::TeamEvent| {
                if !follow {
                    return;
                }
                match e {
                    dbdiag_core::agents::TeamEvent::Message(entry) if entry.message.role.is_agent() => {
                        eprintln!("[{}] {}", entry.message.role, entry.message.content.replace('\n', " | "))
                    }
                    dbdiag_core::agents::TeamEvent::Rejected(r) => eprintln!("[rejected {}] {}", r.speaker, r.reason),
                    dbdiag_core::agents::TeamEvent::Scheduled { choice, .. } => {
                        eprintln!("[chief] {:?} ({})", choice.next, choice.rationale)
                    }
                    _ => {}
                }
            };
            let hooks = dbdiag_core::agents::TeamHooks {
                feedback: None,
                on_event: Some(&on_event),
                on_node: Some(&on_node),
            };
            dbdiag_core::agents::run_team(
                &engine,
                &recorder,
                &toolbox,
                &input,
                dbdiag_core::agents::Roster::default(),
                &config.caps.team(),
                &hooks,
            )?
            .report
        }
    };
    if let Some(path) = record {
        recorder.script().save(path)?;
    }
    if json {
        print!("{}", report.to_json());
    } else {
        print!("{}", report.render_text());
    }
    Ok(())
}

fn cmd_eval(
    config: &Config,
    method: MethodArg,
    scenario_dir: Option<PathBuf>,
    transcripts: Option<PathBuf>,
    out: Option<&Path>,
) -> Result<()> {
    let scenarios = match scenario_dir.or_else(|| config.scenario_dir.clone()) {
        Some(dir) => load_scenario_dir(&dir)?,
        None => config.scenarios()?,
    };
    let engine = config.engine()?;
    let method = match method {
        MethodArg::Full => EvalMethod::Full,
        MethodArg::Baseline => EvalMethod::Baseline,
    };
    let run: EvalRun = match &config.backend {
        ChatConfig::Scripted { script_path } => {
            let dir = transcripts
                .or_else(|| (!script_path.as_os_str().is_empty()).then(|| script_path.clone()))
                .or_else(|| config.transcript_dir.clone())
                .unwrap_or_else(eval::builtin_transcript_dir);
            eval::run_scripted_benchmark(method, &scenarios, &engine, &dir)?
        }
        ChatConfig::Simulated => eval::run_benchmark(method, &scenarios, &engine, |_| {
            Ok((Box::new(SimulatedDba::new()) as Box<dyn ChatBackend>, None))
        })?,
        ChatConfig::Live(_) => {
            let backend = config.chat_backend()?;
            eval::run_benchmark(method, &scenarios, &engine, |_| {
                Ok((Box::new(backend.clone()) as Box<dyn ChatBackend>, None))
            })?
        }
    };
    print!("{}", eval::render_matrix(&[&run]));
    if let Some(out) = out {
        fs::write(out, serde_json::to_string_pretty(&run)? + "\n")?;
    }
    Ok(())
}

fn cmd_serve(config: Config) -> Result<()> {
    let bind = config.server.bind.clone();
    let state = Arc::new(AppState::new(config)?);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&bind).await.with_context(|| format!("binding {bind}"))?;
        tracing::info!(%bind, "serving");
        println!("listening on {}", listener.local_addr()?);
        axum::serve(listener, crate::server::router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        anyhow::Ok(())
    })
}

fn cmd_replay(config: Config, session: &str) -> Result<()> {
    let state = AppState::new(config)?;
    let outcome = replay(&state, session).map_err(|e| anyhow::anyhow!("{e}"))?;
    println!("{}", serde_json::to_string_pretty(&outcome)?);
    if let Some(w) = &outcome.kb_warning {
        eprintln!("warning: {w}");
    }
    if !outcome.identical() {
        bail!("replay of {session} differs from the recorded run");
    }
    Ok(())
}

impl From<ModeArg> for SessionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Tree => SessionMode::Tree,
            ModeArg::MultiAgent => SessionMode::MultiAgent,
        }
    }
}

/// Scripted backend over a single file; kept for callers that want one
/// without going through the config.
pub fn scripted(path: &Path) -> Result<ScriptedBackend> {
    Ok(ScriptedBackend::load(path)?)
}
