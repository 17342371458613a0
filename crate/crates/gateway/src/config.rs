//! Service configuration: TOML file, then `DBDIAG_*` environment
//! variables, then command-line flags.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use dbdiag_core::agents::TeamConfig;
use dbdiag_core::engine::{Engine, EngineConfig};
use dbdiag_core::knowledge::KnowledgeBase;
use dbdiag_core::llm::{build_chat_backend, ChatBackend, ChatConfig, EmbedderConfig, LiveConfig};
use dbdiag_core::planner::TreeConfig;
use dbdiag_core::retrieval::RetrievalPolicy;
use dbdiag_core::toolbox::scenario::load_scenario_dir;
use dbdiag_core::toolbox::{builtin_scenarios, AnomalyScenario, DetectorConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub bind: String,
    /// Static bearer token; no auth when unset.
    pub token: Option<String>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:7878".into(),
            token: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Caps {
    pub uct_c: f64,
    pub stall_threshold: u32,
    pub max_steps: usize,
    pub max_children: usize,
    pub prompt_budget_tokens: usize,
    pub iteration_cap: usize,
    pub memory_cap: usize,
    pub summary_cap_tokens: usize,
    pub turn_max_steps: usize,
}

impl Default for Caps {
    fn default() -> Self {
        let tree = TreeConfig::default();
        let team = TeamConfig::default();
        Self {
            uct_c: tree.c,
            stall_threshold: tree.stall_threshold,
            max_steps: tree.max_steps,
            max_children: tree.max_children,
            prompt_budget_tokens: EngineConfig::default().prompt_budget_tokens,
            iteration_cap: team.iteration_cap,
            memory_cap: team.memory_cap,
            summary_cap_tokens: team.summary_cap_tokens,
            turn_max_steps: team.turn_tree.max_steps,
        }
    }
}

impl Caps {
    pub fn tree(&self) -> TreeConfig {
        TreeConfig {
            c: self.uct_c,
            stall_threshold: self.stall_threshold,
            max_steps: self.max_steps,
            max_children: self.max_children,
        }
    }

    pub fn team(&self) -> TeamConfig {
        TeamConfig {
            iteration_cap: self.iteration_cap,
            memory_cap: self.memory_cap,
            summary_cap_tokens: self.summary_cap_tokens,
            turn_tree: TreeConfig {
                max_steps: self.turn_max_steps,
                ..self.tree()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub data_dir: PathBuf,
    /// Knowledge base file; the seed KB when unset.
    pub kb_path: Option<PathBuf>,
    /// Scenario fixtures; the built-in set when unset.
    pub scenario_dir: Option<PathBuf>,
    /// Checked-in transcripts for scripted evaluation.
    pub transcript_dir: Option<PathBuf>,
    pub server: ServerConfig,
    pub backend: ChatConfig,
    /// Embedding model, configured separately from the chat backend.
    pub embedder: EmbedderConfig,
    pub caps: Caps,
    pub detector: DetectorConfig,
    pub retrieval: RetrievalPolicy,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("dbdiag-data"),
            kb_path: None,
            scenario_dir: None,
            transcript_dir: None,
            server: ServerConfig::default(),
            backend: ChatConfig::Simulated,
            embedder: EmbedderConfig::default(),
            caps: Caps::default(),
            detector: DetectorConfig::default(),
            retrieval: RetrievalPolicy::default(),
        }
    }
}

/// Parses `simulated`, `scripted:<path>` or `live`. A bare `scripted`
/// keeps `script_path` empty, which callers read as "built-in transcripts".
pub fn parse_backend(spec: &str, live: Option<&LiveConfig>) -> Result<ChatConfig> {
    let (kind, arg) = spec.split_once(':').map_or((spec, None), |(k, a)| (k, Some(a)));
    Ok(match kind {
        "simulated" | "sim" => ChatConfig::Simulated,
        "scripted" => ChatConfig::Scripted {
            script_path: arg.map(PathBuf::from).unwrap_or_default(),
        },
        "live" => {
            let mut cfg = live.cloned().unwrap_or(LiveConfig {
                endpoint: "https://api.openai.com/v1".into(),
                api_key: None,
                model: "gpt-4".into(),
                timeout_secs: 120,
            });
            if let Some(model) = arg {
                cfg.model = model.to_string();
            }
            ChatConfig::Live(cfg)
        }
        other => bail!("unknown backend `{other}`; expected simulated, scripted[:path] or live[:model]"),
    })
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut config = match path {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => Config::default(),
        };
        config.apply_env(|k| std::env::var(k).ok())?;
        Ok(config)
    }

    /// Applies `DBDIAG_*` overrides read through `var`.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(v) = var("DBDIAG_DATA_DIR") {
            self.data_dir = v.into();
        }
        if let Some(v) = var("DBDIAG_KB") {
            self.kb_path = Some(v.into());
        }
        if let Some(v) = var("DBDIAG_SCENARIOS") {
            self.scenario_dir = Some(v.into());
        }
        if let Some(v) = var("DBDIAG_TRANSCRIPTS") {
            self.transcript_dir = Some(v.into());
        }
        if let Some(v) = var("DBDIAG_BIND") {
            self.server.bind = v;
        }
        if let Some(v) = var("DBDIAG_TOKEN") {
            self.server.token = Some(v);
        }
        if let Some(v) = var("DBDIAG_BACKEND") {
            let live = match &self.backend {
                ChatConfig::Live(l) => Some(l.clone()),
                _ => None,
            };
            self.backend = parse_backend(&v, live.as_ref())?;
        }
        if let ChatConfig::Live(live) = &mut self.backend {
            if let Some(v) = var("DBDIAG_LIVE_ENDPOINT") {
                live.endpoint = v;
            }
            if let Some(v) = var("DBDIAG_LIVE_MODEL") {
                live.model = v;
            }
            if let Some(v) = var("DBDIAG_API_KEY") {
                live.api_key = Some(v);
            }
        }
        if let Some(v) = var("DBDIAG_MAX_STEPS") {
            self.caps.max_steps = v.parse().context("DBDIAG_MAX_STEPS")?;
        }
        if let Some(v) = var("DBDIAG_ITERATION_CAP") {
            self.caps.iteration_cap = v.parse().context("DBDIAG_ITERATION_CAP")?;
        }
        Ok(())
    }

    pub fn knowledge_base(&self) -> Result<KnowledgeBase> {
        match &self.kb_path {
            Some(path) => KnowledgeBase::load(path).with_context(|| format!("loading KB {}", path.display())),
            None => Ok(KnowledgeBase::seed()),
        }
    }

    pub fn engine(&self) -> Result<Engine> {
        Ok(Engine::new(self.knowledge_base()?)
            .with_embedder(self.embedder.clone())
            .with_config(EngineConfig {
                tree: self.caps.tree(),
                retrieval: self.retrieval,
                prompt_budget_tokens: self.caps.prompt_budget_tokens,
            }))
    }

    pub fn scenarios(&self) -> Result<Vec<AnomalyScenario>> {
        match &self.scenario_dir {
            Some(dir) => load_scenario_dir(dir).with_context(|| format!("loading scenarios from {}", dir.display())),
            None => Ok(builtin_scenarios()),
        }
    }

    pub fn chat_backend(&self) -> Result<Arc<dyn ChatBackend>> {
        if let ChatConfig::Scripted { script_path } = &self.backend {
            if script_path.as_os_str().is_empty() {
                bail!("the scripted backend needs a script path (scripted:<file>)");
            }
        }
        Ok(build_chat_backend(&self.backend)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_then_env() {
        let mut cfg: Config = toml::from_str(
            r#"
            data_dir = "/tmp/x"
            [server]
            bind = "0.0.0.0:9000"
            [caps]
            max_steps = 10
            [backend]
            kind = "scripted"
            script_path = "a.json"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.caps.max_steps, 10);
        assert_eq!(cfg.caps.stall_threshold, 5);
        cfg.apply_env(|k| match k {
            "DBDIAG_BIND" => Some("127.0.0.1:1".into()),
            "DBDIAG_BACKEND" => Some("simulated".into()),
            "DBDIAG_MAX_STEPS" => Some("7".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(cfg.server.bind, "127.0.0.1:1");
        assert_eq!(cfg.backend, ChatConfig::Simulated);
        assert_eq!(cfg.caps.max_steps, 7);
        assert_eq!(cfg.data_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn embedder_slot_is_independent_of_chat() {
        let cfg: Config = toml::from_str(
            r#"
            [backend]
            kind = "simulated"
            [embedder]
            kind = "hashing"
            dim = 32
            "#,
        )
        .unwrap();
        assert_eq!(cfg.backend, ChatConfig::Simulated);
        assert_eq!(cfg.engine().unwrap().embedder.dim(), 32);
    }

    #[test]
    fn backend_specs() {
        assert_eq!(parse_backend("simulated", None).unwrap(), ChatConfig::Simulated);
        assert_eq!(
            parse_backend("scripted:s.json", None).unwrap(),
            ChatConfig::Scripted {
                script_path: "s.json".into()
            }
        );
        assert!(matches!(parse_backend("live:gpt-x", None).unwrap(), ChatConfig::Live(l) if l.model == "gpt-x"));
        assert!(parse_backend("oracle", None).is_err());
    }
}
