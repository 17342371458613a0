//! One diagnosis end to end: abnormal-metric scan, experience lookup, tool
//! retrieval, prompt enrichment, tree search, advice.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knowledge::{kb_lookup, ExperienceSegment, KnowledgeBase};
use crate::llm::{complete, ChatBackend, ChatMessage, CompletionRequest, Embedder, LlmError};
use crate::planner::{run_diagnosis, DiagnosisNode, DiagnosisRun, PlannerContext, TreeConfig};
use crate::prompt_gen::{enrich_input, PromptCandidate};
use crate::prompts;
use crate::report::{attach_advice, conclusion_for, DiagnosisMethod, DiagnosisReport};
use crate::retrieval::{retrieve, AnomalyQuery, DualEncoder, RetrievalError, RetrievalPolicy, RetrievalResult};
use crate::toolbox::{ProbeError, Scope, Toolbox, Verdict};
use crate::tools::ToolSpec;

/// Tools every diagnosis may call regardless of retrieval.
pub const PINNED_TOOLS: [&str; 2] = ["list_abnormal_metrics", "is_abnormal_metric"];

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Backend(#[from] LlmError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct DiagnosisInput {
    /// Alert text.
    pub description: String,
    pub window: [i64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub tree: TreeConfig,
    pub retrieval: RetrievalPolicy,
    pub prompt_budget_tokens: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            tree: TreeConfig::default(),
            retrieval: RetrievalPolicy::default(),
            prompt_budget_tokens: 3000,
        }
    }
}

/// Inputs to one search, computed before the first backend call.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub query: AnomalyQuery,
    pub verdicts: Vec<Verdict>,
    pub experience: Vec<ExperienceSegment>,
    pub retrieval: RetrievalResult,
    pub offered: Vec<ToolSpec>,
    pub prompt: String,
}

pub struct Engine {
    pub kb: KnowledgeBase,
    pub embedder: Embedder,
    pub dense: DualEncoder,
    pub template: PromptCandidate,
    pub config: EngineConfig,
}

impl Default for Engine {
    fn default() -> Self {
        Self::new(KnowledgeBase::seed())
    }
}

fn mentions(text: &str, name: &str) -> bool {
    text.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .any(|t| t == name)
}

impl Engine {
    pub fn new(kb: KnowledgeBase) -> Self {
        let embedder = Embedder::new(crate::llm::EmbedderConfig::default());
        let dense = DualEncoder::symmetric(&embedder);
        Self {
            kb,
            embedder,
            dense,
            template: PromptCandidate::default_template(),
            config: EngineConfig::default(),
        }
    }

    /// Replaces the embedder used for retrieval and ingestion grouping.
    pub fn with_embedder(mut self, config: crate::llm::EmbedderConfig) -> Self {
        self.embedder = Embedder::new(config);
        self.dense = DualEncoder::symmetric(&self.embedder);
        self
    }

    pub fn with_template(mut self, template: PromptCandidate) -> Self {
        self.template = template;
        self
    }

    pub fn with_config(mut self, config: EngineConfig) -> Self {
        self.config = config;
        self
    }

    /// Scans the metrics in `scope`, looks up experience, retrieves tools and
    /// renders the prompt.
    pub fn prepare(&self, toolbox: &Toolbox, input: &DiagnosisInput, scope: &Scope) -> Result<Prepared, EngineError> {
        let verdicts: Vec<Verdict> = toolbox
            .scan_metrics(input.window[0], input.window[1], scope)?
            .into_iter()
            .filter(|v| v.abnormal)
            .collect();
        let abnormal: Vec<String> = verdicts.iter().map(|v| v.metric.clone()).collect();
        let query = AnomalyQuery::new(input.description.clone(), abnormal.clone(), input.window);
        let experience: Vec<ExperienceSegment> = kb_lookup(&self.kb, &abnormal).into_iter().cloned().collect();
        let registry = scope.filter_tools(toolbox.registry());
        let retrieval = retrieve(&query, &registry, &self.config.retrieval, &self.embedder, &self.dense)?;
        let retrieved = retrieval.names();
        let offered: Vec<ToolSpec> = registry
            .iter()
            .filter(|t| {
                retrieved.contains(&t.name.as_str())
                    || PINNED_TOOLS.contains(&t.name.as_str())
                    || experience.iter().any(|s| mentions(&s.steps, &t.name))
            })
            .cloned()
            .collect();
        let refs: Vec<&ExperienceSegment> = experience.iter().collect();
        let prompt = enrich_input(&query, &self.template, &offered, &refs, self.config.prompt_budget_tokens);
        Ok(Prepared {
            query,
            verdicts,
            experience,
            retrieval,
            offered,
            prompt,
        })
    }

    /// Full method: tree search over the prepared prompt, then advice.
    pub fn diagnose(
        &self,
        backend: &dyn ChatBackend,
        toolbox: &Toolbox,
        input: &DiagnosisInput,
        notes: Vec<String>,
        observer: Option<&(dyn Fn(&DiagnosisNode) + Sync)>,
    ) -> Result<DiagnosisRun, EngineError> {
        let scope = Scope::unrestricted();
        let prepared = self.prepare(toolbox, input, &scope)?;
        let ctx = PlannerContext {
            backend,
            toolbox,
            scope,
            caller: "planner".into(),
            system_prompt: prepared.prompt,
            offered: prepared.offered,
            window: input.window,
            notes,
            observer,
        };
        let mut run = run_diagnosis(self.config.tree, &ctx)?;
        attach_advice(&mut run.report, toolbox);
        Ok(run)
    }

    /// Metrics-only baseline: one pass over the abnormal metrics, without
    /// experience, retrieval or search.
    pub fn baseline(
        &self,
        backend: &dyn ChatBackend,
        toolbox: &Toolbox,
        input: &DiagnosisInput,
    ) -> Result<DiagnosisReport, EngineError> {
        let verdicts: Vec<Verdict> = toolbox
            .scan_metrics(input.window[0], input.window[1], &Scope::unrestricted())?
            .into_iter()
            .filter(|v| v.abnormal)
            .collect();
        let names: Vec<String> = verdicts.iter().map(|v| v.metric.clone()).collect();
        let details: Vec<String> = verdicts
            .iter()
            .map(|v| format!("- {}: peak {:.4}, threshold {}", v.metric, v.peak, v.threshold))
            .collect();
        let user = format!(
            "{}\nAlert: {}\nWindow: [{}, {}]\nAbnormal metrics: {}\n{}",
            prompts::BASELINE_LEAD,
            input.description,
            input.window[0],
            input.window[1],
            if names.is_empty() { "none".to_string() } else { names.join(", ") },
            details.join("\n")
        );
        let request = CompletionRequest::new(vec![
            ChatMessage::system("You are a database administrator. Name the root cause of the anomaly from its metrics."),
            ChatMessage::user(user),
        ]);
        let response = complete(backend, &request)?;
        let analysis = response.text_or_empty().trim().to_string();
        let mut report = DiagnosisReport::empty(DiagnosisMethod::MetricsOnlyBaseline, input.window);
        for cause in prompts::parse_root_causes(&analysis) {
            report.add_cause(&cause, "baseline", Vec::new());
        }
        report.abnormal_metrics = names;
        report.conclusion = conclusion_for(&report.causes, input.window);
        report.analysis = analysis;
        report.steps = 1;
        Ok(report)
    }
}
