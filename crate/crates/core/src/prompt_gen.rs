//! Diagnosis prompt templates: proposal from example pairs, scoring by
//! detected causes, selection with human approval, and input enrichment.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knowledge::ExperienceSegment;
use crate::llm::{collapse_whitespace, complete, ChatBackend, ChatMessage, CompletionRequest, LlmError};
use crate::prompts;
use crate::retrieval::AnomalyQuery;
use crate::tokens;
use crate::tools::ToolSpec;

pub const PLACEHOLDERS: [&str; 3] = ["{anomaly}", "{tools}", "{experience}"];

#[derive(Debug, Error)]
pub enum PromptGenError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("no evaluation samples")]
    NoSamples,
    #[error("every proposed template was malformed")]
    AllMalformed,
    #[error("no candidates")]
    NoCandidates,
    #[error("candidate `{0}` has not been scored")]
    Unscored(String),
    #[error("candidate `{0}` not found")]
    UnknownCandidate(String),
    #[error("template is missing placeholder {0}")]
    MissingPlaceholder(&'static str),
    #[error("candidate store {path}: {message}")]
    Store { path: String, message: String },
    #[error(transparent)]
    Backend(#[from] LlmError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisSample {
    pub anomaly: AnomalyQuery,
    pub ground_truth_causes: Vec<String>,
    #[serde(default)]
    pub reference_solution: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct PromptCandidate {
    pub id: String,
    pub template: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default)]
    pub human_approved: bool,
}

/// First placeholder missing from `template`, if any.
pub fn missing_placeholder(template: &str) -> Option<&'static str> {
    PLACEHOLDERS.into_iter().find(|p| !template.contains(p))
}

impl PromptCandidate {
    pub fn new(id: impl Into<String>, template: impl Into<String>) -> Result<Self, PromptGenError> {
        let template = template.into();
        if let Some(p) = missing_placeholder(&template) {
            return Err(PromptGenError::MissingPlaceholder(p));
        }
        Ok(Self {
            id: id.into(),
            template,
            score: None,
            human_approved: false,
        })
    }

    /// The shipped template.
    pub fn default_template() -> Self {
        Self::new("default", prompts::DEFAULT_DIAGNOSIS_TEMPLATE).expect("default template is valid")
    }

    /// A template that reasons from metrics alone.
    pub fn metric_only_template() -> Self {
        Self::new("metric-only", prompts::METRIC_ONLY_TEMPLATE).expect("metric-only template is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptGenConfig {
    pub pairs_per_prompt: usize,
    pub n_candidates: usize,
    pub retry_cap: usize,
    pub top_k: usize,
    pub budget_tokens: usize,
}

impl Default for PromptGenConfig {
    fn default() -> Self {
        Self {
            pairs_per_prompt: 5,
            n_candidates: 20,
            retry_cap: 2,
            top_k: 10,
            budget_tokens: 3000,
        }
    }
}

fn render_pair(sample: &DiagnosisSample) -> String {
    format!(
        "Input:\n{}\nOutput: root causes {}. {}",
        sample.anomaly.render(),
        sample.ground_truth_causes.join(", "),
        sample.reference_solution
    )
}

fn strip_fence(text: &str) -> &str {
    let t = text.trim();
    match t.strip_prefix("```") {
        Some(rest) => {
            let body = rest.split_once('\n').map_or("", |(_, b)| b);
            body.trim_end().strip_suffix("```").unwrap_or(body).trim()
        }
        None => t,
    }
}

/// Asks for `n_candidates` templates, each shown `pairs_per_prompt` example
/// pairs taken round-robin from `samples`. A malformed template is requested
/// again up to `retry_cap` times, then dropped.
pub fn propose_candidates(
    samples: &[DiagnosisSample],
    config: &PromptGenConfig,
    backend: &dyn ChatBackend,
) -> Result<Vec<PromptCandidate>, PromptGenError> {
    if samples.len() < config.pairs_per_prompt || samples.is_empty() {
        return Err(PromptGenError::TooFewSamples {
            needed: config.pairs_per_prompt.max(1),
            got: samples.len(),
        });
    }
    let mut out = Vec::new();
    for i in 0..config.n_candidates {
        let pairs: Vec<String> = (0..config.pairs_per_prompt)
            .map(|j| render_pair(&samples[(i * config.pairs_per_prompt + j) % samples.len()]))
            .collect();
        let base = prompts::fill(
            prompts::PROPOSE_TEMPLATE,
            &[("index", &(i + 1).to_string()), ("pairs", &pairs.join("\n\n"))],
        );
        let mut prompt = base.clone();
        let mut accepted = None;
        for attempt in 0..=config.retry_cap {
            let response = complete(backend, &CompletionRequest::new(vec![ChatMessage::user(prompt.clone())]))?;
            let template = strip_fence(response.text_or_empty()).to_string();
            match missing_placeholder(&template) {
                None => {
                    accepted = Some(template);
                    break;
                }
                Some(missing) => {
                    tracing::warn!(candidate = i + 1, attempt, missing, "malformed template");
                    prompt = format!("{base}\nAttempt {}: the previous template lacked {missing}.", attempt + 2);
                }
            }
        }
        match accepted {
            Some(template) => out.push(PromptCandidate {
                id: format!("cand-{:02}", i + 1),
                template,
                score: None,
                human_approved: false,
            }),
            None => tracing::warn!(candidate = i + 1, "template dropped after retries"),
        }
    }
    if out.is_empty() {
        return Err(PromptGenError::AllMalformed);
    }
    Ok(out)
}

/// Fraction of samples whose ground-truth causes all appear among the causes
/// `run` reports. A failing run counts as undetected.
pub fn score_candidate<E: std::fmt::Display>(
    candidate: &PromptCandidate,
    samples: &[DiagnosisSample],
    mut run: impl FnMut(&PromptCandidate, &DiagnosisSample) -> Result<Vec<String>, E>,
) -> Result<f64, PromptGenError> {
    if samples.is_empty() {
        return Err(PromptGenError::NoSamples);
    }
    let mut detected = 0usize;
    for sample in samples {
        match run(candidate, sample) {
            Ok(reported) => {
                let reported: Vec<String> = reported.iter().map(|c| crate::causes::normalize_cause(c)).collect();
                if sample
                    .ground_truth_causes
                    .iter()
                    .all(|truth| reported.contains(&crate::causes::normalize_cause(truth)))
                {
                    detected += 1;
                }
            }
            Err(e) => tracing::warn!(candidate = %candidate.id, error = %e, "scoring run failed"),
        }
    }
    Ok(detected as f64 / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateSelection {
    /// The top-k candidates by score, kept for human review.
    pub retained: Vec<PromptCandidate>,
    pub selected: PromptCandidate,
}

/// Keeps the `top_k` best candidates and picks the best approved one, or the
/// best overall when none is approved. Ties keep input order.
pub fn select_template(candidates: &[PromptCandidate], top_k: usize) -> Result<TemplateSelection, PromptGenError> {
    if candidates.is_empty() {
        return Err(PromptGenError::NoCandidates);
    }
    if let Some(c) = candidates.iter().find(|c| c.score.is_none()) {
        return Err(PromptGenError::Unscored(c.id.clone()));
    }
    let mut retained = candidates.to_vec();
    retained.sort_by(|a, b| b.score.unwrap_or(0.0).total_cmp(&a.score.unwrap_or(0.0)));
    retained.truncate(top_k.max(1));
    let selected = retained
        .iter()
        .find(|c| c.human_approved)
        .unwrap_or(&retained[0])
        .clone();
    Ok(TemplateSelection { retained, selected })
}

/// Renders one experience segment as a prompt block.
pub fn render_experience(rank: usize, segment: &ExperienceSegment) -> String {
    format!(
        "[experience {rank}] name: {}\nmetrics: {}\ncontent: {}\nsteps: {}",
        segment.name,
        segment.metrics.join(", "),
        collapse_whitespace(&segment.content),
        collapse_whitespace(&segment.steps)
    )
}

/// Fills the template. Experience blocks keep rank order; when the prompt
/// would exceed `budget_tokens`, the lowest-ranked blocks are dropped and the
/// number dropped is noted.
pub fn enrich_input(
    anomaly: &AnomalyQuery,
    template: &PromptCandidate,
    tools: &[ToolSpec],
    experience: &[&ExperienceSegment],
    budget_tokens: usize,
) -> String {
    let tool_text = if tools.is_empty() {
        prompts::NO_TOOLS.to_string()
    } else {
        tools.iter().map(|t| format!("- {}", t.prompt_line())).collect::<Vec<_>>().join("\n")
    };
    let anomaly_text = anomaly.render();
    let blocks: Vec<String> = experience
        .iter()
        .enumerate()
        .map(|(i, s)| render_experience(i + 1, s))
        .collect();
    let render = |kept: usize| -> String {
        let experience_text = if blocks.is_empty() {
            prompts::NO_EXPERIENCE.to_string()
        } else {
            let mut text = blocks[..kept].join("\n\n");
            let omitted = blocks.len() - kept;
            if omitted > 0 {
                if !text.is_empty() {
                    text.push_str("\n\n");
                }
                text.push_str(&format!("({omitted} lower-ranked experience segments omitted to fit the prompt budget)"));
            }
            text
        };
        prompts::fill(
            &template.template,
            &[("anomaly", &anomaly_text), ("tools", &tool_text), ("experience", &experience_text)],
        )
    };
    let mut kept = blocks.len();
    let mut text = render(kept);
    while kept > 0 && tokens::estimate(&text) > budget_tokens {
        kept -= 1;
        text = render(kept);
    }
    text
}

/// Candidate templates with scores and approval flags, stored as JSON.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CandidateStore {
    pub candidates: Vec<PromptCandidate>,
}

impl CandidateStore {
    pub fn load(path: &Path) -> Result<Self, PromptGenError> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let err = |message: String| PromptGenError::Store {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), PromptGenError> {
        let text = serde_json::to_string_pretty(self).expect("store serializes") + "\n";
        fs::write(path, text).map_err(|e| PromptGenError::Store {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn get_mut(&mut self, id: &str) -> Result<&mut PromptCandidate, PromptGenError> {
        self.candidates
            .iter_mut()
            .find(|c| c.id == id)
            .ok_or_else(|| PromptGenError::UnknownCandidate(id.to_string()))
    }

    pub fn approve(&mut self, id: &str, approved: bool) -> Result<(), PromptGenError> {
        self.get_mut(id)?.human_approved = approved;
        Ok(())
    }

    /// Replaces candidates with the same id, appends new ones.
    pub fn upsert(&mut self, candidates: Vec<PromptCandidate>) {
        for candidate in candidates {
            match self.candidates.iter_mut().find(|c| c.id == candidate.id) {
                Some(existing) => *existing = candidate,
                None => self.candidates.push(candidate),
            }
        }
    }
}
