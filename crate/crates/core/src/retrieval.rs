//! Ranking tool descriptions against an anomaly: Okapi BM25, single-encoder
//! embedding similarity, and dual-encoder dense retrieval.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{cosine, Embedder, EmbedderConfig, LlmError};
use crate::tools::ToolSpec;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("tool registry is empty")]
    EmptyRegistry,
    #[error("invalid BM25 parameters k1={k1}, b={b}")]
    Params { k1: f64, b: f64 },
    #[error("query encoder has {query} dimensions but document encoder has {doc}")]
    DimensionMismatch { query: usize, doc: usize },
    #[error("invalid query: {0}")]
    Query(String),
    #[error(transparent)]
    Embedding(#[from] LlmError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct AnomalyQuery {
    pub text: String,
    #[serde(default)]
    pub abnormal_metrics: Vec<String>,
    /// `[start, end]` epoch seconds.
    pub time_window: [i64; 2],
}

impl AnomalyQuery {
    pub fn new(text: impl Into<String>, abnormal_metrics: Vec<String>, time_window: [i64; 2]) -> Self {
        Self {
            text: text.into(),
            abnormal_metrics,
            time_window,
        }
    }

    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.text.trim().is_empty() {
            return Err(RetrievalError::Query("empty text".into()));
        }
        if self.time_window[0] >= self.time_window[1] {
            return Err(RetrievalError::Query("window start must precede end".into()));
        }
        Ok(())
    }

    /// Text the rankers see: the description followed by the metric names.
    pub fn search_text(&self) -> String {
        let mut text = self.text.clone();
        for metric in &self.abnormal_metrics {
            text.push(' ');
            text.push_str(metric);
        }
        text
    }

    /// Labeled text form used inside prompts.
    pub fn render(&self) -> String {
        let metrics = if self.abnormal_metrics.is_empty() {
            "none reported".to_string()
        } else {
            self.abnormal_metrics.join(", ")
        };
        format!(
            "Description: {}\nWindow: [{}, {}]\nAbnormal metrics: {}",
            self.text, self.time_window[0], self.time_window[1], metrics
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMethod {
    Bm25,
    Embedding,
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct ScoredTool {
    pub tool: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct RetrievalResult {
    pub method: RetrievalMethod,
    /// Scores non-increasing; ties ordered by tool name.
    pub ranked: Vec<ScoredTool>,
}

impl RetrievalResult {
    fn from_scores(method: RetrievalMethod, scores: Vec<(String, f64)>) -> Self {
        let mut ranked: Vec<ScoredTool> = scores.into_iter().map(|(tool, score)| ScoredTool { tool, score }).collect();
        ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tool.cmp(&b.tool)));
        Self { method, ranked }
    }

    pub fn names(&self) -> Vec<&str> {
        self.ranked.iter().map(|s| s.tool.as_str()).collect()
    }

    pub fn truncate(mut self, k: usize) -> Self {
        self.ranked.truncate(k);
        self
    }
}

/// Lowercase alphanumeric word tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

/// BM25 score of every document for `query`, with IDF
/// `ln((N - df + 0.5) / (df + 0.5) + 1)`. Repeated query terms count once.
pub fn bm25_scores(query: &str, docs: &[&str], params: Bm25Params) -> Vec<f64> {
    let tokenized: Vec<Vec<String>> = docs.iter().map(|d| tokenize(d)).collect();
    let n = docs.len() as f64;
    let avgdl = tokenized.iter().map(Vec::len).sum::<usize>() as f64 / n.max(1.0);
    let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
    let mut df: BTreeMap<&str, f64> = BTreeMap::new();
    for term in &terms {
        let count = tokenized.iter().filter(|d| d.contains(term)).count();
        df.insert(term, count as f64);
    }
    tokenized
        .iter()
        .map(|doc| {
            let dl = doc.len() as f64;
            terms
                .iter()
                .map(|term| {
                    let tf = doc.iter().filter(|t| *t == term).count() as f64;
                    if tf == 0.0 {
                        return 0.0;
                    }
                    let d = df[term.as_str()];
                    let idf = ((n - d + 0.5) / (d + 0.5) + 1.0).ln();
                    let norm = if avgdl > 0.0 { dl / avgdl } else { 0.0 };
                    idf * tf * (params.k1 + 1.0) / (tf + params.k1 * (1.0 - params.b + params.b * norm))
                })
                .sum()
        })
        .collect()
}

pub fn bm25_rank(query: &AnomalyQuery, registry: &[ToolSpec], params: Bm25Params) -> Result<RetrievalResult, RetrievalError> {
    if registry.is_empty() {
        return Err(RetrievalError::EmptyRegistry);
    }
    if params.k1 <= 0.0 || !(0.0..=1.0).contains(&params.b) {
        return Err(RetrievalError::Params {
            k1: params.k1,
            b: params.b,
        });
    }
    let docs: Vec<&str> = registry.iter().map(|t| t.description.as_str()).collect();
    let scores = bm25_scores(&query.search_text(), &docs, params);
    Ok(RetrievalResult::from_scores(
        RetrievalMethod::Bm25,
        registry.iter().map(|t| t.name.clone()).zip(scores).collect(),
    ))
}

fn cosine_rank(
    method: RetrievalMethod,
    query: &AnomalyQuery,
    registry: &[ToolSpec],
    query_encoder: &Embedder,
    doc_encoder: &Embedder,
) -> Result<RetrievalResult, RetrievalError> {
    if registry.is_empty() {
        return Err(RetrievalError::EmptyRegistry);
    }
    let q = query_encoder.embed(&query.search_text())?;
    let mut scores = Vec::with_capacity(registry.len());
    for tool in registry {
        let d = doc_encoder.embed(&tool.description)?;
        scores.push((tool.name.clone(), cosine(&q, &d)));
    }
    Ok(RetrievalResult::from_scores(method, scores))
}

/// Cosine similarity between the query and each description under one
/// embedder.
pub fn embedding_rank(query: &AnomalyQuery, registry: &[ToolSpec], embedder: &Embedder) -> Result<RetrievalResult, RetrievalError> {
    cosine_rank(RetrievalMethod::Embedding, query, registry, embedder, embedder)
}

/// Separately configured query-side and document-side encoders.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub query: Embedder,
    pub doc: Embedder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EncoderConfig {
    #[serde(default)]
    pub query: EmbedderConfig,
    #[serde(default)]
    pub doc: EmbedderConfig,
}

impl DualEncoder {
    pub fn new(config: &EncoderConfig) -> Result<Self, RetrievalError> {
        let (q, d) = (config.query.dim(), config.doc.dim());
        if q != d {
            return Err(RetrievalError::DimensionMismatch { query: q, doc: d });
        }
        Ok(Self {
            query: Embedder::new(config.query.clone()),
            doc: Embedder::new(config.doc.clone()),
        })
    }

    pub fn symmetric(embedder: &Embedder) -> Self {
        Self {
            query: embedder.clone(),
            doc: embedder.clone(),
        }
    }
}

pub fn dense_rank(query: &AnomalyQuery, registry: &[ToolSpec], encoder: &DualEncoder) -> Result<RetrievalResult, RetrievalError> {
    let (q, d) = (encoder.query.dim(), encoder.doc.dim());
    if q != d {
        return Err(RetrievalError::DimensionMismatch { query: q, doc: d });
    }
    cosine_rank(RetrievalMethod::Dense, query, registry, &encoder.query, &encoder.doc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalPolicy {
    /// Registries at least this large count as "large".
    pub large_threshold: usize,
    /// Tools handed to the planner.
    pub top_k: usize,
    pub bm25: Bm25Params,
}

impl Default for RetrievalPolicy {
    fn default() -> Self {
        Self {
            large_threshold: 100,
            top_k: 8,
            bm25: Bm25Params::default(),
        }
    }
}

/// BM25 for large registries with a clear metric signature, dense retrieval
/// when no metric is known, embedding similarity otherwise.
pub fn select_method(query: &AnomalyQuery, registry_size: usize, policy: &RetrievalPolicy) -> RetrievalMethod {
    if query.abnormal_metrics.is_empty() {
        RetrievalMethod::Dense
    } else if registry_size >= policy.large_threshold {
        RetrievalMethod::Bm25
    } else {
        RetrievalMethod::Embedding
    }
}

/// Runs the selected ranker and keeps the policy's top-k.
pub fn retrieve(
    query: &AnomalyQuery,
    registry: &[ToolSpec],
    policy: &RetrievalPolicy,
    embedder: &Embedder,
    dense: &DualEncoder,
) -> Result<RetrievalResult, RetrievalError> {
    let result = match select_method(query, registry.len(), policy) {
        RetrievalMethod::Bm25 => bm25_rank(query, registry, policy.bm25)?,
        RetrievalMethod::Embedding => embedding_rank(query, registry, embedder)?,
        RetrievalMethod::Dense => dense_rank(query, registry, dense)?,
    };
    Ok(result.truncate(policy.top_k))
}
