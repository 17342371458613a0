//! Experience knowledge base: document segmentation, chunk summaries,
//! extraction of four-field experience segments, and metric-keyed lookup.

mod extract;
mod kb;
mod segment;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::LlmError;

pub use extract::{
    extract_experience, group_related_chunks, ingest, summarize_chunk, ExtractOutcome, IngestConfig, IngestReport,
};
pub use kb::{kb_lookup, KbError, KnowledgeBase};
pub use segment::{segment_document, MIN_CHUNK_TOKENS};

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("document `{0}` is empty")]
    EmptyDocument(String),
    #[error("max_chunk_tokens must be at least {MIN_CHUNK_TOKENS}, got {0}")]
    ChunkLimit(usize),
    #[error("chunk `{0}` has no content")]
    EmptyChunk(String),
    #[error("chunk `{0}` has no summary")]
    Unsummarized(String),
    #[error("similarity threshold {0} outside [0, 1]")]
    Threshold(f64),
    #[error("empty chunk group")]
    EmptyGroup,
    #[error(transparent)]
    Backend(#[from] LlmError),
    #[error(transparent)]
    Kb(#[from] KbError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentChunk {
    /// `{source}#{index}`.
    pub id: String,
    pub source_document: String,
    /// Heading titles from the outermost section inwards.
    pub section_path: Vec<String>,
    pub content: String,
    pub token_estimate: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    /// Set when the document had no headings and was cut into fixed windows.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fixed_window: bool,
}

impl DocumentChunk {
    pub fn section_label(&self) -> String {
        self.section_path.join(" > ")
    }
}

/// One maintenance rule. Field order is the on-disk order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct ExperienceSegment {
    pub name: String,
    pub content: String,
    pub metrics: Vec<String>,
    pub steps: String,
    pub provenance: Vec<String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SegmentError {
    #[error("field `{0}` is empty")]
    EmptyField(&'static str),
    #[error("metric `{0}` listed twice")]
    DuplicateMetric(String),
}

impl ExperienceSegment {
    pub fn validate(&self) -> Result<(), SegmentError> {
        for (field, value) in [("name", &self.name), ("content", &self.content), ("steps", &self.steps)] {
            if value.trim().is_empty() {
                return Err(SegmentError::EmptyField(field));
            }
        }
        if self.metrics.is_empty() || self.metrics.iter().any(|m| m.trim().is_empty()) {
            return Err(SegmentError::EmptyField("metrics"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for metric in &self.metrics {
            if !seen.insert(metric) {
                return Err(SegmentError::DuplicateMetric(metric.clone()));
            }
        }
        if self.provenance.is_empty() {
            return Err(SegmentError::EmptyField("provenance"));
        }
        Ok(())
    }

    /// Number of `metrics` that appear in `abnormal`.
    pub fn overlap(&self, abnormal: &[String]) -> usize {
        self.metrics.iter().filter(|m| abnormal.contains(m)).count()
    }
}
