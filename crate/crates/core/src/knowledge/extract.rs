//! Chunk summaries, summary-similarity grouping and experience extraction.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{segment_document, DocumentChunk, ExperienceSegment, KbError, KnowledgeBase, KnowledgeError};
use crate::llm::{complete, cosine, ChatBackend, ChatMessage, CompletionRequest, Embedder};
use crate::prompts;
use crate::tokens;

/// Asks the backend for a summary of `chunk` and stores it, cut to
/// `cap_tokens` estimated tokens.
pub fn summarize_chunk(
    chunk: &mut DocumentChunk,
    backend: &dyn ChatBackend,
    cap_tokens: usize,
) -> Result<String, KnowledgeError> {
    if chunk.content.trim().is_empty() {
        return Err(KnowledgeError::EmptyChunk(chunk.id.clone()));
    }
    let prompt = prompts::fill(
        prompts::SUMMARIZE_TEMPLATE,
        &[("section", &chunk.section_label()), ("content", &chunk.content)],
    );
    let response = complete(backend, &CompletionRequest::new(vec![ChatMessage::user(prompt)]))?;
    let mut summary = response.text_or_empty().trim().to_string();
    let budget = tokens::char_budget(cap_tokens);
    if summary.chars().count() > budget {
        summary = summary.chars().take(budget).collect();
    }
    chunk.summary = Some(summary.clone());
    Ok(summary)
}

/// Connected components of the graph linking chunks whose summary embeddings
/// have cosine similarity ≥ `threshold`. Groups are ordered by their first
/// member; members keep chunk order.
pub fn group_related_chunks(
    chunks: &[DocumentChunk],
    threshold: f64,
    embedder: &Embedder,
) -> Result<Vec<Vec<String>>, KnowledgeError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(KnowledgeError::Threshold(threshold));
    }
    let mut vectors = Vec::with_capacity(chunks.len());
    for chunk in chunks {
        let summary = chunk
            .summary
            .as_deref()
            .filter(|s| !s.trim().is_empty())
            .ok_or_else(|| KnowledgeError::Unsummarized(chunk.id.clone()))?;
        vectors.push(embedder.embed(summary)?);
    }
    let mut parent: Vec<usize> = (0..chunks.len()).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..chunks.len() {
        for j in i + 1..chunks.len() {
            if cosine(&vectors[i], &vectors[j]) >= threshold {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: Vec<(usize, Vec<String>)> = Vec::new();
    for (i, chunk) in chunks.iter().enumerate() {
        let root = find(&mut parent, i);
        match groups.iter_mut().find(|(r, _)| *r == root) {
            Some((_, members)) => members.push(chunk.id.clone()),
            None => groups.push((root, vec![chunk.id.clone()])),
        }
    }
    Ok(groups.into_iter().map(|(_, members)| members).collect())
}

/// Segments extracted from one group, plus the reasons for any extraction
/// that failed the schema gate.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExtractOutcome {
    pub segments: Vec<ExperienceSegment>,
    pub dropped: Vec<String>,
}

#[derive(Deserialize)]
struct RawSegment {
    name: Option<String>,
    content: Option<String>,
    metrics: Option<Vec<String>>,
    steps: Option<String>,
}

fn strip_fence(text: &str) -> &str {
    let t = text.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let rest = rest.split_once('\n').map_or("", |(_, body)| body);
    rest.trim_end().strip_suffix("```").unwrap_or(rest).trim()
}

fn raw_items(text: &str) -> Result<Vec<Value>, String> {
    let value: Value = serde_json::from_str(strip_fence(text)).map_err(|e| format!("not JSON: {e}"))?;
    Ok(match value {
        Value::Array(items) => items,
        Value::Object(ref map) => match map.values().find(|v| v.is_array()) {
            Some(Value::Array(items)) if !map.contains_key("name") => items.clone(),
            _ => vec![value],
        },
        _ => return Err("expected a JSON array of segments".into()),
    })
}

/// Runs one extraction per chunk of the group, showing the summaries of the
/// other members as context. Provenance of a segment is the chunk it came
/// from followed by the other group members.
pub fn extract_experience(
    group: &[&DocumentChunk],
    backend: &dyn ChatBackend,
) -> Result<ExtractOutcome, KnowledgeError> {
    if group.is_empty() {
        return Err(KnowledgeError::EmptyGroup);
    }
    let mut outcome = ExtractOutcome::default();
    for chunk in group {
        let others: Vec<&&DocumentChunk> = group.iter().filter(|c| c.id != chunk.id).collect();
        let context = if others.is_empty() {
            "(none)".to_string()
        } else {
            others
                .iter()
                .map(|c| format!("- {}: {}", c.id, c.summary.as_deref().unwrap_or("(no summary)")))
                .collect::<Vec<_>>()
                .join("\n")
        };
        let prompt = prompts::fill(
            prompts::EXTRACT_TEMPLATE,
            &[
                ("context", &context),
                ("section", &chunk.section_label()),
                ("content", &chunk.content),
            ],
        );
        let response = complete(backend, &CompletionRequest::new(vec![ChatMessage::user(prompt)]))?;
        let items = match raw_items(response.text_or_empty()) {
            Ok(items) => items,
            Err(reason) => {
                tracing::warn!(chunk = %chunk.id, %reason, "extraction dropped");
                outcome.dropped.push(format!("{}: {reason}", chunk.id));
                continue;
            }
        };
        let mut provenance = vec![chunk.id.clone()];
        provenance.extend(others.iter().map(|c| c.id.clone()));
        for item in items {
            let parsed = serde_json::from_value::<RawSegment>(item)
                .map_err(|e| e.to_string())
                .and_then(|raw| {
                    let segment = ExperienceSegment {
                        name: raw.name.ok_or("missing field `name`")?,
                        content: raw.content.ok_or("missing field `content`")?,
                        metrics: raw.metrics.ok_or("missing field `metrics`")?,
                        steps: raw.steps.ok_or("missing field `steps`")?,
                        provenance: provenance.clone(),
                    };
                    segment.validate().map_err(|e| e.to_string())?;
                    Ok(segment)
                });
            match parsed {
                Ok(segment) => outcome.segments.push(segment),
                Err(reason) => {
                    tracing::warn!(chunk = %chunk.id, %reason, "extracted segment dropped");
                    outcome.dropped.push(format!("{}: {reason}", chunk.id));
                }
            }
        }
    }
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestConfig {
    pub max_chunk_tokens: usize,
    pub similarity_threshold: f64,
    pub summary_cap_tokens: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            max_chunk_tokens: 1000,
            similarity_threshold: 0.6,
            summary_cap_tokens: 80,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IngestReport {
    pub chunks: Vec<DocumentChunk>,
    pub groups: Vec<Vec<String>>,
    pub added: Vec<String>,
    /// Segments rejected by the schema gate or by the knowledge base.
    pub dropped: Vec<String>,
}

/// Segments, summarizes, groups and extracts every document, inserting the
/// results into `kb`. Duplicate names are reported in `dropped`.
pub fn ingest(
    documents: &[(String, String)],
    config: &IngestConfig,
    backend: &dyn ChatBackend,
    embedder: &Embedder,
    kb: &mut KnowledgeBase,
) -> Result<IngestReport, KnowledgeError> {
    let mut chunks = Vec::new();
    for (source, text) in documents {
        chunks.extend(segment_document(source, text, config.max_chunk_tokens)?);
    }
    for chunk in &mut chunks {
        summarize_chunk(chunk, backend, config.summary_cap_tokens)?;
    }
    let groups = group_related_chunks(&chunks, config.similarity_threshold, embedder)?;
    let mut added = Vec::new();
    let mut dropped = Vec::new();
    for group in &groups {
        let members: Vec<&DocumentChunk> = group
            .iter()
            .filter_map(|id| chunks.iter().find(|c| &c.id == id))
            .collect();
        let outcome = extract_experience(&members, backend)?;
        dropped.extend(outcome.dropped);
        for segment in outcome.segments {
            let name = segment.name.clone();
            match kb.insert(segment) {
                Ok(()) => added.push(name),
                Err(e @ (KbError::Duplicate(_) | KbError::Invalid { .. })) => {
                    tracing::warn!(error = %e, "segment not added");
                    dropped.push(e.to_string());
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(IngestReport {
        chunks,
        groups,
        added,
        dropped,
    })
}
