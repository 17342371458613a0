use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{ExperienceSegment, SegmentError};

const SEED_KB: &str = include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/seed_kb.json"));

#[derive(Debug, Error)]
pub enum KbError {
    #[error("segment `{0}` already exists")]
    Duplicate(String),
    #[error("segment `{name}` is invalid: {source}")]
    Invalid { name: String, source: SegmentError },
    #[error("knowledge base file {path}: {message}")]
    File { path: String, message: String },
}

/// Segments plus a metric → segment-name index. `version` increases on
/// every successful mutation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KnowledgeBase {
    segments: Vec<ExperienceSegment>,
    version: u64,
    metric_index: BTreeMap<String, Vec<String>>,
}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    /// The hand-written seed: the five-step diagnosis outline, the dead-tuple
    /// rule, and one rule per cause the team knows how to check.
    pub fn seed() -> Self {
        Self::from_json(SEED_KB).expect("seed knowledge base is valid")
    }

    pub fn from_segments(segments: Vec<ExperienceSegment>) -> Result<Self, KbError> {
        let mut kb = Self::new();
        for segment in segments {
            kb.insert(segment)?;
        }
        Ok(kb)
    }

    pub fn from_json(text: &str) -> Result<Self, KbError> {
        let segments: Vec<ExperienceSegment> = serde_json::from_str(text).map_err(|e| KbError::File {
            path: "<inline>".into(),
            message: e.to_string(),
        })?;
        Self::from_segments(segments)
    }

    pub fn load(path: &Path) -> Result<Self, KbError> {
        let file_error = |message: String| KbError::File {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| file_error(e.to_string()))?;
        let segments: Vec<ExperienceSegment> =
            serde_json::from_str(&text).map_err(|e| file_error(e.to_string()))?;
        Self::from_segments(segments)
    }

    pub fn save(&self, path: &Path) -> Result<(), KbError> {
        fs::write(path, self.to_json()).map_err(|e| KbError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Pretty JSON array in insertion order, newline-terminated.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.segments).expect("segments serialize") + "\n"
    }

    /// SHA-256 of the serialized segments; replay compares it to detect a
    /// changed knowledge base.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn insert(&mut self, segment: ExperienceSegment) -> Result<(), KbError> {
        segment.validate().map_err(|source| KbError::Invalid {
            name: segment.name.clone(),
            source,
        })?;
        if self.get(&segment.name).is_some() {
            return Err(KbError::Duplicate(segment.name));
        }
        for metric in &segment.metrics {
            self.metric_index
                .entry(metric.clone())
                .or_default()
                .push(segment.name.clone());
        }
        self.segments.push(segment);
        self.version += 1;
        Ok(())
    }

    pub fn segments(&self) -> &[ExperienceSegment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn get(&self, name: &str) -> Option<&ExperienceSegment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().map(|s| s.name.as_str())
    }

    pub fn metric_index(&self) -> &BTreeMap<String, Vec<String>> {
        &self.metric_index
    }

    /// Every metric named in the index maps to segments that list it, and
    /// every listed metric is indexed.
    pub fn index_is_consistent(&self) -> bool {
        let forward = self.metric_index.iter().all(|(metric, names)| {
            names
                .iter()
                .all(|n| self.get(n).is_some_and(|s| s.metrics.contains(metric)))
        });
        let backward = self.segments.iter().all(|s| {
            s.metrics
                .iter()
                .all(|m| self.metric_index.get(m).is_some_and(|names| names.contains(&s.name)))
        });
        forward && backward
    }
}

/// Segments sharing at least one metric with `abnormal`, by overlap count
/// descending, then name.
pub fn kb_lookup<'a>(kb: &'a KnowledgeBase, abnormal: &[String]) -> Vec<&'a ExperienceSegment> {
    let mut hits: Vec<(usize, &ExperienceSegment)> = kb
        .segments()
        .iter()
        .map(|s| (s.overlap(abnormal), s))
        .filter(|(n, _)| *n > 0)
        .collect();
    hits.sort_by(|(na, a), (nb, b)| nb.cmp(na).then_with(|| a.name.cmp(&b.name)));
    hits.into_iter().map(|(_, s)| s).collect()
}
