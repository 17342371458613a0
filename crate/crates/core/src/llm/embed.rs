use std::collections::{BTreeMap, HashMap};
use std::sync::RwLock;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::LlmError;

/// Embedding model selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderConfig {
    /// Feature hashing of lowercase alphanumeric tokens into `dim` buckets
    /// followed by L2 normalization. Bucket of a token is
    /// `(fnv1a64(token) ^ salt * 0x9E3779B97F4A7C15) mod dim`.
    Hashing {
        dim: usize,
        #[serde(default)]
        salt: u64,
    },
    /// Fixed text → vector table; unknown texts are an error.
    Table {
        dim: usize,
        vectors: BTreeMap<String, Vec<f64>>,
    },
    /// OpenAI-compatible `/embeddings` endpoint.
    Live {
        endpoint: String,
        #[serde(default)]
        api_key: Option<String>,
        model: String,
        dim: usize,
    },
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::Hashing { dim: 256, salt: 0 }
    }
}

impl EmbedderConfig {
    pub fn dim(&self) -> usize {
        match self {
            EmbedderConfig::Hashing { dim, .. }
            | EmbedderConfig::Table { dim, .. }
            | EmbedderConfig::Live { dim, .. } => *dim,
        }
    }
}

/// An embedding model plus a per-text cache. The cache is keyed by text
/// because each `Embedder` owns exactly one configuration.
#[derive(Debug)]
pub struct Embedder {
    config: EmbedderConfig,
    cache: RwLock<HashMap<String, Vec<f64>>>,
}

impl Clone for Embedder {
    fn clone(&self) -> Self {
        Self::new(self.config.clone())
    }
}

impl Default for Embedder {
    fn default() -> Self {
        Self::new(EmbedderConfig::default())
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |hash, b| {
        (hash ^ u64::from(*b)).wrapping_mul(FNV_PRIME)
    })
}

pub(crate) fn hash_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

impl Embedder {
    pub fn new(config: EmbedderConfig) -> Self {
        Self {
            config,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn hashing(dim: usize) -> Self {
        Self::new(EmbedderConfig::Hashing { dim, salt: 0 })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim()
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>, LlmError> {
        if text.trim().is_empty() {
            return Err(LlmError::Embedding("empty text".into()));
        }
        if let Some(hit) = self.cache.read().expect("embed cache poisoned").get(text) {
            return Ok(hit.clone());
        }
        let vector = self.compute(text)?;
        if vector.len() != self.dim() {
            return Err(LlmError::Embedding(format!(
                "embedder returned {} dimensions, configured {}",
                vector.len(),
                self.dim()
            )));
        }
        self.cache
            .write()
            .expect("embed cache poisoned")
            .insert(text.to_string(), vector.clone());
        Ok(vector)
    }

    fn compute(&self, text: &str) -> Result<Vec<f64>, LlmError> {
        match &self.config {
            EmbedderConfig::Hashing { dim, salt } => {
                if *dim == 0 {
                    return Err(LlmError::Embedding("dimension must be positive".into()));
                }
                let mut v = vec![0.0; *dim];
                let mix = salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
                for token in hash_tokens(text) {
                    let bucket = (fnv1a64(token.as_bytes()) ^ mix) % (*dim as u64);
                    v[bucket as usize] += 1.0;
                }
                normalize(v).ok_or_else(|| LlmError::Embedding(format!("no tokens in `{text}`")))
            }
            EmbedderConfig::Table { vectors, .. } => vectors
                .get(text)
                .cloned()
                .ok_or_else(|| LlmError::Embedding(format!("no table vector for `{text}`"))),
            EmbedderConfig::Live {
                endpoint,
                api_key,
                model,
                ..
            } => live_embed(endpoint, api_key.as_deref(), model, text),
        }
    }
}

fn normalize(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(v)
}

/// Cosine similarity; 0 when either side is the zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn live_embed(
    endpoint: &str,
    api_key: Option<&str>,
    model: &str,
    text: &str,
) -> Result<Vec<f64>, LlmError> {
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(60))
        .build()
        .map_err(|e| LlmError::Transport(e.to_string()))?;
    let url = format!("{}/embeddings", endpoint.trim_end_matches('/'));
    let mut req = client
        .post(url)
        .json(&serde_json::json!({"model": model, "input": text}));
    if let Some(key) = api_key {
        req = req.bearer_auth(key);
    }
    let payload: serde_json::Value = req
        .send()
        .and_then(|r| r.error_for_status())
        .map_err(|e| LlmError::Transport(e.to_string()))?
        .json()
        .map_err(|e| LlmError::Malformed(e.to_string()))?;
    parse_embedding_payload(&payload)
}

pub(crate) fn parse_embedding_payload(payload: &serde_json::Value) -> Result<Vec<f64>, LlmError> {
    payload["data"][0]["embedding"]
        .as_array()
        .ok_or_else(|| LlmError::Malformed("missing data[0].embedding".into()))?
        .iter()
        .map(|x| {
            x.as_f64()
                .ok_or_else(|| LlmError::Malformed("non-numeric embedding".into()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashing_is_deterministic_and_unit_norm() {
        let e = Embedder::hashing(256);
        let a = e.embed("cpu usage").unwrap();
        let b = Embedder::hashing(256).embed("cpu usage").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 256);
        let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_text_is_error() {
        assert!(Embedder::hashing(16).embed("").is_err());
        assert!(Embedder::hashing(16).embed("  \n").is_err());
    }

    #[test]
    fn table_embedder_checks_dimension() {
        let mut vectors = BTreeMap::new();
        vectors.insert("a".to_string(), vec![1.0, 0.0]);
        let e = Embedder::new(EmbedderConfig::Table { dim: 3, vectors });
        assert!(e.embed("a").is_err());
        assert!(e.embed("b").is_err());
    }

    #[test]
    fn embedding_payload_parsing() {
        let payload = serde_json::json!({"data": [{"embedding": [0.5, 0.25]}]});
        assert_eq!(parse_embedding_payload(&payload).unwrap(), vec![0.5, 0.25]);
        assert!(parse_embedding_payload(&serde_json::json!({})).is_err());
    }
}
