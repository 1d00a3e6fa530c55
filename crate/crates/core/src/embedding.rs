//! Text embeddings for queries and operator profiles.
//!
//! The default provider is signed feature hashing, which needs no model
//! weights and is bit-for-bit reproducible. A remote provider speaks the
//! OpenAI-compatible `/v1/embeddings` protocol.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::http::{endpoint, HttpTransport, RetryPolicy, Transport, API_KEY_ENV};
use crate::registry::Registry;

pub const DEFAULT_DIM: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("remote embedding provider unavailable: {0}")]
    RemoteUnavailable(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Either the zero vector or a unit-L2-norm vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    /// L2-normalizes `values`; all-zero (or non-finite) input becomes zero.
    pub fn normalized(mut values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 && norm.is_finite() {
            values.iter_mut().for_each(|v| *v /= norm);
        } else {
            values.iter_mut().for_each(|v| *v = 0.0);
        }
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError>;
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Signed feature hashing: FNV-1a picks the bucket (`h mod dim`) and bit 32 of
/// the same hash picks the sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed_text(&self, text: &str) -> EmbeddingVector {
        let mut acc = vec![0.0; self.dim];
        for token in tokenize(text) {
            let h = fnv1a(token.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            let sign = if (h >> 32) & 1 == 1 { -1.0 } else { 1.0 };
            acc[bucket] += sign;
        }
        EmbeddingVector::normalized(acc)
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_DIM)
    }
}

impl Embedder for HashingEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        Ok(self.embed_text(text))
    }
}

/// Client for an OpenAI-compatible embeddings endpoint.
pub struct RemoteEmbedder {
    url: String,
    model: String,
    api_key: Option<String>,
    transport: Arc<dyn Transport>,
    retry: RetryPolicy,
}

impl RemoteEmbedder {
    pub fn new(
        base_url: &str,
        model: &str,
        api_key: Option<String>,
        transport: Arc<dyn Transport>,
    ) -> Self {
        Self {
            url: endpoint(base_url, "/v1/embeddings"),
            model: model.to_string(),
            api_key,
            transport,
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn parse(reply: &Value) -> Result<Vec<f64>, EmbeddingError> {
        reply["data"][0]["embedding"]
            .as_array()
            .and_then(|xs| xs.iter().map(Value::as_f64).collect::<Option<Vec<_>>>())
            .ok_or_else(|| EmbeddingError::RemoteUnavailable("malformed embeddings reply".into()))
    }
}

impl Embedder for RemoteEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        let body = json!({ "model": self.model, "input": text });
        let reply = self
            .retry
            .run(|| self.transport.post_json(&self.url, self.api_key.as_deref(), &body))
            .map_err(|(e, _)| EmbeddingError::RemoteUnavailable(e.to_string()))?;
        Ok(EmbeddingVector::normalized(Self::parse(&reply)?))
    }
}

/// Serializable provider choice, stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "provider", rename_all = "snake_case")]
pub enum EmbeddingConfig {
    Hashing { dim: usize },
    Remote { base_url: String, model: String },
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig::Hashing { dim: DEFAULT_DIM }
    }
}

impl EmbeddingConfig {
    pub fn build(&self) -> Result<Arc<dyn Embedder>, EmbeddingError> {
        match self {
            EmbeddingConfig::Hashing { dim } => Ok(Arc::new(HashingEmbedder::new(*dim))),
            EmbeddingConfig::Remote { base_url, model } => {
                let transport = HttpTransport::new(Duration::from_secs(60))
                    .map_err(|e| EmbeddingError::RemoteUnavailable(e.to_string()))?;
                Ok(Arc::new(RemoteEmbedder::new(
                    base_url,
                    model,
                    std::env::var(API_KEY_ENV).ok(),
                    Arc::new(transport),
                )))
            }
        }
    }
}

/// Concatenates the query embedding with the per-layer operator sums:
/// `v(q) ‖ Σ_{layer 1} ‖ … ‖ Σ_{layer ℓ−1}`.
pub fn layer_feature(
    query: &EmbeddingVector,
    layer_sums: &[Vec<f64>],
) -> Result<Vec<f64>, EmbeddingError> {
    let d = query.dim();
    let mut out = Vec::with_capacity(d * (1 + layer_sums.len()));
    out.extend_from_slice(query.as_slice());
    for sum in layer_sums {
        if sum.len() != d {
            return Err(EmbeddingError::DimensionMismatch {
                expected: d,
                got: sum.len(),
            });
        }
        out.extend_from_slice(sum);
    }
    Ok(out)
}

/// Profile embeddings for every operator, indexed like the registry.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorEmbeddings {
    dim: usize,
    vectors: Vec<EmbeddingVector>,
}

impl OperatorEmbeddings {
    pub fn compute(registry: &Registry, embedder: &dyn Embedder) -> Result<Self, EmbeddingError> {
        let vectors = registry
            .operators()
            .iter()
            .map(|op| embedder.embed(&op.profile_text))
            .collect::<Result<Vec<_>, _>>()?;
        let dim = vectors.iter().map(EmbeddingVector::dim).max().unwrap_or(0);
        if let Some(bad) = vectors.iter().find(|v| v.dim() != dim && v.norm() > 0.0) {
            return Err(EmbeddingError::DimensionMismatch {
                expected: dim,
                got: bad.dim(),
            });
        }
        // The exit profile is empty; pad zero vectors to the common width.
        let vectors = vectors
            .into_iter()
            .map(|v| if v.dim() == dim { v } else { EmbeddingVector::zeros(dim) })
            .collect();
        Ok(Self { dim, vectors })
    }

    pub fn get(&self, index: usize) -> &EmbeddingVector {
        &self.vectors[index]
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Raw (unnormalized) sum of the given operators' profile embeddings.
    pub fn layer_sum(&self, members: &[usize]) -> Vec<f64> {
        let mut sum = vec![0.0; self.dim];
        for &i in members {
            for (s, v) in sum.iter_mut().zip(self.vectors[i].as_slice()) {
                *s += v;
            }
        }
        sum
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    /// Independent straight-line version of the hashing rule.
    fn oracle_embed(text: &str, dim: usize) -> Vec<f64> {
        let mut v = vec![0.0f64; dim];
        let lower = text.to_lowercase();
        let mut token = String::new();
        let flush = |token: &mut String, v: &mut Vec<f64>| {
            if token.is_empty() {
                return;
            }
            let mut h: u64 = 14695981039346656037;
            for b in token.bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(1099511628211);
            }
            let idx = (h % dim as u64) as usize;
            v[idx] += if (h & (1u64 << 32)) != 0 { -1.0 } else { 1.0 };
            token.clear();
        };
        for c in lower.chars() {
            if c.is_alphanumeric() {
                token.push(c);
            } else {
                flush(&mut token, &mut v);
            }
        }
        flush(&mut token, &mut v);
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            for x in v.iter_mut() {
                *x /= n;
            }
        }
        v
    }

    #[test]
    fn empty_text_is_zero() {
        let e = HashingEmbedder::default().embed_text("");
        assert_eq!(e.dim(), 64);
        assert!(e.as_slice().iter().all(|&x| x == 0.0));
        let e = HashingEmbedder::default().embed_text("  ,;- ");
        assert_eq!(e.norm(), 0.0);
    }

    #[test]
    fn matches_oracle_and_is_unit_norm() {
        let emb = HashingEmbedder::default();
        for text in ["add two numbers", "Add TWO numbers!!", "ünïcode wörds 42x", "a a a b"] {
            let v = emb.embed_text(text);
            assert!((v.norm() - 1.0).abs() < 1e-9);
            let oracle = oracle_embed(text, 64);
            for (a, b) in v.as_slice().iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-15, "{text}: {a} vs {b}");
            }
        }
        assert_eq!(emb.embed_text("add two numbers"), emb.embed_text("add two numbers"));
    }

    #[test]
    fn layer_feature_concatenates() {
        let emb = HashingEmbedder::default();
        let q = emb.embed_text("what is two plus two");
        assert_eq!(layer_feature(&q, &[]).unwrap(), q.as_slice());
        let s1 = vec![0.5; 64];
        let f = layer_feature(&q, &[s1.clone()]).unwrap();
        assert_eq!(f.len(), 128);
        assert_eq!(&f[..64], q.as_slice());
        assert_eq!(&f[64..], &s1[..]);
        assert_eq!(
            layer_feature(&q, &[vec![0.0; 3]]),
            Err(EmbeddingError::DimensionMismatch { expected: 64, got: 3 })
        );
    }

    #[test]
    fn layer_sum_is_raw_vector_addition() {
        let reg = Registry::builtin();
        let emb = HashingEmbedder::default();
        let ops = OperatorEmbeddings::compute(&reg, &emb).unwrap();
        let cot = reg.index_of("cot").unwrap();
        let react = reg.index_of("react").unwrap();
        let sum = ops.layer_sum(&[cot, react]);
        let a = emb.embed_text(&reg.get(cot).unwrap().profile_text);
        let b = emb.embed_text(&reg.get(react).unwrap().profile_text);
        for i in 0..64 {
            assert_eq!(sum[i], a.as_slice()[i] + b.as_slice()[i]);
        }
        let exit = reg.exit_index().unwrap();
        assert_eq!(ops.get(exit).norm(), 0.0);
    }

    #[test]
    fn catalog_profiles_embed_distinctly() {
        let reg = Registry::builtin();
        let ops = OperatorEmbeddings::compute(&reg, &HashingEmbedder::default()).unwrap();
        for i in 0..ops.len() {
            for j in 0..i {
                assert_ne!(ops.get(i), ops.get(j), "{i} vs {j}");
            }
        }
    }

    struct StubTransport {
        replies: Mutex<Vec<Result<Value, crate::http::TransportError>>>,
        seen: Mutex<Vec<(String, Value)>>,
    }

    impl Transport for StubTransport {
        fn post_json(
            &self,
            url: &str,
            _bearer: Option<&str>,
            body: &Value,
        ) -> Result<Value, crate::http::TransportError> {
            self.seen.lock().unwrap().push((url.to_string(), body.clone()));
            self.replies.lock().unwrap().remove(0)
        }
    }

    #[test]
    fn remote_provider_normalizes_and_reports_failures() {
        let stub = Arc::new(StubTransport {
            replies: Mutex::new(vec![
                Ok(json!({"data": [{"embedding": [3.0, 4.0]}]})),
                Err(crate::http::TransportError::Status { status: 401, body: "no".into() }),
            ]),
            seen: Mutex::new(Vec::new()),
        });
        let remote = RemoteEmbedder::new("http://host/", "mini", None, stub.clone())
            .with_retry(RetryPolicy { max_attempts: 3, base_delay: Duration::ZERO });
        let v = remote.embed("hi").unwrap();
        assert_eq!(v.as_slice(), &[0.6, 0.8]);
        let seen = stub.seen.lock().unwrap()[0].clone();
        assert_eq!(seen.0, "http://host/v1/embeddings");
        assert_eq!(seen.1["model"], "mini");
        assert!(matches!(remote.embed("hi"), Err(EmbeddingError::RemoteUnavailable(_))));
    }
}
