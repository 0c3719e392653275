//! Embedding-space math and providers.
//!
//! Vectors live on the unit sphere; retrieval and the alignment loss are
//! both cosine-based. A deterministic hash embedder keeps the whole
//! pipeline runnable offline; an HTTP client covers external services.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Default embedding dimension.
pub const DEFAULT_DIM: usize = 64;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("degenerate embedding: zero vector cannot be normalized")]
    Degenerate,
    #[error("embedding dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("embedding provider failure: {0}")]
    Provider(String),
}

/// A real vector, unit-norm after [`EmbeddingVector::normalize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        EmbeddingVector { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Scale onto the unit sphere.
    pub fn normalize(&self) -> Result<EmbeddingVector, EmbeddingError> {
        let n = self.norm();
        if n <= 0.0 || !n.is_finite() {
            return Err(EmbeddingError::Degenerate);
        }
        Ok(EmbeddingVector::new(
            self.values.iter().map(|v| v / n).collect(),
        ))
    }

    /// A zero vector; used when a skill has no text condition.
    pub fn zeros(dim: usize) -> EmbeddingVector {
        EmbeddingVector::new(vec![0.0; dim])
    }
}

/// Dot product of unit vectors. Retrieval ranks by descending similarity,
/// i.e. ascending cosine distance `1 - dot`.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    if a.dim() != b.dim() {
        return Err(EmbeddingError::DimMismatch(a.dim(), b.dim()));
    }
    Ok(a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| x * y)
        .sum::<f64>())
}

/// Cosine distance `1 - cos(a, b)`, in `[0, 2]` for unit vectors.
pub fn alignment_loss(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    Ok(1.0 - cosine_similarity(a, b)?)
}

/// Anything that maps text to a fixed-dimension unit vector.
///
/// Implementations must be deterministic: identical text yields an
/// identical vector, across calls and across processes.
pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError>;
    fn dim(&self) -> usize;
}

/// Deterministic hash-based embedder.
///
/// Hashes `(seed, text)` into a ChaCha stream, draws `dim` standard
/// normals, and normalizes. No per-run salt, so output is stable across
/// process restarts.
#[derive(Debug, Clone)]
pub struct TestEmbedder {
    dim: usize,
    seed: u64,
}

impl TestEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim >= 2, "embedding dim must be >= 2");
        TestEmbedder { dim, seed }
    }
}

impl Default for TestEmbedder {
    fn default() -> Self {
        TestEmbedder::new(DEFAULT_DIM, 0)
    }
}

impl EmbeddingProvider for TestEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(text.as_bytes());
        let digest: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha12Rng::from_seed(digest);
        let raw: Vec<f64> = (0..self.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        // A zero draw has probability zero but would poison normalize.
        EmbeddingVector::new(raw).normalize()
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

/// Environment variable naming the external embedding endpoint.
pub const EMBED_ENDPOINT_ENV: &str = "SCENESCRIPT_EMBED_URL";

#[derive(Debug, Serialize)]
struct EmbedRequest<'a> {
    texts: Vec<&'a str>,
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Client for an external embedding service.
///
/// Protocol: `POST {"texts": [...]}` returning `{"vectors": [[...]]}`.
/// Service vectors whose dimension differs from the target are projected
/// down by a fixed seeded random orthonormal projection, which preserves
/// cosine geometry approximately.
pub struct HttpEmbedder {
    endpoint: String,
    target_dim: usize,
    retries: u32,
    client: reqwest::blocking::Client,
    projection_seed: u64,
}

impl HttpEmbedder {
    pub fn new(endpoint: impl Into<String>, target_dim: usize) -> Self {
        HttpEmbedder {
            endpoint: endpoint.into(),
            target_dim,
            retries: 2,
            client: reqwest::blocking::Client::builder()
                .timeout(std::time::Duration::from_secs(10))
                .build()
                .expect("http client"),
            projection_seed: 7,
        }
    }

    /// Endpoint taken from [`EMBED_ENDPOINT_ENV`].
    pub fn from_env(target_dim: usize) -> Option<Self> {
        std::env::var(EMBED_ENDPOINT_ENV)
            .ok()
            .map(|url| HttpEmbedder::new(url, target_dim))
    }

    pub fn with_retries(mut self, retries: u32) -> Self {
        self.retries = retries;
        self
    }

    fn fetch(&self, text: &str) -> Result<Vec<f64>, EmbeddingError> {
        let mut last_err = String::new();
        for _ in 0..=self.retries {
            let resp = self
                .client
                .post(&self.endpoint)
                .json(&EmbedRequest { texts: vec![text] })
                .send();
            match resp.and_then(|r| r.error_for_status()) {
                Ok(r) => {
                    let body: EmbedResponse = r
                        .json()
                        .map_err(|e| EmbeddingError::Provider(e.to_string()))?;
                    return body
                        .vectors
                        .into_iter()
                        .next()
                        .ok_or_else(|| EmbeddingError::Provider("empty response".into()));
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(EmbeddingError::Provider(last_err))
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        let raw = self.fetch(text)?;
        if raw.len() == self.target_dim {
            return EmbeddingVector::new(raw).normalize();
        }
        let proj = random_orthonormal_projection(raw.len(), self.target_dim, self.projection_seed);
        let projected = apply_projection(&proj, &raw);
        EmbeddingVector::new(projected).normalize()
    }

    fn dim(&self) -> usize {
        self.target_dim
    }
}

/// `cols` orthonormal columns of length `rows`, seeded Gaussian then
/// Gram-Schmidt. Requires `cols <= rows`.
pub fn random_orthonormal_projection(rows: usize, cols: usize, seed: u64) -> Vec<Vec<f64>> {
    assert!(cols <= rows, "projection must reduce dimension");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(&mut rng)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= d * bi;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-9 {
            continue; // redraw on near-dependence
        }
        for vi in &mut v {
            *vi /= n;
        }
        basis.push(v);
    }
    basis
}

fn apply_projection(basis: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    basis
        .iter()
        .map(|b| b.iter().zip(v).map(|(x, y)| x * y).sum())
        .collect()
}
