//! Evaluation metrics over executed episodes: per-skill success rate,
//! contact error, average pairwise distance (APD), Fréchet distance
//! between Gaussian-fitted motion feature sets (FID), and text
//! diversity over embeddings.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine_similarity, EmbeddingError, EmbeddingProvider};
use crate::fsm::ExecutionTrace;
use crate::scriptdb::SkillId;
use crate::skills::{CharacterState, JointId};

/// Covariance ridge applied when a set has too few frames.
pub const COV_REGULARIZER: f64 = 1e-6;
/// Negative FID residue within this magnitude clamps to zero.
pub const FID_CLAMP: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("feature dimension mismatch: {a} vs {b}")]
    DimMismatch { a: usize, b: usize },
    #[error("non-finite feature value")]
    NonFinite,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Per-frame feature: joint rotations (quaternions) then root-relative
/// joint positions, in the fixed [`JointId::ALL`] order. 42 reals.
pub fn frame_feature(state: &CharacterState) -> Vec<f64> {
    let mut out = Vec::with_capacity(JointId::ALL.len() * 7);
    for id in JointId::ALL {
        let q = state
            .joint_rotations
            .get(&id)
            .copied()
            .unwrap_or([0.0, 0.0, 0.0, 1.0]);
        out.extend(q);
    }
    for id in JointId::ALL {
        let p = state.joint(id) - state.root_pos;
        out.extend([p.x, p.y, p.z]);
    }
    out
}

/// One motion sample: a frames × dim feature matrix at 30 Hz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionFeature {
    pub frames: Vec<Vec<f64>>,
}

impl MotionFeature {
    pub fn from_trace(trace: &ExecutionTrace) -> Self {
        MotionFeature {
            frames: trace
                .records
                .iter()
                .map(|r| frame_feature(&r.char_state))
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.frames.first().map(|f| f.len()).unwrap_or(0)
    }
}

/// Gaussian moments of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

/// Fit per-frame Gaussian statistics. With `n <= dim` frames the
/// covariance is rank-deficient and gets a `1e-6·I` ridge.
pub fn fit_gaussian(frames: &[Vec<f64>]) -> Result<GaussianStats, MetricsError> {
    let n = frames.len();
    if n == 0 {
        return Err(MetricsError::TooFewSamples { need: 1, got: 0 });
    }
    let dim = frames[0].len();
    for f in frames {
        if f.len() != dim {
            return Err(MetricsError::DimMismatch { a: dim, b: f.len() });
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(MetricsError::NonFinite);
        }
    }
    let mut mu = DVector::zeros(dim);
    for f in frames {
        mu += DVector::from_column_slice(f);
    }
    mu /= n as f64;
    let mut sigma = DMatrix::zeros(dim, dim);
    for f in frames {
        let d = DVector::from_column_slice(f) - &mu;
        sigma += &d * d.transpose();
    }
    sigma /= n as f64;
    if n <= dim {
        for i in 0..dim {
            sigma[(i, i)] += COV_REGULARIZER;
        }
    }
    Ok(GaussianStats { mu, sigma })
}

/// Per-skill success percentage. Skills never attempted are absent from
/// the map rather than reported as 0%.
pub fn success_rate(traces: &[ExecutionTrace]) -> BTreeMap<SkillId, f64> {
    let mut attempts: BTreeMap<SkillId, (usize, usize)> = BTreeMap::new();
    for trace in traces {
        for outcome in &trace.outcomes {
            let e = attempts.entry(outcome.skill).or_insert((0, 0));
            e.0 += 1;
            if outcome.success {
                e.1 += 1;
            }
        }
    }
    attempts
        .into_iter()
        .map(|(skill, (tried, ok))| (skill, 100.0 * ok as f64 / tried as f64))
        .collect()
}

/// Mean final contact/position error over every attempt of one skill.
pub fn contact_error(traces: &[ExecutionTrace], skill: SkillId) -> Option<f64> {
    let errors: Vec<f64> = traces
        .iter()
        .flat_map(|t| t.outcomes.iter())
        .filter(|o| o.skill == skill)
        .map(|o| o.final_error)
        .collect();
    if errors.is_empty() {
        return None;
    }
    Some(errors.iter().sum::<f64>() / errors.len() as f64)
}

/// Average pairwise L2 distance between flattened feature sequences.
/// Sequences are time-aligned by truncation to the common minimum
/// frame count.
pub fn apd(samples: &[MotionFeature]) -> Result<f64, MetricsError> {
    if samples.len() < 2 {
        return Err(MetricsError::TooFewSamples {
            need: 2,
            got: samples.len(),
        });
    }
    let dim = samples[0].dim();
    for s in samples {
        if s.dim() != dim {
            return Err(MetricsError::DimMismatch { a: dim, b: s.dim() });
        }
    }
    let min_frames = samples.iter().map(|s| s.frames.len()).min().unwrap_or(0);
    let flat: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| {
            s.frames[..min_frames]
                .iter()
                .flat_map(|f| f.iter().copied())
                .collect()
        })
        .collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..flat.len() {
        for j in (i + 1)..flat.len() {
            let d: f64 = flat[i]
                .iter()
                .zip(&flat[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            total += d;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Principal square root of a symmetric PSD matrix. Slightly negative
/// eigenvalues from round-off clamp to zero.
fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let mut vals = eig.eigenvalues;
    for v in vals.iter_mut() {
        *v = v.max(0.0).sqrt();
    }
    let q = eig.eigenvectors;
    &q * DMatrix::from_diagonal(&vals) * q.transpose()
}

/// Fréchet distance between two Gaussians:
/// `‖μa−μb‖² + Tr(Σa + Σb − 2·(Σa Σb)^{1/2})`. The matrix square root is
/// computed through the similarity-transformed product
/// `√Σa · Σb · √Σa`, which is symmetric PSD.
pub fn fid_from_stats(a: &GaussianStats, b: &GaussianStats) -> Result<f64, MetricsError> {
    if a.mu.len() != b.mu.len() {
        return Err(MetricsError::DimMismatch {
            a: a.mu.len(),
            b: b.mu.len(),
        });
    }
    let diff = &a.mu - &b.mu;
    let mean_term = diff.dot(&diff);
    let sqrt_a = sqrtm_psd(&a.sigma);
    let inner = &sqrt_a * &b.sigma * &sqrt_a;
    let cross = sqrtm_psd(&inner);
    let trace_term = a.sigma.trace() + b.sigma.trace() - 2.0 * cross.trace();
    let raw = mean_term + trace_term;
    if raw < -FID_CLAMP {
        // Residue beyond numerical noise means the inputs were bad.
        return Err(MetricsError::NonFinite);
    }
    Ok(raw.max(0.0))
}

/// FID over pooled per-frame features of two sample sets.
pub fn fid(set_a: &[MotionFeature], set_b: &[MotionFeature]) -> Result<f64, MetricsError> {
    let pool = |set: &[MotionFeature]| -> Vec<Vec<f64>> {
        set.iter().flat_map(|s| s.frames.iter().cloned()).collect()
    };
    let a = fit_gaussian(&pool(set_a))?;
    let b = fit_gaussian(&pool(set_b))?;
    fid_from_stats(&a, &b)
}

/// Mean pairwise cosine similarity between text embeddings; lower means
/// more diverse.
pub fn script_diversity(
    texts: &[String],
    provider: &dyn EmbeddingProvider,
) -> Result<f64, MetricsError> {
    if texts.len() < 2 {
        return Err(MetricsError::TooFewSamples {
            need: 2,
            got: texts.len(),
        });
    }
    let embeddings = texts
        .iter()
        .map(|t| provider.embed(t))
        .collect::<Result<Vec<_>, _>>()?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..embeddings.len() {
        for j in (i + 1)..embeddings.len() {
            total += cosine_similarity(&embeddings[i], &embeddings[j])?;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Evaluation report emitted by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub success_rate: BTreeMap<SkillId, f64>,
    pub contact_error: BTreeMap<SkillId, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub apd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fid_split_half: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diversity: Option<f64>,
    pub termination_counts: BTreeMap<String, usize>,
}

/// Build the full report from a batch of traces. `fid_split_half`
/// compares the first and second halves of the batch as a sanity number
/// (0 means the halves are statistically identical).
pub fn evaluate_traces(
    traces: &[ExecutionTrace],
    diversity_texts: Option<(&[String], &dyn EmbeddingProvider)>,
) -> EvalReport {
    let success = success_rate(traces);
    let mut errors = BTreeMap::new();
    for skill in SkillId::ALL {
        if let Some(e) = contact_error(traces, skill) {
            errors.insert(skill, e);
        }
    }
    let features: Vec<MotionFeature> = traces
        .iter()
        .filter(|t| !t.records.is_empty())
        .map(MotionFeature::from_trace)
        .collect();
    let apd_value = apd(&features).ok();
    let fid_value = if features.len() >= 4 {
        let mid = features.len() / 2;
        fid(&features[..mid], &features[mid..]).ok()
    } else {
        None
    };
    let diversity = diversity_texts.and_then(|(texts, provider)| {
        script_diversity(texts, provider).ok()
    });
    let mut terminations = BTreeMap::new();
    for trace in traces {
        *terminations
            .entry(format!("{:?}", trace.termination))
            .or_insert(0) += 1;
    }
    EvalReport {
        episodes: traces.len(),
        success_rate: success,
        contact_error: errors,
        apd: apd_value,
        fid_split_half: fid_value,
        diversity,
        termination_counts: terminations,
    }
}
