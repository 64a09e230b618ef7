//! Projection of a query embedding onto the text embedding support.
//!
//! The projected vector is the softmax-weighted mean of the support:
//! `w_i = exp(s_i / τ) / Σ_j exp(s_j / τ)` with `s_i` the similarity of the
//! query to support entry `i`, and `E' = Σ_i w_i E_i`. Support entries are
//! unit norm, so `s_i` is computed as the exact cosine (identical to the dot
//! product on unit queries).
//!
//! As `τ → 0` the projection collapses onto the nearest support entry; as
//! `τ → ∞` it tends to the support mean.

use serde::{Deserialize, Serialize};

use crate::embedding::{Embedding, UNIT_NORM_TOL};
use crate::error::{Error, Result};
use crate::retrieval::similarities;
use crate::store::EmbeddingSupport;

pub const DEFAULT_TEMPERATURE: f64 = 0.01;

/// Below this norm the weighted sum is considered degenerate.
const DEGENERATE_NORM: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub temperature: f64,
    pub renormalize_output: bool,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            renormalize_output: true,
        }
    }
}

impl ProjectionConfig {
    pub fn with_temperature(temperature: f64) -> Self {
        Self {
            temperature,
            ..Self::default()
        }
    }
}

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::NonPositiveTemperature(tau));
    }
    Ok(())
}

/// Max-subtracted softmax of `logits / tau`.
pub(crate) fn softmax(logits: &[f64], tau: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logits.iter().map(|&s| ((s - max) / tau).exp()).collect();
    let z: f64 = w.iter().sum();
    for x in &mut w {
        *x /= z;
    }
    w
}

pub fn softmax_weights(query: &Embedding, support: &EmbeddingSupport, tau: f64) -> Result<Vec<f64>> {
    check_temperature(tau)?;
    if support.is_empty() {
        return Err(Error::EmptyStore);
    }
    Ok(softmax(&similarities(query, support)?, tau))
}

/// Shannon entropy (nats) of a weight vector.
pub fn entropy(weights: &[f64]) -> f64 {
    let h: f64 = weights.iter().filter(|&&w| w > 0.0).map(|&w| -w * w.ln()).sum();
    h.max(0.0)
}

/// Full projection result.
#[derive(Clone, Debug)]
pub struct Projection {
    /// The projected embedding; unit norm when `renormalize_output` is set.
    pub embedding: Embedding,
    /// Convex combination before renormalization.
    pub raw: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Projection {
    pub fn raw_norm(&self) -> f64 {
        self.raw.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn entropy(&self) -> f64 {
        entropy(&self.weights)
    }
}

pub fn project_detailed(query: &Embedding, support: &EmbeddingSupport, cfg: &ProjectionConfig) -> Result<Projection> {
    let weights = softmax_weights(query, support, cfg.temperature)?;
    let mut raw = vec![0.0f64; support.dim()];
    for (w, e) in weights.iter().zip(support.entries()) {
        if *w == 0.0 {
            continue;
        }
        for (acc, &x) in raw.iter_mut().zip(e.embedding.as_slice()) {
            *acc += w * f64::from(x);
        }
    }
    let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < DEGENERATE_NORM {
        return Err(Error::DegenerateSum(n));
    }
    let values = if cfg.renormalize_output {
        raw.iter().map(|&x| (x / n) as f32).collect()
    } else {
        raw.iter().map(|&x| x as f32).collect()
    };
    Ok(Projection {
        embedding: Embedding::new(values)?,
        raw,
        weights,
    })
}

pub fn project(query: &Embedding, support: &EmbeddingSupport, cfg: &ProjectionConfig) -> Result<Embedding> {
    project_detailed(query, support, cfg).map(|p| p.embedding)
}

/// Upper bound on the raw projection norm for a unit-norm support.
pub const HULL_NORM_BOUND: f64 = 1.0 + UNIT_NORM_TOL;
