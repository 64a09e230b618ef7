//! Measurement harness: a synthetic paired-embedding simulator with a
//! controlled modality gap, gap statistics, recall@k and caption
//! round-trip reconstruction.
//!
//! The simulator draws text embeddings uniformly on the unit sphere and
//! derives each paired audio embedding as
//! `normalize(text_i + offset + noise_i)`, where `offset` is one random
//! direction scaled to `offset_norm` shared by all pairs and `noise_i` has
//! i.i.d. `N(0, noise_sigma²)` components.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_similarity, normalize_f64, Embedding, LinearMapper};
use crate::error::{Error, Result};
use crate::llm_client::{CaptionBackend, MockBackend};
use crate::pipeline::{caption_batch, CaptionResult, CaptionSettings, DomainProfile, ItemResult};
use crate::projection::ProjectionConfig;
use crate::retrieval::RetrievalHit;
use crate::store::{build_store, CaptionStore, RawRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapSpec {
    pub dim: usize,
    pub n_pairs: usize,
    pub offset_norm: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl GapSpec {
    pub fn new(dim: usize, n_pairs: usize, offset_norm: f64, noise_sigma: f64, seed: u64) -> Self {
        Self {
            dim,
            n_pairs,
            offset_norm,
            noise_sigma,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || self.n_pairs == 0 {
            return Err(Error::InvalidConfig("gap spec needs dim >= 2 and n_pairs >= 1".into()));
        }
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !ok(self.offset_norm) || !ok(self.noise_sigma) {
            return Err(Error::InvalidConfig(
                "offset_norm and noise_sigma must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Paired corpus: `texts[i]` is the ground-truth caption of `audio[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub texts: CaptionStore,
    pub audio: Vec<(String, Embedding)>,
    /// The shared translation between the modalities.
    pub offset: Vec<f64>,
}

impl SyntheticCorpus {
    /// `(audio, text)` embedding pairs.
    pub fn pairs(&self) -> Vec<(Embedding, Embedding)> {
        self.audio
            .iter()
            .zip(self.texts.entries())
            .map(|((_, a), t)| (a.clone(), t.embedding.clone()))
            .collect()
    }

    /// Audio item id to ground-truth caption text.
    pub fn truth_by_text(&self) -> HashMap<String, String> {
        self.audio
            .iter()
            .zip(self.texts.entries())
            .map(|((id, _), t)| (id.clone(), t.text.clone()))
            .collect()
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn synth_paired_corpus(spec: &GapSpec) -> Result<SyntheticCorpus> {
    synth_domain(spec, "synthetic")
}

/// As [`synth_paired_corpus`], with ids, captions and source tagged by
/// `domain` so that corpora from different domains never collide.
pub fn synth_domain(spec: &GapSpec, domain: &str) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dir = gaussian(&mut rng, spec.dim);
    let dir_norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    let offset: Vec<f64> = dir.iter().map(|x| x / dir_norm * spec.offset_norm).collect();

    let mut records = Vec::with_capacity(spec.n_pairs);
    let mut noises = Vec::with_capacity(spec.n_pairs);
    for i in 0..spec.n_pairs {
        let text = gaussian(&mut rng, spec.dim);
        let noise = gaussian(&mut rng, spec.dim);
        records.push(RawRecord::new(
            format!("{domain}-t{i:05}"),
            format!("{domain} caption {i}"),
            normalize_f64(&text)?.into_vec(),
            domain,
        ));
        noises.push(noise);
    }
    let texts = build_store(records, domain)?;

    let audio = texts
        .entries()
        .iter()
        .zip(noises)
        .enumerate()
        .map(|(i, (t, noise))| {
            let shift: Vec<f64> = offset
                .iter()
                .zip(&noise)
                .map(|(o, n)| o + spec.noise_sigma * n)
                .collect();
            let e = if shift.iter().all(|&x| x == 0.0) {
                t.embedding.clone()
            } else {
                let v: Vec<f64> = t
                    .embedding
                    .as_slice()
                    .iter()
                    .zip(&shift)
                    .map(|(&x, s)| f64::from(x) + s)
                    .collect();
                normalize_f64(&v)?
            };
            Ok((format!("{domain}-a{i:05}"), e))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticCorpus { texts, audio, offset })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapStats {
    pub n_pairs: usize,
    /// Mean cosine between each audio embedding and its own text.
    pub mean_paired_cosine: f64,
    /// Mean cosine between audio embeddings and other pairs' texts
    /// (the random-pair baseline; 0 when there is a single pair).
    pub mean_unpaired_cosine: f64,
    /// Mean 1-based rank of the true text among all texts, ordered by
    /// similarity to the audio. Ties count in the item's favour.
    pub mean_nn_rank: f64,
}

pub fn modality_gap_stats(pairs: &[(Embedding, Embedding)]) -> Result<GapStats> {
    let n = pairs.len();
    if n == 0 {
        return Err(Error::InvalidConfig("gap statistics need at least one pair".into()));
    }
    let mut paired = 0.0;
    let mut unpaired = 0.0;
    let mut rank_sum = 0.0;
    for (i, (audio, _)) in pairs.iter().enumerate() {
        let sims: Vec<f64> = pairs
            .iter()
            .map(|(_, t)| cosine_similarity(audio, t))
            .collect::<Result<_>>()?;
        let own = sims[i];
        paired += own;
        unpaired += sims
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, s)| s)
            .sum::<f64>();
        rank_sum += 1.0 + sims.iter().filter(|&&s| s > own).count() as f64;
    }
    Ok(GapStats {
        n_pairs: n,
        mean_paired_cosine: paired / n as f64,
        mean_unpaired_cosine: if n > 1 { unpaired / (n * (n - 1)) as f64 } else { 0.0 },
        mean_nn_rank: rank_sum / n as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub k: usize,
    pub hits: usize,
    pub total: usize,
    pub recall: f64,
}

/// An item and its ranked candidate answers (ids or caption texts).
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub item_id: String,
    pub ranked: Vec<String>,
}

pub fn predictions_from_results(results: &[ItemResult<CaptionResult>]) -> Vec<Prediction> {
    results
        .iter()
        .map(|r| match r {
            Ok(c) => Prediction {
                item_id: c.item_id.clone(),
                ranked: vec![c.caption.clone()],
            },
            Err(e) => Prediction {
                item_id: e.item_id.clone(),
                ranked: Vec::new(),
            },
        })
        .collect()
}

pub fn predictions_from_hits(item_id: &str, hits: &[RetrievalHit<'_>]) -> Prediction {
    Prediction {
        item_id: item_id.to_string(),
        ranked: hits.iter().map(|h| h.entry.id.clone()).collect(),
    }
}

/// Fraction of items whose ground truth is among their first `k` candidates.
pub fn recall_at_k(predictions: &[Prediction], truth: &HashMap<String, String>, k: usize) -> Result<RecallReport> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let mut hits = 0;
    for p in predictions {
        let t = truth
            .get(&p.item_id)
            .ok_or_else(|| Error::MissingGroundTruth(p.item_id.clone()))?;
        if p.ranked.iter().take(k).any(|c| c == t) {
            hits += 1;
        }
    }
    let total = predictions.len();
    Ok(RecallReport {
        k,
        hits,
        total,
        recall: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundtripRow {
    pub tau: f64,
    pub reconstructed: usize,
    pub total: usize,
    pub rate: f64,
}

/// Install `corpus` as both support and datastore, caption every entry from
/// its own text embedding, and report how often the original text comes
/// back, for each temperature.
pub fn roundtrip_reconstruction(
    corpus: &CaptionStore,
    taus: &[f64],
    backend: &dyn CaptionBackend,
) -> Result<Vec<RoundtripRow>> {
    let profile = DomainProfile::new(corpus.label(), corpus.clone(), corpus.clone())?;
    let items: Vec<(String, Embedding)> = corpus
        .entries()
        .iter()
        .map(|e| (e.id.clone(), e.embedding.clone()))
        .collect();
    let truth: HashMap<&str, &str> = corpus
        .entries()
        .iter()
        .map(|e| (e.id.as_str(), e.text.as_str()))
        .collect();
    let mut settings = CaptionSettings::new(LinearMapper::identity(corpus.dim()));
    taus.iter()
        .map(|&tau| {
            settings.projection = Some(ProjectionConfig::with_temperature(tau));
            let results = caption_batch(&items, &profile, &settings, backend);
            let mut reconstructed = 0;
            for r in results {
                let r = r.map_err(|e| Error::record(e.item_id, e.error))?;
                if truth.get(r.item_id.as_str()) == Some(&r.caption.as_str()) {
                    reconstructed += 1;
                }
            }
            let total = items.len();
            Ok(RoundtripRow {
                tau,
                reconstructed,
                total,
                rate: if total == 0 {
                    0.0
                } else {
                    reconstructed as f64 / total as f64
                },
            })
        })
        .collect()
}

fn caption_recall(
    corpus: &SyntheticCorpus,
    profile: &DomainProfile,
    projection: Option<ProjectionConfig>,
) -> Result<RecallReport> {
    let mut settings = CaptionSettings::new(LinearMapper::identity(profile.dim()));
    settings.projection = projection;
    let results = caption_batch(&corpus.audio, profile, &settings, &MockBackend::new());
    recall_at_k(&predictions_from_results(&results), &corpus.truth_by_text(), 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub seed: u64,
    pub with_projection: RecallReport,
    pub without_projection: RecallReport,
}

impl AblationOutcome {
    pub fn margin(&self) -> f64 {
        self.with_projection.recall - self.without_projection.recall
    }
}

/// Cross-modal recall@1 of the mock decoder with and without projection,
/// using the simulated texts as both support and datastore.
pub fn projection_ablation(spec: &GapSpec, projection: &ProjectionConfig) -> Result<AblationOutcome> {
    let corpus = synth_paired_corpus(spec)?;
    let profile = DomainProfile::new("synthetic", corpus.texts.clone(), corpus.texts.clone())?;
    Ok(AblationOutcome {
        seed: spec.seed,
        with_projection: caption_recall(&corpus, &profile, Some(projection.clone()))?,
        without_projection: caption_recall(&corpus, &profile, None)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationOutcome {
    pub seed: u64,
    pub source_profile: RecallReport,
    pub target_profile: RecallReport,
}

/// Caption target-domain audio with a source-domain profile, then with the
/// profile swapped to target-domain stores via [`crate::pipeline::adapt_domain`].
pub fn domain_adaptation_trial(spec: &GapSpec, projection: &ProjectionConfig) -> Result<AdaptationOutcome> {
    let source = synth_domain(spec, "source")?;
    let target_spec = GapSpec {
        seed: spec.seed ^ 0x5eed_da7a,
        ..spec.clone()
    };
    let target = synth_domain(&target_spec, "target")?;
    let source_profile = DomainProfile::new("source", source.texts.clone(), source.texts.clone())?;
    let target_profile = crate::pipeline::adapt_domain(
        &source_profile,
        &target.texts,
        &target.texts,
        crate::pipeline::AdaptMode::Replace,
        Some("target"),
    )?;
    Ok(AdaptationOutcome {
        seed: spec.seed,
        source_profile: caption_recall(&target, &source_profile, Some(projection.clone()))?,
        target_profile: caption_recall(&target, &target_profile, Some(projection.clone()))?,
    })
}

/// Plain-text table for round-trip sweeps.
pub fn format_roundtrip_table(rows: &[RoundtripRow]) -> String {
    let mut s = String::from("tau          rate     reconstructed/total\n");
    for r in rows {
        s.push_str(&format!(
            "{:<12e} {:<8.4} {}/{}\n",
            r.tau, r.rate, r.reconstructed, r.total
        ));
    }
    s
}
