//! Exact retrieval over a caption datastore.
//!
//! Two selection rules are provided:
//!
//! * [`retrieve_topk`]: the `k` most similar captions, ties broken by
//!   ascending id. Used at inference time.
//! * [`retrieve_in_range`]: up to `k` captions drawn uniformly without
//!   replacement from those whose similarity lies in the closed window
//!   `[s_min, s_max]`. Used when building training examples, so that
//!   near-duplicates of the target caption (similarity above `s_max`) never
//!   reach the prompt.
//!
//! # Sampling algorithm
//!
//! The random subset is a partial Fisher–Yates shuffle over the candidate
//! indices (in store order): for `i in 0..k`, draw `j` uniformly from
//! `i..n` and swap positions `i` and `j`; the first `k` positions are the
//! sample. The generator is ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with
//! `seed_from_u64`, and `j` is drawn with `Rng::random_range`. Per-item
//! streams use [`derive_seed`] so that a query's sample depends only on the
//! base seed and the query key, never on scheduling.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_from_parts, dot, Embedding, ZERO_NORM};
use crate::error::{Error, Result};
use crate::store::{CaptionDatastore, CaptionEntry};

pub const DEFAULT_K: usize = 3;
pub const DEFAULT_S_MIN: f64 = 0.75;
pub const DEFAULT_S_MAX: f64 = 0.85;

/// Stores at least this large are scanned in parallel chunks.
const PAR_SCAN_MIN: usize = 16_384;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMode {
    Training,
    Inference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub k: usize,
    pub s_min: f64,
    pub s_max: f64,
    pub mode: RetrievalMode,
    pub seed: u64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            s_min: DEFAULT_S_MIN,
            s_max: DEFAULT_S_MAX,
            mode: RetrievalMode::Inference,
            seed: 0,
        }
    }
}

impl RetrievalConfig {
    pub fn training(k: usize, s_min: f64, s_max: f64, seed: u64) -> Self {
        Self {
            k,
            s_min,
            s_max,
            mode: RetrievalMode::Training,
            seed,
        }
    }

    pub fn inference(k: usize) -> Self {
        Self {
            k,
            mode: RetrievalMode::Inference,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if self.mode == RetrievalMode::Training {
            let ok = self.s_min.is_finite()
                && self.s_max.is_finite()
                && -1.0 <= self.s_min
                && self.s_min <= self.s_max
                && self.s_max <= 1.0;
            if !ok {
                return Err(Error::InvalidConfig(format!(
                    "similarity range must satisfy -1 <= s_min <= s_max <= 1, got [{}, {}]",
                    self.s_min, self.s_max
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalHit<'a> {
    pub index: usize,
    pub entry: &'a CaptionEntry,
    pub similarity: f64,
}

fn query_sq_norm(query: &Embedding, ds: &CaptionDatastore) -> Result<f64> {
    if query.dim() != ds.dim() {
        return Err(Error::DimMismatch {
            expected: ds.dim(),
            found: query.dim(),
        });
    }
    let n = query.sq_norm();
    if n.sqrt() < ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    Ok(n)
}

/// Cosine similarity of `query` against every entry, in store order.
///
/// Values are bit-identical to [`crate::embedding::cosine_similarity`] and do
/// not depend on how many threads perform the scan.
pub fn similarities(query: &Embedding, ds: &CaptionDatastore) -> Result<Vec<f64>> {
    let qn = query_sq_norm(query, ds)?;
    let q = query.as_slice();
    let one = |(e, &n): (&CaptionEntry, &f64)| cosine_from_parts(dot(q, e.embedding.as_slice()), qn, n);
    let sims = if ds.len() >= PAR_SCAN_MIN {
        ds.entries().par_iter().zip(ds.sq_norms().par_iter()).map(one).collect()
    } else {
        ds.entries().iter().zip(ds.sq_norms()).map(one).collect()
    };
    Ok(sims)
}

/// One hit per entry, in store order.
pub fn scan_similarities<'a>(query: &Embedding, ds: &'a CaptionDatastore) -> Result<Vec<RetrievalHit<'a>>> {
    if ds.is_empty() {
        return Err(Error::EmptyStore);
    }
    Ok(similarities(query, ds)?
        .into_iter()
        .zip(ds.entries())
        .enumerate()
        .map(|(index, (similarity, entry))| RetrievalHit {
            index,
            entry,
            similarity,
        })
        .collect())
}

/// Descending similarity, then ascending id.
pub fn rank_order(a: &RetrievalHit<'_>, b: &RetrievalHit<'_>) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then_with(|| a.entry.id.cmp(&b.entry.id))
}

/// The `k` most similar entries (all of them if the store is smaller).
pub fn retrieve_topk<'a>(query: &Embedding, ds: &'a CaptionDatastore, k: usize) -> Result<Vec<RetrievalHit<'a>>> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let mut hits = scan_similarities(query, ds)?;
    if k < hits.len() {
        hits.select_nth_unstable_by(k - 1, rank_order);
        hits.truncate(k);
    }
    hits.sort_by(rank_order);
    Ok(hits)
}

/// Mix a base seed with a per-item key (FNV-1a over the key bytes, then the
/// SplitMix64 finalizer).
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform `k`-subset of `0..n` by partial Fisher–Yates, in draw order.
pub fn sample_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let take = k.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..take {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(take);
    idx
}

/// Similarity-window selection. Every entry with `s_min <= sim <= s_max` is
/// a candidate; if there are at most `k` all are returned, otherwise a
/// seeded uniform `k`-subset. Output is ordered by [`rank_order`].
pub fn retrieve_in_range<'a>(
    query: &Embedding,
    ds: &'a CaptionDatastore,
    cfg: &RetrievalConfig,
) -> Result<Vec<RetrievalHit<'a>>> {
    if cfg.mode != RetrievalMode::Training {
        return Err(Error::InvalidConfig(
            "similarity-window retrieval requires training mode".into(),
        ));
    }
    cfg.validate()?;
    let candidates: Vec<RetrievalHit<'a>> = scan_similarities(query, ds)?
        .into_iter()
        .filter(|h| cfg.s_min <= h.similarity && h.similarity <= cfg.s_max)
        .collect();
    let mut picked = if candidates.len() <= cfg.k {
        candidates
    } else {
        sample_indices(candidates.len(), cfg.k, cfg.seed)
            .into_iter()
            .map(|i| candidates[i])
            .collect()
    };
    picked.sort_by(rank_order);
    Ok(picked)
}
