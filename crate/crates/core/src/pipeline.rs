//! Training-example assembly and zero-shot caption inference.
//!
//! Training side: each corpus caption's text embedding is mapped into the
//! generator space and paired with captions drawn from the similarity window
//! of the datastore. Inference side: the audio embedding is projected onto
//! the support, the top-k captions are retrieved (no window), and the
//! backend is asked for a caption.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{apply_mapper, Embedding, LinearMapper};
use crate::error::{Error, Result};
use crate::llm_client::{BackendCall, CaptionBackend, GenerationRequest};
use crate::projection::{project_detailed, ProjectionConfig};
use crate::retrieval::{derive_seed, retrieve_in_range, retrieve_topk, RetrievalConfig, RetrievalMode};
use crate::store::{merge_stores, CaptionDatastore, CaptionStore, EmbeddingSupport};

pub const DEFAULT_PROMPT: &str = "Describe the audio you hear";
pub const DEFAULT_MAX_TOKENS: u32 = 64;

/// Conditioning for one generation: mapped embedding, retrieved captions and
/// the fixed instruction, serialized in that order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptPayload {
    pub mapped_embedding: Vec<f32>,
    pub similar_captions: Vec<String>,
    pub fixed_prompt: String,
}

impl PromptPayload {
    /// Text form for backends that cannot take the embedding as a prefix.
    ///
    /// ```text
    /// Similar captions:
    /// 1. <caption>
    /// 2. <caption>
    ///
    /// <fixed prompt>
    /// ```
    ///
    /// The caption block is omitted when nothing was retrieved.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        if !self.similar_captions.is_empty() {
            s.push_str("Similar captions:\n");
            for (i, c) in self.similar_captions.iter().enumerate() {
                writeln!(s, "{}. {}", i + 1, c).unwrap();
            }
            s.push('\n');
        }
        s.push_str(&self.fixed_prompt);
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub item_id: String,
    #[serde(flatten)]
    pub payload: PromptPayload,
    pub target: String,
    pub retrieval_similarities: Vec<f64>,
}

/// A per-item failure that did not stop the batch.
#[derive(Debug)]
pub struct ItemError {
    pub item_id: String,
    pub error: Error,
}

pub type ItemResult<T> = std::result::Result<T, ItemError>;

#[derive(Serialize)]
struct ErrorRecord<'a> {
    item_id: &'a str,
    error: String,
}

/// Write one JSON object per line; failed items become `{item_id, error}`.
pub fn write_jsonl<T: Serialize>(mut w: impl Write, items: &[ItemResult<T>]) -> Result<()> {
    for item in items {
        match item {
            Ok(v) => serde_json::to_writer(&mut w, v)?,
            Err(e) => serde_json::to_writer(
                &mut w,
                &ErrorRecord {
                    item_id: &e.item_id,
                    error: e.error.to_string(),
                },
            )?,
        }
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimMismatch { expected, found });
    }
    Ok(())
}

/// One example per corpus caption, in corpus order. Each item samples with
/// its own stream, `derive_seed(cfg.seed, item_id)`.
pub fn make_training_examples<'a>(
    corpus: &'a CaptionStore,
    ds: &'a CaptionDatastore,
    mapper: &'a LinearMapper,
    cfg: &'a RetrievalConfig,
    fixed_prompt: &'a str,
) -> Result<impl Iterator<Item = ItemResult<TrainingExample>> + 'a> {
    if cfg.mode != RetrievalMode::Training {
        return Err(Error::InvalidConfig(
            "training examples require a training-mode retrieval config".into(),
        ));
    }
    cfg.validate()?;
    if fixed_prompt.is_empty() {
        return Err(Error::InvalidConfig("fixed prompt is empty".into()));
    }
    check_dim(corpus.dim(), ds.dim())?;
    check_dim(mapper.clap_dim(), corpus.dim())?;

    Ok(corpus.entries().iter().map(move |entry| {
        let build = || -> Result<TrainingExample> {
            let mapped = apply_mapper(mapper, &entry.embedding)?;
            let item_cfg = RetrievalConfig {
                seed: derive_seed(cfg.seed, &entry.id),
                ..cfg.clone()
            };
            let hits = if ds.is_empty() {
                Vec::new()
            } else {
                retrieve_in_range(&entry.embedding, ds, &item_cfg)?
            };
            Ok(TrainingExample {
                item_id: entry.id.clone(),
                payload: PromptPayload {
                    mapped_embedding: mapped,
                    similar_captions: hits.iter().map(|h| h.entry.text.clone()).collect(),
                    fixed_prompt: fixed_prompt.to_string(),
                },
                target: entry.text.clone(),
                retrieval_similarities: hits.iter().map(|h| h.similarity).collect(),
            })
        };
        build().map_err(|error| ItemError {
            item_id: entry.id.clone(),
            error,
        })
    }))
}

/// Support and datastore used together at inference time.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainProfile {
    pub label: String,
    pub support: EmbeddingSupport,
    pub datastore: CaptionDatastore,
}

impl DomainProfile {
    pub fn new(label: impl Into<String>, support: EmbeddingSupport, datastore: CaptionDatastore) -> Result<Self> {
        check_dim(support.dim(), datastore.dim())?;
        Ok(Self {
            label: label.into(),
            support,
            datastore,
        })
    }

    pub fn dim(&self) -> usize {
        self.support.dim()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptMode {
    Replace,
    Augment,
}

/// Swap or extend the support and datastore without touching anything
/// learned. `label` of `None` keeps the current label.
pub fn adapt_domain(
    current: &DomainProfile,
    new_support: &EmbeddingSupport,
    new_datastore: &CaptionDatastore,
    mode: AdaptMode,
    label: Option<&str>,
) -> Result<DomainProfile> {
    check_dim(current.dim(), new_support.dim())?;
    check_dim(current.dim(), new_datastore.dim())?;
    let label = label.map_or_else(|| current.label.clone(), str::to_string);
    let (support, datastore) = match mode {
        AdaptMode::Replace => (new_support.clone(), new_datastore.clone()),
        AdaptMode::Augment => {
            let extend = |base: &CaptionStore, extra: &CaptionStore| -> Result<CaptionStore> {
                if extra.is_empty() {
                    return Ok(base.clone());
                }
                Ok(merge_stores(base, extra, true)?.store)
            };
            (
                extend(&current.support, new_support)?,
                extend(&current.datastore, new_datastore)?,
            )
        }
    };
    DomainProfile::new(label, support, datastore)
}

/// Which embedding queries the datastore at inference time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalQuery {
    /// The raw audio embedding (cross-modal retrieval).
    #[default]
    Audio,
    /// The projected embedding.
    Projected,
}

#[derive(Clone, Debug)]
pub struct CaptionSettings {
    pub mapper: LinearMapper,
    /// `None` feeds the raw audio embedding to the decoder.
    pub projection: Option<ProjectionConfig>,
    /// Only `k` is used: inference always takes the top-k.
    pub retrieval: RetrievalConfig,
    pub fixed_prompt: String,
    pub retrieval_query: RetrievalQuery,
    pub max_tokens: u32,
    pub parallelism: usize,
}

impl CaptionSettings {
    pub fn new(mapper: LinearMapper) -> Self {
        Self {
            mapper,
            projection: Some(ProjectionConfig::default()),
            retrieval: RetrievalConfig::inference(crate::retrieval::DEFAULT_K),
            fixed_prompt: DEFAULT_PROMPT.into(),
            retrieval_query: RetrievalQuery::Audio,
            max_tokens: DEFAULT_MAX_TOKENS,
            parallelism: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievedCaption {
    pub id: String,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionResult {
    pub item_id: String,
    pub caption: String,
    pub retrieved: Vec<RetrievedCaption>,
    #[serde(rename = "entropy")]
    pub projection_weights_entropy: f64,
}

pub fn caption_one(
    item_id: &str,
    audio: &Embedding,
    profile: &DomainProfile,
    settings: &CaptionSettings,
    backend: &dyn CaptionBackend,
) -> Result<CaptionResult> {
    check_dim(profile.dim(), audio.dim())?;
    check_dim(settings.mapper.clap_dim(), audio.dim())?;
    if settings.retrieval.k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }

    let (decoded, entropy) = match &settings.projection {
        Some(cfg) => {
            let p = project_detailed(audio, &profile.support, cfg)?;
            let h = p.entropy();
            (p.embedding, h)
        }
        None => (audio.clone(), 0.0),
    };

    let query = match settings.retrieval_query {
        RetrievalQuery::Audio => audio,
        RetrievalQuery::Projected => &decoded,
    };
    let hits = if profile.datastore.is_empty() {
        Vec::new()
    } else {
        retrieve_topk(query, &profile.datastore, settings.retrieval.k)?
    };

    let payload = PromptPayload {
        mapped_embedding: apply_mapper(&settings.mapper, &decoded)?,
        similar_captions: hits.iter().map(|h| h.entry.text.clone()).collect(),
        fixed_prompt: settings.fixed_prompt.clone(),
    };
    let request = GenerationRequest {
        request_id: item_id.to_string(),
        prompt: payload.render_text(),
        max_tokens: settings.max_tokens,
        soft_prefix: Some(payload.mapped_embedding.clone()),
    };
    let caption = backend.generate(&BackendCall {
        request: &request,
        payload: &payload,
        projected: &decoded,
        datastore: &profile.datastore,
        support: &profile.support,
    })?;
    if caption.trim().is_empty() {
        return Err(Error::MalformedResponse("backend returned an empty caption".into()));
    }

    Ok(CaptionResult {
        item_id: item_id.to_string(),
        caption,
        retrieved: hits
            .iter()
            .map(|h| RetrievedCaption {
                id: h.entry.id.clone(),
                similarity: h.similarity,
            })
            .collect(),
        projection_weights_entropy: entropy,
    })
}

/// Caption every item; output order follows input order whatever the
/// parallelism, and a failing item never aborts the rest.
pub fn caption_batch(
    items: &[(String, Embedding)],
    profile: &DomainProfile,
    settings: &CaptionSettings,
    backend: &dyn CaptionBackend,
) -> Vec<ItemResult<CaptionResult>> {
    let one = |(id, e): &(String, Embedding)| {
        caption_one(id, e, profile, settings, backend).map_err(|error| ItemError {
            item_id: id.clone(),
            error,
        })
    };
    if settings.parallelism <= 1 {
        return items.iter().map(one).collect();
    }
    match rayon::ThreadPoolBuilder::new()
        .num_threads(settings.parallelism)
        .build()
    {
        Ok(pool) => pool.install(|| items.par_iter().map(one).collect()),
        Err(e) => {
            log::warn!("could not start a thread pool ({e}); captioning sequentially");
            items.iter().map(one).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm_client::MockBackend;
    use crate::store::{build_store, RawRecord};

    fn basis_store(n: usize, label: &str) -> CaptionStore {
        build_store(
            (0..n)
                .map(|i| {
                    let mut v = vec![0.0f32; n];
                    v[i] = 1.0;
                    RawRecord::new(format!("{label}{i}"), format!("{label} caption {i}"), v, label)
                })
                .collect(),
            label,
        )
        .unwrap()
    }

    #[test]
    fn prompt_rendering() {
        let p = PromptPayload {
            mapped_embedding: vec![],
            similar_captions: vec!["a dog barks".into(), "rain".into()],
            fixed_prompt: DEFAULT_PROMPT.into(),
        };
        assert_eq!(
            p.render_text(),
            "Similar captions:\n1. a dog barks\n2. rain\n\nDescribe the audio you hear"
        );
        let bare = PromptPayload {
            similar_captions: vec![],
            ..p
        };
        assert_eq!(bare.render_text(), DEFAULT_PROMPT);
    }

    #[test]
    fn payload_serializes_in_conditioning_order() {
        let ex = TrainingExample {
            item_id: "x".into(),
            payload: PromptPayload {
                mapped_embedding: vec![0.5],
                similar_captions: vec!["c".into()],
                fixed_prompt: "p".into(),
            },
            target: "t".into(),
            retrieval_similarities: vec![0.8],
        };
        let s = serde_json::to_string(&ex).unwrap();
        let pos = |k: &str| s.find(k).unwrap();
        assert!(pos("mapped_embedding") < pos("similar_captions"));
        assert!(pos("similar_captions") < pos("fixed_prompt"));
        assert_eq!(serde_json::from_str::<TrainingExample>(&s).unwrap(), ex);
    }

    #[test]
    fn training_self_only_yields_no_similar_captions() {
        let corpus = basis_store(1, "c");
        let cfg = RetrievalConfig::training(3, 0.75, 0.85, 7);
        let m = LinearMapper::identity(1);
        let out: Vec<_> = make_training_examples(&corpus, &corpus, &m, &cfg, DEFAULT_PROMPT)
            .unwrap()
            .collect();
        assert_eq!(out.len(), 1);
        let ex = out[0].as_ref().unwrap();
        assert!(ex.payload.similar_captions.is_empty());
        assert_eq!(ex.target, "c caption 0");
    }

    #[test]
    fn training_rejects_inference_config() {
        let corpus = basis_store(2, "c");
        let m = LinearMapper::identity(2);
        let cfg = RetrievalConfig::inference(3);
        assert!(make_training_examples(&corpus, &corpus, &m, &cfg, DEFAULT_PROMPT).is_err());
    }

    #[test]
    fn caption_exact_match_roundtrip() {
        let s = basis_store(4, "d");
        let profile = DomainProfile::new("d", s.clone(), s.clone()).unwrap();
        let mut settings = CaptionSettings::new(LinearMapper::identity(4));
        settings.projection = Some(ProjectionConfig::with_temperature(1e-6));
        let r = caption_one("q", &s.entries()[2].embedding, &profile, &settings, &MockBackend::new()).unwrap();
        assert_eq!(r.caption, "d caption 2");
        assert_eq!(r.retrieved.len(), 3);
        assert_eq!(r.retrieved[0].id, "d2");
    }

    #[test]
    fn caption_without_datastore_answers_from_projection() {
        let s = basis_store(3, "d");
        let profile = DomainProfile::new("d", s.clone(), CaptionStore::empty(3, "none")).unwrap();
        let settings = CaptionSettings::new(LinearMapper::identity(3));
        let r = caption_one("q", &s.entries()[1].embedding, &profile, &settings, &MockBackend::new()).unwrap();
        assert!(r.retrieved.is_empty());
        assert_eq!(r.caption, "d caption 1");
    }

    #[test]
    fn batch_isolates_failures_and_keeps_order() {
        let s = basis_store(3, "d");
        let profile = DomainProfile::new("d", s.clone(), s.clone()).unwrap();
        let settings = CaptionSettings::new(LinearMapper::identity(3));
        let items: Vec<(String, Embedding)> = ["a", "b", "c"]
            .iter()
            .zip(s.entries())
            .map(|(id, e)| (id.to_string(), e.embedding.clone()))
            .collect();
        let out = caption_batch(&items, &profile, &settings, &MockBackend::failing_on(["b"]));
        assert_eq!(out.len(), 3);
        assert_eq!(out[0].as_ref().unwrap().item_id, "a");
        let err = out[1].as_ref().unwrap_err();
        assert_eq!(err.item_id, "b");
        assert!(err.error.is_backend());
        assert_eq!(out[2].as_ref().unwrap().item_id, "c");
    }

    #[test]
    fn adapt_replace_and_augment() {
        let src = basis_store(3, "s");
        let tgt = basis_store(3, "t");
        let profile = DomainProfile::new("source", src.clone(), src.clone()).unwrap();

        let replaced = adapt_domain(&profile, &tgt, &tgt, AdaptMode::Replace, Some("target")).unwrap();
        assert_eq!(replaced.label, "target");
        assert_eq!(replaced.support, tgt);

        let back = adapt_domain(&replaced, &src, &src, AdaptMode::Replace, Some("source")).unwrap();
        assert_eq!(back, profile);

        let empty = CaptionStore::empty(3, "e");
        let same = adapt_domain(&profile, &empty, &empty, AdaptMode::Augment, None).unwrap();
        assert_eq!(same, profile);

        let grown = adapt_domain(&profile, &tgt, &tgt, AdaptMode::Augment, None).unwrap();
        assert_eq!(grown.support.len(), 6);

        let wrong = basis_store(2, "w");
        assert!(matches!(
            adapt_domain(&profile, &wrong, &wrong, AdaptMode::Replace, None),
            Err(Error::DimMismatch { .. })
        ));
    }
}
