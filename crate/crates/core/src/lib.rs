//! Retrieval-augmented captioning from precomputed contrastive embeddings.
//!
//! Audio embeddings are projected onto a support of caption text embeddings,
//! similar captions are retrieved from a datastore, and both are handed to a
//! pluggable generation backend. The same stores drive training-example
//! assembly, and swapping them adapts the system to a new domain without
//! retraining.

pub mod cli;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod formats;
pub mod llm_client;
pub mod pipeline;
pub mod projection;
pub mod retrieval;
pub mod store;

pub use embedding::{apply_mapper, cosine_similarity, normalize, Embedding, LinearMapper};
pub use error::{Error, Result};
pub use llm_client::{BackendConfig, CaptionBackend, HttpBackend, MockBackend, RecordingBackend, ReplayBackend};
pub use pipeline::{
    adapt_domain, caption_batch, caption_one, make_training_examples, AdaptMode, CaptionResult, CaptionSettings,
    DomainProfile, PromptPayload, TrainingExample,
};
pub use projection::{project, softmax_weights, ProjectionConfig};
pub use retrieval::{retrieve_in_range, retrieve_topk, scan_similarities, RetrievalConfig, RetrievalMode};
pub use store::{
    build_store, filter_by_source, load_store, merge_stores, save_store, CaptionDatastore, CaptionEntry, CaptionStore,
    EmbeddingSupport, RawRecord,
};
