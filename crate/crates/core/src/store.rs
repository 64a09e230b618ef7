//! Caption stores: the embedding support used for projection and the
//! datastore used for retrieval share one representation and one on-disk
//! format.
//!
//! A store on disk is two files:
//!
//! * `<path>`: a 20-byte header (`DRC1`, version u32, dim u32, count u64)
//!   followed by `count × dim` little-endian `f32` values, row-major;
//! * `<path>.tsv`: one metadata row per entry, in the same order
//!   (see [`crate::formats`]).

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedding::{self, normalize, Embedding, UNIT_NORM_TOL};
use crate::error::{Error, Result};
use crate::formats::{format_meta_row, parse_meta};

pub const STORE_MAGIC: &[u8; 4] = b"DRC1";
pub const STORE_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionEntry {
    pub id: String,
    pub text: String,
    pub source: String,
    pub embedding: Embedding,
}

/// Raw ingest record; the vector is normalized by [`build_store`].
#[derive(Clone, Debug)]
pub struct RawRecord {
    pub id: String,
    pub text: String,
    pub vector: Vec<f32>,
    pub source: String,
}

impl RawRecord {
    pub fn new(id: impl Into<String>, text: impl Into<String>, vector: Vec<f32>, source: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            vector,
            source: source.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreHeader {
    pub version: u32,
    pub dim: u32,
    pub count: u64,
}

impl StoreHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[..4].copy_from_slice(STORE_MAGIC);
        b[4..8].copy_from_slice(&self.version.to_le_bytes());
        b[8..12].copy_from_slice(&self.dim.to_le_bytes());
        b[12..20].copy_from_slice(&self.count.to_le_bytes());
        b
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::CorruptHeader(format!(
                "file is {} bytes, shorter than the header",
                bytes.len()
            )));
        }
        if &bytes[..4] != STORE_MAGIC {
            return Err(Error::CorruptHeader(format!(
                "bad magic {:?}",
                String::from_utf8_lossy(&bytes[..4])
            )));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != STORE_VERSION {
            return Err(Error::CorruptHeader(format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if dim == 0 {
            return Err(Error::CorruptHeader("dim is zero".into()));
        }
        let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        Ok(Self { version, dim, count })
    }
}

/// An ordered, immutable collection of caption entries with a common dim.
///
/// Squared entry norms are cached so scans compute exact cosines without
/// re-reducing every stored vector.
#[derive(Clone, Debug)]
pub struct CaptionStore {
    label: String,
    dim: usize,
    entries: Vec<CaptionEntry>,
    sq_norms: Vec<f64>,
}

/// Text embeddings that queries are projected onto.
pub type EmbeddingSupport = CaptionStore;
/// Searchable captions used for retrieval.
pub type CaptionDatastore = CaptionStore;

impl PartialEq for CaptionStore {
    fn eq(&self, other: &Self) -> bool {
        self.label == other.label && self.dim == other.dim && self.entries == other.entries
    }
}

impl CaptionStore {
    pub fn empty(dim: usize, label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            dim,
            entries: Vec::new(),
            sq_norms: Vec::new(),
        }
    }

    /// Assemble a store from entries that already satisfy the invariants
    /// (unique ids, non-empty text, unit norm, matching dim).
    fn from_entries_unchecked(label: String, dim: usize, entries: Vec<CaptionEntry>) -> Self {
        let sq_norms = entries.iter().map(|e| e.embedding.sq_norm()).collect();
        Self {
            label,
            dim,
            entries,
            sq_norms,
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CaptionEntry] {
        &self.entries
    }

    pub fn get(&self, i: usize) -> Option<&CaptionEntry> {
        self.entries.get(i)
    }

    pub fn find(&self, id: &str) -> Option<&CaptionEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub(crate) fn sq_norms(&self) -> &[f64] {
        &self.sq_norms
    }

    pub fn header(&self) -> StoreHeader {
        StoreHeader {
            version: STORE_VERSION,
            dim: self.dim as u32,
            count: self.entries.len() as u64,
        }
    }

    /// Embedding bytes exactly as written to disk (after the header).
    pub fn embedding_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.entries.len() * self.dim * 4);
        for e in &self.entries {
            for v in e.embedding.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

fn validate_text_fields(id: &str, text: &str) -> Result<()> {
    if id.is_empty() {
        return Err(Error::InvalidRecord("empty id".into()));
    }
    if text.is_empty() {
        return Err(Error::record(id, Error::InvalidRecord("empty caption text".into())));
    }
    Ok(())
}

/// Normalize and index a batch of raw records, preserving their order.
pub fn build_store(records: Vec<RawRecord>, label: impl Into<String>) -> Result<CaptionStore> {
    let dim = records.first().ok_or(Error::NoRecords)?.vector.len();
    if dim == 0 {
        return Err(Error::EmptyVector);
    }
    let mut seen = HashSet::with_capacity(records.len());
    let mut entries = Vec::with_capacity(records.len());
    for r in records {
        validate_text_fields(&r.id, &r.text)?;
        if !seen.insert(r.id.clone()) {
            return Err(Error::DuplicateId(r.id));
        }
        if r.vector.len() != dim {
            return Err(Error::record(
                r.id,
                Error::DimMismatch {
                    expected: dim,
                    found: r.vector.len(),
                },
            ));
        }
        let embedding = normalize(&r.vector).map_err(|e| Error::record(r.id.clone(), e))?;
        entries.push(CaptionEntry {
            id: r.id,
            text: r.text,
            source: r.source,
            embedding,
        });
    }
    Ok(CaptionStore::from_entries_unchecked(label.into(), dim, entries))
}

/// Sibling metadata path for a binary store path.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".tsv");
    PathBuf::from(s)
}

pub fn save_store(store: &CaptionStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bin = Vec::with_capacity(HEADER_LEN + store.len() * store.dim * 4);
    bin.extend_from_slice(&store.header().to_bytes());
    bin.extend_from_slice(&store.embedding_bytes());
    let meta: String = store
        .entries
        .iter()
        .map(|e| format_meta_row(&e.id, &e.source, &e.text))
        .collect();
    fs::write(path, bin)?;
    fs::write(meta_path(path), meta)?;
    Ok(())
}

fn label_from_path(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Decode a binary embedding file: header plus rows, without metadata.
pub fn read_embedding_file(bytes: &[u8]) -> Result<(StoreHeader, Vec<Vec<f32>>)> {
    let header = StoreHeader::parse(bytes)?;
    let dim = header.dim as usize;
    let body = &bytes[HEADER_LEN..];
    let expected = (header.count as usize)
        .checked_mul(dim * 4)
        .ok_or_else(|| Error::CorruptHeader("count overflows".into()))?;
    if body.len() != expected {
        return Err(Error::CorruptHeader(format!(
            "body is {} bytes, header implies {expected}",
            body.len()
        )));
    }
    let rows = body
        .chunks_exact(dim * 4)
        .map(|row| {
            row.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        })
        .collect();
    Ok((header, rows))
}

/// Load a store written by [`save_store`] (or by an external exporter using
/// the same format). Unit norm, id uniqueness and text validity are
/// re-verified. The label is taken from the file stem.
pub fn load_store(path: impl AsRef<Path>) -> Result<CaptionStore> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let (header, rows) = read_embedding_file(&bytes)?;
    let meta = parse_meta(&fs::read_to_string(meta_path(path))?)?;
    if meta.len() as u64 != header.count {
        return Err(Error::CountMismatch {
            header: header.count,
            rows: meta.len() as u64,
        });
    }
    let dim = header.dim as usize;
    let mut seen = HashSet::with_capacity(meta.len());
    let mut entries = Vec::with_capacity(meta.len());
    for (row, values) in meta.into_iter().zip(rows) {
        validate_text_fields(&row.id, &row.text)?;
        if !seen.insert(row.id.clone()) {
            return Err(Error::DuplicateId(row.id));
        }
        let embedding = Embedding::new(values).map_err(|e| Error::record(row.id.clone(), e))?;
        let norm = embedding.norm();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::NotUnitNorm { id: row.id, norm });
        }
        entries.push(CaptionEntry {
            id: row.id,
            text: row.text,
            source: row.source,
            embedding,
        });
    }
    Ok(CaptionStore::from_entries_unchecked(
        label_from_path(path),
        dim,
        entries,
    ))
}

#[derive(Clone, Debug)]
pub struct FilterOutcome {
    pub store: CaptionStore,
    pub removed: usize,
    /// Number of warnings raised (currently only "result is empty").
    pub warnings: usize,
}

/// Keep only entries whose source is not excluded.
pub fn filter_by_source(store: &CaptionStore, excluded: &BTreeSet<String>) -> FilterOutcome {
    let kept: Vec<CaptionEntry> = store
        .entries
        .iter()
        .filter(|e| !excluded.contains(&e.source))
        .cloned()
        .collect();
    let removed = store.len() - kept.len();
    let mut warnings = 0;
    if kept.is_empty() && !store.is_empty() {
        log::warn!("filter removed every entry of store {:?}", store.label);
        warnings += 1;
    }
    FilterOutcome {
        store: CaptionStore::from_entries_unchecked(store.label.clone(), store.dim, kept),
        removed,
        warnings,
    }
}

#[derive(Clone, Debug)]
pub struct MergeOutcome {
    pub store: CaptionStore,
    /// Ids from the second store that had to be renamed.
    pub id_collisions: usize,
    /// Entries dropped as text duplicates.
    pub dropped_duplicates: usize,
}

/// Concatenate `a` then `b`. With `dedup_on_text`, any entry whose text was
/// already seen earlier in the concatenation is dropped. Ids from `b` that
/// collide are renamed `id#1`, `id#2`, ... until unique.
pub fn merge_stores(a: &CaptionStore, b: &CaptionStore, dedup_on_text: bool) -> Result<MergeOutcome> {
    if a.dim != b.dim {
        return Err(Error::DimMismatch {
            expected: a.dim,
            found: b.dim,
        });
    }
    let mut ids: HashSet<String> = HashSet::with_capacity(a.len() + b.len());
    let mut texts: HashSet<&str> = HashSet::new();
    let mut entries = Vec::with_capacity(a.len() + b.len());
    let mut id_collisions = 0;
    let mut dropped_duplicates = 0;

    for (from_b, e) in a
        .entries
        .iter()
        .map(|e| (false, e))
        .chain(b.entries.iter().map(|e| (true, e)))
    {
        if dedup_on_text && !texts.insert(e.text.as_str()) {
            dropped_duplicates += 1;
            continue;
        }
        let mut entry = e.clone();
        if from_b && ids.contains(&entry.id) {
            id_collisions += 1;
            let mut n = 1;
            while ids.contains(&format!("{}#{n}", e.id)) {
                n += 1;
            }
            entry.id = format!("{}#{n}", e.id);
        }
        ids.insert(entry.id.clone());
        entries.push(entry);
    }
    Ok(MergeOutcome {
        store: CaptionStore::from_entries_unchecked(a.label.clone(), a.dim, entries),
        id_collisions,
        dropped_duplicates,
    })
}

/// Count of entries per source tag.
pub fn source_counts(store: &CaptionStore) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for e in &store.entries {
        *m.entry(e.source.as_str()).or_insert(0) += 1;
    }
    m
}

/// Cosine similarity of entries `i` and `j` using the cached norms.
pub fn pair_similarity(store: &CaptionStore, i: usize, j: usize) -> f64 {
    let (a, b) = (&store.entries[i], &store.entries[j]);
    embedding::cosine_from_parts(
        embedding::dot(a.embedding.as_slice(), b.embedding.as_slice()),
        store.sq_norms[i],
        store.sq_norms[j],
    )
}
