//! C ABI over the caption store, retrieval and projection.
//!
//! Every fallible function returns a [`RagcapStatus`]; on failure a message
//! is available from [`ragcap_last_error_message`] on the same thread.
//! Stores are opaque handles created by [`ragcap_store_load`] and released
//! with [`ragcap_store_free`]. Strings returned to the caller are owned by
//! the caller and must be released with [`ragcap_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use ragcap::retrieval::RetrievalHit;
use ragcap::{CaptionStore, Embedding, Error, ProjectionConfig, RetrievalConfig};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RagcapStatus {
    Ok = 0,
    NullPointer = 1,
    DimMismatch = 2,
    ZeroVector = 3,
    NonFinite = 4,
    Io = 5,
    CorruptHeader = 6,
    CountMismatch = 7,
    InvalidData = 8,
    InvalidArgument = 9,
    EmptyStore = 10,
    DegenerateSum = 11,
    BufferTooSmall = 12,
    Internal = 13,
}

/// Opaque caption store.
pub struct RagcapStore {
    inner: CaptionStore,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &Error) -> RagcapStatus {
    match err {
        Error::Record { source, .. } => status_of(source),
        Error::DimMismatch { .. } => RagcapStatus::DimMismatch,
        Error::ZeroVector => RagcapStatus::ZeroVector,
        Error::NonFinite => RagcapStatus::NonFinite,
        Error::Io(_) => RagcapStatus::Io,
        Error::CorruptHeader(_) => RagcapStatus::CorruptHeader,
        Error::CountMismatch { .. } => RagcapStatus::CountMismatch,
        Error::NotUnitNorm { .. }
        | Error::DuplicateId(_)
        | Error::InvalidRecord(_)
        | Error::Parse { .. }
        | Error::NoRecords => RagcapStatus::InvalidData,
        Error::EmptyVector | Error::InvalidConfig(_) | Error::NonPositiveTemperature(_) => {
            RagcapStatus::InvalidArgument
        }
        Error::EmptyStore => RagcapStatus::EmptyStore,
        Error::DegenerateSum(_) => RagcapStatus::DegenerateSum,
        _ => RagcapStatus::Internal,
    }
}

/// Run `f`, translating errors and panics into status codes.
fn guard<F>(f: F) -> RagcapStatus
where
    F: FnOnce() -> Result<(), (RagcapStatus, String)>,
{
    clear_last_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RagcapStatus::Ok,
        Ok(Err((status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            RagcapStatus::Internal
        }
    }
}

fn lib_err(e: Error) -> (RagcapStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (RagcapStatus, String) {
    (RagcapStatus::NullPointer, format!("{what} is null"))
}

unsafe fn store_ref<'a>(store: *const RagcapStore) -> Result<&'a CaptionStore, (RagcapStatus, String)> {
    // SAFETY: the caller passes a handle from `ragcap_store_load` that has not been freed.
    unsafe { store.as_ref() }.map(|s| &s.inner).ok_or_else(|| null("store"))
}

unsafe fn embedding_from(values: *const f32, dim: usize) -> Result<Embedding, (RagcapStatus, String)> {
    if values.is_null() {
        return Err(null("vector"));
    }
    // SAFETY: the caller guarantees `values` points to `dim` readable floats.
    let v = unsafe { slice::from_raw_parts(values, dim) };
    Embedding::new(v.to_vec()).map_err(lib_err)
}

fn write_hits(
    hits: &[RetrievalHit<'_>],
    capacity: usize,
    out_indices: *mut usize,
    out_similarities: *mut f64,
    out_count: *mut usize,
) -> Result<(), (RagcapStatus, String)> {
    if out_count.is_null() {
        return Err(null("out_count"));
    }
    // SAFETY: checked non-null; the caller owns the pointee.
    unsafe { *out_count = hits.len() };
    if hits.len() > capacity {
        return Err((
            RagcapStatus::BufferTooSmall,
            format!("{} hits do not fit in capacity {capacity}", hits.len()),
        ));
    }
    if hits.is_empty() {
        return Ok(());
    }
    if out_indices.is_null() {
        return Err(null("out_indices"));
    }
    // SAFETY: the caller guarantees `capacity` writable slots in each buffer.
    let idx = unsafe { slice::from_raw_parts_mut(out_indices, capacity) };
    for (slot, h) in idx.iter_mut().zip(hits) {
        *slot = h.index;
    }
    if !out_similarities.is_null() {
        // SAFETY: as above.
        let sims = unsafe { slice::from_raw_parts_mut(out_similarities, capacity) };
        for (slot, h) in sims.iter_mut().zip(hits) {
            *slot = h.similarity;
        }
    }
    Ok(())
}

/// Load a store from `path` (binary file plus `<path>.tsv`).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ragcap_store_load(path: *const c_char, out: *mut *mut RagcapStore) -> RagcapStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: checked non-null, NUL-terminated by contract.
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| (RagcapStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let inner = ragcap::load_store(path).map_err(lib_err)?;
        // SAFETY: checked non-null.
        unsafe { *out = Box::into_raw(Box::new(RagcapStore { inner })) };
        Ok(())
    })
}

/// Release a store. Null is ignored.
///
/// # Safety
/// `store` must come from [`ragcap_store_load`] and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ragcap_store_free(store: *mut RagcapStore) {
    if !store.is_null() {
        // SAFETY: ownership returns to Rust exactly once.
        drop(unsafe { Box::from_raw(store) });
    }
}

/// # Safety
/// `store` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ragcap_store_len(store: *const RagcapStore, out: *mut usize) -> RagcapStatus {
    guard(|| {
        let s = unsafe { store_ref(store) }?;
        if out.is_null() {
            return Err(null("out"));
        }
        unsafe { *out = s.len() };
        Ok(())
    })
}

/// # Safety
/// `store` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ragcap_store_dim(store: *const RagcapStore, out: *mut usize) -> RagcapStatus {
    guard(|| {
        let s = unsafe { store_ref(store) }?;
        if out.is_null() {
            return Err(null("out"));
        }
        unsafe { *out = s.dim() };
        Ok(())
    })
}

unsafe fn entry_field(
    store: *const RagcapStore,
    index: usize,
    out: *mut *mut c_char,
    field: fn(&ragcap::CaptionEntry) -> &str,
) -> RagcapStatus {
    guard(|| {
        let s = unsafe { store_ref(store) }?;
        if out.is_null() {
            return Err(null("out"));
        }
        let e = s.get(index).ok_or_else(|| {
            (
                RagcapStatus::InvalidArgument,
                format!("index {index} out of range for {} entries", s.len()),
            )
        })?;
        let c = CString::new(field(e)).map_err(|_| (RagcapStatus::InvalidData, "field contains NUL".to_string()))?;
        unsafe { *out = c.into_raw() };
        Ok(())
    })
}

/// Caption text of entry `index`; release with [`ragcap_string_free`].
///
/// # Safety
/// `store` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ragcap_store_entry_text(
    store: *const RagcapStore,
    index: usize,
    out: *mut *mut c_char,
) -> RagcapStatus {
    unsafe { entry_field(store, index, out, |e| &e.text) }
}

/// Id of entry `index`; release with [`ragcap_string_free`].
///
/// # Safety
/// `store` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ragcap_store_entry_id(
    store: *const RagcapStore,
    index: usize,
    out: *mut *mut c_char,
) -> RagcapStatus {
    unsafe { entry_field(store, index, out, |e| &e.id) }
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ragcap_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Cosine similarity of two `dim`-length vectors.
///
/// # Safety
/// `a` and `b` must point to `dim` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ragcap_cosine(a: *const f32, b: *const f32, dim: usize, out: *mut f64) -> RagcapStatus {
    guard(|| {
        let a = unsafe { embedding_from(a, dim) }?;
        let b = unsafe { embedding_from(b, dim) }?;
        if out.is_null() {
            return Err(null("out"));
        }
        let c = ragcap::cosine_similarity(&a, &b).map_err(lib_err)?;
        unsafe { *out = c };
        Ok(())
    })
}

/// The `k` most similar entries, best first (ties by ascending id).
///
/// `out_indices` (and `out_similarities`, which may be null) need room for
/// `capacity` values. `out_count` receives the number of hits even when it
/// exceeds `capacity`, in which case `BufferTooSmall` is returned.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn ragcap_retrieve_topk(
    store: *const RagcapStore,
    query: *const f32,
    dim: usize,
    k: usize,
    out_indices: *mut usize,
    out_similarities: *mut f64,
    capacity: usize,
    out_count: *mut usize,
) -> RagcapStatus {
    guard(|| {
        let s = unsafe { store_ref(store) }?;
        let q = unsafe { embedding_from(query, dim) }?;
        let hits = ragcap::retrieve_topk(&q, s, k).map_err(lib_err)?;
        write_hits(&hits, capacity, out_indices, out_similarities, out_count)
    })
}

/// Up to `k` entries with similarity in `[s_min, s_max]`, chosen uniformly
/// by `seed` when more qualify; output ordered as for top-k.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn ragcap_retrieve_in_range(
    store: *const RagcapStore,
    query: *const f32,
    dim: usize,
    k: usize,
    s_min: f64,
    s_max: f64,
    seed: u64,
    out_indices: *mut usize,
    out_similarities: *mut f64,
    capacity: usize,
    out_count: *mut usize,
) -> RagcapStatus {
    guard(|| {
        let s = unsafe { store_ref(store) }?;
        let q = unsafe { embedding_from(query, dim) }?;
        let cfg = RetrievalConfig::training(k, s_min, s_max, seed);
        let hits = ragcap::retrieve_in_range(&q, s, &cfg).map_err(lib_err)?;
        write_hits(&hits, capacity, out_indices, out_similarities, out_count)
    })
}

/// Softmax-weighted combination of the support, written to `out` (`dim` floats).
///
/// # Safety
/// `query` and `out` must point to `dim` floats.
#[no_mangle]
pub unsafe extern "C" fn ragcap_project(
    support: *const RagcapStore,
    query: *const f32,
    dim: usize,
    temperature: f64,
    renormalize: bool,
    out: *mut f32,
) -> RagcapStatus {
    guard(|| {
        let s = unsafe { store_ref(support) }?;
        let q = unsafe { embedding_from(query, dim) }?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = ProjectionConfig {
            temperature,
            renormalize_output: renormalize,
        };
        let p = ragcap::project(&q, s, &cfg).map_err(lib_err)?;
        let dst = unsafe { slice::from_raw_parts_mut(out, dim) };
        dst.copy_from_slice(p.as_slice());
        Ok(())
    })
}

/// Message for the most recent failure on this thread, or null if the most
/// recent call succeeded. Valid until the next call into this library on the
/// same thread; do not free.
#[no_mangle]
pub extern "C" fn ragcap_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}
