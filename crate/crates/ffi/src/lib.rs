//! C interface to `pkmem`.
//!
//! Every function returns a [`PkmStatus`]. On failure the message is kept per
//! thread and can be read with [`pkm_last_error`]. Handles are opaque and must
//! be released with their `_free` function; passing NULL to a free is a no-op.

use pkmem::embedding_bag::{bag_forward, BagBatch};
use pkmem::memory_layer::{LayerConfig, MemoryLayer, MemoryPool};
use pkmem::pk_index::PkIndex;
use pkmem::tensor::Tensor;
use pkmem::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PkmStatus {
    PkmOk = 0,
    PkmErrNull = 1,
    PkmErrDimension = 2,
    PkmErrIndex = 3,
    PkmErrConfig = 4,
    PkmErrNumeric = 5,
    PkmErrState = 6,
    PkmErrProtocol = 7,
    PkmErrVerification = 8,
    PkmErrIo = 9,
    PkmErrPanic = 10,
}

/// Product-key index over two half-key tables.
pub struct PkmIndex {
    inner: PkIndex<f32>,
}

/// A memory pool with one memory layer attached.
pub struct PkmMemory {
    pool: MemoryPool<f32>,
    layer: MemoryLayer<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PkmStatus {
    match e {
        Error::Dimension(_) => PkmStatus::PkmErrDimension,
        Error::Index { .. } => PkmStatus::PkmErrIndex,
        Error::Config(_) => PkmStatus::PkmErrConfig,
        Error::Numeric(_) => PkmStatus::PkmErrNumeric,
        Error::State(_) | Error::Consistency(_) => PkmStatus::PkmErrState,
        Error::Protocol(_) => PkmStatus::PkmErrProtocol,
        Error::Verification(_) => PkmStatus::PkmErrVerification,
        _ => PkmStatus::PkmErrIo,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PkmStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PkmStatus::PkmOk,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is NULL"));
            PkmStatus::PkmErrNull
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            PkmStatus::PkmErrPanic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Message of the last failed call on this thread, or NULL. Valid until the next call.
#[no_mangle]
pub extern "C" fn pkm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pkm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates an index of `half_n²` keys of width `key_dim` (even) from `seed`.
///
/// # Safety
/// `out` must be a valid pointer to write the handle to.
#[no_mangle]
pub unsafe extern "C" fn pkm_index_new(
    half_n: usize,
    key_dim: usize,
    qk_norm: bool,
    seed: u64,
    out: *mut *mut PkmIndex,
) -> PkmStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        if key_dim % 2 != 0 {
            return Err(Error::Config(format!("key_dim {key_dim} is odd")).into());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inner = PkIndex::new(half_n, key_dim / 2, qk_norm, &mut rng)?;
        *out = Box::into_raw(Box::new(PkmIndex { inner }));
        Ok(())
    })
}

/// # Safety
/// `index` must come from [`pkm_index_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pkm_index_free(index: *mut PkmIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Number of virtual keys (`half_n²`).
///
/// # Safety
/// `index` must be a live handle, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pkm_index_num_keys(index: *const PkmIndex, out: *mut usize) -> PkmStatus {
    guard(|| {
        let index = index.as_ref().ok_or(Fail::Null("index"))?;
        let out = out.as_mut().ok_or(Fail::Null("out"))?;
        *out = index.inner.num_keys();
        Ok(())
    })
}

/// Exact top-`k` keys for `query`; writes `k` indices and descending scores.
///
/// # Safety
/// `query` holds `query_len` floats; `out_indices` and `out_scores` hold `k` slots.
#[no_mangle]
pub unsafe extern "C" fn pkm_index_topk(
    index: *const PkmIndex,
    query: *const f32,
    query_len: usize,
    k: usize,
    out_indices: *mut usize,
    out_scores: *mut f32,
) -> PkmStatus {
    guard(|| {
        let index = index.as_ref().ok_or(Fail::Null("index"))?;
        let q = slice(query, query_len, "query")?;
        let r = index.inner.topk(q, k)?;
        slice_mut(out_indices, k, "out_indices")?.copy_from_slice(&r.indices);
        slice_mut(out_scores, k, "out_scores")?.copy_from_slice(&r.scores);
        Ok(())
    })
}

/// Creates a pool of `half_n²` values of width `v_dim` and one layer on it.
///
/// # Safety
/// `out` must be a valid pointer to write the handle to.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn pkm_memory_new(
    half_n: usize,
    key_dim: usize,
    v_dim: usize,
    model_dim: usize,
    k: usize,
    gated: bool,
    qk_norm: bool,
    seed: u64,
    out: *mut *mut PkmMemory,
) -> PkmStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pool = MemoryPool::new(half_n, key_dim, v_dim, qk_norm, &mut rng)?;
        let layer = MemoryLayer::new(LayerConfig::new(model_dim, k, gated), &pool, &mut rng)?;
        *out = Box::into_raw(Box::new(PkmMemory { pool, layer }));
        Ok(())
    })
}

/// # Safety
/// `memory` must come from [`pkm_memory_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pkm_memory_free(memory: *mut PkmMemory) {
    if !memory.is_null() {
        drop(Box::from_raw(memory));
    }
}

/// Trainable parameters: pool plus the layer's own projections.
///
/// # Safety
/// `memory` must be a live handle, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pkm_memory_param_count(memory: *const PkmMemory, out: *mut usize) -> PkmStatus {
    guard(|| {
        let m = memory.as_ref().ok_or(Fail::Null("memory"))?;
        let out = out.as_mut().ok_or(Fail::Null("out"))?;
        *out = m.pool.param_count() + m.layer.param_count();
        Ok(())
    })
}

/// Layer output for `tokens` row-major inputs of width `model_dim`.
///
/// # Safety
/// `x` and `out` each hold `tokens·model_dim` floats.
#[no_mangle]
pub unsafe extern "C" fn pkm_memory_forward(
    memory: *const PkmMemory,
    x: *const f32,
    tokens: usize,
    model_dim: usize,
    out: *mut f32,
) -> PkmStatus {
    guard(|| {
        let m = memory.as_ref().ok_or(Fail::Null("memory"))?;
        let len = tokens * model_dim;
        let input = Tensor::new(&[tokens, model_dim], slice(x, len, "x")?.to_vec())?;
        let (y, _) = m.layer.forward(&m.pool, &input)?;
        slice_mut(out, len, "out")?.copy_from_slice(y.data());
        Ok(())
    })
}

/// Weighted bag sums: `out[b] = Σ_j weights[b·bag_size+j] · values[indices[b·bag_size+j]]`.
///
/// # Safety
/// `values` holds `rows·dim` floats, `indices`/`weights` hold `bags·bag_size`
/// entries and `out` holds `bags·dim` floats.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn pkm_embedding_bag_forward(
    values: *const f32,
    rows: usize,
    dim: usize,
    indices: *const usize,
    weights: *const f32,
    bags: usize,
    bag_size: usize,
    out: *mut f32,
) -> PkmStatus {
    guard(|| {
        let table = Tensor::new(&[rows, dim], slice(values, rows * dim, "values")?.to_vec())?;
        let n = bags * bag_size;
        let batch = BagBatch::new(
            slice(indices, n, "indices")?.to_vec(),
            slice(weights, n, "weights")?.to_vec(),
            bag_size,
        )?;
        batch.validate(rows)?;
        let y = bag_forward(&table, &batch, 1)?;
        slice_mut(out, bags * dim, "out")?.copy_from_slice(y.data());
        Ok(())
    })
}
