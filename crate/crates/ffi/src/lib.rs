//! C ABI over a trained sensealign checkpoint.
//!
//! Every function returns an [`SaStatus`]; on failure the message is kept per
//! thread and can be read with [`sa_last_error`]. Models are opaque handles
//! created by [`sa_model_load`] and released with [`sa_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use sensealign::alignment::{fit_pairs, AnchorPairs, Solver};
use sensealign::checkpoint::Checkpoint;
use sensealign::linalg::{cosine_similarity, DenseMatrix};
use sensealign::Error;

/// Status codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    NotFound = 5,
    Shape = 6,
    Numerical = 7,
    Panic = 8,
}

/// Opaque model handle.
pub struct SaModel {
    checkpoint: Checkpoint,
}

/// Model dimensions.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SaDims {
    pub vocab_size: u32,
    pub embed_dim: u32,
    pub hidden_dim: u32,
    pub num_senses: u32,
    pub proj_dim: u32,
}

/// Values accepted by the `solver` argument of [`sa_fit_projection`].
#[repr(u32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaSolver {
    LeastSquares = 0,
    Orthogonal = 1,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &Error) -> SaStatus {
    match err {
        Error::Io { .. } | Error::Ingest { .. } => SaStatus::Io,
        Error::Checkpoint(_) => SaStatus::Format,
        Error::Shape(_) => SaStatus::Shape,
        Error::Singular(_) | Error::Diverged { .. } => SaStatus::Numerical,
        _ => SaStatus::InvalidArgument,
    }
}

struct Fail(SaStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn fail<T>(status: SaStatus, msg: impl Into<String>) -> Result<T, Fail> {
    Err(Fail(status, msg.into()))
}

/// Runs `f`, records any error, and converts panics into [`SaStatus::Panic`].
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SaStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SaStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SaStatus::Panic
        }
    }
}

unsafe fn model_ref<'a>(model: *const SaModel) -> Result<&'a SaModel, Fail> {
    if model.is_null() {
        return fail(SaStatus::NullPointer, "model handle is null");
    }
    Ok(&*model)
}

unsafe fn str_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if ptr.is_null() {
        return fail(SaStatus::NullPointer, format!("{name} is null"));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .or_else(|_| fail(SaStatus::InvalidArgument, format!("{name} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(ptr: *const T, len: usize, name: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return fail(SaStatus::NullPointer, format!("{name} is null"));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn out_arg<'a, T>(ptr: *mut T, name: &str) -> Result<&'a mut T, Fail> {
    if ptr.is_null() {
        return fail(SaStatus::NullPointer, format!("{name} is null"));
    }
    Ok(&mut *ptr)
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn sa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file into a new handle stored in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sa_model_load(path: *const c_char, out: *mut *mut SaModel) -> SaStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let path = str_arg(path, "path")?;
        let checkpoint = Checkpoint::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(SaModel { checkpoint }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`sa_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn sa_model_free(model: *mut SaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sa_model_dims(model: *const SaModel, out: *mut SaDims) -> SaStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out_arg(out, "out")?;
        let ck = &m.checkpoint;
        *out = SaDims {
            vocab_size: ck.vocab.len() as u32,
            embed_dim: ck.encoder.embed_dim() as u32,
            hidden_dim: ck.encoder.hidden_dim() as u32,
            num_senses: ck.store.num_senses() as u32,
            proj_dim: ck.projection.proj_dim() as u32,
        };
        Ok(())
    })
}

/// Looks up the id of `token` in language `lang`.
///
/// # Safety
/// `model` must be a live handle, `token` and `lang` NUL-terminated strings
/// and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sa_token_id(
    model: *const SaModel,
    token: *const c_char,
    lang: *const c_char,
    out: *mut u32,
) -> SaStatus {
    guard(|| {
        let m = model_ref(model)?;
        let token = str_arg(token, "token")?;
        let lang = str_arg(lang, "lang")?;
        let out = out_arg(out, "out")?;
        match m.checkpoint.vocab.id(token, lang) {
            Some(id) => {
                *out = id;
                Ok(())
            }
            None => fail(SaStatus::NotFound, format!("'{token}' ({lang}) is not in the vocabulary")),
        }
    })
}

/// Final-layer representations of a token sequence, written row-major into
/// `out` (`len * hidden_dim` values).
///
/// # Safety
/// `ids` must hold `len` ids and `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sa_encode(
    model: *const SaModel,
    ids: *const u32,
    len: usize,
    out: *mut f64,
    out_len: usize,
) -> SaStatus {
    guard(|| {
        let m = model_ref(model)?;
        let ids = slice_arg(ids, len, "ids")?;
        if ids.is_empty() {
            return fail(SaStatus::InvalidArgument, "empty sequence");
        }
        let d = m.checkpoint.encoder.hidden_dim();
        if out_len != len * d {
            return fail(SaStatus::Shape, format!("out holds {out_len} values, need {}", len * d));
        }
        if out.is_null() {
            return fail(SaStatus::NullPointer, "out is null");
        }
        let reps = m.checkpoint.encoder.token_reps(ids, m.checkpoint.config.mode)?;
        let dst = std::slice::from_raw_parts_mut(out, out_len);
        for (chunk, rep) in dst.chunks_exact_mut(d).zip(&reps) {
            chunk.copy_from_slice(rep);
        }
        Ok(())
    })
}

/// Active sense of `token` whose projected center is closest in cosine to the
/// projected representation `h` (`len` must equal the hidden width).
///
/// # Safety
/// `h` must hold `len` doubles and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sa_nearest_sense(
    model: *const SaModel,
    token: u32,
    h: *const f64,
    len: usize,
    out: *mut u32,
) -> SaStatus {
    guard(|| {
        let m = model_ref(model)?;
        let h = slice_arg(h, len, "h")?;
        let out = out_arg(out, "out")?;
        let ck = &m.checkpoint;
        if len != ck.encoder.hidden_dim() {
            return fail(SaStatus::Shape, format!("h has {len} values, need {}", ck.encoder.hidden_dim()));
        }
        if token as usize >= ck.store.vocab_size() {
            return fail(SaStatus::NotFound, format!("token id {token} out of range"));
        }
        *out = ck.store.nearest_sense(&ck.projection, token, h)? as u32;
        Ok(())
    })
}

/// Cosine similarity of two vectors; 0 when either has zero norm.
///
/// # Safety
/// `a` and `b` must hold `len` doubles and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sa_cosine(a: *const f64, b: *const f64, len: usize, out: *mut f64) -> SaStatus {
    guard(|| {
        let a = slice_arg(a, len, "a")?;
        let b = slice_arg(b, len, "b")?;
        let out = out_arg(out, "out")?;
        *out = cosine_similarity(a, b).value;
        Ok(())
    })
}

/// Fits `W` (`dim x dim`, row-major into `w_out`) with the [`SaSolver`]
/// `solver`, minimizing `sum_i |W src_i - tgt_i|^2` over `n` row pairs. A negative `ridge` selects
/// the default; the orthogonal solver ignores it. `residuals` receives the
/// identity and fitted residuals and may be null.
///
/// # Safety
/// `src` and `tgt` must hold `n * dim` doubles, `w_out` `dim * dim` doubles,
/// and `residuals`, when not null, two doubles.
#[no_mangle]
pub unsafe extern "C" fn sa_fit_projection(
    src: *const f64,
    tgt: *const f64,
    n: usize,
    dim: usize,
    solver: u32,
    ridge: f64,
    w_out: *mut f64,
    residuals: *mut f64,
) -> SaStatus {
    guard(|| {
        if n == 0 || dim == 0 {
            return fail(SaStatus::InvalidArgument, "need n > 0 and dim > 0");
        }
        let a = slice_arg(src, n * dim, "src")?;
        let b = slice_arg(tgt, n * dim, "tgt")?;
        if w_out.is_null() {
            return fail(SaStatus::NullPointer, "w_out is null");
        }
        let pairs = AnchorPairs {
            source: DenseMatrix::from_vec(n, dim, a.to_vec())?,
            target: DenseMatrix::from_vec(n, dim, b.to_vec())?,
            pairs: Vec::new(),
            skipped: 0,
        };
        let solver = match solver {
            s if s == SaSolver::LeastSquares as u32 => Solver::LeastSquares,
            s if s == SaSolver::Orthogonal as u32 => Solver::Orthogonal,
            other => return fail(SaStatus::InvalidArgument, format!("unknown solver {other}")),
        };
        let fit = fit_pairs(&pairs, solver, (ridge >= 0.0).then_some(ridge))?;
        std::slice::from_raw_parts_mut(w_out, dim * dim).copy_from_slice(fit.w.as_slice());
        if !residuals.is_null() {
            let r = std::slice::from_raw_parts_mut(residuals, 2);
            r[0] = fit.residual_before;
            r[1] = fit.residual_after;
        }
        Ok(())
    })
}
