//! C interface to the distillation library: an opaque model handle for
//! loading snapshots and querying next-token distributions, plus a one-call
//! scorer that turns an expert/amateur distribution pair into the retention
//! decision and contrastive soft target. The matching header is generated
//! into `include/cdistill.h` at build time.
//!
//! Conventions: every fallible function returns a [`CdStatus`] and reports
//! details through [`cd_last_error`]; probability buffers always have the
//! vocabulary length; output buffers report their required size through the
//! length pointer when they are too small.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use cdistill::dist::{kl_divergence, TokenDistribution, TokenSequence};
use cdistill::models::{generate_trajectory, AnyModel, DecodeConfig, DecodeMode, LanguageModel};
use cdistill::sampler::{contrast_target, masked_support, select_step};
use cdistill::Error;

/// Result code shared by every fallible call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CdStatus {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// An argument was rejected; `cd_last_error` explains which one.
    InvalidArgument = 3,
    /// A file could not be read or written.
    Io = 4,
    /// A file was read but its contents were malformed.
    Parse = 5,
    /// An output buffer was too small; the length output holds the
    /// required size.
    BufferTooSmall = 6,
}

/// Loaded model behind an opaque pointer. Immutable after creation, so a
/// handle may be shared across threads until `cd_model_free`.
pub struct CdModel {
    inner: AnyModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: CdStatus, msg: impl std::fmt::Display) -> CdStatus {
    let text = msg.to_string().replace('\0', " ");
    let text = CString::new(text).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = text);
    status
}

fn fail_error(e: &Error) -> CdStatus {
    let status = match e {
        Error::Io { .. } => CdStatus::Io,
        Error::Parse { .. } => CdStatus::Parse,
        _ => CdStatus::InvalidArgument,
    };
    fail(status, e)
}

/// Empty-slice view that tolerates a null pointer when `len` is zero.
unsafe fn slice_arg<'a, T>(ptr: *const T, len: usize) -> Option<&'a [T]> {
    if len == 0 {
        Some(&[])
    } else if ptr.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(ptr, len))
    }
}

/// Message for the most recent failure on the calling thread, as a
/// NUL-terminated string. Never null; empty until a call fails. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cd_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a model snapshot (either saved format) and stores the new handle
/// in `*out`. On failure `*out` is left untouched.
///
/// # Safety
/// `path` must point to a NUL-terminated string and `out` to writable
/// memory for one pointer.
#[no_mangle]
pub unsafe extern "C" fn cd_model_load(path: *const c_char, out: *mut *mut CdModel) -> CdStatus {
    if path.is_null() || out.is_null() {
        return fail(CdStatus::NullArgument, "cd_model_load: null argument");
    }
    let path = match CStr::from_ptr(path).to_str() {
        Ok(s) => s,
        Err(e) => return fail(CdStatus::InvalidUtf8, format!("model path: {e}")),
    };
    match AnyModel::load(Path::new(path)) {
        Ok(model) => {
            *out = Box::into_raw(Box::new(CdModel { inner: model }));
            CdStatus::Ok
        }
        Err(e) => fail_error(&e),
    }
}

/// Releases a handle returned by `cd_model_load`. Accepts null.
///
/// # Safety
/// `model` must be null or a handle that has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn cd_model_free(model: *mut CdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of tokens in the model vocabulary, which is also the length of
/// every probability buffer used by this interface. Returns 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cd_model_vocab_len(model: *const CdModel) -> usize {
    match model.as_ref() {
        Some(m) => m.inner.vocab().len(),
        None => 0,
    }
}

/// Copies the text of token `id` into `buf` as a NUL-terminated string.
/// `*written` (optional) receives the text length without the terminator;
/// on `BufferTooSmall` it holds the required capacity including it.
///
/// # Safety
/// `model` must be a live handle; `buf` must point to `cap` writable
/// bytes when `cap` is nonzero; `written` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn cd_model_token(
    model: *const CdModel,
    id: u32,
    buf: *mut c_char,
    cap: usize,
    written: *mut usize,
) -> CdStatus {
    let Some(model) = model.as_ref() else {
        return fail(CdStatus::NullArgument, "cd_model_token: null model");
    };
    let vocab = model.inner.vocab();
    let Some(token) = vocab.token(id) else {
        return fail_error(&Error::TokenOutOfRange {
            id,
            vocab: vocab.len(),
        });
    };
    if cap < token.len() + 1 {
        if !written.is_null() {
            *written = token.len() + 1;
        }
        return fail(
            CdStatus::BufferTooSmall,
            format!("token {id} needs {} bytes", token.len() + 1),
        );
    }
    if buf.is_null() {
        return fail(CdStatus::NullArgument, "cd_model_token: null buffer");
    }
    std::ptr::copy_nonoverlapping(token.as_ptr(), buf.cast::<u8>(), token.len());
    *buf.add(token.len()) = 0;
    if !written.is_null() {
        *written = token.len();
    }
    CdStatus::Ok
}

/// Fills `probs` with the model distribution over the token following
/// `prefix`. `probs_len` must equal the vocabulary size; an empty prefix
/// is allowed and yields the base distribution.
///
/// # Safety
/// `model` must be a live handle; `prefix` must point to `prefix_len`
/// token ids (null allowed when the length is zero); `probs` must point
/// to `probs_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn cd_model_next_probs(
    model: *const CdModel,
    prefix: *const u32,
    prefix_len: usize,
    probs: *mut f64,
    probs_len: usize,
) -> CdStatus {
    let Some(model) = model.as_ref() else {
        return fail(CdStatus::NullArgument, "cd_model_next_probs: null model");
    };
    let Some(prefix) = slice_arg(prefix, prefix_len) else {
        return fail(CdStatus::NullArgument, "cd_model_next_probs: null prefix");
    };
    if probs.is_null() {
        return fail(CdStatus::NullArgument, "cd_model_next_probs: null output");
    }
    let vocab_len = model.inner.vocab().len();
    if probs_len != vocab_len {
        return fail(
            CdStatus::InvalidArgument,
            format!("probability buffer holds {probs_len} entries, vocabulary has {vocab_len}"),
        );
    }
    let seq = match TokenSequence::new(prefix.to_vec(), prefix.len()) {
        Ok(s) => s,
        Err(e) => return fail_error(&e),
    };
    match model.inner.next_distribution(&seq) {
        Ok(dist) => {
            std::ptr::copy_nonoverlapping(dist.probs().as_ptr(), probs, vocab_len);
            CdStatus::Ok
        }
        Err(e) => fail_error(&e),
    }
}

/// Greedy-decodes after `prefix` and writes the generated ids, prompt
/// excluded, into `out`. Generation stops after at most `max_new` tokens
/// or right after emitting `eos` when `eos` is nonnegative. `*out_len`
/// receives the number of generated tokens; when they exceed `cap` the
/// call reports `BufferTooSmall` with the required size there instead.
///
/// # Safety
/// `model` must be a live handle; `prefix` must point to `prefix_len`
/// token ids; `out` must point to `cap` writable ids when `cap` is
/// nonzero; `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cd_model_greedy(
    model: *const CdModel,
    prefix: *const u32,
    prefix_len: usize,
    eos: i64,
    max_new: usize,
    out: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> CdStatus {
    let Some(model) = model.as_ref() else {
        return fail(CdStatus::NullArgument, "cd_model_greedy: null model");
    };
    let Some(prefix) = slice_arg(prefix, prefix_len) else {
        return fail(CdStatus::NullArgument, "cd_model_greedy: null prefix");
    };
    if out_len.is_null() {
        return fail(CdStatus::NullArgument, "cd_model_greedy: null out_len");
    }
    let eos = match eos {
        i64::MIN..=-1 => None,
        _ if eos <= i64::from(u32::MAX) => Some(eos as u32),
        _ => {
            return fail(
                CdStatus::InvalidArgument,
                format!("eos id {eos} exceeds the token id range"),
            )
        }
    };
    let cfg = DecodeConfig {
        mode: DecodeMode::Greedy,
        max_new_tokens: max_new,
        seed: 0,
        eos,
    };
    let seq = match generate_trajectory(&model.inner, prefix, &cfg) {
        Ok((seq, _)) => seq,
        Err(e) => return fail_error(&e),
    };
    let generated = &seq.ids()[prefix.len()..];
    *out_len = generated.len();
    if generated.len() > cap {
        return fail(
            CdStatus::BufferTooSmall,
            format!("completion holds {} tokens", generated.len()),
        );
    }
    if !generated.is_empty() {
        if out.is_null() {
            return fail(CdStatus::NullArgument, "cd_model_greedy: null output");
        }
        std::ptr::copy_nonoverlapping(generated.as_ptr(), out, generated.len());
    }
    CdStatus::Ok
}

/// Scores one decoding step from a raw expert/amateur distribution pair.
///
/// Both inputs are probability vectors of length `len`. The call writes
/// the divergence of the expert from the amateur (floored at `epsilon`)
/// to `*kl`, the retention decision `kl > beta` to `*selected`, the
/// support (ids whose expert mass is at least `alpha` times the expert
/// maximum) to `support`, and the contrastive soft target, aligned with
/// the support, to `target`. `*support_len` receives the support size;
/// when it exceeds `cap` the call reports `BufferTooSmall` with the
/// required size there and leaves the buffers untouched.
///
/// # Safety
/// `expert` and `amateur` must point to `len` doubles; `kl`, `selected`,
/// and `support_len` must be writable; `support` and `target` must point
/// to `cap` writable entries each when `cap` is nonzero.
#[no_mangle]
pub unsafe extern "C" fn cd_score_step(
    expert: *const f64,
    amateur: *const f64,
    len: usize,
    alpha: f64,
    beta: f64,
    epsilon: f64,
    kl: *mut f64,
    selected: *mut bool,
    support: *mut u32,
    target: *mut f64,
    cap: usize,
    support_len: *mut usize,
) -> CdStatus {
    let (Some(expert), Some(amateur)) = (slice_arg(expert, len), slice_arg(amateur, len)) else {
        return fail(CdStatus::NullArgument, "cd_score_step: null distribution");
    };
    if kl.is_null() || selected.is_null() || support_len.is_null() {
        return fail(CdStatus::NullArgument, "cd_score_step: null output");
    }
    let expert = match TokenDistribution::new(expert.to_vec()) {
        Ok(d) => d,
        Err(e) => return fail(CdStatus::InvalidArgument, format!("expert: {e}")),
    };
    let amateur = match TokenDistribution::new(amateur.to_vec()) {
        Ok(d) => d,
        Err(e) => return fail(CdStatus::InvalidArgument, format!("amateur: {e}")),
    };
    let divergence = match kl_divergence(&expert, &amateur, epsilon) {
        Ok(v) => v,
        Err(e) => return fail_error(&e),
    };
    let ids = match masked_support(&expert, alpha) {
        Ok(ids) => ids,
        Err(e) => return fail_error(&e),
    };
    let (_, soft) = match contrast_target(&expert, &amateur, &ids, epsilon) {
        Ok(pair) => pair,
        Err(e) => return fail_error(&e),
    };
    *kl = divergence;
    *selected = select_step(divergence, beta);
    *support_len = ids.len();
    if ids.len() > cap {
        return fail(
            CdStatus::BufferTooSmall,
            format!("support holds {} tokens", ids.len()),
        );
    }
    if support.is_null() || target.is_null() {
        return fail(CdStatus::NullArgument, "cd_score_step: null buffer");
    }
    std::ptr::copy_nonoverlapping(ids.as_ptr(), support, ids.len());
    std::ptr::copy_nonoverlapping(soft.as_ptr(), target, ids.len());
    CdStatus::Ok
}
