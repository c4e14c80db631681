//! C ABI over the flexmerge core.
//!
//! Models cross the boundary as opaque `FmModel` handles owned by the caller
//! and released with [`fm_model_free`]. Every fallible call returns an
//! [`FmStatus`]; the message for the most recent failure on the calling
//! thread is available from [`fm_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use flexmerge::branch::ExpertBundle;
use flexmerge::clihub::{load_model, save_model, ArtifactKind};
use flexmerge::evalx::perplexity;
use flexmerge::lmcore::generate::{generate, SamplingParams};
use flexmerge::lmcore::model::Transformer;
use flexmerge::lmcore::tokenizer::{decode, BOS};
use flexmerge::merge::{assemble, opt_out, set_bias};
use flexmerge::Error;

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FmStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Checkpoint = 4,
    Merge = 5,
    Input = 6,
    Forbidden = 7,
    Invariant = 8,
    Numeric = 9,
    Config = 10,
    BufferTooSmall = 11,
    Panic = 12,
}

/// A loaded dense, branch or merged model.
pub struct FmModel {
    inner: Transformer,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> FmStatus {
    match e {
        Error::Io { .. } => FmStatus::Io,
        Error::Checkpoint(_) | Error::FingerprintMismatch { .. } | Error::TruncatedBlob { .. } | Error::VersionSkew { .. } | Error::Json(_) => FmStatus::Checkpoint,
        Error::Merge(_) => FmStatus::Merge,
        Error::Forbidden(_) => FmStatus::Forbidden,
        Error::Invariant { .. } => FmStatus::Invariant,
        Error::Numeric { .. } => FmStatus::Numeric,
        Error::Config(_) | Error::Sizing(_) => FmStatus::Config,
        _ => FmStatus::Input,
    }
}

/// Runs `f`, recording any error or panic message.
fn guard(f: impl FnOnce() -> Result<(), FmStatus>) -> FmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FmStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            FmStatus::Panic
        }
    }
}

fn core<T>(r: flexmerge::Result<T>) -> Result<T, FmStatus> {
    r.map_err(|e| {
        set_error(e.to_string());
        status_of(&e)
    })
}

fn null(what: &str) -> FmStatus {
    set_error(format!("{what} is null"));
    FmStatus::NullArgument
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, FmStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        FmStatus::InvalidUtf8
    })
}

unsafe fn model<'a>(p: *const FmModel) -> Result<&'a Transformer, FmStatus> {
    p.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

unsafe fn bytes<'a>(p: *const u8, len: usize, what: &str) -> Result<&'a [u8], FmStatus> {
    match (p.is_null(), len) {
        (_, 0) => Ok(&[]),
        (true, _) => Err(null(what)),
        (false, _) => Ok(std::slice::from_raw_parts(p, len)),
    }
}

unsafe fn hand_out(out: *mut *mut FmModel, m: Transformer) -> Result<(), FmStatus> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(FmModel { inner: m }));
    Ok(())
}

/// Copies `src` plus a trailing NUL into `buf` when it fits. `*needed`
/// receives the full size including the NUL.
unsafe fn copy_out(src: &[u8], buf: *mut u8, cap: usize, needed: *mut usize, nul: bool) -> Result<(), FmStatus> {
    let total = src.len() + nul as usize;
    if !needed.is_null() {
        *needed = total;
    }
    if total > cap || (buf.is_null() && total > 0) {
        set_error(format!("buffer of {cap} bytes is too small for {total}"));
        return Err(FmStatus::BufferTooSmall);
    }
    ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
    if nul {
        *buf.add(src.len()) = 0;
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` and returns
/// the size it needs, NUL included. Pass a null `buf` to query the size.
///
/// # Safety
/// `buf` must be null or valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn fm_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let n = e.len() + 1;
        if !buf.is_null() && cap >= n {
            ptr::copy_nonoverlapping(e.as_ptr(), buf.cast::<u8>(), e.len());
            *buf.add(e.len()) = 0;
        }
        n
    })
}

/// Loads a checkpoint directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fm_model_load(dir: *const c_char, out: *mut *mut FmModel) -> FmStatus {
    guard(|| {
        let dir = text(dir, "dir")?;
        let (m, _) = core(load_model(&PathBuf::from(dir)))?;
        hand_out(out, m)
    })
}

/// Writes a model to a checkpoint directory.
///
/// # Safety
/// `model` must come from this library and `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fm_model_save(model: *const FmModel, dir: *const c_char) -> FmStatus {
    guard(|| {
        let m = self::model(model)?;
        let dir = text(dir, "dir")?;
        let kind = if m.roster.len() == 1 { ArtifactKind::Dense } else { ArtifactKind::Merged };
        core(save_model(m, &PathBuf::from(dir), kind, Default::default())).map(|_| ())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fm_model_free(model: *mut FmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of experts per layer, the public expert included.
///
/// # Safety
/// `model` must come from this library and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fm_model_num_experts(model: *const FmModel, out: *mut usize) -> FmStatus {
    guard(|| {
        let m = self::model(model)?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.roster.len();
        Ok(())
    })
}

/// Number of experts each token activates.
///
/// # Safety
/// `model` must come from this library and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fm_model_top_k(model: *const FmModel, out: *mut usize) -> FmStatus {
    guard(|| {
        let m = self::model(model)?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.config.top_k;
        Ok(())
    })
}

/// Copies the id of expert `index` as a NUL-terminated string.
///
/// # Safety
/// `buf` must be valid for `cap` bytes; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn fm_model_expert_id(model: *const FmModel, index: usize, buf: *mut c_char, cap: usize, needed: *mut usize) -> FmStatus {
    guard(|| {
        let m = self::model(model)?;
        let id = m.roster.get(index).ok_or_else(|| {
            set_error(format!("expert index {index} out of range 0..{}", m.roster.len()));
            FmStatus::Input
        })?;
        copy_out(id.as_bytes(), buf.cast(), cap, needed, true)
    })
}

/// Merges expert bundle directories into the anchor checkpoint at
/// `anchor_dir`. `biases` may be null for the default bias, otherwise it
/// holds `n_bundles` values. `top_k` of 0 selects the default.
///
/// # Safety
/// All strings must be NUL-terminated and `bundle_dirs` must hold
/// `n_bundles` of them.
#[no_mangle]
pub unsafe extern "C" fn fm_merge(
    anchor_dir: *const c_char,
    bundle_dirs: *const *const c_char,
    n_bundles: usize,
    biases: *const f32,
    top_k: usize,
    out: *mut *mut FmModel,
) -> FmStatus {
    guard(|| {
        let (anchor, _) = core(load_model(&PathBuf::from(text(anchor_dir, "anchor_dir")?)))?;
        if bundle_dirs.is_null() && n_bundles > 0 {
            return Err(null("bundle_dirs"));
        }
        let mut bundles = Vec::with_capacity(n_bundles);
        for i in 0..n_bundles {
            let d = text(*bundle_dirs.add(i), "bundle_dirs entry")?;
            bundles.push(core(ExpertBundle::load(&PathBuf::from(d)))?);
        }
        let biases = (!biases.is_null()).then(|| std::slice::from_raw_parts(biases, n_bundles));
        let m = core(assemble(&anchor, &bundles, biases, (top_k > 0).then_some(top_k)))?;
        hand_out(out, m)
    })
}

/// Returns a new model without `expert`.
///
/// # Safety
/// `model` must come from this library, `expert` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fm_opt_out(model: *const FmModel, expert: *const c_char, out: *mut *mut FmModel) -> FmStatus {
    guard(|| {
        let m = core(opt_out(self::model(model)?, text(expert, "expert")?))?;
        hand_out(out, m)
    })
}

/// Returns a new model with `expert`'s selection bias replaced. The bias
/// must be non-positive; negative infinity disables the expert.
///
/// # Safety
/// `model` must come from this library, `expert` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fm_set_bias(model: *const FmModel, expert: *const c_char, bias: f32, out: *mut *mut FmModel) -> FmStatus {
    guard(|| {
        let m = core(set_bias(self::model(model)?, text(expert, "expert")?, bias))?;
        hand_out(out, m)
    })
}

/// Perplexity of one document given as raw bytes.
///
/// # Safety
/// `text` must be valid for `len` bytes and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fm_perplexity(model: *const FmModel, text: *const u8, len: usize, out: *mut f64) -> FmStatus {
    guard(|| {
        let m = self::model(model)?;
        let doc = bytes(text, len, "text")?.to_vec();
        let p = core(perplexity(m, &[doc]))?;
        *out.as_mut().ok_or_else(|| null("out"))? = p;
        Ok(())
    })
}

/// Continues `prompt` by up to `max_new_tokens` bytes. Non-zero `greedy`
/// takes the argmax; otherwise tokens are sampled with `seed`. The
/// continuation (without NUL) goes to `buf`; `*written` receives its length.
///
/// # Safety
/// `prompt` must be valid for `len` bytes, `buf` for `cap` bytes and
/// `written` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn fm_generate(
    model: *const FmModel,
    prompt: *const u8,
    len: usize,
    max_new_tokens: usize,
    seed: u64,
    greedy: c_int,
    buf: *mut u8,
    cap: usize,
    written: *mut usize,
) -> FmStatus {
    guard(|| {
        let m = self::model(model)?;
        let mut tokens = vec![BOS];
        tokens.extend(bytes(prompt, len, "prompt")?.iter().map(|&b| b as u32));
        let params = if greedy != 0 {
            SamplingParams::greedy(max_new_tokens)
        } else {
            SamplingParams {
                max_new_tokens,
                seed,
                ..SamplingParams::default()
            }
        };
        let out = decode(&core(generate(m, &tokens, &params))?);
        copy_out(&out, buf, cap, written, false)
    })
}
