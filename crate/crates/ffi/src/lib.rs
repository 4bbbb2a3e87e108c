//! C ABI over `ica_reweight`.
//!
//! Models are opaque heap handles created by `ica_model_new` or
//! `ica_model_load` and released with `ica_model_free`. Every fallible call
//! returns an [`IcaStatus`]; on failure a message is available from
//! `ica_last_error` on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ica_reweight::model::{
    conditional_nll_loss, init_params, load_checkpoint, nll_loss, save_checkpoint, Demo, DemoSet, ModelConfig,
    ModelParams,
};
use ica_reweight::reweight::maxmin_weights;
use ica_reweight::Error;

/// Result codes. `Ok` is zero; everything else is a failure.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IcaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    ContextOverflow = 5,
    Panic = 6,
}

/// Opaque model handle.
pub struct IcaModel {
    params: ModelParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> IcaStatus {
    match e {
        Error::Io(_) => IcaStatus::Io,
        Error::Checkpoint(_) => IcaStatus::Checkpoint,
        Error::ContextOverflow { .. } => IcaStatus::ContextOverflow,
        _ => IcaStatus::InvalidArgument,
    }
}

/// Runs `f`, converting errors and panics into a status plus a stored message.
fn guard(f: impl FnOnce() -> Result<(), (IcaStatus, String)>) -> IcaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => IcaStatus::Ok,
        Ok(Err((s, m))) => {
            set_error(m);
            s
        }
        Err(_) => {
            set_error("panic inside ica_reweight".into());
            IcaStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (IcaStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (IcaStatus, String) {
    (IcaStatus::NullPointer, format!("{what} is NULL"))
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], (IcaStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, (IcaStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| (IcaStatus::InvalidArgument, "path is not valid UTF-8".into()))
}

unsafe fn model_ref<'a>(m: *const IcaModel) -> Result<&'a ModelParams, (IcaStatus, String)> {
    m.as_ref().map(|m| &m.params).ok_or_else(|| null("model"))
}

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ica_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Creates a freshly initialized model.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn ica_model_new(
    vocab: usize,
    d_model: usize,
    n_layers: usize,
    n_heads: usize,
    n_ctx: usize,
    query_offset: usize,
    seed: u64,
    out: *mut *mut IcaModel,
) -> IcaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = ModelConfig {
            vocab,
            d_model,
            n_layers,
            n_heads,
            n_ctx,
            query_offset,
            seed,
        };
        let params = init_params(&cfg).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(IcaModel { params }));
        Ok(())
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ica_model_load(path: *const c_char, out: *mut *mut IcaModel) -> IcaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let params = load_checkpoint(path_arg(path)?).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(IcaModel { params }));
        Ok(())
    })
}

/// Writes a checkpoint file.
///
/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ica_model_save(model: *const IcaModel, path: *const c_char) -> IcaStatus {
    guard(|| save_checkpoint(model_ref(model)?, path_arg(path)?).map_err(lib_err))
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `model` must come from `ica_model_new`/`ica_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ica_model_free(model: *mut IcaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of scalar parameters, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ica_model_num_params(model: *const IcaModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.data().len())
}

/// −log π(y | x) summed over response tokens.
///
/// # Safety
/// Token pointers must reference the given number of readable `u32`s;
/// `out_loss` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ica_nll(
    model: *const IcaModel,
    prompt: *const u32,
    prompt_len: usize,
    response: *const u32,
    response_len: usize,
    out_loss: *mut f64,
) -> IcaStatus {
    guard(|| {
        let p = model_ref(model)?;
        if out_loss.is_null() {
            return Err(null("out_loss"));
        }
        let x = slice(prompt, prompt_len, "prompt")?;
        let y = slice(response, response_len, "response")?;
        *out_loss = nll_loss(p, x, y).map_err(lib_err)?;
        Ok(())
    })
}

/// Decodes `n_demos` demonstrations packed as
/// `prompt_0 response_0 prompt_1 response_1 ...` in `tokens`.
unsafe fn demos_arg(
    tokens: *const u32,
    prompt_lens: *const usize,
    response_lens: *const usize,
    n_demos: usize,
) -> Result<DemoSet, (IcaStatus, String)> {
    let pl = slice(prompt_lens, n_demos, "demo_prompt_lens")?;
    let rl = slice(response_lens, n_demos, "demo_response_lens")?;
    let total: usize = pl.iter().chain(rl).sum();
    let all = slice(tokens, total, "demo_tokens")?;
    let mut at = 0;
    let mut demos = Vec::with_capacity(n_demos);
    for i in 0..n_demos {
        let prompt = all[at..at + pl[i]].to_vec();
        at += pl[i];
        let response = all[at..at + rl[i]].to_vec();
        at += rl[i];
        demos.push(Demo {
            holdout_id: i,
            similarity: 0.0,
            prompt,
            response,
        });
    }
    Ok(DemoSet { demos })
}

/// SFT in-context approximation score ℓ(y | x) − ℓ(y | demos, x).
///
/// # Safety
/// All array pointers must reference the stated number of readable elements;
/// `demo_tokens` holds the sum of all demo prompt and response lengths.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn ica_score_sft(
    model: *const IcaModel,
    prompt: *const u32,
    prompt_len: usize,
    response: *const u32,
    response_len: usize,
    demo_tokens: *const u32,
    demo_prompt_lens: *const usize,
    demo_response_lens: *const usize,
    n_demos: usize,
    out_score: *mut f64,
) -> IcaStatus {
    guard(|| {
        let p = model_ref(model)?;
        if out_score.is_null() {
            return Err(null("out_score"));
        }
        let x = slice(prompt, prompt_len, "prompt")?;
        let y = slice(response, response_len, "response")?;
        let demos = demos_arg(demo_tokens, demo_prompt_lens, demo_response_lens, n_demos)?;
        let plain = nll_loss(p, x, y).map_err(lib_err)?;
        let cond = conditional_nll_loss(p, &demos, x, y).map_err(lib_err)?;
        *out_score = plain - cond;
        Ok(())
    })
}

/// Per-batch max-min weights of `n` scores into `out_weights`.
///
/// # Safety
/// `scores` must hold `n` readable and `out_weights` `n` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ica_maxmin_weights(scores: *const f64, n: usize, out_weights: *mut f64) -> IcaStatus {
    guard(|| {
        let s = slice(scores, n, "scores")?;
        if n > 0 && out_weights.is_null() {
            return Err(null("out_weights"));
        }
        let w = maxmin_weights(s).map_err(lib_err)?;
        std::ptr::copy_nonoverlapping(w.as_ptr(), out_weights, n);
        Ok(())
    })
}
