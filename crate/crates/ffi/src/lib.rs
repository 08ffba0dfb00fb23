//! C ABI over the encforge toolkit.
//!
//! Objects cross the boundary as opaque handles created by `ef_*_new` /
//! `ef_*_load` and released with the matching `ef_*_free`. Every fallible
//! call returns an [`EfStatus`]; on failure the message is kept per thread
//! and can be fetched with [`ef_last_error_message`]. Strings returned by
//! the library must be released with [`ef_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use encforge::checkpoint::Checkpoint;
use encforge::config::ArchConfig;
use encforge::data::BloomFilter;
use encforge::model::{pool_mean, Batch, ForwardOptions, Model};
use encforge::tokenizer::Vocab;
use encforge::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Data = 4,
    Numeric = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

pub struct EfVocab(Vocab);
pub struct EfModel(Model);
pub struct EfBloom(BloomFilter);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> EfStatus {
    match err {
        Error::Config(_) | Error::Argument(_) => EfStatus::InvalidArgument,
        Error::Io { .. } => EfStatus::Io,
        Error::Data(_) | Error::Resume(_) => EfStatus::Data,
        Error::Range { .. } | Error::Length { .. } | Error::Optimizer(_) | Error::Numeric(_) => EfStatus::Numeric,
    }
}

enum Fail {
    Status(EfStatus, String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn null(what: &str) -> Fail {
    Fail::Status(EfStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> EfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EfStatus::Ok,
        Ok(Err(Fail::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            EfStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Status(EfStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

fn owned_string(s: String) -> Result<*mut c_char, Fail> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Fail::Status(EfStatus::Data, "string contains an interior NUL".into()))
}

/// Copies `src` into the caller's buffer, reporting the required length.
unsafe fn copy_out<T: Copy>(src: &[T], out: *mut T, cap: usize, out_len: *mut usize) -> Result<(), Fail> {
    *out_arg(out_len, "out_len")? = src.len();
    if src.len() > cap {
        return Err(Fail::Status(
            EfStatus::BufferTooSmall,
            format!("buffer holds {cap} elements, {} needed", src.len()),
        ));
    }
    if !src.is_empty() {
        if out.is_null() {
            return Err(null("out"));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    }
    Ok(())
}

/// Message of the last failed call on this thread, or null if none. The
/// caller owns the returned string.
#[no_mangle]
pub extern "C" fn ef_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null_mut(), |s| s.clone().into_raw()))
}

/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn ef_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ef_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Seed derivation used for every random stream in the toolkit.
///
/// # Safety
/// `parts` must point to `n` readable values (or be null with `n == 0`).
#[no_mangle]
pub unsafe extern "C" fn ef_derive_seed(parts: *const u64, n: usize, out: *mut u64) -> EfStatus {
    guard(|| {
        let parts = slice_arg(parts, n, "parts")?;
        *out_arg(out, "out")? = encforge::derive_seed(parts);
        Ok(())
    })
}

// ---- vocabulary ----

/// # Safety
/// `path` must be a NUL-terminated string; `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ef_vocab_load(path: *const c_char, out: *mut *mut EfVocab) -> EfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let v = Vocab::load(Path::new(str_arg(path, "path")?))?;
        *out = boxed(EfVocab(v));
        Ok(())
    })
}

/// Whole-word vocabulary over `words` plus the special tokens.
///
/// # Safety
/// `words` must point to `n` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn ef_vocab_synthetic(words: *const *const c_char, n: usize, out: *mut *mut EfVocab) -> EfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let words = slice_arg(words, n, "words")?
            .iter()
            .map(|&w| str_arg(w, "word"))
            .collect::<Result<Vec<_>, _>>()?;
        *out = boxed(EfVocab(Vocab::synthetic(&words)?));
        Ok(())
    })
}

/// # Safety
/// `v` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn ef_vocab_free(v: *mut EfVocab) {
    if !v.is_null() {
        drop(Box::from_raw(v));
    }
}

/// # Safety
/// `v` must be a live vocabulary handle.
#[no_mangle]
pub unsafe extern "C" fn ef_vocab_len(v: *const EfVocab, out: *mut usize) -> EfStatus {
    guard(|| {
        let v = v.as_ref().ok_or_else(|| null("vocab"))?;
        *out_arg(out, "out")? = v.0.len();
        Ok(())
    })
}

/// Encodes `text` into `out_ids`. `out_len` always receives the number of
/// ids produced; if it exceeds `cap` the call fails with
/// `BufferTooSmall` and nothing is written.
///
/// # Safety
/// `out_ids` must have room for `cap` values.
#[no_mangle]
pub unsafe extern "C" fn ef_vocab_encode(
    v: *const EfVocab,
    text: *const c_char,
    add_specials: bool,
    out_ids: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> EfStatus {
    guard(|| {
        let v = v.as_ref().ok_or_else(|| null("vocab"))?;
        let ids = v.0.encode(str_arg(text, "text")?, add_specials);
        copy_out(&ids, out_ids, cap, out_len)
    })
}

/// Decodes ids into a newly allocated string owned by the caller.
///
/// # Safety
/// `ids` must point to `n` readable values.
#[no_mangle]
pub unsafe extern "C" fn ef_vocab_decode(v: *const EfVocab, ids: *const u32, n: usize, out: *mut *mut c_char) -> EfStatus {
    guard(|| {
        let v = v.as_ref().ok_or_else(|| null("vocab"))?;
        let out = out_arg(out, "out")?;
        *out = owned_string(v.0.decode(slice_arg(ids, n, "ids")?))?;
        Ok(())
    })
}

// ---- model ----

/// Randomly initialised model from a named preset.
///
/// # Safety
/// `preset` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ef_model_init(preset: *const c_char, seed: u64, out: *mut *mut EfModel) -> EfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = ArchConfig::preset_by_name(str_arg(preset, "preset")?)?;
        *out = boxed(EfModel(Model::init(&cfg, seed)?));
        Ok(())
    })
}

/// Loads the weights of a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ef_model_load(path: *const c_char, out: *mut *mut EfModel) -> EfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ck = Checkpoint::load(Path::new(str_arg(path, "path")?))?;
        *out = boxed(EfModel(Model::new(ck.params)));
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn ef_model_free(m: *mut EfModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Hidden width, maximum sequence length and parameter count.
///
/// # Safety
/// `m` must be a live model handle; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn ef_model_info(
    m: *const EfModel,
    hidden_size: *mut usize,
    max_seq_len: *mut usize,
    n_params: *mut usize,
) -> EfStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("model"))?;
        let cfg = m.0.cfg();
        if let Some(h) = hidden_size.as_mut() {
            *h = cfg.hidden;
        }
        if let Some(l) = max_seq_len.as_mut() {
            *l = cfg.max_seq_len;
        }
        if let Some(p) = n_params.as_mut() {
            *p = m.0.params.n_params();
        }
        Ok(())
    })
}

/// Mean-pooled embedding of one token sequence, written to `out`
/// (`hidden_size` values).
///
/// # Safety
/// `ids` must point to `n` values and `out` have room for `cap` values.
#[no_mangle]
pub unsafe extern "C" fn ef_model_embed(
    m: *const EfModel,
    ids: *const u32,
    n: usize,
    out: *mut f64,
    cap: usize,
    out_len: *mut usize,
) -> EfStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("model"))?;
        let ids = slice_arg(ids, n, "ids")?;
        if ids.is_empty() {
            return Err(Fail::Status(EfStatus::InvalidArgument, "empty sequence".into()));
        }
        let batch = Batch::from_sequences(&[ids])?;
        let hidden = m.0.forward(&batch, &ForwardOptions::eval())?.hidden;
        let pooled = pool_mean(&hidden, &batch.valid_rows())?;
        copy_out(&pooled, out, cap, out_len)
    })
}

// ---- Bloom filter ----

/// Filter sized for `expected` insertions at false-positive rate `fp_rate`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ef_bloom_new(expected: u64, fp_rate: f64, seed: u64, out: *mut *mut EfBloom) -> EfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = boxed(EfBloom(BloomFilter::with_rate(expected, fp_rate, seed)?));
        Ok(())
    })
}

/// # Safety
/// `b` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn ef_bloom_free(b: *mut EfBloom) {
    if !b.is_null() {
        drop(Box::from_raw(b));
    }
}

/// Inserts `len` bytes; `was_new` receives false if the item was
/// (possibly falsely) already present.
///
/// # Safety
/// `item` must point to `len` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn ef_bloom_insert(b: *mut EfBloom, item: *const u8, len: usize, was_new: *mut bool) -> EfStatus {
    guard(|| {
        let b = b.as_mut().ok_or_else(|| null("bloom"))?;
        let fresh = !b.0.insert(slice_arg(item, len, "item")?);
        if let Some(w) = was_new.as_mut() {
            *w = fresh;
        }
        Ok(())
    })
}

/// # Safety
/// `item` must point to `len` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn ef_bloom_contains(b: *const EfBloom, item: *const u8, len: usize, out: *mut bool) -> EfStatus {
    guard(|| {
        let b = b.as_ref().ok_or_else(|| null("bloom"))?;
        *out_arg(out, "out")? = b.0.contains(slice_arg(item, len, "item")?);
        Ok(())
    })
}
