//! C ABI over the biolm engine.
//!
//! Every function returns a [`BiolmStatus`]; results travel through out
//! pointers. After a non-`Ok` status, [`biolm_last_error`] describes the
//! failure on the calling thread. Handles are opaque and must be released
//! with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use biolm::benchmark::{overall, MetricReport, NerMetrics, RankedMetrics};
use biolm::model::{load_checkpoint, Checkpoint};
use biolm::tokenizer::{SubwordVocab, Tokenizer};
use biolm::training::{lr_at, ScheduleKind, ScheduleSpec, Warmup};
use biolm::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BiolmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    BufferTooSmall = 3,
    Shape = 4,
    Index = 5,
    Contract = 6,
    Config = 7,
    Data = 8,
    Format = 9,
    Training = 10,
    Compatibility = 11,
    Io = 12,
    Check = 13,
    EmptyLoss = 14,
    Panic = 15,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BiolmSchedule {
    WarmupLinear = 0,
    WarmupCosine = 1,
}

/// Per-task metrics in percent, one benchmark row.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BiolmMetricRow {
    pub top3_acc: f64,
    pub top3_hit3: f64,
    pub symrec_acc: f64,
    pub symrec_hit3: f64,
    pub danet_acc: f64,
    pub nli_acc: f64,
    pub ner_acc: f64,
    pub ner_f1: f64,
}

/// Opaque tokenizer handle.
pub struct BiolmTokenizer(Tokenizer);

/// Opaque checkpoint handle.
pub struct BiolmCheckpoint(Checkpoint);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn status_of(e: &Error) -> BiolmStatus {
    match e {
        Error::Shape(_) => BiolmStatus::Shape,
        Error::Index(_) => BiolmStatus::Index,
        Error::Contract(_) => BiolmStatus::Contract,
        Error::EmptyLoss => BiolmStatus::EmptyLoss,
        Error::Config(_) => BiolmStatus::Config,
        Error::Data(_) => BiolmStatus::Data,
        Error::Format { .. } => BiolmStatus::Format,
        Error::Training { .. } => BiolmStatus::Training,
        Error::Check(_) => BiolmStatus::Check,
        Error::Compatibility(_) => BiolmStatus::Compatibility,
        Error::Io { .. } => BiolmStatus::Io,
    }
}

/// Failure carried to the boundary.
struct Fail(BiolmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> BiolmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BiolmStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            BiolmStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(BiolmStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(BiolmStatus::InvalidUtf8, format!("`{what}` is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Copy `bytes` plus a terminating nul into `buf`; `len_out` always gets
/// the length without the terminator.
unsafe fn write_str(
    s: &str,
    buf: *mut c_char,
    capacity: usize,
    len_out: *mut usize,
) -> Result<(), Fail> {
    *out_arg(len_out, "len_out")? = s.len();
    if capacity < s.len() + 1 {
        return Err(Fail(
            BiolmStatus::BufferTooSmall,
            format!("need {} bytes, buffer holds {capacity}", s.len() + 1),
        ));
    }
    if buf.is_null() {
        return Err(null("buf"));
    }
    ptr::copy_nonoverlapping(s.as_ptr(), buf as *mut u8, s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

/// Message of the last failure on this thread; empty if none. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn biolm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn biolm_tokenizer_load(
    path: *const c_char,
    max_len: usize,
    out: *mut *mut BiolmTokenizer,
) -> BiolmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = str_arg(path, "path")?;
        let tok = Tokenizer::new(SubwordVocab::load(Path::new(path))?, max_len)?;
        *out = Box::into_raw(Box::new(BiolmTokenizer(tok)));
        Ok(())
    })
}

/// # Safety
/// `tok` must come from [`biolm_tokenizer_load`] and not be freed yet, or be null.
#[no_mangle]
pub unsafe extern "C" fn biolm_tokenizer_free(tok: *mut BiolmTokenizer) {
    if !tok.is_null() {
        drop(Box::from_raw(tok));
    }
}

/// # Safety
/// `tok` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn biolm_tokenizer_vocab_size(
    tok: *const BiolmTokenizer,
    out: *mut usize,
) -> BiolmStatus {
    guard(|| {
        let tok = tok.as_ref().ok_or_else(|| null("tok"))?;
        *out_arg(out, "out")? = tok.0.vocab().len();
        Ok(())
    })
}

/// Encode `text` as `[CLS] .. [SEP]` ids without padding. `len_out` gets
/// the id count; `BufferTooSmall` if it exceeds `capacity`.
///
/// # Safety
/// `tok` must be a live handle, `text` nul-terminated, `ids` valid for
/// `capacity` writes.
#[no_mangle]
pub unsafe extern "C" fn biolm_tokenizer_encode(
    tok: *const BiolmTokenizer,
    text: *const c_char,
    ids: *mut u32,
    capacity: usize,
    len_out: *mut usize,
) -> BiolmStatus {
    guard(|| {
        let tok = tok.as_ref().ok_or_else(|| null("tok"))?;
        let text = str_arg(text, "text")?;
        let len_out = out_arg(len_out, "len_out")?;
        let enc = tok.0.encode(text);
        let valid = &enc.ids[..enc.valid_len];
        *len_out = valid.len();
        if capacity < valid.len() {
            return Err(Fail(
                BiolmStatus::BufferTooSmall,
                format!("need {} ids, buffer holds {capacity}", valid.len()),
            ));
        }
        if ids.is_null() {
            return Err(null("ids"));
        }
        ptr::copy_nonoverlapping(valid.as_ptr(), ids, valid.len());
        Ok(())
    })
}

/// Decode ids to text into `buf` (nul-terminated).
///
/// # Safety
/// `tok` must be a live handle, `ids` valid for `n` reads, `buf` valid for
/// `capacity` writes.
#[no_mangle]
pub unsafe extern "C" fn biolm_tokenizer_decode(
    tok: *const BiolmTokenizer,
    ids: *const u32,
    n: usize,
    buf: *mut c_char,
    capacity: usize,
    len_out: *mut usize,
) -> BiolmStatus {
    guard(|| {
        let tok = tok.as_ref().ok_or_else(|| null("tok"))?;
        let ids: &[u32] = if n == 0 {
            &[]
        } else if ids.is_null() {
            return Err(null("ids"));
        } else {
            std::slice::from_raw_parts(ids, n)
        };
        let text = tok.0.decode(ids)?;
        write_str(&text, buf, capacity, len_out)
    })
}

/// # Safety
/// `path` must be nul-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn biolm_checkpoint_load(
    path: *const c_char,
    out: *mut *mut BiolmCheckpoint,
) -> BiolmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = str_arg(path, "path")?;
        let ck = load_checkpoint(Path::new(path))?;
        *out = Box::into_raw(Box::new(BiolmCheckpoint(ck)));
        Ok(())
    })
}

/// # Safety
/// `ck` must come from [`biolm_checkpoint_load`] and not be freed yet, or be null.
#[no_mangle]
pub unsafe extern "C" fn biolm_checkpoint_free(ck: *mut BiolmCheckpoint) {
    if !ck.is_null() {
        drop(Box::from_raw(ck));
    }
}

/// # Safety
/// `ck` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn biolm_checkpoint_param_count(
    ck: *const BiolmCheckpoint,
    out: *mut u64,
) -> BiolmStatus {
    guard(|| {
        let ck = ck.as_ref().ok_or_else(|| null("ck"))?;
        *out_arg(out, "out")? = ck.0.weights.param_count();
        Ok(())
    })
}

/// Vocabulary size the checkpoint was built for.
///
/// # Safety
/// `ck` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn biolm_checkpoint_vocab_size(
    ck: *const BiolmCheckpoint,
    out: *mut usize,
) -> BiolmStatus {
    guard(|| {
        let ck = ck.as_ref().ok_or_else(|| null("ck"))?;
        *out_arg(out, "out")? = ck.0.config().vocab_size;
        Ok(())
    })
}

/// Content id (16 hex digits) into `buf`.
///
/// # Safety
/// `ck` must be a live handle and `buf` valid for `capacity` writes.
#[no_mangle]
pub unsafe extern "C" fn biolm_checkpoint_id(
    ck: *const BiolmCheckpoint,
    buf: *mut c_char,
    capacity: usize,
    len_out: *mut usize,
) -> BiolmStatus {
    guard(|| {
        let ck = ck.as_ref().ok_or_else(|| null("ck"))?;
        write_str(&ck.0.id(), buf, capacity, len_out)
    })
}

/// Mean over the five tasks of each task's metric mean.
///
/// # Safety
/// `row` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn biolm_overall(row: *const BiolmMetricRow, out: *mut f64) -> BiolmStatus {
    guard(|| {
        let r = row.as_ref().ok_or_else(|| null("row"))?;
        let report = MetricReport {
            top3: Some(RankedMetrics {
                acc: r.top3_acc,
                hit3: r.top3_hit3,
            }),
            symrec: Some(RankedMetrics {
                acc: r.symrec_acc,
                hit3: r.symrec_hit3,
            }),
            danet: Some(r.danet_acc),
            nli: Some(r.nli_acc),
            ner: Some(NerMetrics {
                acc: r.ner_acc,
                f1: r.ner_f1,
            }),
        };
        *out_arg(out, "out")? = overall(&report)?;
        Ok(())
    })
}

/// Learning rate after `step` completed steps.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn biolm_lr_at(
    kind: BiolmSchedule,
    warmup_steps: u64,
    peak: f64,
    total_steps: u64,
    step: u64,
    out: *mut f64,
) -> BiolmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let kind = match kind {
            BiolmSchedule::WarmupLinear => ScheduleKind::WarmupLinear,
            BiolmSchedule::WarmupCosine => ScheduleKind::WarmupCosine,
        };
        let spec = ScheduleSpec::new(kind, Warmup::Steps(warmup_steps), peak, total_steps)?;
        *out = lr_at(&spec, step)?;
        Ok(())
    })
}
