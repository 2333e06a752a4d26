//! C ABI for the hemorrhage-detection pipeline.
//!
//! Conventions: every fallible function returns an [`HsStatus`]; on any
//! status other than `Ok` a message is stored per thread and readable via
//! [`hs_last_error`] until the next failure on the same thread. Handles
//! from the `_open` functions are freed exactly once with the matching
//! `_free`; passing null to a `_free` is a no-op. String arguments are
//! NUL-terminated UTF-8 paths.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use hemoscan::commands::ScanPipeline;
use hemoscan::io::{read_ctv, HuVolume};
use hemoscan::preprocess::{apply_window, HuSlice, WindowSpec};
use hemoscan::{Error, NUM_CLASSES};

// ── Status codes and the per-thread error message ───────────────────────

/// Result of a fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HsStatus {
    /// Success.
    HsOk = 0,
    /// A null pointer, undersized buffer, or otherwise unusable argument.
    HsInvalidArgument = 1,
    /// The operating system rejected a file operation.
    HsIo = 2,
    /// A file exists but its bytes are not a valid artifact.
    HsFormat = 3,
    /// A configuration value is out of range or inconsistent.
    HsConfig = 4,
    /// An internal invariant failed; report this as a bug.
    HsInternal = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: HsStatus, message: &str) -> HsStatus {
    let message = CString::new(message.replace('\0', " ")).expect("NULs stripped");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = message);
    status
}

fn fail_error(e: &Error) -> HsStatus {
    let status = match e {
        Error::Invalid(_) => HsStatus::HsInvalidArgument,
        Error::Io { .. } => HsStatus::HsIo,
        Error::Format { .. } => HsStatus::HsFormat,
        Error::Config(_) => HsStatus::HsConfig,
        _ => HsStatus::HsInternal,
    };
    fail(status, &e.to_string())
}

/// The message for the most recent failure on this thread, or an empty
/// string. The pointer stays valid until the next failure on this thread.
#[no_mangle]
pub extern "C" fn hs_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// The library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Number of probability columns per slice (the `any` column plus five
/// subtypes).
#[no_mangle]
pub extern "C" fn hs_num_classes() -> usize {
    NUM_CLASSES
}

// ── Shared plumbing ─────────────────────────────────────────────────────

fn guard(body: impl FnOnce() -> HsStatus) -> HsStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => fail(HsStatus::HsInternal, "caught panic at the C boundary"),
    }
}

/// # Safety
/// `ptr` must be NUL-terminated and valid for reads.
unsafe fn path_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a Path, HsStatus> {
    if ptr.is_null() {
        return Err(fail(HsStatus::HsInvalidArgument, &format!("{name} is null")));
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => Err(fail(HsStatus::HsInvalidArgument, &format!("{name} is not UTF-8"))),
    }
}

fn require<'a, T>(ptr: *const T, name: &str) -> Result<&'a T, HsStatus> {
    // Safety: the caller contract for every handle argument is "a pointer
    // returned by the matching _open and not yet freed".
    match unsafe { ptr.as_ref() } {
        Some(r) => Ok(r),
        None => Err(fail(HsStatus::HsInvalidArgument, &format!("{name} is null"))),
    }
}

// ── Volumes ─────────────────────────────────────────────────────────────

/// An in-memory CT volume; opaque to C.
pub struct HsVolume(HuVolume);

/// Reads a `.ctv` volume from `path` into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer; on
/// `HsOk` the caller owns `*out` and must release it with
/// [`hs_volume_free`].
#[no_mangle]
pub unsafe extern "C" fn hs_volume_open(path: *const c_char, out: *mut *mut HsVolume) -> HsStatus {
    guard(|| {
        if out.is_null() {
            return fail(HsStatus::HsInvalidArgument, "out is null");
        }
        let path = match path_arg(path, "path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        match read_ctv(path) {
            Ok(volume) => {
                *out = Box::into_raw(Box::new(HsVolume(volume)));
                HsStatus::HsOk
            }
            Err(e) => fail_error(&e),
        }
    })
}

/// Slice count of an open volume; 0 for a null handle.
#[no_mangle]
pub extern "C" fn hs_volume_n_slices(volume: *const HsVolume) -> usize {
    guard_usize(|| require(volume, "volume").map(|v| v.0.n_slices()))
}

/// Slice height in pixels; 0 for a null handle.
#[no_mangle]
pub extern "C" fn hs_volume_height(volume: *const HsVolume) -> usize {
    guard_usize(|| require(volume, "volume").map(|v| v.0.height()))
}

/// Slice width in pixels; 0 for a null handle.
#[no_mangle]
pub extern "C" fn hs_volume_width(volume: *const HsVolume) -> usize {
    guard_usize(|| require(volume, "volume").map(|v| v.0.width()))
}

fn guard_usize(body: impl FnOnce() -> Result<usize, HsStatus>) -> usize {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(n)) => n,
        _ => 0,
    }
}

/// Releases a volume handle. Null is a no-op.
///
/// # Safety
/// `volume` must be a pointer from [`hs_volume_open`] that has not been
/// freed yet.
#[no_mangle]
pub unsafe extern "C" fn hs_volume_free(volume: *mut HsVolume) {
    if !volume.is_null() {
        drop(Box::from_raw(volume));
    }
}

// ── Pipeline ────────────────────────────────────────────────────────────

/// The three trained stages wired for inference; opaque to C.
pub struct HsPipeline(ScanPipeline);

/// Loads encoder, selector, and scan-model checkpoints into `*out`.
///
/// # Safety
/// The three paths must be NUL-terminated strings and `out` a valid
/// pointer; on `HsOk` the caller owns `*out` and must release it with
/// [`hs_pipeline_free`].
#[no_mangle]
pub unsafe extern "C" fn hs_pipeline_open(
    encoder_ckpt: *const c_char,
    selector_ckpt: *const c_char,
    lstm_ckpt: *const c_char,
    out: *mut *mut HsPipeline,
) -> HsStatus {
    guard(|| {
        if out.is_null() {
            return fail(HsStatus::HsInvalidArgument, "out is null");
        }
        let parts = (|| {
            Ok::<_, HsStatus>((
                path_arg(encoder_ckpt, "encoder_ckpt")?,
                path_arg(selector_ckpt, "selector_ckpt")?,
                path_arg(lstm_ckpt, "lstm_ckpt")?,
            ))
        })();
        let (encoder, selector, lstm) = match parts {
            Ok(p) => p,
            Err(status) => return status,
        };
        match ScanPipeline::load_parts(encoder, selector, lstm) {
            Ok(pipeline) => {
                *out = Box::into_raw(Box::new(HsPipeline(pipeline)));
                HsStatus::HsOk
            }
            Err(e) => fail_error(&e),
        }
    })
}

/// Releases a pipeline handle. Null is a no-op.
///
/// # Safety
/// `pipeline` must be a pointer from [`hs_pipeline_open`] that has not
/// been freed yet.
#[no_mangle]
pub unsafe extern "C" fn hs_pipeline_free(pipeline: *mut HsPipeline) {
    if !pipeline.is_null() {
        drop(Box::from_raw(pipeline));
    }
}

/// Runs the pipeline over every slice of `volume`, writing
/// `hs_volume_n_slices(volume) * hs_num_classes()` probabilities to
/// `out_probs` in slice-major order. `capacity` is the length of
/// `out_probs`; an undersized buffer fails without writing.
///
/// # Safety
/// `pipeline` and `volume` must be live handles and `out_probs` valid for
/// `capacity` writes.
#[no_mangle]
pub unsafe extern "C" fn hs_pipeline_predict(
    pipeline: *const HsPipeline,
    volume: *const HsVolume,
    out_probs: *mut f64,
    capacity: usize,
) -> HsStatus {
    guard(|| {
        let (pipeline, volume) = match (require(pipeline, "pipeline"), require(volume, "volume")) {
            (Ok(p), Ok(v)) => (p, v),
            (Err(status), _) | (_, Err(status)) => return status,
        };
        if out_probs.is_null() {
            return fail(HsStatus::HsInvalidArgument, "out_probs is null");
        }
        let needed = volume.0.n_slices() * NUM_CLASSES;
        if capacity < needed {
            return fail(
                HsStatus::HsInvalidArgument,
                &format!("out_probs holds {capacity} values, need {needed}"),
            );
        }
        match pipeline.0.predict_volume(&volume.0, "volume") {
            Ok(rows) => {
                let out = std::slice::from_raw_parts_mut(out_probs, needed);
                for (row, chunk) in rows.iter().zip(out.chunks_exact_mut(NUM_CLASSES)) {
                    chunk.copy_from_slice(row);
                }
                HsStatus::HsOk
            }
            Err(e) => fail_error(&e),
        }
    })
}

// ── Windowing ───────────────────────────────────────────────────────────

/// Applies an HU display window to one slice: `out[i] = clamp((hu[i] -
/// center + width/2) / width, 0, 1)`. `hu` and `out` hold `height *
/// width` values in row-major order.
///
/// # Safety
/// `hu` must be valid for `height * width` reads and `out` for the same
/// number of writes.
#[no_mangle]
pub unsafe extern "C" fn hs_apply_window(
    hu: *const i16,
    height: usize,
    width: usize,
    center: f64,
    window_width: f64,
    out: *mut f64,
) -> HsStatus {
    guard(|| {
        if hu.is_null() || out.is_null() {
            return fail(HsStatus::HsInvalidArgument, "hu and out must be non-null");
        }
        if height == 0 || width == 0 {
            return fail(HsStatus::HsInvalidArgument, "height and width must be positive");
        }
        let Some(len) = height.checked_mul(width) else {
            return fail(HsStatus::HsInvalidArgument, "height * width overflows");
        };
        let spec = match WindowSpec::new(center, window_width) {
            Ok(spec) => spec,
            Err(e) => return fail_error(&e),
        };
        let values = std::slice::from_raw_parts(hu, len).to_vec();
        let slice = match HuSlice::new(height, width, values) {
            Ok(slice) => slice,
            Err(e) => return fail_error(&e),
        };
        let gray = apply_window(&slice, &spec);
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(&gray.data);
        HsStatus::HsOk
    })
}
