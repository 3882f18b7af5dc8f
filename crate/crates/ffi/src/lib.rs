//! C interface to `sat-refine`: load a trained refiner and apply it, read
//! and write SRFT feature files, extract fallback features and compute MMD.
//!
//! Every function returns an [`SrStatus`]. On failure a message for the
//! calling thread is available from [`sr_last_error`]. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use sat_refine::features::{self, FeatError};
use sat_refine::imageops::ImagePatch;
use sat_refine::metrics::{self, MetricsError, SampleMatrix};
use sat_refine::nets::{self, CheckpointError, NetError, RefinerNet};
use sat_refine::trainer::Role;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numeric = 5,
    Panic = 6,
}

/// MMD estimator selection.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SrEstimator {
    Linear = 0,
    Quadratic = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SrMmdResult {
    pub mmd2: f64,
    pub mmd: f64,
    pub std_error: f64,
    pub pairs_used: u64,
}

/// Trained refiner loaded from a checkpoint.
pub struct SrRefiner {
    net: RefinerNet<f32>,
}

/// An `n × d` feature matrix.
pub struct SrFeatureSet {
    matrix: SampleMatrix,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(SrStatus, String);

impl From<FeatError> for Failure {
    fn from(e: FeatError) -> Self {
        let status = match e {
            FeatError::Io(_) => SrStatus::Io,
            _ => SrStatus::Format,
        };
        Failure(status, e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        let status = match e {
            CheckpointError::Io(_) => SrStatus::Io,
            _ => SrStatus::Format,
        };
        Failure(status, e.to_string())
    }
}

impl From<NetError> for Failure {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Checkpoint(c) => c.into(),
            other => Failure(SrStatus::InvalidArgument, other.to_string()),
        }
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        Failure(SrStatus::InvalidArgument, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(SrStatus::InvalidArgument, msg.into())
}

fn null(what: &str) -> Failure {
    Failure(SrStatus::NullPointer, format!("{what} is null"))
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SrStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SrStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SrStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

fn checked_len(dims: &[usize]) -> Result<usize, Failure> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| invalid("buffer size overflows"))
}

/// Interleaved `n × height × width × channels` pixels to patches.
fn patches_from(pixels: &[f32], n: usize, height: usize, width: usize, channels: usize) -> Result<Vec<ImagePatch>, Failure> {
    let per = checked_len(&[height, width, channels])?;
    if per == 0 {
        return Err(invalid("image dimensions must be positive"));
    }
    pixels
        .chunks_exact(per)
        .take(n)
        .map(|c| ImagePatch::new(width, height, channels, c.to_vec()).map_err(|e| invalid(e.to_string())))
        .collect()
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn sr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads the refiner weights from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sr_refiner_load(path: *const c_char, out: *mut *mut SrRefiner) -> SrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ckpt = nets::load_checkpoint(&path_arg(path)?)?;
        let net = RefinerNet::from_checkpoint(&ckpt)?;
        *out = Box::into_raw(Box::new(SrRefiner { net }));
        Ok(())
    })
}

/// # Safety
/// `refiner` must come from [`sr_refiner_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn sr_refiner_free(refiner: *mut SrRefiner) {
    if !refiner.is_null() {
        drop(Box::from_raw(refiner));
    }
}

/// Number of image channels the refiner expects.
///
/// # Safety
/// `refiner` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sr_refiner_channels(refiner: *const SrRefiner, out: *mut usize) -> SrStatus {
    guard(|| {
        let r = deref(refiner, "refiner")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = r.net.config().channels;
        Ok(())
    })
}

/// Refines `n` images of `height × width × channels` interleaved floats in
/// `[0, 1]`. `output` must hold as many values as `input`.
///
/// # Safety
/// `input` and `output` must each point to `n·height·width·channels`
/// floats.
#[no_mangle]
pub unsafe extern "C" fn sr_refiner_apply(
    refiner: *const SrRefiner,
    input: *const f32,
    n: usize,
    height: usize,
    width: usize,
    channels: usize,
    output: *mut f32,
) -> SrStatus {
    guard(|| {
        let r = deref(refiner, "refiner")?;
        let len = checked_len(&[n, height, width, channels])?;
        let src = slice(input, len, "input")?;
        let dst = slice_mut(output, len, "output")?;
        if n == 0 {
            return Ok(());
        }
        let patches = patches_from(src, n, height, width, channels)?;
        let refined = r.net.refine(&patches)?;
        for (chunk, p) in dst.chunks_exact_mut(len / n).zip(&refined) {
            chunk.copy_from_slice(p.pixels());
        }
        Ok(())
    })
}

fn boxed(matrix: SampleMatrix, out: *mut *mut SrFeatureSet) {
    // SAFETY: callers check `out` first
    unsafe { *out = Box::into_raw(Box::new(SrFeatureSet { matrix })) };
}

/// Reads an SRFT file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sr_features_read(path: *const c_char, out: *mut *mut SrFeatureSet) -> SrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        boxed(features::read_feat(&path_arg(path)?)?, out);
        Ok(())
    })
}

/// Copies a row-major `n × d` matrix into a new feature set.
///
/// # Safety
/// `data` must point to `n·d` doubles and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sr_features_from_buffer(
    data: *const f64,
    n: usize,
    d: usize,
    out: *mut *mut SrFeatureSet,
) -> SrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let values = slice(data, checked_len(&[n, d])?, "data")?;
        boxed(SampleMatrix::new(n, d, values.to_vec())?, out);
        Ok(())
    })
}

/// Fallback features (grayscale, 16×16 area average, z-normalized) of `n`
/// interleaved images.
///
/// # Safety
/// `pixels` must point to `n·height·width·channels` floats and `out` be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sr_features_extract(
    pixels: *const f32,
    n: usize,
    height: usize,
    width: usize,
    channels: usize,
    out: *mut *mut SrFeatureSet,
) -> SrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if n == 0 {
            return Err(invalid("need at least one image"));
        }
        let src = slice(pixels, checked_len(&[n, height, width, channels])?, "pixels")?;
        let patches = patches_from(src, n, height, width, channels)?;
        boxed(features::fallback_extract(&patches, Role::Synthetic).matrix, out);
        Ok(())
    })
}

/// Writes a feature set as SRFT (values rounded to f32).
///
/// # Safety
/// `set` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sr_features_write(set: *const SrFeatureSet, path: *const c_char) -> SrStatus {
    guard(|| {
        let s = deref(set, "set")?;
        features::write_feat(&path_arg(path)?, &s.matrix)?;
        Ok(())
    })
}

/// Row and column counts.
///
/// # Safety
/// `set` must be a live handle; `n` and `d` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sr_features_shape(set: *const SrFeatureSet, n: *mut usize, d: *mut usize) -> SrStatus {
    guard(|| {
        let s = deref(set, "set")?;
        if n.is_null() || d.is_null() {
            return Err(null("shape output"));
        }
        *n = s.matrix.n();
        *d = s.matrix.d();
        Ok(())
    })
}

/// Copies the row-major values into `out`, which must hold exactly `n·d`
/// doubles (`len`).
///
/// # Safety
/// `set` must be a live handle and `out` point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sr_features_copy(set: *const SrFeatureSet, out: *mut f64, len: usize) -> SrStatus {
    guard(|| {
        let s = deref(set, "set")?;
        let data = s.matrix.data();
        if len != data.len() {
            return Err(invalid(format!("buffer holds {len} values, feature set has {}", data.len())));
        }
        slice_mut(out, len, "out")?.copy_from_slice(data);
        Ok(())
    })
}

/// # Safety
/// `set` must come from one of the `sr_features_*` constructors or be null.
#[no_mangle]
pub unsafe extern "C" fn sr_features_free(set: *mut SrFeatureSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Unbiased MMD² between two feature sets with the default mixture-RBF
/// kernel.
///
/// # Safety
/// `x` and `y` must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sr_mmd2(
    x: *const SrFeatureSet,
    y: *const SrFeatureSet,
    estimator: SrEstimator,
    out: *mut SrMmdResult,
) -> SrStatus {
    guard(|| {
        let (x, y) = (deref(x, "x")?, deref(y, "y")?);
        if out.is_null() {
            return Err(null("out"));
        }
        if !x.matrix.is_finite() || !y.matrix.is_finite() {
            return Err(Failure(SrStatus::Numeric, "features contain non-finite values".into()));
        }
        let spec = metrics::default_kernel_spec();
        let e = match estimator {
            SrEstimator::Linear => metrics::mmd2_linear(&x.matrix, &y.matrix, &spec)?,
            SrEstimator::Quadratic => metrics::mmd2_quadratic_unbiased(&x.matrix, &y.matrix, &spec)?,
        };
        *out = SrMmdResult {
            mmd2: e.mmd2,
            mmd: e.mmd,
            std_error: e.stderr,
            pairs_used: e.pairs_used as u64,
        };
        Ok(())
    })
}
