//! C ABI over the unifeat extractor.
//!
//! Every fallible call returns a [`UnifeatStatus`]; on failure the message is
//! available from [`unifeat_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function. Output arrays are owned by
//! the handle they came from and stay valid until it is freed.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use unifeat::backbone::ImageTensor;
use unifeat::cli::feature_sets;
use unifeat::config::RunConfig;
use unifeat::descriptor::ExtractionMode;
use unifeat::formats::FeatureFile;
use unifeat::matching::mutual_nn_matches;
use unifeat::pipeline::Extractor;
use unifeat::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnifeatStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Bad argument, configuration or string encoding.
    InvalidArgument = 2,
    /// A file could not be read, written or decoded.
    Io = 3,
    /// Malformed feature file or checkpoint.
    Format = 4,
    /// Array shapes or descriptor dimensions disagree.
    Dimension = 5,
    /// The extractor lacks what the request needs.
    State = 6,
    /// A numeric failure during computation.
    Runtime = 7,
    /// The caller's buffer is smaller than the result.
    BufferTooSmall = 8,
    /// An internal panic was caught at the boundary.
    Panic = 9,
}

/// Opaque extractor handle.
pub struct UnifeatExtractor {
    inner: Extractor,
    cfg: RunConfig,
}

/// Opaque keypoint and descriptor set of one image.
pub struct UnifeatFeatures {
    file: FeatureFile,
}

/// Opaque mutual nearest-neighbour matches between two feature sets.
pub struct UnifeatMatches {
    /// Interleaved `(index_a, index_b)`.
    pairs: Vec<u32>,
    similarity: Vec<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> UnifeatStatus {
    match e {
        Error::Argument(_) | Error::Config(_) | Error::Manifest { .. } => {
            UnifeatStatus::InvalidArgument
        }
        Error::Io { .. } | Error::Image { .. } => UnifeatStatus::Io,
        Error::Format(_) | Error::Checkpoint(_) => UnifeatStatus::Format,
        Error::Dimension(_) => UnifeatStatus::Dimension,
        Error::State(_) => UnifeatStatus::State,
        Error::NonFiniteLoss { .. } => UnifeatStatus::Runtime,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (UnifeatStatus, String)>) -> UnifeatStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => UnifeatStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            UnifeatStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (UnifeatStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (UnifeatStatus, String) {
    (UnifeatStatus::NullPointer, format!("{what} is null"))
}

unsafe fn opt_str<'a>(
    p: *const c_char,
    what: &str,
) -> Result<Option<&'a str>, (UnifeatStatus, String)> {
    if p.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(p).to_str().map(Some).map_err(|_| {
        (
            UnifeatStatus::InvalidArgument,
            format!("{what} is not valid UTF-8"),
        )
    })
}

unsafe fn req_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (UnifeatStatus, String)> {
    opt_str(p, what)?.ok_or_else(|| null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (UnifeatStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null. Valid until the next failing call.
#[no_mangle]
pub extern "C" fn unifeat_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn unifeat_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates an extractor.
///
/// All string arguments may be null. `config_path` is a TOML run configuration
/// (defaults otherwise); `mode` is "teacher", "ts" or "ss" and overrides the
/// configuration; student modes need `checkpoint`; `backbone` overrides the
/// cached backbone weights in teacher mode.
///
/// # Safety
/// String arguments must be null or nul-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn unifeat_extractor_new(
    config_path: *const c_char,
    mode: *const c_char,
    checkpoint: *const c_char,
    backbone: *const c_char,
    out: *mut *mut UnifeatExtractor,
) -> UnifeatStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let config = opt_str(config_path, "config_path")?.map(PathBuf::from);
        let mut cfg = RunConfig::load_or_default(config.as_deref()).map_err(lib_err)?;
        if let Some(m) = opt_str(mode, "mode")? {
            cfg.extract.mode = ExtractionMode::parse(m).ok_or_else(|| {
                (
                    UnifeatStatus::InvalidArgument,
                    format!("unknown mode {m:?} (expected teacher, ts or ss)"),
                )
            })?;
        }
        let checkpoint = opt_str(checkpoint, "checkpoint")?.map(PathBuf::from);
        let backbone = opt_str(backbone, "backbone")?.map(PathBuf::from);
        let inner = Extractor::from_config(&cfg, checkpoint.as_deref(), backbone.as_deref())
            .map_err(lib_err)?;
        *out = Box::into_raw(Box::new(UnifeatExtractor { inner, cfg }));
        Ok(())
    })
}

/// Releases an extractor; null is ignored.
///
/// # Safety
/// `ex` must come from [`unifeat_extractor_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn unifeat_extractor_free(ex: *mut UnifeatExtractor) {
    if !ex.is_null() {
        drop(Box::from_raw(ex));
    }
}

/// Length of the local descriptors this extractor produces.
///
/// # Safety
/// `ex` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn unifeat_extractor_descriptor_dim(
    ex: *const UnifeatExtractor,
    out: *mut usize,
) -> UnifeatStatus {
    guard(|| {
        let ex = ex.as_ref().ok_or_else(|| null("extractor"))?;
        *out_ptr(out, "out")? = ex.inner.descriptor_dim().map_err(lib_err)?;
        Ok(())
    })
}

fn local(
    ex: &UnifeatExtractor,
    image: &ImageTensor,
) -> Result<*mut UnifeatFeatures, (UnifeatStatus, String)> {
    let local = ex.inner.local(image).map_err(lib_err)?;
    let file = FeatureFile::from_local(&local, ex.cfg.extract.mode, ex.cfg.detector.groups);
    Ok(Box::into_raw(Box::new(UnifeatFeatures { file })))
}

/// Keypoints and descriptors of an image file.
///
/// # Safety
/// `ex` must be a live handle, `path` nul-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn unifeat_extract_file(
    ex: *const UnifeatExtractor,
    path: *const c_char,
    out: *mut *mut UnifeatFeatures,
) -> UnifeatStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let ex = ex.as_ref().ok_or_else(|| null("extractor"))?;
        let path = req_str(path, "path")?;
        let image = ImageTensor::open(path.as_ref()).map_err(lib_err)?;
        *out = local(ex, &image)?;
        Ok(())
    })
}

/// Keypoints and descriptors of an interleaved 8-bit RGB buffer of `3·width·height` bytes.
///
/// # Safety
/// `rgb` must point to `len` readable bytes; `ex` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn unifeat_extract_rgb(
    ex: *const UnifeatExtractor,
    rgb: *const u8,
    len: usize,
    width: u32,
    height: u32,
    out: *mut *mut UnifeatFeatures,
) -> UnifeatStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let ex = ex.as_ref().ok_or_else(|| null("extractor"))?;
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        let data = std::slice::from_raw_parts(rgb, len);
        let image = ImageTensor::from_rgb8_raw(width, height, data).map_err(lib_err)?;
        *out = local(ex, &image)?;
        Ok(())
    })
}

/// Unit-norm global descriptor of an image file.
///
/// `dim` always receives the descriptor length; when it exceeds `capacity` the
/// call returns `BufferTooSmall` and `buf` is left untouched. `buf` may be null
/// when `capacity` is 0.
///
/// # Safety
/// `buf` must hold `capacity` floats; `ex` must be live; `path` nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn unifeat_global_file(
    ex: *const UnifeatExtractor,
    path: *const c_char,
    buf: *mut f32,
    capacity: usize,
    dim: *mut usize,
) -> UnifeatStatus {
    guard(|| {
        let ex = ex.as_ref().ok_or_else(|| null("extractor"))?;
        let path = req_str(path, "path")?;
        let dim = out_ptr(dim, "dim")?;
        let image = ImageTensor::open(path.as_ref()).map_err(lib_err)?;
        let g = ex.inner.global(&image).map_err(lib_err)?;
        *dim = g.dim();
        if g.dim() > capacity {
            return Err((
                UnifeatStatus::BufferTooSmall,
                format!(
                    "global descriptor has {} values, buffer holds {capacity}",
                    g.dim()
                ),
            ));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        std::slice::from_raw_parts_mut(buf, g.dim())
            .copy_from_slice(g.vector.as_slice().expect("contiguous"));
        Ok(())
    })
}

/// Reads a feature file written by `unifeat extract` or [`unifeat_features_write`].
///
/// # Safety
/// `path` must be nul-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn unifeat_features_read(
    path: *const c_char,
    out: *mut *mut UnifeatFeatures,
) -> UnifeatStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let path = req_str(path, "path")?;
        let file = FeatureFile::read(path.as_ref()).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(UnifeatFeatures { file }));
        Ok(())
    })
}

/// # Safety
/// `f` must be a live handle and `path` nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn unifeat_features_write(
    f: *const UnifeatFeatures,
    path: *const c_char,
) -> UnifeatStatus {
    guard(|| {
        let f = f.as_ref().ok_or_else(|| null("features"))?;
        let path = req_str(path, "path")?;
        f.file.write(path.as_ref()).map_err(lib_err)
    })
}

/// Number of keypoints; 0 for null.
///
/// # Safety
/// `f` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn unifeat_features_count(f: *const UnifeatFeatures) -> usize {
    f.as_ref().map_or(0, |f| f.file.len())
}

/// Descriptor length; 0 for null.
///
/// # Safety
/// `f` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn unifeat_features_dim(f: *const UnifeatFeatures) -> usize {
    f.as_ref().map_or(0, |f| f.file.dim())
}

/// Row-major `count×4` keypoints `(x, y, score, group_id)`; null for null or empty sets.
///
/// # Safety
/// `f` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn unifeat_features_keypoints(f: *const UnifeatFeatures) -> *const f32 {
    match f.as_ref() {
        Some(f) if !f.file.is_empty() => f.file.keypoints.as_ptr(),
        _ => ptr::null(),
    }
}

/// Row-major `count×dim` unit-norm descriptors; null for null or empty sets.
///
/// # Safety
/// `f` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn unifeat_features_descriptors(f: *const UnifeatFeatures) -> *const f32 {
    match f.as_ref() {
        Some(f) if !f.file.is_empty() => f.file.descriptors.as_ptr(),
        _ => ptr::null(),
    }
}

/// Releases a feature set; null is ignored.
///
/// # Safety
/// `f` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn unifeat_features_free(f: *mut UnifeatFeatures) {
    if !f.is_null() {
        drop(Box::from_raw(f));
    }
}

/// Mutual nearest-neighbour matches by descriptor inner product.
///
/// # Safety
/// `a` and `b` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn unifeat_match(
    a: *const UnifeatFeatures,
    b: *const UnifeatFeatures,
    out: *mut *mut UnifeatMatches,
) -> UnifeatStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let a = a.as_ref().ok_or_else(|| null("a"))?;
        let b = b.as_ref().ok_or_else(|| null("b"))?;
        if a.file.dim() != b.file.dim() {
            return Err((
                UnifeatStatus::Dimension,
                format!(
                    "descriptor dims differ: {} vs {}",
                    a.file.dim(),
                    b.file.dim()
                ),
            ));
        }
        let (_, da) = feature_sets(&a.file);
        let (_, db) = feature_sets(&b.file);
        let m = mutual_nn_matches(&da, &db).map_err(lib_err)?;
        let pairs = m
            .pairs
            .iter()
            .flat_map(|p| [p.a as u32, p.b as u32])
            .collect();
        let similarity = m.pairs.iter().map(|p| p.similarity as f32).collect();
        *out = Box::into_raw(Box::new(UnifeatMatches { pairs, similarity }));
        Ok(())
    })
}

/// Number of matches; 0 for null.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn unifeat_matches_count(m: *const UnifeatMatches) -> usize {
    m.as_ref().map_or(0, |m| m.similarity.len())
}

/// Interleaved `count×2` keypoint indices `(a, b)`; null for null or empty sets.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn unifeat_matches_pairs(m: *const UnifeatMatches) -> *const u32 {
    match m.as_ref() {
        Some(m) if !m.pairs.is_empty() => m.pairs.as_ptr(),
        _ => ptr::null(),
    }
}

/// Descriptor similarity of each match; null for null or empty sets.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn unifeat_matches_similarities(m: *const UnifeatMatches) -> *const f32 {
    match m.as_ref() {
        Some(m) if !m.similarity.is_empty() => m.similarity.as_ptr(),
        _ => ptr::null(),
    }
}

/// Releases a match set; null is ignored.
///
/// # Safety
/// `m` must come from [`unifeat_match`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn unifeat_matches_free(m: *mut UnifeatMatches) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}
