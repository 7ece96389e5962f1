//! C ABI over `hoi-groups`.
//!
//! Every fallible function returns an [`HoiStatus`]; on failure the message
//! is kept per thread and read back with [`hoi_last_error`]. Boxes cross the
//! boundary as `[cx, cy, w, h]` quadruples of `double`. A loaded model is an
//! opaque [`HoiModel`] handle owned by the caller until [`hoi_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use hoi_groups::cli::{build_model, RunConfig};
use hoi_groups::eval::{average_precision, pairwise_nms, predictions_from_output, ApMethod};
use hoi_groups::geometry::{giou, iou, BBox};
use hoi_groups::model::{hungarian_match, load_checkpoint, HoiModel as Model};
use hoi_groups::numerics::{ParamStore, Tensor};
use hoi_groups::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HoiStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Io = 5,
    NonFinite = 6,
    Panic = 7,
}

impl From<&Error> for HoiStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) => HoiStatus::Config,
            Error::Data(_) => HoiStatus::Data,
            Error::Io { .. } => HoiStatus::Io,
            Error::NonFinite { .. } => HoiStatus::NonFinite,
            _ => HoiStatus::InvalidArgument,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Runs `f`, turning errors and panics into a status plus a stored message.
fn guard(f: impl FnOnce() -> Result<(), (HoiStatus, String)>) -> HoiStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HoiStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            HoiStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (HoiStatus, String) {
    (HoiStatus::from(&e), e.to_string())
}

fn null(what: &str) -> (HoiStatus, String) {
    (HoiStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (HoiStatus, String) {
    (HoiStatus::InvalidArgument, msg.into())
}

/// # Safety
/// `p` is null or points to four readable doubles.
unsafe fn read_box(p: *const f64, what: &str) -> Result<BBox, (HoiStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    BBox::from_slice(std::slice::from_raw_parts(p, 4)).map_err(lib_err)
}

/// # Safety
/// `p` is null or points to `len` readable values.
unsafe fn read_slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (HoiStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hoi_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null if it succeeded.
/// The pointer stays valid until the next call into the library.
#[no_mangle]
pub extern "C" fn hoi_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Intersection over union of two boxes.
///
/// # Safety
/// `a` and `b` point to four doubles each; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn hoi_iou(a: *const f64, b: *const f64, out: *mut f64) -> HoiStatus {
    guard(|| {
        let (a, b) = (read_box(a, "a")?, read_box(b, "b")?);
        if out.is_null() {
            return Err(null("out"));
        }
        *out = iou(&a, &b).map_err(lib_err)?;
        Ok(())
    })
}

/// Generalized IoU of two boxes, in `[-1, 1]`.
///
/// # Safety
/// `a` and `b` point to four doubles each; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn hoi_giou(a: *const f64, b: *const f64, out: *mut f64) -> HoiStatus {
    guard(|| {
        let (a, b) = (read_box(a, "a")?, read_box(b, "b")?);
        if out.is_null() {
            return Err(null("out"));
        }
        *out = giou(&a, &b).map_err(lib_err)?;
        Ok(())
    })
}

/// Minimum-cost assignment of `rows` targets to `cols` candidates
/// (`rows <= cols`). `cost` is row-major; `assignment[r]` receives the column
/// given to row `r` and `total` the summed cost.
///
/// # Safety
/// `cost` holds `rows * cols` doubles, `assignment` has room for `rows`
/// entries and `total` is writable.
#[no_mangle]
pub unsafe extern "C" fn hoi_hungarian(
    cost: *const f64,
    rows: usize,
    cols: usize,
    assignment: *mut usize,
    total: *mut f64,
) -> HoiStatus {
    guard(|| {
        let n = rows.checked_mul(cols).ok_or_else(|| invalid("cost matrix too large"))?;
        let data = read_slice(cost, n, "cost")?.to_vec();
        if (rows > 0 && assignment.is_null()) || total.is_null() {
            return Err(null("output"));
        }
        let m = Tensor::new(&[rows, cols], data).map_err(lib_err)?;
        let a = hungarian_match(&m).map_err(lib_err)?;
        for (r, q) in a.query.iter().enumerate() {
            *assignment.add(r) = *q;
        }
        *total = a.cost;
        Ok(())
    })
}

/// Average precision of a score-ranked list of hit flags against `n_gt`
/// ground truths. `eleven_point` selects 11-point interpolation instead of
/// the all-point area. `out` receives -1 when `n_gt` is zero.
///
/// # Safety
/// `hits` holds `len` bytes (0 or 1); `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn hoi_average_precision(
    hits: *const u8,
    len: usize,
    n_gt: usize,
    eleven_point: bool,
    out: *mut f64,
) -> HoiStatus {
    guard(|| {
        let flags: Vec<bool> = read_slice(hits, len, "hits")?.iter().map(|&b| b != 0).collect();
        if out.is_null() {
            return Err(null("out"));
        }
        let method = if eleven_point {
            ApMethod::ElevenPoint
        } else {
            ApMethod::AllPoint
        };
        *out = average_precision(&flags, n_gt, method).unwrap_or(-1.0);
        Ok(())
    })
}

/// Model and parameters behind a handle.
pub struct HoiModel {
    cfg: RunConfig,
    model: Model,
    store: ParamStore,
}

/// One scored triplet. Boxes are `[cx, cy, w, h]`.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct HoiDetection {
    pub human: [f64; 4],
    pub object: [f64; 4],
    pub object_class: usize,
    pub interaction: usize,
    pub score: f64,
}

/// Builds a model from a run config file and loads a checkpoint into it.
/// A null `config_path` uses the default configuration; a null
/// `checkpoint_path` keeps the seeded initial parameters.
///
/// # Safety
/// Paths are null or NUL-terminated strings; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn hoi_model_load(
    config_path: *const c_char,
    checkpoint_path: *const c_char,
    out: *mut *mut HoiModel,
) -> HoiStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = |p: *const c_char| -> Result<Option<String>, (HoiStatus, String)> {
            if p.is_null() {
                return Ok(None);
            }
            CStr::from_ptr(p)
                .to_str()
                .map(|s| Some(s.to_string()))
                .map_err(|_| invalid("path is not UTF-8"))
        };
        let cfg = match path(config_path)? {
            Some(p) => RunConfig::load(Path::new(&p)).map_err(lib_err)?,
            None => RunConfig::default(),
        };
        let (model, mut store) = build_model(&cfg.model, cfg.seed).map_err(lib_err)?;
        if let Some(p) = path(checkpoint_path)? {
            load_checkpoint(Path::new(&p), &cfg.model, &mut store).map_err(lib_err)?;
        }
        *out = Box::into_raw(Box::new(HoiModel { cfg, model, store }));
        Ok(())
    })
}

/// Releases a handle from [`hoi_model_load`]. Null is ignored.
///
/// # Safety
/// `model` is null or a live handle not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hoi_model_free(model: *mut HoiModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of scalar parameters of a model.
///
/// # Safety
/// `model` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn hoi_model_num_params(model: *const HoiModel, out: *mut usize) -> HoiStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.store.numel();
        Ok(())
    })
}

/// Scores one scene. `features` is a row-major `tokens x d_feature` grid and
/// `pos` the matching `tokens x d_entity` position encoding. Predictions go
/// through pairwise NMS with the config's threshold; at most `capacity` are
/// copied to `detections` in score order and `count` receives the number
/// copied.
///
/// # Safety
/// `features` and `pos` hold the stated number of doubles; `detections` has
/// room for `capacity` entries; `count` is writable.
#[no_mangle]
pub unsafe extern "C" fn hoi_model_predict(
    model: *const HoiModel,
    features: *const f64,
    pos: *const f64,
    tokens: usize,
    detections: *mut HoiDetection,
    capacity: usize,
    count: *mut usize,
) -> HoiStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if count.is_null() || (capacity > 0 && detections.is_null()) {
            return Err(null("output"));
        }
        let c = &m.cfg.model;
        let grid = |p, d: usize, what| -> Result<Tensor, (HoiStatus, String)> {
            let n = tokens.checked_mul(d).ok_or_else(|| invalid("too many tokens"))?;
            Tensor::new(&[tokens, d], read_slice(p, n, what)?.to_vec()).map_err(lib_err)
        };
        let f = grid(features, c.d_feature, "features")?;
        let p = grid(pos, c.d_entity, "pos")?;
        let out = m.model.predict(&m.store, &f, &p).map_err(lib_err)?;
        let e = &m.cfg.eval;
        let preds = pairwise_nms(&predictions_from_output(&out), e.nms_iou, e.top_k.min(capacity));
        for (i, d) in preds.iter().enumerate() {
            *detections.add(i) = HoiDetection {
                human: d.human.to_array(),
                object: d.object.to_array(),
                object_class: d.object_class,
                interaction: d.interaction,
                score: d.score,
            };
        }
        *count = preds.len();
        Ok(())
    })
}
