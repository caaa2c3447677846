//! C ABI over the medood library.
//!
//! Every fallible function returns a [`MedoodStatus`]; on failure the
//! message is available from [`medood_last_error`] on the same thread.
//! Manifests and models are opaque handles released with their `_free`
//! function. Panics are caught at the boundary and reported as
//! `MEDOOD_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use medood::balance::{self, BalanceConfig, PolarityCounts};
use medood::metrics;
use medood::segtrain::{self, SegmentationModel};
use medood::{DatasetManifest, Error, Patch, Role};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MedoodStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    NoNegatives = 6,
    Empty = 7,
    Training = 8,
    Panic = 99,
}

/// Loaded dataset manifest.
pub struct MedoodManifest(DatasetManifest);

/// Loaded segmentation model.
pub struct MedoodModel(SegmentationModel);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MedoodBalanceResult {
    pub pos_count: usize,
    pub neg_count: usize,
    pub baseline_pnr: f64,
    pub pct_opt: f64,
    pub ood_selected: usize,
    pub pnr: f64,
    pub delta_pnr: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MedoodStatus {
    match e {
        Error::InvalidArgument(_) | Error::ClassList(_) | Error::DuplicateId(_) | Error::TooFewRegions { .. } => {
            MedoodStatus::InvalidArgument
        }
        Error::InvalidPatch { .. } | Error::InvalidRegion { .. } | Error::Format { .. } => MedoodStatus::Format,
        Error::Shape(_) => MedoodStatus::Shape,
        Error::NoNegatives => MedoodStatus::NoNegatives,
        Error::Empty(_) => MedoodStatus::Empty,
        Error::NonFiniteLoss { .. } => MedoodStatus::Training,
        Error::Io { .. } => MedoodStatus::Io,
        Error::Stage { source, .. } => status_of(source),
    }
}

struct Fail(MedoodStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(MedoodStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MedoodStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MedoodStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            MedoodStatus::Panic
        }
    }
}

unsafe fn out<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    ptr.as_mut().ok_or_else(|| null(what))
}

unsafe fn path_arg(ptr: *const c_char) -> Result<PathBuf, Fail> {
    if ptr.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Fail(MedoodStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// Message of the last failure on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn medood_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn medood_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// `positives / negatives`.
///
/// # Safety
/// `out_pnr` must be a valid pointer to a double.
#[no_mangle]
pub unsafe extern "C" fn medood_pnr_from_counts(positives: usize, negatives: usize, out_pnr: *mut f64) -> MedoodStatus {
    guard(|| {
        *out(out_pnr, "out_pnr")? = balance::pnr_from_counts(positives, negatives)?;
        Ok(())
    })
}

/// Number of OoD patches drawn for a percentage: `floor(pct * n_ood)`.
#[no_mangle]
pub extern "C" fn medood_ood_sample_count(pct: f64, n_ood: usize) -> usize {
    balance::ood_sample_count(pct, n_ood)
}

/// Balance objective on counts.
///
/// # Safety
/// `out_value` must be a valid pointer to a double.
#[no_mangle]
pub unsafe extern "C" fn medood_balance_objective(
    pct: f64,
    positives: usize,
    negatives: usize,
    n_ood: usize,
    pnr_opt: f64,
    out_value: *mut f64,
) -> MedoodStatus {
    guard(|| {
        let counts = PolarityCounts { positives, negatives };
        *out(out_value, "out_value")? = balance::balance_objective_counts(pct, counts, n_ood, pnr_opt)?;
        Ok(())
    })
}

fn fill_result(r: &balance::BalanceReport) -> MedoodBalanceResult {
    MedoodBalanceResult {
        pos_count: r.pos_count,
        neg_count: r.neg_count,
        baseline_pnr: r.baseline_pnr,
        pct_opt: r.pct_opt,
        ood_selected: r.ood_selected,
        pnr: r.pnr,
        delta_pnr: r.delta_pnr,
    }
}

unsafe fn balance_config(pnr_opt: f64, grid: *const f64, grid_len: usize) -> Result<BalanceConfig, Fail> {
    let grid = if grid_len == 0 {
        balance::default_grid()
    } else {
        slice_arg(grid, grid_len, "grid")?.to_vec()
    };
    Ok(BalanceConfig { pnr_opt, grid, seed: 0 })
}

/// Grid search on counts. A null `grid` with `grid_len == 0` selects the
/// default grid {0.0, 0.1, ..., 1.0}.
///
/// # Safety
/// `grid` must point to `grid_len` doubles; `out_result` must be valid.
#[no_mangle]
pub unsafe extern "C" fn medood_estimate_pct_opt(
    positives: usize,
    negatives: usize,
    n_ood: usize,
    pnr_opt: f64,
    grid: *const f64,
    grid_len: usize,
    out_result: *mut MedoodBalanceResult,
) -> MedoodStatus {
    guard(|| {
        let cfg = balance_config(pnr_opt, grid, grid_len)?;
        let r = balance::estimate_pct_opt_counts(PolarityCounts { positives, negatives }, n_ood, &cfg)?;
        *out(out_result, "out_result")? = fill_result(&r);
        Ok(())
    })
}

fn mask_pair<'a>(pred: &'a [u8], gt: &'a [u8]) -> (Vec<bool>, Vec<bool>) {
    (pred.iter().map(|&v| v != 0).collect(), gt.iter().map(|&v| v != 0).collect())
}

/// IoU of two binary masks of `len` bytes each (non-zero = foreground).
/// Both empty scores 1.0.
///
/// # Safety
/// `pred` and `gt` must point to `len` bytes; `out_value` must be valid.
#[no_mangle]
pub unsafe extern "C" fn medood_class_iou(pred: *const u8, gt: *const u8, len: usize, out_value: *mut f64) -> MedoodStatus {
    guard(|| {
        let (p, g) = mask_pair(slice_arg(pred, len, "pred")?, slice_arg(gt, len, "gt")?);
        *out(out_value, "out_value")? = metrics::class_iou(&p, &g)?;
        Ok(())
    })
}

/// Dice coefficient of two binary masks; both empty scores 1.0.
///
/// # Safety
/// As [`medood_class_iou`].
#[no_mangle]
pub unsafe extern "C" fn medood_class_dice(pred: *const u8, gt: *const u8, len: usize, out_value: *mut f64) -> MedoodStatus {
    guard(|| {
        let (p, g) = mask_pair(slice_arg(pred, len, "pred")?, slice_arg(gt, len, "gt")?);
        *out(out_value, "out_value")? = metrics::class_dice(&p, &g)?;
        Ok(())
    })
}

/// Loads a manifest directory.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_manifest` must be valid.
/// The handle must be released with [`medood_manifest_free`].
#[no_mangle]
pub unsafe extern "C" fn medood_manifest_load(path: *const c_char, out_manifest: *mut *mut MedoodManifest) -> MedoodStatus {
    guard(|| {
        let slot = out(out_manifest, "out_manifest")?;
        let m = medood::store::load_manifest(path_arg(path)?)?;
        *slot = Box::into_raw(Box::new(MedoodManifest(m)));
        Ok(())
    })
}

/// # Safety
/// `manifest` must come from [`medood_manifest_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn medood_manifest_free(manifest: *mut MedoodManifest) {
    if !manifest.is_null() {
        drop(Box::from_raw(manifest));
    }
}

unsafe fn manifest_ref<'a>(m: *const MedoodManifest) -> Result<&'a DatasetManifest, Fail> {
    m.as_ref().map(|m| &m.0).ok_or_else(|| null("manifest"))
}

/// Patch count, and optionally the OoD-tagged subset and class count.
///
/// # Safety
/// `manifest` must be a live handle; out pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn medood_manifest_info(
    manifest: *const MedoodManifest,
    out_len: *mut usize,
    out_ood: *mut usize,
    out_classes: *mut usize,
) -> MedoodStatus {
    guard(|| {
        let m = manifest_ref(manifest)?;
        if let Some(v) = out_len.as_mut() {
            *v = m.len();
        }
        if let Some(v) = out_ood.as_mut() {
            *v = m.count_role(Role::Ood);
        }
        if let Some(v) = out_classes.as_mut() {
            *v = m.classes.len();
        }
        Ok(())
    })
}

/// Positive and negative sample counts of a manifest.
///
/// # Safety
/// `manifest` must be a live handle; out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn medood_manifest_polarity(
    manifest: *const MedoodManifest,
    out_positives: *mut usize,
    out_negatives: *mut usize,
) -> MedoodStatus {
    guard(|| {
        let c = balance::polarity_counts(manifest_ref(manifest)?);
        *out(out_positives, "out_positives")? = c.positives;
        *out(out_negatives, "out_negatives")? = c.negatives;
        Ok(())
    })
}

/// Grid search between an ID manifest and a mined OoD manifest.
///
/// # Safety
/// Handles must be live; grid and result pointers as in
/// [`medood_estimate_pct_opt`].
#[no_mangle]
pub unsafe extern "C" fn medood_estimate_manifests(
    id: *const MedoodManifest,
    ood: *const MedoodManifest,
    pnr_opt: f64,
    grid: *const f64,
    grid_len: usize,
    out_result: *mut MedoodBalanceResult,
) -> MedoodStatus {
    guard(|| {
        let cfg = balance_config(pnr_opt, grid, grid_len)?;
        let r = balance::estimate_pct_opt(manifest_ref(ood)?, manifest_ref(id)?, &cfg)?;
        *out(out_result, "out_result")? = fill_result(&r);
        Ok(())
    })
}

/// Loads a checkpoint written by the trainer.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_model` must be valid.
/// The handle must be released with [`medood_model_free`].
#[no_mangle]
pub unsafe extern "C" fn medood_model_load(path: *const c_char, out_model: *mut *mut MedoodModel) -> MedoodStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        let ckpt = segtrain::load_checkpoint(path_arg(path)?)?;
        *slot = Box::into_raw(Box::new(MedoodModel(ckpt.build_model()?)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`medood_model_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn medood_model_free(model: *mut MedoodModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Class count and patch size the model was built for.
///
/// # Safety
/// `model` must be a live handle; out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn medood_model_shape(
    model: *const MedoodModel,
    out_classes: *mut usize,
    out_patch_size: *mut usize,
) -> MedoodStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.0;
        *out(out_classes, "out_classes")? = m.classes();
        *out(out_patch_size, "out_patch_size")? = m.patch_size();
        Ok(())
    })
}

/// Class probabilities for one RGB patch (`P*P*3` bytes, row-major,
/// interleaved). Writes `classes*P*P` floats, class-major.
///
/// # Safety
/// `image` must point to `image_len` bytes and `out_probs` to `probs_len`
/// floats; the model handle must be live and not used concurrently.
#[no_mangle]
pub unsafe extern "C" fn medood_model_predict(
    model: *mut MedoodModel,
    image: *const u8,
    image_len: usize,
    out_probs: *mut f32,
    probs_len: usize,
) -> MedoodStatus {
    guard(|| {
        let m = &mut model.as_mut().ok_or_else(|| null("model"))?.0;
        let p = m.patch_size();
        let image = slice_arg(image, image_len, "image")?;
        if image.len() != p * p * 3 {
            return Err(Fail(
                MedoodStatus::Shape,
                format!("image has {} bytes, model expects {}", image.len(), p * p * 3),
            ));
        }
        let need = m.classes() * p * p;
        if probs_len != need {
            return Err(Fail(MedoodStatus::Shape, format!("output holds {probs_len} floats, need {need}")));
        }
        if out_probs.is_null() {
            return Err(null("out_probs"));
        }
        let patch = Patch {
            id: "ffi".into(),
            region_id: "ffi".into(),
            offset: (0, 0),
            pad: (0, 0),
            size: p,
            image: image.to_vec(),
            labelmap: vec![0; p * p],
            role: Role::Id,
        };
        let probs = segtrain::predict(m, &patch)?;
        std::slice::from_raw_parts_mut(out_probs, need).copy_from_slice(&probs.data);
        Ok(())
    })
}
