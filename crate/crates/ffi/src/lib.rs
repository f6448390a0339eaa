//! C ABI over `cfcbm`.
//!
//! Objects cross the boundary as opaque handles created by `*_load` or
//! `cfcbm_train` and released with the matching `*_free`. Every fallible
//! function returns a [`CfcbmStatus`]; on failure a description is available
//! from [`cfcbm_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use cfcbm::evaluator::{evaluate, infer, jaccard};
use cfcbm::hierarchy::ConceptHierarchy;
use cfcbm::store::{load_dataset, EmbeddingDataset};
use cfcbm::trainer::{load_checkpoint, save_checkpoint, train_state, Checkpoint, TrainConfig};
use cfcbm::CfcbmError;

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfcbmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    BufferTooSmall = 3,
    Panic = 4,
    Io = 10,
    Format = 11,
    CorruptData = 12,
    Json = 13,
    Dimension = 20,
    Index = 21,
    DegenerateInput = 22,
    Parameter = 23,
    Arity = 24,
    Coverage = 25,
    Validation = 26,
    Domain = 27,
    Divergence = 28,
}

/// An embedding dataset (`.cfeb`).
pub struct CfcbmDataset(EmbeddingDataset);

/// A concept hierarchy read from a manifest.
pub struct CfcbmHierarchy(ConceptHierarchy);

/// A trained model together with its optimizer state and hierarchy.
pub struct CfcbmModel(Checkpoint);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CfcbmDatasetInfo {
    pub n_examples: usize,
    pub embed_dim: usize,
    pub n_patches: usize,
    pub n_classes: usize,
    pub n_high: usize,
    pub n_low: usize,
    pub has_example_ground_truth: bool,
    pub has_class_ground_truth: bool,
}

/// Evaluation metrics. Sparsities are percentages. Ground-truth metrics are
/// NaN when the dataset carries no ground truth at that level.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CfcbmMetrics {
    pub accuracy_high: f64,
    pub accuracy_low: f64,
    pub sparsity_high: f64,
    pub sparsity_low: f64,
    pub jaccard_example: f64,
    pub jaccard_class: f64,
    pub matching_accuracy_example: f64,
    pub matching_accuracy_class: f64,
}

enum Failure {
    Null(&'static str),
    Utf8(&'static str),
    BufferTooSmall { need: usize, have: usize },
    Core(CfcbmError),
}

impl From<CfcbmError> for Failure {
    fn from(e: CfcbmError) -> Self {
        Failure::Core(e)
    }
}

fn status_of(e: &CfcbmError) -> CfcbmStatus {
    match e {
        CfcbmError::Dimension(_) => CfcbmStatus::Dimension,
        CfcbmError::Index(_) => CfcbmStatus::Index,
        CfcbmError::Format(_) => CfcbmStatus::Format,
        CfcbmError::CorruptData(_) => CfcbmStatus::CorruptData,
        CfcbmError::DegenerateInput(_) => CfcbmStatus::DegenerateInput,
        CfcbmError::Parameter(_) => CfcbmStatus::Parameter,
        CfcbmError::Arity(_) => CfcbmStatus::Arity,
        CfcbmError::Coverage(_) => CfcbmStatus::Coverage,
        CfcbmError::Validation(_) => CfcbmStatus::Validation,
        CfcbmError::Domain(_) => CfcbmStatus::Domain,
        CfcbmError::Divergence { .. } => CfcbmStatus::Divergence,
        CfcbmError::Io { .. } => CfcbmStatus::Io,
        CfcbmError::Json(_) => CfcbmStatus::Json,
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let message = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(message));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CfcbmStatus {
    let (status, message) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => return CfcbmStatus::Ok,
        Ok(Err(Failure::Null(what))) => (CfcbmStatus::NullPointer, format!("{what} is null")),
        Ok(Err(Failure::Utf8(what))) => (
            CfcbmStatus::InvalidUtf8,
            format!("{what} is not valid UTF-8"),
        ),
        Ok(Err(Failure::BufferTooSmall { need, have })) => (
            CfcbmStatus::BufferTooSmall,
            format!("buffer holds {have} entries, {need} needed"),
        ),
        Ok(Err(Failure::Core(e))) => (status_of(&e), e.to_string()),
        Err(payload) => {
            let detail = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            (CfcbmStatus::Panic, format!("internal panic: {detail}"))
        }
    };
    set_last_error(message);
    status
}

unsafe fn str_arg<'a>(ptr: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Failure::Utf8(what))
}

unsafe fn ref_arg<'a, T>(ptr: *const T, what: &'static str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or(Failure::Null(what))
}

unsafe fn out_arg<'a, T>(ptr: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or(Failure::Null(what))
}

fn boxed<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cfcbm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the most recent failure on this thread, or null if none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cfcbm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map_or(std::ptr::null(), |s| s.as_ptr())
    })
}

/// Reads a `.cfeb` file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer. On
/// success `*out` owns a dataset that must be released with
/// [`cfcbm_dataset_free`].
#[no_mangle]
pub unsafe extern "C" fn cfcbm_dataset_load(
    path: *const c_char,
    out: *mut *mut CfcbmDataset,
) -> CfcbmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ds = load_dataset(PathBuf::from(str_arg(path, "path")?))?;
        *out = boxed(CfcbmDataset(ds));
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle from [`cfcbm_dataset_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cfcbm_dataset_free(ds: *mut CfcbmDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// `ds` must be a live dataset handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cfcbm_dataset_info(
    ds: *const CfcbmDataset,
    out: *mut CfcbmDatasetInfo,
) -> CfcbmStatus {
    guard(|| {
        let ds = &ref_arg(ds, "dataset")?.0;
        *out_arg(out, "out")? = CfcbmDatasetInfo {
            n_examples: ds.n_examples(),
            embed_dim: ds.embed_dim(),
            n_patches: ds.n_patches,
            n_classes: ds.n_classes,
            n_high: ds.n_high(),
            n_low: ds.n_low(),
            has_example_ground_truth: ds.example_ground_truth.is_some(),
            has_class_ground_truth: ds.class_ground_truth.is_some(),
        };
        Ok(())
    })
}

/// Reads a concept manifest (JSON).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer. Release
/// the result with [`cfcbm_hierarchy_free`].
#[no_mangle]
pub unsafe extern "C" fn cfcbm_hierarchy_load(
    path: *const c_char,
    out: *mut *mut CfcbmHierarchy,
) -> CfcbmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let hier = ConceptHierarchy::load_manifest(str_arg(path, "path")?)?;
        *out = boxed(CfcbmHierarchy(hier));
        Ok(())
    })
}

/// # Safety
/// `hier` must be null or a handle from [`cfcbm_hierarchy_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cfcbm_hierarchy_free(hier: *mut CfcbmHierarchy) {
    if !hier.is_null() {
        drop(Box::from_raw(hier));
    }
}

/// Trains a model from scratch.
///
/// `config_json` is a JSON object with any subset of the training options
/// (`alpha_h`, `alpha_l`, `beta`, `gumbel_temperature`, `lr`,
/// `amortization_lr_multiplier`, `epochs`, `batch_size`, `seed`, `infer_tau`,
/// `patches`, `mode`); null means all defaults.
///
/// # Safety
/// `ds` and `hier` must be live handles, `config_json` null or a
/// NUL-terminated string, and `out` a valid pointer. Release the result with
/// [`cfcbm_model_free`].
#[no_mangle]
pub unsafe extern "C" fn cfcbm_train(
    ds: *const CfcbmDataset,
    hier: *const CfcbmHierarchy,
    config_json: *const c_char,
    out: *mut *mut CfcbmModel,
) -> CfcbmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ds = &ref_arg(ds, "dataset")?.0;
        let hier = &ref_arg(hier, "hierarchy")?.0;
        let config: TrainConfig = if config_json.is_null() {
            TrainConfig::default()
        } else {
            serde_json::from_str(str_arg(config_json, "config_json")?).map_err(CfcbmError::from)?
        };
        hier.validate(&ds.concepts)?;
        let (state, _) = train_state(ds, hier, &config)?;
        *out = boxed(CfcbmModel(Checkpoint {
            state,
            hierarchy: hier.clone(),
        }));
        Ok(())
    })
}

/// Trains `epochs` more epochs on `ds`, continuing from the model's state.
/// The stored configuration's epoch count becomes the new total.
///
/// # Safety
/// `model` and `ds` must be live handles.
#[no_mangle]
pub unsafe extern "C" fn cfcbm_model_continue(
    model: *mut CfcbmModel,
    ds: *const CfcbmDataset,
    epochs: u64,
) -> CfcbmStatus {
    guard(|| {
        let ds = &ref_arg(ds, "dataset")?.0;
        let ckpt = &mut out_arg(model, "model")?.0;
        ckpt.hierarchy.validate(&ds.concepts)?;
        // train on a copy so a divergence leaves the handle untouched
        let mut state = ckpt.state.clone();
        state.run(ds, &ckpt.hierarchy, epochs)?;
        state.config.epochs = state.epochs_done;
        ckpt.state = state;
        Ok(())
    })
}

/// Number of epochs the model has been trained for.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cfcbm_model_epochs(
    model: *const CfcbmModel,
    out: *mut u64,
) -> CfcbmStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(model, "model")?.0.state.epochs_done;
        Ok(())
    })
}

/// Writes a checkpoint file.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cfcbm_model_save(
    model: *const CfcbmModel,
    path: *const c_char,
) -> CfcbmStatus {
    guard(|| {
        let ckpt = &ref_arg(model, "model")?.0;
        save_checkpoint(str_arg(path, "path")?, &ckpt.state, &ckpt.hierarchy)?;
        Ok(())
    })
}

/// Reads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer. Release
/// the result with [`cfcbm_model_free`].
#[no_mangle]
pub unsafe extern "C" fn cfcbm_model_load(
    path: *const c_char,
    out: *mut *mut CfcbmModel,
) -> CfcbmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ckpt = load_checkpoint(str_arg(path, "path")?)?;
        *out = boxed(CfcbmModel(ckpt));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a model handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cfcbm_model_free(model: *mut CfcbmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

fn resolve_tau(ckpt: &Checkpoint, tau: f64) -> f64 {
    if tau.is_nan() {
        ckpt.state.config.infer_tau
    } else {
        tau
    }
}

/// Evaluates the model on `ds` with indicator threshold `tau` (NaN selects
/// the threshold stored in the model's configuration).
///
/// # Safety
/// `model` and `ds` must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cfcbm_evaluate(
    model: *const CfcbmModel,
    ds: *const CfcbmDataset,
    tau: f64,
    out: *mut CfcbmMetrics,
) -> CfcbmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ckpt = &ref_arg(model, "model")?.0;
        let ds = &ref_arg(ds, "dataset")?.0;
        ckpt.hierarchy.validate(&ds.concepts)?;
        let r = evaluate(
            ds,
            &ckpt.state.params,
            &ckpt.hierarchy,
            ckpt.state.config.mode,
            resolve_tau(ckpt, tau),
        )?;
        *out = CfcbmMetrics {
            accuracy_high: r.accuracy_high,
            accuracy_low: r.accuracy_low,
            sparsity_high: r.sparsity_high,
            sparsity_low: r.sparsity_low,
            jaccard_example: r.jaccard_example.unwrap_or(f64::NAN),
            jaccard_class: r.jaccard_class.unwrap_or(f64::NAN),
            matching_accuracy_example: r.matching_accuracy_example.unwrap_or(f64::NAN),
            matching_accuracy_class: r.matching_accuracy_class.unwrap_or(f64::NAN),
        };
        Ok(())
    })
}

/// Writes per-example class predictions of the high and low heads into
/// `out_high` and `out_low`, each holding `capacity` entries. Either buffer
/// may be null to skip it. Fails with `BufferTooSmall` if `capacity` is less
/// than the number of examples.
///
/// # Safety
/// `model` and `ds` must be live handles; non-null buffers must be valid for
/// `capacity` writes.
#[no_mangle]
pub unsafe extern "C" fn cfcbm_predict(
    model: *const CfcbmModel,
    ds: *const CfcbmDataset,
    tau: f64,
    out_high: *mut usize,
    out_low: *mut usize,
    capacity: usize,
) -> CfcbmStatus {
    guard(|| {
        let ckpt = &ref_arg(model, "model")?.0;
        let ds = &ref_arg(ds, "dataset")?.0;
        let n = ds.n_examples();
        if capacity < n {
            return Err(Failure::BufferTooSmall {
                need: n,
                have: capacity,
            });
        }
        ckpt.hierarchy.validate(&ds.concepts)?;
        let inf = infer(
            ds,
            &ckpt.state.params,
            &ckpt.hierarchy,
            ckpt.state.config.mode,
            resolve_tau(ckpt, tau),
        )?;
        for (buf, preds) in [
            (out_high, &inf.predictions_high),
            (out_low, &inf.predictions_low),
        ] {
            if !buf.is_null() {
                std::slice::from_raw_parts_mut(buf, n).copy_from_slice(preds);
            }
        }
        Ok(())
    })
}

/// Jaccard similarity of two binary vectors of length `len` (1 when both
/// are all zero).
///
/// # Safety
/// `a` and `b` must be valid for `len` reads and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cfcbm_jaccard(
    a: *const u8,
    b: *const u8,
    len: usize,
    out: *mut f64,
) -> CfcbmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if a.is_null() {
            return Err(Failure::Null("a"));
        }
        if b.is_null() {
            return Err(Failure::Null("b"));
        }
        *out = jaccard(
            std::slice::from_raw_parts(a, len),
            std::slice::from_raw_parts(b, len),
        )?;
        Ok(())
    })
}
