//! C ABI over the pathcal metrics, the Gaussian KL and the pipeline runner.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free`. Every fallible call returns a
//! [`PathcalStatus`]; on failure, [`pathcal_last_error`] holds a message for
//! the calling thread until its next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use pathcal::calibrate::{self, CalibrationReport, OodMethod, PredictionSet};
use pathcal::config::{RunConfig, Task};
use pathcal::distill::kl_gaussian;
use pathcal::error::Error;
use pathcal::pipeline::Pipeline;
use pathcal::tensor::linalg::Matrix;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathcalStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    MissingArtifact = 3,
    Io = 4,
    Numeric = 5,
    Parse = 6,
    Stage = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathcalOodMethod {
    Msp = 0,
    Entropy = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathcalTask {
    ToyVision = 0,
    ToyText = 1,
    Tabular = 2,
}

/// A validated set of predicted class distributions with labels.
pub struct PathcalPredictions(PredictionSet);

/// An opened run directory.
pub struct PathcalRun(Pipeline);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> PathcalStatus {
    match e {
        Error::MissingArtifact(_) => PathcalStatus::MissingArtifact,
        Error::Io(_) => PathcalStatus::Io,
        Error::Numeric { .. } | Error::Divergence { .. } | Error::Conditioning(_) => PathcalStatus::Numeric,
        Error::Parse(_) | Error::Json(_) | Error::Csv(_) => PathcalStatus::Parse,
        Error::Stage { .. } => PathcalStatus::Stage,
        _ => PathcalStatus::InvalidArgument,
    }
}

struct Fail(PathcalStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(PathcalStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PathcalStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PathcalStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            PathcalStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(PathcalStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn preds<'a>(p: *const PathcalPredictions) -> Result<&'a PredictionSet, Fail> {
    p.as_ref().map(|p| &p.0).ok_or_else(|| null("predictions"))
}

fn into_c_string(s: String) -> Result<*mut c_char, Fail> {
    CString::new(s).map(CString::into_raw).map_err(|_| Fail(PathcalStatus::InvalidArgument, "string holds a NUL byte".into()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pathcal_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failing call on this thread; empty if none. Valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pathcal_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pathcal_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a prediction set from `n` rows of `n_classes` probabilities
/// (row-major) and `n` labels. Rows must lie on the simplex.
///
/// # Safety
/// `probs` must hold `n * n_classes` values and `labels` `n` values.
#[no_mangle]
pub unsafe extern "C" fn pathcal_predictions_new(
    probs: *const f64,
    n: usize,
    n_classes: usize,
    labels: *const u32,
    out: *mut *mut PathcalPredictions,
) -> PathcalStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let total = n.checked_mul(n_classes).ok_or_else(|| Fail(PathcalStatus::InvalidArgument, "n * n_classes overflows".into()))?;
        let probs = slice(probs, total, "probs")?.to_vec();
        let labels = slice(labels, n, "labels")?.iter().map(|&l| l as usize).collect();
        let set = PredictionSet::new(probs, n_classes, labels)?;
        *out = Box::into_raw(Box::new(PathcalPredictions(set)));
        Ok(())
    })
}

/// Reads a `prob_0..prob_{C-1},label` CSV file.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pathcal_predictions_read_csv(path: *const c_char, out: *mut *mut PathcalPredictions) -> PathcalStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        if !path.exists() {
            return Err(Error::MissingArtifact(path).into());
        }
        let f = std::fs::File::open(&path).map_err(Error::from)?;
        *out = Box::into_raw(Box::new(PathcalPredictions(PredictionSet::read_csv(f)?)));
        Ok(())
    })
}

/// # Safety
/// `p` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pathcal_predictions_free(p: *mut PathcalPredictions) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Number of rows, or 0 for a null handle.
///
/// # Safety
/// `p` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pathcal_predictions_len(p: *const PathcalPredictions) -> usize {
    p.as_ref().map_or(0, |p| p.0.len())
}

unsafe fn metric(p: *const PathcalPredictions, out: *mut f64, f: fn(&PredictionSet) -> pathcal::Result<f64>) -> PathcalStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = f(preds(p)?)?;
        Ok(())
    })
}

/// Top-1 accuracy.
///
/// # Safety
/// `p` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pathcal_accuracy(p: *const PathcalPredictions, out: *mut f64) -> PathcalStatus {
    metric(p, out, calibrate::accuracy)
}

/// Mean negative log-likelihood with the 1e-12 probability floor.
///
/// # Safety
/// `p` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pathcal_nll(p: *const PathcalPredictions, out: *mut f64) -> PathcalStatus {
    metric(p, out, calibrate::nll)
}

/// Mean squared distance to the one-hot label.
///
/// # Safety
/// `p` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pathcal_brier(p: *const PathcalPredictions, out: *mut f64) -> PathcalStatus {
    metric(p, out, calibrate::brier)
}

/// Matthews correlation; binary sets only.
///
/// # Safety
/// `p` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pathcal_mcc(p: *const PathcalPredictions, out: *mut f64) -> PathcalStatus {
    metric(p, out, calibrate::mcc)
}

/// Area under the risk-coverage curve.
///
/// # Safety
/// `p` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pathcal_aurc(p: *const PathcalPredictions, out: *mut f64) -> PathcalStatus {
    metric(p, out, calibrate::aurc)
}

/// AUROC of confidence separating correct from wrong predictions.
///
/// # Safety
/// `p` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pathcal_failure_auroc(p: *const PathcalPredictions, out: *mut f64) -> PathcalStatus {
    metric(p, out, calibrate::failure_auroc)
}

/// False-positive rate at 95% true-positive rate, correct as positive.
///
/// # Safety
/// `p` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pathcal_fpr95(p: *const PathcalPredictions, out: *mut f64) -> PathcalStatus {
    metric(p, out, calibrate::fpr95)
}

/// Expected calibration error over `n_bins` equal-width bins.
///
/// # Safety
/// `p` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pathcal_ece(p: *const PathcalPredictions, n_bins: usize, out: *mut f64) -> PathcalStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = calibrate::ece(preds(p)?, n_bins)?;
        Ok(())
    })
}

/// OOD AUROC and AUPR with in-distribution as the positive class.
///
/// # Safety
/// Both handles must be live; `auroc` and `aupr` writable.
#[no_mangle]
pub unsafe extern "C" fn pathcal_ood_eval(
    in_dist: *const PathcalPredictions,
    out_dist: *const PathcalPredictions,
    method: PathcalOodMethod,
    auroc: *mut f64,
    aupr: *mut f64,
) -> PathcalStatus {
    guard(|| {
        let (auroc, aupr) = (out_ref(auroc, "auroc")?, out_ref(aupr, "aupr")?);
        let m = match method {
            PathcalOodMethod::Msp => OodMethod::Msp,
            PathcalOodMethod::Entropy => OodMethod::Entropy,
        };
        let s = calibrate::ood_eval(preds(in_dist)?, preds(out_dist)?, m)?;
        *auroc = s.auroc;
        *aupr = s.aupr;
        Ok(())
    })
}

/// Full calibration report as a JSON string; free with
/// [`pathcal_string_free`].
///
/// # Safety
/// `p` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pathcal_report_json(p: *const PathcalPredictions, n_bins: usize, out: *mut *mut c_char) -> PathcalStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let r = CalibrationReport::compute(preds(p)?, n_bins)?;
        *out = into_c_string(serde_json::to_string(&r).map_err(Error::from)?)?;
        Ok(())
    })
}

/// `KL(N(p_mean, L Lᵀ) ‖ N(q_mean, diag(q_scale²)))` with `L` given as a
/// row-major `k x k` factor.
///
/// # Safety
/// `p_factor` must hold `k * k` values; the vectors `k` each.
#[no_mangle]
pub unsafe extern "C" fn pathcal_kl_gaussian(
    k: usize,
    p_mean: *const f64,
    p_factor: *const f64,
    q_mean: *const f64,
    q_scale: *const f64,
    out: *mut f64,
) -> PathcalStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let factor = Matrix::new(k, k, slice(p_factor, k * k, "p_factor")?.to_vec());
        *out = kl_gaussian(slice(p_mean, k, "p_mean")?, &factor, slice(q_mean, k, "q_mean")?, slice(q_scale, k, "q_scale")?)?;
        Ok(())
    })
}

/// Default run configuration for `task` as TOML.
///
/// # Safety
/// `out` must be writable; free the result with [`pathcal_string_free`].
#[no_mangle]
pub unsafe extern "C" fn pathcal_default_config(task: PathcalTask, out: *mut *mut c_char) -> PathcalStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let t = match task {
            PathcalTask::ToyVision => Task::ToyVision,
            PathcalTask::ToyText => Task::ToyText,
            PathcalTask::Tabular => Task::Tabular,
        };
        *out = into_c_string(RunConfig::default_for(t).to_toml()?)?;
        Ok(())
    })
}

/// Opens a run from TOML `config_text`. A non-null `out_dir` overrides
/// the configured directory; `resume` reuses finished stages.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pathcal_run_open(config_text: *const c_char, out_dir: *const c_char, resume: bool, out: *mut *mut PathcalRun) -> PathcalStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let mut cfg = RunConfig::from_toml(str_arg(config_text, "config_text")?)?;
        if !out_dir.is_null() {
            cfg.out = PathBuf::from(str_arg(out_dir, "out_dir")?);
        }
        *out = Box::into_raw(Box::new(PathcalRun(Pipeline::open(cfg, resume)?)));
        Ok(())
    })
}

/// Runs every stage. `distilled_ece` and `backbone_ece` may be null.
///
/// # Safety
/// `run` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pathcal_run_all(run: *const PathcalRun, backbone_ece: *mut f64, distilled_ece: *mut f64) -> PathcalStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        let s = run.0.run_all()?;
        if let Some(b) = backbone_ece.as_mut() {
            *b = s.eval.backbone.ece;
        }
        if let Some(d) = distilled_ece.as_mut() {
            *d = s.eval.distilled.ece;
        }
        Ok(())
    })
}

/// Run directory of `run`; free with [`pathcal_string_free`].
///
/// # Safety
/// `run` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pathcal_run_dir(run: *const PathcalRun, out: *mut *mut c_char) -> PathcalStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        *out = into_c_string(run.0.dir.to_string_lossy().into_owned())?;
        Ok(())
    })
}

/// # Safety
/// `run` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pathcal_run_free(run: *mut PathcalRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_codes_follow_error_kinds() {
        assert_eq!(status_of(&Error::MissingArtifact("x".into())), PathcalStatus::MissingArtifact);
        assert_eq!(status_of(&Error::contract("c")), PathcalStatus::InvalidArgument);
        assert_eq!(status_of(&Error::contract("c").in_stage("eval")), PathcalStatus::Stage);
    }

    #[test]
    fn panics_become_a_status() {
        assert_eq!(guard(|| panic!("boom")), PathcalStatus::Panic);
        let msg = unsafe { CStr::from_ptr(pathcal_last_error()) }.to_str().unwrap().to_string();
        assert!(msg.contains("boom"));
    }
}
