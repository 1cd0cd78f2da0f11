use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use pathcal_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(pathcal_last_error()) }.to_string_lossy().into_owned()
}

fn predictions(probs: &[f64], n_classes: usize, labels: &[u32]) -> *mut PathcalPredictions {
    let mut h = ptr::null_mut();
    let s = unsafe { pathcal_predictions_new(probs.as_ptr(), labels.len(), n_classes, labels.as_ptr(), &mut h) };
    assert_eq!(s, PathcalStatus::Ok, "{}", last_error());
    h
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(pathcal_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn metrics_through_the_handle() {
    let h = predictions(&[0.8, 0.2, 0.8, 0.2, 0.3, 0.7, 0.6, 0.4], 2, &[0, 1, 1, 0]);
    assert_eq!(unsafe { pathcal_predictions_len(h) }, 4);
    let mut v = f64::NAN;
    unsafe {
        assert_eq!(pathcal_accuracy(h, &mut v), PathcalStatus::Ok);
        assert_eq!(v, 0.75);
        assert_eq!(pathcal_brier(h, &mut v), PathcalStatus::Ok);
        assert!((v - (0.08 + 1.28 + 0.18 + 0.32) / 4.0).abs() < 1e-12);
        for f in [pathcal_nll, pathcal_mcc, pathcal_aurc, pathcal_failure_auroc, pathcal_fpr95] {
            assert_eq!(f(h, &mut v), PathcalStatus::Ok, "{}", last_error());
            assert!(v.is_finite());
        }
        assert_eq!(pathcal_ece(h, 15, &mut v), PathcalStatus::Ok);
        assert!((0.0..=1.0).contains(&v));

        let mut json = ptr::null_mut();
        assert_eq!(pathcal_report_json(h, 15, &mut json), PathcalStatus::Ok);
        let text = CStr::from_ptr(json).to_str().unwrap().to_owned();
        pathcal_string_free(json);
        let r: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(r["acc"], 0.75);
        assert_eq!(r["n_bins"], 15);
        pathcal_predictions_free(h);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut h = ptr::null_mut();
    let probs = [0.5, 0.6];
    let labels = [0u32];
    unsafe {
        assert_eq!(pathcal_predictions_new(probs.as_ptr(), 1, 2, labels.as_ptr(), &mut h), PathcalStatus::InvalidArgument);
        assert!(h.is_null());
        assert!(!last_error().is_empty());
        assert_eq!(pathcal_predictions_new(ptr::null(), 1, 2, labels.as_ptr(), &mut h), PathcalStatus::NullPointer);
        assert!(last_error().contains("probs"));
        let mut v = 0.0;
        assert_eq!(pathcal_accuracy(ptr::null(), &mut v), PathcalStatus::NullPointer);

        let multi = predictions(&[0.5, 0.3, 0.2], 3, &[0]);
        assert_eq!(pathcal_mcc(multi, &mut v), PathcalStatus::InvalidArgument);
        assert!(last_error().contains("binary"), "{}", last_error());
        pathcal_predictions_free(multi);

        let missing = CString::new("/nonexistent/preds.csv").unwrap();
        assert_eq!(pathcal_predictions_read_csv(missing.as_ptr(), &mut h), PathcalStatus::MissingArtifact);
    }
}

#[test]
fn ood_separates_disjoint_scores() {
    let id = predictions(&[0.9, 0.1, 0.95, 0.05], 2, &[0, 0]);
    let ood = predictions(&[0.5, 0.5, 0.55, 0.45], 2, &[0, 1]);
    let (mut auroc, mut aupr) = (0.0, 0.0);
    unsafe {
        for m in [PathcalOodMethod::Msp, PathcalOodMethod::Entropy] {
            assert_eq!(pathcal_ood_eval(id, ood, m, &mut auroc, &mut aupr), PathcalStatus::Ok);
            assert_eq!((auroc, aupr), (1.0, 1.0));
        }
        pathcal_predictions_free(id);
        pathcal_predictions_free(ood);
    }
}

#[test]
fn kl_gaussian_analytic_case() {
    let (pm, l, qm, qs) = ([0.0], [1.0], [1.0], [1.0]);
    let mut v = 0.0;
    unsafe {
        assert_eq!(pathcal_kl_gaussian(1, pm.as_ptr(), l.as_ptr(), qm.as_ptr(), qs.as_ptr(), &mut v), PathcalStatus::Ok);
        assert!((v - 0.5).abs() < 1e-12);
        let zero = [0.0];
        assert_eq!(pathcal_kl_gaussian(1, pm.as_ptr(), l.as_ptr(), qm.as_ptr(), zero.as_ptr(), &mut v), PathcalStatus::InvalidArgument);
    }
}

#[test]
fn csv_dump_reads_back() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.csv");
    std::fs::write(&path, "prob_0,prob_1,label\n0.25,0.75,1\n1,0,0\n").unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    let mut v = 0.0;
    unsafe {
        assert_eq!(pathcal_predictions_read_csv(c.as_ptr(), &mut h), PathcalStatus::Ok, "{}", last_error());
        assert_eq!(pathcal_predictions_len(h), 2);
        assert_eq!(pathcal_accuracy(h, &mut v), PathcalStatus::Ok);
        assert_eq!(v, 1.0);
        pathcal_predictions_free(h);
    }
}

#[test]
fn runs_a_small_pipeline() {
    let mut text = ptr::null_mut();
    unsafe {
        assert_eq!(pathcal_default_config(PathcalTask::Tabular, &mut text), PathcalStatus::Ok);
        let mut cfg = CStr::from_ptr(text).to_str().unwrap().to_owned();
        pathcal_string_free(text);
        for (k, v) in [("n_train", "80"), ("n_test", "30"), ("n_draws", "2")] {
            let line = cfg.lines().find(|l| l.starts_with(&format!("{k} = "))).unwrap().to_owned();
            cfg = cfg.replace(&line, &format!("{k} = {v}"));
        }
        cfg = cfg.replacen("epochs = 20", "epochs = 3", 1).replacen("epochs = 50", "epochs = 1", 1);
        let dir = tempfile::tempdir().unwrap();
        let (c_cfg, c_dir) = (CString::new(cfg).unwrap(), CString::new(dir.path().to_str().unwrap()).unwrap());
        let mut run = ptr::null_mut();
        assert_eq!(pathcal_run_open(c_cfg.as_ptr(), c_dir.as_ptr(), false, &mut run), PathcalStatus::Ok, "{}", last_error());
        let (mut b, mut d) = (f64::NAN, f64::NAN);
        assert_eq!(pathcal_run_all(run, &mut b, &mut d), PathcalStatus::Ok, "{}", last_error());
        assert!((0.0..=1.0).contains(&b) && (0.0..=1.0).contains(&d));
        let mut out = ptr::null_mut();
        assert_eq!(pathcal_run_dir(run, &mut out), PathcalStatus::Ok);
        assert_eq!(Path::new(CStr::from_ptr(out).to_str().unwrap()), dir.path());
        pathcal_string_free(out);
        pathcal_run_free(run);
        assert!(dir.path().join("calibration_report.json").exists());

        let bad = CString::new("task = \"nope\"").unwrap();
        assert_eq!(pathcal_run_open(bad.as_ptr(), ptr::null(), false, &mut run), PathcalStatus::Parse);
    }
}

#[test]
fn header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/pathcal.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in ["pathcal_version", "pathcal_last_error", "pathcal_predictions_new", "pathcal_ece", "pathcal_fpr95", "pathcal_kl_gaussian", "pathcal_run_all", "PATHCAL_STATUS_MISSING_ARTIFACT"] {
        assert!(text.contains(sym), "header lacks {sym}");
    }
    let status = std::process::Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"]).arg(&header).status().expect("run cc");
    assert!(status.success());
}
