use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use pathcal::calibrate::{self, average_precision, fpr_at_tpr, mann_whitney, CalibrationReport, PredictionSet};
use pathcal::config::{RunConfig, Task};
use pathcal::data::{gen_data, DataKind, Layout};
use pathcal::distill::{kl_gaussian, mahalanobis_term};
use pathcal::rng::SplitRng;
use pathcal::tensor::checkpoint::Checkpoint;
use pathcal::tensor::linalg::{gemm, Matrix};
use pathcal::tensor::{self, Tensor};

fn scores() -> impl Strategy<Value = Vec<f64>> {
    // Coarse grid so that ties show up.
    prop::collection::vec((0i32..8).prop_map(|v| v as f64 * 0.25 - 1.0), 1..12)
}

fn prediction_set() -> impl Strategy<Value = PredictionSet> {
    (1usize..14, 2usize..4, any::<u64>()).prop_map(|(n, c, seed)| {
        let mut rng = SplitRng::new(seed);
        let mut probs = Vec::with_capacity(n * c);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let w: Vec<f64> = (0..c).map(|_| rng.below(4) as f64 + 1e-3).collect();
            let s: f64 = w.iter().sum();
            probs.extend(w.iter().map(|v| v / s));
            labels.push(rng.below(c));
        }
        PredictionSet::new(probs, c, labels).unwrap()
    })
}

fn nalgebra_kl(pm: &[f64], l: &Matrix, qm: &[f64], qs: &[f64]) -> f64 {
    let k = pm.len();
    let lm = DMatrix::from_fn(k, k, |i, j| l.get(i, j));
    let sp = &lm * lm.transpose();
    let sq = DMatrix::from_fn(k, k, |i, j| if i == j { qs[i] * qs[i] } else { 0.0 });
    let sq_inv = sq.clone().try_inverse().unwrap();
    let d = DVector::from_column_slice(qm) - DVector::from_column_slice(pm);
    let maha = (d.transpose() * &sq_inv * &d)[(0, 0)];
    0.5 * ((&sq_inv * &sp).trace() + maha - k as f64 + sq.determinant().ln() - sp.determinant().ln())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn auroc_invariant_under_increasing_maps(pos in scores(), neg in scores(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let base = mann_whitney(&pos, &neg);
        let affine = |v: &[f64]| v.iter().map(|x| a * x + b).collect::<Vec<_>>();
        let exp = |v: &[f64]| v.iter().map(|x| x.exp()).collect::<Vec<_>>();
        prop_assert!((mann_whitney(&affine(&pos), &affine(&neg)) - base).abs() < 1e-12);
        prop_assert!((mann_whitney(&exp(&pos), &exp(&neg)) - base).abs() < 1e-12);
        prop_assert!((fpr_at_tpr(&exp(&pos), &exp(&neg), 0.95) - fpr_at_tpr(&pos, &neg, 0.95)).abs() < 1e-12);
        prop_assert!((average_precision(&affine(&pos), &affine(&neg)) - average_precision(&pos, &neg)).abs() < 1e-12);
    }

    #[test]
    fn auroc_swaps_under_label_exchange(pos in scores(), neg in scores()) {
        prop_assert!((mann_whitney(&pos, &neg) + mann_whitney(&neg, &pos) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn report_metrics_stay_in_range(p in prediction_set(), bins in 1usize..20) {
        let r = CalibrationReport::compute(&p, bins).unwrap();
        prop_assert!(r.check_ranges().is_ok());
        prop_assert!((0.0..=1.0).contains(&r.ece));
        prop_assert!(r.reliability.iter().map(|b| b.count).sum::<usize>() == p.len());
    }

    #[test]
    fn prediction_csv_round_trips(p in prediction_set()) {
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        prop_assert_eq!(PredictionSet::read_csv(&buf[..]).unwrap(), p);
    }

    #[test]
    fn kl_matches_nalgebra_and_is_nonnegative(k in 1usize..7, seed in any::<u64>()) {
        let mut rng = SplitRng::new(seed);
        let pm = rng.normals(k);
        let qm = rng.normals(k);
        let mut l = Matrix::zeros(k, k);
        for i in 0..k {
            for j in 0..i {
                l.set(i, j, 0.3 * rng.normal());
            }
            l.set(i, i, rng.uniform_range(0.3, 1.5));
        }
        let qs: Vec<f64> = (0..k).map(|_| rng.uniform_range(0.3, 1.5)).collect();
        let kl = kl_gaussian(&pm, &l, &qm, &qs).unwrap();
        let reference = nalgebra_kl(&pm, &l, &qm, &qs);
        prop_assert!(kl >= -1e-12);
        prop_assert!((kl - reference).abs() < 1e-9 * (1.0 + reference.abs()), "{} vs {}", kl, reference);
    }

    #[test]
    fn matched_factors_leave_only_the_mean_term(k in 1usize..9, seed in any::<u64>()) {
        let mut rng = SplitRng::new(seed);
        let pm = rng.normals(k);
        let qm = rng.normals(k);
        let s: Vec<f64> = (0..k).map(|_| rng.uniform_range(0.2, 2.0)).collect();
        let mut l = Matrix::zeros(k, k);
        for (i, v) in s.iter().enumerate() {
            l.set(i, i, *v);
        }
        let kl = kl_gaussian(&pm, &l, &qm, &s).unwrap();
        prop_assert!((kl - mahalanobis_term(&pm, &qm, &s)).abs() < 1e-10);
        prop_assert!(kl_gaussian(&pm, &l, &pm, &s).unwrap().abs() < 1e-12);
    }

    #[test]
    fn gemm_matches_naive(m in 1usize..11, n in 1usize..9, k in 1usize..9, ta: bool, tb: bool, seed in any::<u64>()) {
        let mut rng = SplitRng::new(seed);
        let a = rng.normals(m * k);
        let b = rng.normals(k * n);
        let c0 = rng.normals(m * n);
        let at = |i: usize, p: usize| if ta { a[p * m + i] } else { a[i * k + p] };
        let bt = |p: usize, j: usize| if tb { b[j * k + p] } else { b[p * n + j] };
        let mut c = c0.clone();
        gemm(m, n, k, &a, ta, &b, tb, &mut c);
        for i in 0..m {
            for j in 0..n {
                let want = c0[i * n + j] + (0..k).map(|p| at(i, p) * bt(p, j)).sum::<f64>();
                prop_assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..7, seed in any::<u64>()) {
        let x = Tensor::randn(&[rows, cols], 10.0, &mut SplitRng::new(seed));
        let s = tensor::softmax(&x).unwrap();
        for r in s.data().chunks(cols) {
            prop_assert!(r.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardises_rows(rows in 1usize..5, cols in 2usize..9, seed in any::<u64>()) {
        let x = Tensor::randn(&[rows, cols], 3.0, &mut SplitRng::new(seed));
        let y = tensor::layer_norm(&x, &Tensor::filled(&[cols], 1.0), &Tensor::zeros(&[cols]), 1e-12).unwrap();
        for r in y.data().chunks(cols) {
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(shapes in prop::collection::vec(prop::collection::vec(1usize..4, 0..3), 1..5), seed in any::<u64>()) {
        let mut rng = SplitRng::new(seed);
        let named = shapes.iter().enumerate().map(|(i, s)| (format!("t{i}"), Tensor::randn(s, 1.0, &mut rng))).collect();
        let ck = Checkpoint::from_named("test", seed, "abc", serde_json::json!({"k": 1}), named);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back, ck);
    }

    #[test]
    fn generated_data_is_deterministic_and_valid(n in 10usize..60, seed in any::<u64>(), kind in 0usize..5, raster: bool) {
        let kind = [DataKind::Blobs, DataKind::BlobsShifted, DataKind::Moons, DataKind::Spiral, DataKind::TokenParity][kind];
        let layout = if raster { Layout::Raster } else { Layout::Tabular };
        let a = gen_data(kind, n, seed, layout).unwrap();
        prop_assert_eq!(a.len(), n);
        prop_assert!(a.labels.iter().all(|&l| l < kind.n_classes()));
        prop_assert_eq!(&a, &gen_data(kind, n, seed, layout).unwrap());
    }

    #[test]
    fn config_snapshot_reparses_equal(seed in any::<u64>(), task in 0usize..3) {
        let mut cfg = RunConfig::default_for([Task::ToyVision, Task::ToyText, Task::Tabular][task]);
        cfg.seed = seed;
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back, cfg);
    }
}

#[test]
fn calibrated_synthetic_set_has_small_ece() {
    let mut rng = SplitRng::new(42);
    let n = 100_000;
    let mut probs = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.uniform_range(0.5, 1.0);
        probs.extend([c, 1.0 - c]);
        labels.push(if rng.uniform() < c { 0 } else { 1 });
    }
    let p = PredictionSet::new(probs, 2, labels).unwrap();
    let e = calibrate::ece(&p, 15).unwrap();
    assert!(e < 0.01, "ece {e}");
}
