//! The oracle suite behind `pathcal verify`.

use crate::backbone::{AttentionConfig, AttentionMode, Backbone, BackboneConfig, Fusion, InputSpec, Noise};
use crate::calibrate::{self, oracle, OodMethod};
use crate::distill::{kl_gaussian, kl_monte_carlo, mahalanobis_term, vlb_gap, ToyChain, ToyKernel};
use crate::error::Result;
use crate::pathify::repartition;
use crate::rng::SplitRng;
use crate::tensor::gradcheck::run_suite;
use crate::tensor::linalg::Matrix;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

fn diag(v: &[f64]) -> Matrix {
    let mut m = Matrix::zeros(v.len(), v.len());
    for (i, &x) in v.iter().enumerate() {
        m.set(i, i, x);
    }
    m
}

pub fn gradients(points: usize) -> Result<Vec<Check>> {
    Ok(run_suite(0xF1D, points, 1e-4)?
        .into_iter()
        .map(|r| check(format!("grad/{}", r.name), r.max_rel_err < 1e-4, format!("max rel err {:.2e}", r.max_rel_err)))
        .collect())
}

/// Zero-noise path logits against the direct forward, every attention mode.
pub fn path_fidelity(inputs: usize) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for mode in AttentionMode::ALL {
        let cfg = BackboneConfig {
            attention: AttentionConfig {
                mode,
                n_heads: 4,
                d_model: 32,
                s: 4,
                fusion: Fusion::Add,
            },
            depth: 4,
            mlp_hidden: 64,
            n_classes: 3,
            input: InputSpec::Tabular { features: 15 },
            eval_samples: 1,
        };
        let bb = Backbone::new(cfg, 17)?;
        let x = Tensor::randn(&[inputs, 15], 1.0, &mut SplitRng::new(5));
        let path = repartition(&bb)?;
        let tr = path.simulate_path(&path.embed(&x)?, false, 0)?;
        let d = path.trace_logits(&tr)?.max_abs_diff(&bb.forward(&x, Noise::Off)?.logits);
        out.push(check(format!("path/{}", mode.name()), d < 1e-10, format!("max |Δlogit| {d:.2e}")));
    }
    Ok(out)
}

pub fn kl(pairs: usize, samples: usize) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let exact = kl_gaussian(&[0.0], &diag(&[1.0]), &[1.0], &[1.0])?;
    out.push(check("kl/analytic", (exact - 0.5).abs() < 1e-12, format!("{exact}")));
    let mut rng = SplitRng::new(0x4B4C);
    let mut worst: f64 = 0.0;
    for i in 0..pairs {
        let k = 1 + i % 8;
        let pm = rng.normals(k);
        let qm = rng.normals(k);
        let ps: Vec<f64> = (0..k).map(|_| rng.uniform_range(0.4, 1.6)).collect();
        let qs: Vec<f64> = (0..k).map(|_| rng.uniform_range(0.4, 1.6)).collect();
        let e = kl_gaussian(&pm, &diag(&ps), &qm, &qs)?;
        let (m, se) = kl_monte_carlo(&pm, &diag(&ps), &qm, &qs, samples, i as u64)?;
        worst = worst.max((e - m).abs() / se);
    }
    out.push(check("kl/monte-carlo", worst < 3.0, format!("worst |Δ|/se {worst:.2} over {pairs} pairs")));
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let k = 1 + rng.below(8);
        let pm = rng.normals(k);
        let qm = rng.normals(k);
        let s: Vec<f64> = (0..k).map(|_| rng.uniform_range(0.2, 2.0)).collect();
        let kl = kl_gaussian(&pm, &diag(&s), &qm, &s)?;
        worst = worst.max((kl - mahalanobis_term(&pm, &qm, &s)).abs());
    }
    out.push(check("kl/nullification", worst < 1e-10, format!("max |Δ| {worst:.2e}")));
    Ok(out)
}

pub fn bound(chains: usize, mc: usize) -> Result<Vec<Check>> {
    let mut fails = 0;
    let mut worst = f64::NEG_INFINITY;
    for i in 0..chains {
        let c = ToyChain::random(3, 4, 100 + i as u64);
        let x: Vec<f64> = SplitRng::with_stream(i as u64, 1).normals(4);
        let v = vlb_gap(&c, &ToyKernel(&c), &x, mc, i as u64)?;
        let slack = v.nll.unwrap_or(f64::NAN) - v.bound.value - 3.0 * v.combined_se();
        worst = worst.max(slack);
        fails += (!(slack <= 0.0)) as usize;
    }
    Ok(vec![check("vlb/inequality", fails == 0, format!("{chains} chains, max nll - bound - 3se {worst:.3e}"))])
}

pub fn metrics(sets: usize) -> Result<Vec<Check>> {
    let mut rng = SplitRng::new(0x0AC1E);
    let mut worst = [0.0f64; 9];
    let names = ["ece", "nll", "brier", "mcc", "aurc", "failure_auroc", "fpr95", "ood_auroc", "ood_aupr"];
    let opt = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(a), Some(b)) => (a - b).abs(),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    };
    for _ in 0..sets {
        let p = oracle::random_set(&mut rng, 12, 3);
        let q = oracle::random_set(&mut rng, 12, 3);
        let d = [
            (calibrate::ece(&p, 15)? - oracle::ece(&p, 15)).abs(),
            (calibrate::nll(&p)? - oracle::nll(&p)).abs(),
            (calibrate::brier(&p)? - oracle::brier(&p)).abs(),
            if p.n_classes() == 2 { (calibrate::mcc(&p)? - oracle::mcc(&p)).abs() } else { 0.0 },
            (calibrate::aurc(&p)? - oracle::aurc(&p)).abs(),
            opt(calibrate::failure_auroc(&p).ok(), oracle::failure_auroc(&p)),
            opt(calibrate::fpr95(&p).ok(), oracle::fpr95(&p)),
            {
                let s = calibrate::ood_eval(&p, &q, OodMethod::Entropy)?;
                (s.auroc - oracle::pairwise_auroc(&oracle::ood_scores(&p, OodMethod::Entropy), &oracle::ood_scores(&q, OodMethod::Entropy))).abs()
            },
            {
                let s = calibrate::ood_eval(&p, &q, OodMethod::Msp)?;
                (s.aupr - oracle::aupr(&oracle::ood_scores(&p, OodMethod::Msp), &oracle::ood_scores(&q, OodMethod::Msp))).abs()
            },
        ];
        for (w, v) in worst.iter_mut().zip(d) {
            *w = w.max(v);
        }
    }
    Ok(names
        .iter()
        .zip(worst)
        .map(|(n, w)| check(format!("metric/{n}"), w < 1e-12, format!("max |Δ| {w:.1e} over {sets} sets")))
        .collect())
}

/// Every oracle check; `quick` trims sample counts.
pub fn run_all(quick: bool) -> Result<Vec<Check>> {
    let mut out = gradients(if quick { 3 } else { 10 })?;
    out.extend(path_fidelity(if quick { 16 } else { 64 })?);
    out.extend(kl(20, if quick { 20_000 } else { 100_000 })?);
    out.extend(bound(if quick { 5 } else { 20 }, 1000)?);
    out.extend(metrics(200)?);
    Ok(out)
}
