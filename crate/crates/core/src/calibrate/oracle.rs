//! Brute-force definitional versions of every metric, used as test oracles.
//! Each one recomputes from scratch with no sorting tricks.

use super::{OodMethod, PredictionSet};
use crate::rng::SplitRng;

fn argmax(row: &[f64]) -> usize {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    row.iter().position(|&v| v == m).unwrap()
}

fn conf_correct(p: &PredictionSet) -> (Vec<f64>, Vec<bool>) {
    (0..p.len())
        .map(|i| {
            let r = p.row(i);
            let k = argmax(r);
            (r[k], k == p.labels()[i])
        })
        .unzip()
}

pub fn ece(p: &PredictionSet, n_bins: usize) -> f64 {
    let (conf, ok) = conf_correct(p);
    let n = p.len() as f64;
    let mut total = 0.0;
    for b in 0..n_bins {
        let lo = b as f64 / n_bins as f64;
        let hi = (b + 1) as f64 / n_bins as f64;
        let members: Vec<usize> = (0..p.len())
            .filter(|&i| (conf[i] > lo || (b == 0 && conf[i] >= 0.0)) && (conf[i] <= hi || b + 1 == n_bins))
            .collect();
        if members.is_empty() {
            continue;
        }
        let m = members.len() as f64;
        let acc = members.iter().filter(|&&i| ok[i]).count() as f64 / m;
        let c = members.iter().map(|&i| conf[i]).sum::<f64>() / m;
        total += m / n * (acc - c).abs();
    }
    total
}

pub fn nll(p: &PredictionSet) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        let q = p.row(i)[p.labels()[i]];
        s += -(if q < super::NLL_FLOOR { super::NLL_FLOOR } else { q }).ln();
    }
    s / p.len() as f64
}

/// `‖p‖² - 2 p_y + 1` per row.
pub fn brier(p: &PredictionSet) -> f64 {
    (0..p.len())
        .map(|i| {
            let r = p.row(i);
            r.iter().map(|v| v * v).sum::<f64>() - 2.0 * r[p.labels()[i]] + 1.0
        })
        .sum::<f64>()
        / p.len() as f64
}

/// Pearson correlation of the predicted and true binary labels.
pub fn mcc(p: &PredictionSet) -> f64 {
    let n = p.len() as f64;
    let a: Vec<f64> = (0..p.len()).map(|i| argmax(p.row(i)) as f64).collect();
    let b: Vec<f64> = p.labels().iter().map(|&l| l as f64).collect();
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// `(1/n) Σ_k (1/k) Σ_i err_i P(i ranks in the top k)`, where a sample tied
/// with others is in the top `k` with the probability implied by a uniformly
/// random order inside its tie.
pub fn aurc(p: &PredictionSet) -> f64 {
    let (conf, ok) = conf_correct(p);
    let n = p.len();
    let mut total = 0.0;
    for k in 1..=n {
        let mut errs = 0.0;
        for i in 0..n {
            if ok[i] {
                continue;
            }
            let above = (0..n).filter(|&j| conf[j] > conf[i]).count() as f64;
            let tied = (0..n).filter(|&j| conf[j] == conf[i]).count() as f64;
            errs += ((k as f64 - above) / tied).clamp(0.0, 1.0);
        }
        total += errs / k as f64;
    }
    total / n as f64
}

pub fn pairwise_auroc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut s = 0.0;
    for &a in pos {
        for &b in neg {
            s += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (pos.len() * neg.len()) as f64
}

fn split(p: &PredictionSet) -> (Vec<f64>, Vec<f64>) {
    let (conf, ok) = conf_correct(p);
    let pos = (0..p.len()).filter(|&i| ok[i]).map(|i| conf[i]).collect();
    let neg = (0..p.len()).filter(|&i| !ok[i]).map(|i| conf[i]).collect();
    (pos, neg)
}

pub fn failure_auroc(p: &PredictionSet) -> Option<f64> {
    let (pos, neg) = split(p);
    (!pos.is_empty() && !neg.is_empty()).then(|| pairwise_auroc(&pos, &neg))
}

/// Every threshold `τ` in the observed scores, recounted from scratch.
pub fn fpr95(p: &PredictionSet) -> Option<f64> {
    let (pos, neg) = split(p);
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut best = 1.0f64;
    for &tau in pos.iter().chain(&neg) {
        let tpr = pos.iter().filter(|&&s| s >= tau).count() as f64 / pos.len() as f64;
        let fpr = neg.iter().filter(|&&s| s >= tau).count() as f64 / neg.len() as f64;
        if tpr >= 0.95 {
            best = best.min(fpr);
        }
    }
    Some(best)
}

pub fn ood_scores(p: &PredictionSet, method: OodMethod) -> Vec<f64> {
    (0..p.len())
        .map(|i| {
            let r = p.row(i);
            match method {
                OodMethod::Msp => r[argmax(r)],
                OodMethod::Entropy => -r.iter().map(|&q| if q == 0.0 { 0.0 } else { -q * q.ln() }).sum::<f64>(),
            }
        })
        .collect()
}

/// `Σ_τ (R(τ) - R(τ')) P(τ)` over distinct thresholds in descending order.
pub fn aupr(pos: &[f64], neg: &[f64]) -> f64 {
    let mut taus: Vec<f64> = pos.iter().chain(neg).cloned().collect();
    taus.sort_by(|a, b| b.total_cmp(a));
    taus.dedup();
    let mut prev_r = 0.0;
    let mut ap = 0.0;
    for tau in taus {
        let tp = pos.iter().filter(|&&s| s >= tau).count() as f64;
        let fp = neg.iter().filter(|&&s| s >= tau).count() as f64;
        let r = tp / pos.len() as f64;
        ap += (r - prev_r) * tp / (tp + fp);
        prev_r = r;
    }
    ap
}

/// A random prediction set with deliberately coarse probabilities so that
/// ties in confidence and score are common.
pub fn random_set(rng: &mut SplitRng, max_n: usize, max_c: usize) -> PredictionSet {
    let n = 1 + rng.below(max_n);
    let c = 2 + rng.below(max_c - 1);
    let mut probs = Vec::with_capacity(n * c);
    for _ in 0..n {
        let w: Vec<f64> = (0..c).map(|_| rng.below(4) as f64).collect();
        let s: f64 = w.iter().sum();
        if s == 0.0 {
            probs.extend(std::iter::repeat(1.0 / c as f64).take(c));
        } else {
            probs.extend(w.iter().map(|v| v / s));
        }
    }
    let labels = (0..n).map(|_| rng.below(c)).collect();
    PredictionSet::new(probs, c, labels).expect("valid random set")
}
