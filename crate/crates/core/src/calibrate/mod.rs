//! Calibration, predictive, failure-prediction and OOD metrics.

pub mod oracle;
pub mod plot;

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernelnet::KernelNet;
use crate::pathify::ProbabilityPath;
use crate::rng::SplitRng;
use crate::tensor::{softmax, Tensor};

pub const DEFAULT_BINS: usize = 15;
pub const NLL_FLOOR: f64 = 1e-12;
pub const DEFAULT_DRAWS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    n_classes: usize,
    probs: Vec<f64>,
    labels: Vec<usize>,
}

impl PredictionSet {
    pub fn new(probs: Vec<f64>, n_classes: usize, labels: Vec<usize>) -> Result<Self> {
        if n_classes == 0 || probs.len() != labels.len() * n_classes {
            return Err(Error::shape("prediction set", &[probs.len()], &[labels.len(), n_classes]));
        }
        for (i, row) in probs.chunks(n_classes).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|&p| !(0.0..=1.0 + 1e-12).contains(&p)) {
                return Err(Error::contract(format!("row {i} is not on the simplex (sum {s})")));
            }
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Range {
                what: "label",
                value: l as i64,
                lo: 0,
                hi: n_classes as i64 - 1,
            });
        }
        Ok(PredictionSet { n_classes, probs, labels })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>) -> Result<Self> {
        let c = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::contract("ragged probability rows"));
        }
        Self::new(rows.concat(), c.max(1), labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.n_classes..(i + 1) * self.n_classes]
    }

    /// Argmax with ties to the lowest class index.
    pub fn predicted(&self, i: usize) -> usize {
        let row = self.row(i);
        let mut best = 0;
        for c in 1..row.len() {
            if row[c] > row[best] {
                best = c;
            }
        }
        best
    }

    pub fn confidence(&self, i: usize) -> f64 {
        self.row(i)[self.predicted(i)]
    }

    pub fn confidences(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.confidence(i)).collect()
    }

    pub fn correct(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.predicted(i) == self.labels[i]).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..self.n_classes).map(|c| format!("prob_{c}")).collect();
        header.push("label".into());
        wr.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.row(i).iter().map(|p| format!("{p:?}")).collect();
            rec.push(self.labels[i].to_string());
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        let c = header.len().saturating_sub(1);
        let ok = c >= 1 && header.iter().take(c).enumerate().all(|(i, h)| h == format!("prob_{i}")) && &header[c] == "label";
        if !ok {
            return Err(Error::Parse(format!("expected header prob_0..prob_{{C-1}},label, got {:?}", header)));
        }
        let mut probs = Vec::new();
        let mut labels = Vec::new();
        for (line, rec) in rd.records().enumerate() {
            let rec = rec?;
            for f in rec.iter().take(c) {
                probs.push(f.trim().parse::<f64>().map_err(|e| Error::Parse(format!("row {}: {e}", line + 1)))?);
            }
            labels.push(rec[c].trim().parse::<usize>().map_err(|e| Error::Parse(format!("row {}: {e}", line + 1)))?);
        }
        Self::new(probs, c, labels)
    }
}

fn nonempty(p: &PredictionSet, metric: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::contract(format!("{metric}: empty prediction set")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub confidence: f64,
    pub accuracy: f64,
    pub count: usize,
}

fn bin_of(c: f64, n_bins: usize) -> usize {
    // first bin whose upper edge reaches c; bins are (lo, hi]
    (0..n_bins).find(|&b| c <= (b + 1) as f64 / n_bins as f64).unwrap_or(n_bins - 1)
}

pub fn reliability_bins(p: &PredictionSet, n_bins: usize) -> Result<Vec<ReliabilityBin>> {
    nonempty(p, "ece")?;
    if n_bins == 0 {
        return Err(Error::contract("ece: n_bins must be at least 1"));
    }
    let mut conf = vec![0.0; n_bins];
    let mut hits = vec![0usize; n_bins];
    let mut count = vec![0usize; n_bins];
    for i in 0..p.len() {
        let c = p.confidence(i);
        let b = bin_of(c, n_bins);
        conf[b] += c;
        hits[b] += (p.predicted(i) == p.labels[i]) as usize;
        count[b] += 1;
    }
    Ok((0..n_bins)
        .map(|b| {
            let n = count[b].max(1) as f64;
            ReliabilityBin {
                lo: b as f64 / n_bins as f64,
                hi: (b + 1) as f64 / n_bins as f64,
                confidence: conf[b] / n,
                accuracy: hits[b] as f64 / n,
                count: count[b],
            }
        })
        .collect())
}

/// `Σ_b (|B_b|/n) |acc(B_b) - conf(B_b)|` over equal-width bins on (0, 1].
pub fn ece(p: &PredictionSet, n_bins: usize) -> Result<f64> {
    let bins = reliability_bins(p, n_bins)?;
    let n = p.len() as f64;
    Ok(bins.iter().map(|b| b.count as f64 / n * (b.accuracy - b.confidence).abs()).sum())
}

pub fn accuracy(p: &PredictionSet) -> Result<f64> {
    nonempty(p, "accuracy")?;
    Ok(p.correct().iter().filter(|&&c| c).count() as f64 / p.len() as f64)
}

pub fn nll(p: &PredictionSet) -> Result<f64> {
    nonempty(p, "nll")?;
    Ok((0..p.len()).map(|i| -p.row(i)[p.labels[i]].max(NLL_FLOOR).ln()).sum::<f64>() / p.len() as f64)
}

pub fn brier(p: &PredictionSet) -> Result<f64> {
    nonempty(p, "brier")?;
    let mut s = 0.0;
    for i in 0..p.len() {
        for (c, &q) in p.row(i).iter().enumerate() {
            let y = (c == p.labels[i]) as u8 as f64;
            s += (q - y) * (q - y);
        }
    }
    Ok(s / p.len() as f64)
}

/// Matthews correlation for two classes, class 1 positive; 0 when a marginal is empty.
pub fn mcc(p: &PredictionSet) -> Result<f64> {
    nonempty(p, "mcc")?;
    if p.n_classes != 2 {
        return Err(Error::contract(format!("mcc: binary task required, got {} classes", p.n_classes)));
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..p.len() {
        match (p.predicted(i), p.labels[i]) {
            (1, 1) => tp += 1.0,
            (0, 0) => tn += 1.0,
            (1, 0) => fp += 1.0,
            _ => fn_ += 1.0,
        }
    }
    let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok((tp * tn - fp * fn_) / den.sqrt())
}

/// Indices grouped by equal score, groups in descending score order.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// `(coverage, risk)` for every prefix size `k`, with ties in confidence
/// resolved by their expectation over random orderings.
pub fn risk_coverage(p: &PredictionSet) -> Result<Vec<(f64, f64)>> {
    nonempty(p, "aurc")?;
    let correct = p.correct();
    let n = p.len();
    let mut out = Vec::with_capacity(n);
    let mut errs_before = 0.0;
    let mut k = 0usize;
    for g in tie_groups(&p.confidences()) {
        let e = g.iter().filter(|&&i| !correct[i]).count() as f64;
        let size = g.len() as f64;
        for j in 1..=g.len() {
            k += 1;
            let errs = errs_before + e * j as f64 / size;
            out.push((k as f64 / n as f64, errs / k as f64));
        }
        errs_before += e;
    }
    Ok(out)
}

pub fn aurc(p: &PredictionSet) -> Result<f64> {
    let rc = risk_coverage(p)?;
    Ok(rc.iter().map(|r| r.1).sum::<f64>() / rc.len() as f64)
}

/// Mann-Whitney `P(s_pos > s_neg) + ½ P(s_pos = s_neg)` via tie-averaged ranks.
pub fn mann_whitney(pos: &[f64], neg: &[f64]) -> f64 {
    let mut all: Vec<f64> = pos.iter().chain(neg).cloned().collect();
    let n_pos = pos.len();
    let groups = tie_groups(&all);
    // ascending ranks
    let mut rank = vec![0.0; all.len()];
    let mut seen = all.len();
    for g in &groups {
        let lo = seen - g.len() + 1;
        let avg = (lo + seen) as f64 / 2.0;
        for &i in g {
            rank[i] = avg;
        }
        seen -= g.len();
    }
    all.clear();
    let r_pos: f64 = rank[..n_pos].iter().sum();
    let u = r_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    u / (n_pos as f64 * neg.len() as f64)
}

fn split_by_correct(p: &PredictionSet, metric: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    nonempty(p, metric)?;
    let conf = p.confidences();
    let correct = p.correct();
    let pos: Vec<f64> = (0..p.len()).filter(|&i| correct[i]).map(|i| conf[i]).collect();
    let neg: Vec<f64> = (0..p.len()).filter(|&i| !correct[i]).map(|i| conf[i]).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::contract(format!(
            "{metric}: needs at least one correct and one incorrect prediction ({} correct, {} incorrect)",
            pos.len(),
            neg.len()
        )));
    }
    Ok((pos, neg))
}

/// Confidence as a score for separating correct (positive) from wrong predictions.
pub fn failure_auroc(p: &PredictionSet) -> Result<f64> {
    let (pos, neg) = split_by_correct(p, "failure_auroc")?;
    Ok(mann_whitney(&pos, &neg))
}

/// Smallest FPR over thresholds `score ≥ τ` whose TPR is at least 0.95.
pub fn fpr_at_tpr(pos: &[f64], neg: &[f64], target: f64) -> f64 {
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut best = 1.0f64;
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        if tp / np >= target {
            best = best.min(fp / nn);
        }
    }
    best
}

pub fn fpr95(p: &PredictionSet) -> Result<f64> {
    let (pos, neg) = split_by_correct(p, "fpr95")?;
    Ok(fpr_at_tpr(&pos, &neg, 0.95))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OodMethod {
    Msp,
    Entropy,
}

impl OodMethod {
    pub fn score(self, row: &[f64]) -> f64 {
        match self {
            OodMethod::Msp => row.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            OodMethod::Entropy => row.iter().filter(|&&q| q > 0.0).map(|&q| q * q.ln()).sum(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodScore {
    pub method: OodMethod,
    pub in_scores: Vec<f64>,
    pub out_scores: Vec<f64>,
    pub auroc: f64,
    pub aupr: f64,
}

/// Average precision with `pos` as the positive class, one step per distinct threshold.
pub fn average_precision(pos: &[f64], neg: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let np = pos.len() as f64;
    let (mut tp, mut k, mut prev_r, mut ap) = (0.0, 0.0, 0.0, 0.0);
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            tp += all[i].1 as u8 as f64;
            k += 1.0;
            i += 1;
        }
        let r = tp / np;
        ap += (r - prev_r) * (tp / k);
        prev_r = r;
    }
    ap
}

pub fn ood_eval(id: &PredictionSet, ood: &PredictionSet, method: OodMethod) -> Result<OodScore> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::contract("ood_eval: both prediction sets must be non-empty"));
    }
    let in_scores: Vec<f64> = (0..id.len()).map(|i| method.score(id.row(i))).collect();
    let out_scores: Vec<f64> = (0..ood.len()).map(|i| method.score(ood.row(i))).collect();
    Ok(OodScore {
        method,
        auroc: mann_whitney(&in_scores, &out_scores),
        aupr: average_precision(&in_scores, &out_scores),
        in_scores,
        out_scores,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n_samples: usize,
    pub n_classes: usize,
    pub n_bins: usize,
    pub nll_floor: f64,
    pub acc: f64,
    pub mcc: Option<f64>,
    pub ece: f64,
    pub nll: f64,
    pub brier: f64,
    pub aurc: f64,
    /// `None` when every prediction is correct (or every one wrong).
    pub auroc: Option<f64>,
    pub fpr95: Option<f64>,
    pub reliability: Vec<ReliabilityBin>,
    pub risk_coverage: Vec<(f64, f64)>,
}

impl CalibrationReport {
    pub fn compute(p: &PredictionSet, n_bins: usize) -> Result<Self> {
        let degenerate = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::Contract(_)) => Ok(None),
            Err(e) => Err(e),
        };
        let r = CalibrationReport {
            n_samples: p.len(),
            n_classes: p.n_classes,
            n_bins,
            nll_floor: NLL_FLOOR,
            acc: accuracy(p)?,
            mcc: if p.n_classes == 2 { Some(mcc(p)?) } else { None },
            ece: ece(p, n_bins)?,
            nll: nll(p)?,
            brier: brier(p)?,
            aurc: aurc(p)?,
            auroc: degenerate(failure_auroc(p))?,
            fpr95: degenerate(fpr95(p))?,
            reliability: reliability_bins(p, n_bins)?,
            risk_coverage: risk_coverage(p)?,
        };
        r.check_ranges()?;
        Ok(r)
    }

    pub fn check_ranges(&self) -> Result<()> {
        let unit = [("acc", Some(self.acc)), ("ece", Some(self.ece)), ("aurc", Some(self.aurc)), ("auroc", self.auroc), ("fpr95", self.fpr95)];
        for (name, v) in unit {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::numeric(name, format!("{v} outside [0, 1]")));
                }
            }
        }
        if let Some(m) = self.mcc {
            if !(-1.0..=1.0).contains(&m) {
                return Err(Error::numeric("mcc", format!("{m} outside [-1, 1]")));
            }
        }
        if !(0.0..=2.0).contains(&self.brier) || !(self.nll >= 0.0) || !self.nll.is_finite() {
            return Err(Error::numeric("brier/nll", format!("brier {} nll {}", self.brier, self.nll)));
        }
        Ok(())
    }
}

/// Where the final features come from.
pub enum Source<'k> {
    /// The path itself; with `noise` this samples the backbone's own posterior.
    Path { noise: bool },
    Kernel(&'k KernelNet),
}

/// Softmax probabilities averaged over `n_draws` generated `X_0` per input.
pub fn predict_calibrated(path: &ProbabilityPath<'_>, source: Source<'_>, x: &Tensor, y: &[usize], n_draws: usize, seed: u64) -> Result<PredictionSet> {
    if n_draws == 0 {
        return Err(Error::contract("predict_calibrated: n_draws must be at least 1"));
    }
    let x_t = path.embed(x)?;
    let depth = path.depth();
    let mut acc: Option<Vec<f64>> = None;
    let mut c = 0;
    for i in 0..n_draws {
        let s = SplitRng::with_stream(seed, 0xE0 + i as u64).next_u64();
        let x0 = match source {
            Source::Path { noise } => path.simulate_path(&x_t, noise, s)?.states.pop().unwrap(),
            Source::Kernel(k) => k.generate(&x_t, depth, true, s)?.states.pop().unwrap(),
        };
        let probs = softmax(&path.head(&x0)?)?;
        c = probs.shape()[1];
        match &mut acc {
            Some(a) => a.iter_mut().zip(probs.data()).for_each(|(a, b)| *a += b),
            None => acc = Some(probs.into_data()),
        }
    }
    let mut probs = acc.unwrap();
    probs.iter_mut().for_each(|v| *v /= n_draws as f64);
    PredictionSet::new(probs, c, y.to_vec())
}
