//! Matching the kernel to the path: closed-form KL, the mean / factor /
//! performance losses, the variational-bound check and the training loop.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::train::take_rows;
use crate::error::{Error, Result};
use crate::kernelnet::KernelNet;
use crate::pathify::{ProbabilityPath, TraceSummary};
use crate::rng::SplitRng;
use crate::tensor::linalg::{self, Matrix};
use crate::tensor::{adam_step, lr_at, Graph, LrSchedule, OptimState, Tensor};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_mean: f64,
    pub lambda_cholesky: f64,
    pub lambda_nll: f64,
}

impl LossWeights {
    pub const GP_DEFAULT: LossWeights = LossWeights {
        lambda_mean: 0.5,
        lambda_cholesky: 0.2,
        lambda_nll: 0.3,
    };
    pub const DETERMINISTIC_DEFAULT: LossWeights = LossWeights {
        lambda_mean: 0.8,
        lambda_cholesky: 0.0,
        lambda_nll: 0.2,
    };

    pub fn for_path(stochastic: bool) -> Self {
        if stochastic {
            Self::GP_DEFAULT
        } else {
            Self::DETERMINISTIC_DEFAULT
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_mean", self.lambda_mean),
            ("lambda_cholesky", self.lambda_cholesky),
            ("lambda_nll", self.lambda_nll),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::contract(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }

    /// The factor term is switched off on deterministic paths.
    pub fn effective(mut self, stochastic: bool) -> Self {
        if !stochastic {
            self.lambda_cholesky = 0.0;
        }
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub cycle_epochs: usize,
    pub weights: LossWeights,
    /// Generated chains per input for the performance loss.
    pub l2_samples: usize,
    pub seed: u64,
}

impl DistillConfig {
    /// Reference optimiser settings for vision-sized runs with the given weights.
    pub fn reference(epochs: usize, batch: usize, weights: LossWeights, seed: u64) -> Self {
        DistillConfig {
            epochs,
            batch,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-5,
            min_lr: 1e-5,
            warmup_epochs: 5,
            cycle_epochs: 50,
            weights,
            l2_samples: 1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::contract("distill epochs must be at least 1"));
        }
        if self.batch == 0 || self.l2_samples == 0 {
            return Err(Error::contract("distill batch and l2_samples must be at least 1"));
        }
        self.weights.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub lr: f64,
    pub mean: f64,
    pub cholesky: f64,
    pub nll: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundKind {
    /// `Σ_t E[KL(p_t ‖ q_t)]`.
    KlSum,
    /// `Σ_t E[-log q_t]`, used when the path covariance is singular and the
    /// per-step KL is infinite.
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundEstimate {
    pub kind: BoundKind,
    pub value: f64,
    pub se: f64,
    /// Per step in time order `t = T..1`.
    pub per_step: Vec<f64>,
    pub chains: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub weights: LossWeights,
    pub config: DistillConfig,
    pub epochs: Vec<EpochLosses>,
    pub bound: Option<BoundEstimate>,
    pub kernel_params: usize,
    pub backbone_params: usize,
    pub backbone_checksum: String,
    /// Kept out of the serialised report so reruns are byte-identical.
    #[serde(skip)]
    pub wall_clock_s: f64,
}

// ---------------------------------------------------------------------------
// Gaussian helpers

/// `N(mean, C)` with `C = L Lᵀ` held as a dense lower Cholesky factor.
#[derive(Clone, Debug)]
pub struct FullGaussian {
    pub mean: Vec<f64>,
    chol: Vec<f64>,
    logdet: f64,
}

impl FullGaussian {
    /// `None` when `L Lᵀ` is singular.
    pub fn from_factor(mean: &[f64], factor: &Matrix) -> Option<Self> {
        let k = mean.len();
        if factor.rows != k || factor.cols < k {
            return None;
        }
        let mut c = vec![0.0; k * k];
        linalg::gemm(k, k, factor.cols, &factor.data, false, &factor.data, true, &mut c);
        let chol = linalg::cholesky_pd(&c, k).ok()?;
        let logdet = 2.0 * (0..k).map(|i| chol[i * k + i].ln()).sum::<f64>();
        logdet.is_finite().then(|| FullGaussian {
            mean: mean.to_vec(),
            chol,
            logdet,
        })
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let k = self.mean.len();
        let mut z = vec![0.0; k];
        for i in 0..k {
            let mut s = x[i] - self.mean[i];
            for j in 0..i {
                s -= self.chol[i * k + j] * z[j];
            }
            z[i] = s / self.chol[i * k + i];
        }
        -0.5 * (z.iter().map(|v| v * v).sum::<f64>() + self.logdet + k as f64 * LN_2PI)
    }

    pub fn entropy(&self) -> f64 {
        0.5 * (self.logdet + self.mean.len() as f64 * (1.0 + LN_2PI))
    }
}

pub fn diag_log_pdf(x: &[f64], mean: &[f64], scale: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..x.len() {
        let z = (x[i] - mean[i]) / scale[i];
        s += z * z + 2.0 * scale[i].ln();
    }
    -0.5 * (s + x.len() as f64 * LN_2PI)
}

fn check_q(p_mean: &[f64], p_factor: &Matrix, q_mean: &[f64], q_scale: &[f64]) -> Result<()> {
    let k = p_mean.len();
    if p_factor.rows != k || q_mean.len() != k || q_scale.len() != k {
        return Err(Error::shape("kl_gaussian", &[k, p_factor.rows], &[q_mean.len(), q_scale.len()]));
    }
    if let Some(s) = q_scale.iter().find(|&&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::Domain(format!("kernel scale must be strictly positive, got {s}")));
    }
    Ok(())
}

/// `(tr(Σ_q⁻¹ Σ_p), Mahalanobis², log|Σ_q|)` for a diagonal `q`.
fn q_terms(p_mean: &[f64], p_factor: &Matrix, q_mean: &[f64], q_scale: &[f64]) -> (f64, f64, f64) {
    let r = p_factor.cols;
    let mut tr = 0.0;
    let mut maha = 0.0;
    let mut logdet_q = 0.0;
    for i in 0..p_mean.len() {
        let s2 = q_scale[i] * q_scale[i];
        let row: f64 = p_factor.data[i * r..(i + 1) * r].iter().map(|v| v * v).sum();
        tr += row / s2;
        maha += (q_mean[i] - p_mean[i]).powi(2) / s2;
        logdet_q += s2.ln();
    }
    (tr, maha, logdet_q)
}

/// `KL(N(p_mean, L Lᵀ) ‖ N(q_mean, diag(q_scale²)))`
/// `= ½[tr(Σ_q⁻¹Σ_p) + (μ_q-μ_p)ᵀΣ_q⁻¹(μ_q-μ_p) - k + log|Σ_q| - log|Σ_p|]`.
/// Infinite when `L Lᵀ` is singular.
pub fn kl_gaussian(p_mean: &[f64], p_factor: &Matrix, q_mean: &[f64], q_scale: &[f64]) -> Result<f64> {
    check_q(p_mean, p_factor, q_mean, q_scale)?;
    let Some(p) = FullGaussian::from_factor(p_mean, p_factor) else {
        return Ok(f64::INFINITY);
    };
    let (tr, maha, logdet_q) = q_terms(p_mean, p_factor, q_mean, q_scale);
    Ok(0.5 * (tr + maha - p_mean.len() as f64 + logdet_q - p.logdet))
}

/// `E_p[-log q]` for the same pair; finite for singular `p` too.
pub fn cross_entropy_gaussian(p_mean: &[f64], p_factor: &Matrix, q_mean: &[f64], q_scale: &[f64]) -> Result<f64> {
    check_q(p_mean, p_factor, q_mean, q_scale)?;
    let (tr, maha, logdet_q) = q_terms(p_mean, p_factor, q_mean, q_scale);
    Ok(0.5 * (tr + maha + logdet_q + p_mean.len() as f64 * LN_2PI))
}

/// `½ ‖(m_q - m_p) / s‖²`.
pub fn mahalanobis_term(p_mean: &[f64], q_mean: &[f64], q_scale: &[f64]) -> f64 {
    0.5 * p_mean
        .iter()
        .zip(q_mean)
        .zip(q_scale)
        .map(|((a, b), s)| ((a - b) / s).powi(2))
        .sum::<f64>()
}

/// Monte-Carlo `E_p[log p - log q]` and its standard error.
pub fn kl_monte_carlo(p_mean: &[f64], p_factor: &Matrix, q_mean: &[f64], q_scale: &[f64], n: usize, seed: u64) -> Result<(f64, f64)> {
    check_q(p_mean, p_factor, q_mean, q_scale)?;
    let p = FullGaussian::from_factor(p_mean, p_factor).ok_or_else(|| Error::Domain("singular p covariance".into()))?;
    let mut rng = SplitRng::with_stream(seed, 0x4B4C);
    let (k, r) = (p_factor.rows, p_factor.cols);
    let mut acc = Welford::default();
    let mut x = vec![0.0; k];
    for _ in 0..n {
        let e = rng.normals(r);
        for i in 0..k {
            x[i] = p_mean[i] + (0..r).map(|c| p_factor.data[i * r + c] * e[c]).sum::<f64>();
        }
        acc.push(p.log_pdf(&x) - diag_log_pdf(&x, q_mean, q_scale));
    }
    Ok((acc.mean, acc.se()))
}

#[derive(Clone, Copy, Debug, Default)]
struct Welford {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn se(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        (self.m2 / (self.n - 1) as f64 / self.n as f64).sqrt()
    }
}

fn log_mean_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + (v.iter().map(|x| (x - m).exp()).sum::<f64>() / v.len() as f64).ln()
}

// ---------------------------------------------------------------------------
// Losses

fn sq_dist_per_batch(a: &Tensor, b: &Tensor) -> f64 {
    let bsz = a.shape()[0].max(1);
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / bsz as f64
}

/// `(1/T) Σ_t mean_b ‖pred_t - target_t‖²` over aligned `[B, N, d]` lists.
pub fn mean_matching(pred: &[Tensor], target: &[Tensor]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(target).map(|(p, t)| sq_dist_per_batch(p, t)).sum::<f64>() / pred.len() as f64
}

/// Kernel means and scales on the states of a trace, in step order.
pub fn kernel_on_trace(trace: &TraceSummary, kernel: &KernelNet) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let mut means = Vec::with_capacity(trace.t_indices.len());
    let mut scales = Vec::with_capacity(trace.t_indices.len());
    for (k, &t) in trace.t_indices.iter().enumerate() {
        let x = &trace.states[k];
        let (m, s) = kernel.forward_batch(x, &vec![t; x.shape()[0]])?;
        means.push(m);
        scales.push(s);
    }
    Ok((means, scales))
}

/// Mean matching `(1/T) Σ_t E‖m_θ(X_t, t) - m_t(X_t)‖²` on a trace.
pub fn loss_mean(trace: &TraceSummary, kernel: &KernelNet) -> Result<f64> {
    let (m, _) = kernel_on_trace(trace, kernel)?;
    Ok(mean_matching(&m, &trace.means))
}

/// Factor matching `(1/T) Σ_t E‖scale_θ - sqrt(diag σ_t)‖²` on a trace.
pub fn loss_cholesky(trace: &TraceSummary, kernel: &KernelNet) -> Result<f64> {
    if !trace.stochastic {
        return Err(Error::contract(
            "factor matching on a deterministic path; set lambda_cholesky = 0",
        ));
    }
    let (_, s) = kernel_on_trace(trace, kernel)?;
    Ok(mean_matching(&s, &trace.stds))
}

fn mean_cross_entropy(logits: &Tensor, y: &[usize]) -> Result<f64> {
    let c = logits.shape()[1];
    let mut total = 0.0;
    for (r, &label) in y.iter().enumerate() {
        if label >= c {
            return Err(Error::Range {
                what: "label",
                value: label as i64,
                lo: 0,
                hi: c as i64 - 1,
            });
        }
        let row = &logits.data()[r * c..(r + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    Ok(total / y.len().max(1) as f64)
}

/// Cross-entropy of the path head on `X_0 = gen(X_T, draw)`, averaged over
/// draws (log-probability averaging).
pub fn loss_perf_with(path: &ProbabilityPath<'_>, x: &Tensor, y: &[usize], draws: usize, mut gen: impl FnMut(&Tensor, usize) -> Result<Tensor>) -> Result<f64> {
    let x_t = path.embed(x)?;
    let mut total = 0.0;
    for i in 0..draws.max(1) {
        let x0 = gen(&x_t, i)?;
        total += mean_cross_entropy(&path.head(&x0)?, y)?;
    }
    Ok(total / draws.max(1) as f64)
}

pub fn loss_perf(path: &ProbabilityPath<'_>, kernel: &KernelNet, x: &Tensor, y: &[usize], draws: usize, seed: u64) -> Result<f64> {
    let depth = path.depth();
    loss_perf_with(path, x, y, draws, |x_t, i| {
        let tr = kernel.generate(x_t, depth, true, SplitRng::with_stream(seed, i as u64).next_u64())?;
        Ok(tr.states.last().unwrap().clone())
    })
}

// ---------------------------------------------------------------------------
// Bound and NLL

/// A chain of Gaussian transitions with a full (possibly rank-deficient) factor.
pub trait FactorChain: Sync {
    fn depth(&self) -> usize;
    fn dim(&self) -> usize;
    fn step(&self, t: usize, x: &[f64]) -> Result<(Vec<f64>, Matrix)>;
}

/// A chain of diagonal Gaussian transitions.
pub trait DiagChain: Sync {
    fn step_diag(&self, t: usize, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;
}

impl FactorChain for ProbabilityPath<'_> {
    fn depth(&self) -> usize {
        ProbabilityPath::depth(self)
    }

    fn dim(&self) -> usize {
        self.n_tokens() * self.d_model()
    }

    fn step(&self, t: usize, x: &[f64]) -> Result<(Vec<f64>, Matrix)> {
        let xt = Tensor::new(&[self.n_tokens(), self.d_model()], x.to_vec())?;
        let tr = self.transition_eval(t, &xt)?;
        let f = tr.factor_dense();
        Ok((tr.mean, f))
    }
}

impl DiagChain for KernelNet {
    fn step_diag(&self, t: usize, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let xt = Tensor::new(&[self.cfg.n_tokens, self.cfg.d_model], x.to_vec())?;
        let (m, s) = self.kernel_forward(&xt, t)?;
        Ok((m.into_data(), s))
    }
}

fn draw_factor(mean: &[f64], f: &Matrix, rng: &mut SplitRng) -> Vec<f64> {
    let e = rng.normals(f.cols);
    let mut x = mean.to_vec();
    for (i, xi) in x.iter_mut().enumerate() {
        *xi += (0..f.cols).map(|c| f.data[i * f.cols + c] * e[c]).sum::<f64>();
    }
    x
}

fn draw_diag(mean: &[f64], s: &[f64], rng: &mut SplitRng) -> Vec<f64> {
    let e = rng.normals(mean.len());
    mean.iter().zip(s).zip(e).map(|((m, s), e)| m + s * e).collect()
}

struct OuterChain {
    kl: Vec<f64>,
    ce: Vec<f64>,
    x0: Vec<f64>,
    degenerate: bool,
}

fn outer_chain<P: FactorChain, Q: DiagChain>(p: &P, q: &Q, x_t: &[f64], rng: &mut SplitRng) -> Result<OuterChain> {
    let mut x = x_t.to_vec();
    let mut out = OuterChain {
        kl: Vec::new(),
        ce: Vec::new(),
        x0: Vec::new(),
        degenerate: false,
    };
    for t in (1..=p.depth()).rev() {
        let (pm, pf) = p.step(t, &x)?;
        let (qm, qs) = q.step_diag(t, &x)?;
        let kl = kl_gaussian(&pm, &pf, &qm, &qs)?;
        out.degenerate |= !kl.is_finite();
        out.kl.push(kl);
        out.ce.push(cross_entropy_gaussian(&pm, &pf, &qm, &qs)?);
        x = draw_factor(&pm, &pf, rng);
    }
    out.x0 = x;
    Ok(out)
}

/// Per-step bound over `chains` path samples from each start in `starts`.
pub fn bound_estimate<P: FactorChain, Q: DiagChain>(p: &P, q: &Q, starts: &[Vec<f64>], chains: usize, seed: u64) -> Result<BoundEstimate> {
    let jobs: Vec<(usize, usize)> = (0..starts.len()).flat_map(|s| (0..chains).map(move |c| (s, c))).collect();
    let outs: Vec<OuterChain> = jobs
        .par_iter()
        .map(|&(s, c)| outer_chain(p, q, &starts[s], &mut SplitRng::with_stream(seed, (s * chains + c) as u64)))
        .collect::<Result<_>>()?;
    Ok(summarise_bound(&outs, p.depth()))
}

fn summarise_bound(outs: &[OuterChain], depth: usize) -> BoundEstimate {
    let degenerate = outs.iter().any(|o| o.degenerate);
    let pick = |o: &OuterChain| if degenerate { o.ce.clone() } else { o.kl.clone() };
    let mut w = Welford::default();
    let mut per_step = vec![0.0; depth];
    for o in outs {
        let v = pick(o);
        w.push(v.iter().sum());
        for (a, b) in per_step.iter_mut().zip(&v) {
            *a += b / outs.len() as f64;
        }
    }
    BoundEstimate {
        kind: if degenerate { BoundKind::CrossEntropy } else { BoundKind::KlSum },
        value: w.mean,
        se: w.se(),
        per_step,
        chains: outs.len(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VlbEstimate {
    /// `E_p[-log q(X_0|X_T)] - H(p(X_0|X_T))`, i.e. the marginal
    /// `KL(p(X_0|X_T) ‖ q(X_0|X_T))`; `None` on a degenerate path.
    pub nll: Option<f64>,
    pub nll_se: Option<f64>,
    /// The bound minus the same θ-free entropy constant.
    pub bound: BoundEstimate,
    /// `E_p[-Σ_t log q(X_{t-1}|X_t)]` on path trajectories.
    pub path_cross_entropy: f64,
    pub path_cross_entropy_se: f64,
    pub mc_samples: usize,
    pub entropy_omitted: bool,
}

impl VlbEstimate {
    pub fn combined_se(&self) -> f64 {
        (self.nll_se.unwrap_or(0.0).powi(2) + self.bound.se.powi(2)).sqrt()
    }
}

/// Monte-Carlo check of the variational bound from a single start `x_t`.
///
/// Both sides drop the θ-free entropy `H(p(X_0|X_T))`. The left side then is
/// the marginal KL between the path and kernel laws of `X_0`, whose densities
/// are estimated by averaging the last transition density over `mc` inner
/// chains run to `X_1` (exact for `T = 1`).
pub fn vlb_gap<P: FactorChain, Q: DiagChain>(p: &P, q: &Q, x_t: &[f64], mc: usize, seed: u64) -> Result<VlbEstimate> {
    if mc < 1000 {
        return Err(Error::contract(format!("vlb_gap needs at least 1000 Monte-Carlo samples, got {mc}")));
    }
    let depth = p.depth();
    let outs: Vec<OuterChain> = (0..mc)
        .into_par_iter()
        .map(|j| outer_chain(p, q, x_t, &mut SplitRng::with_stream(seed, j as u64)))
        .collect::<Result<_>>()?;
    let bound = summarise_bound(&outs, depth);
    let mut ce = Welford::default();
    for o in &outs {
        ce.push(o.ce.iter().sum());
    }
    let degenerate = outs.iter().any(|o| o.degenerate);

    let (nll, nll_se) = if degenerate || depth == 0 {
        (None, None)
    } else {
        // Inner chains to X_1 under each law, then the last transition.
        let inner = |law: u64| -> Result<Vec<Vec<f64>>> {
            let n_inner = if depth == 1 { 1 } else { mc };
            (0..n_inner)
                .into_par_iter()
                .map(|m| {
                    let mut rng = SplitRng::with_stream(seed ^ 0x1A7E_0000, (law << 32) | m as u64);
                    let mut x = x_t.to_vec();
                    for t in (2..=depth).rev() {
                        x = if law == 0 {
                            let (pm, pf) = p.step(t, &x)?;
                            draw_factor(&pm, &pf, &mut rng)
                        } else {
                            let (qm, qs) = q.step_diag(t, &x)?;
                            draw_diag(&qm, &qs, &mut rng)
                        };
                    }
                    Ok(x)
                })
                .collect()
        };
        let p_last: Vec<FullGaussian> = inner(0)?
            .iter()
            .map(|x1| {
                let (m, f) = p.step(1, x1)?;
                FullGaussian::from_factor(&m, &f).ok_or_else(|| Error::Domain("singular path covariance".into()))
            })
            .collect::<Result<_>>()?;
        let q_last: Vec<(Vec<f64>, Vec<f64>)> = inner(1)?.iter().map(|x1| q.step_diag(1, x1)).collect::<Result<_>>()?;
        let samples: Vec<f64> = outs
            .par_iter()
            .map(|o| {
                let lp: Vec<f64> = p_last.iter().map(|g| g.log_pdf(&o.x0)).collect();
                let lq: Vec<f64> = q_last.iter().map(|(m, s)| diag_log_pdf(&o.x0, m, s)).collect();
                log_mean_exp(&lp) - log_mean_exp(&lq)
            })
            .collect();
        let mut w = Welford::default();
        samples.iter().for_each(|&v| w.push(v));
        (Some(w.mean), Some(w.se()))
    };
    Ok(VlbEstimate {
        nll,
        nll_se,
        bound,
        path_cross_entropy: ce.mean,
        path_cross_entropy_se: ce.se(),
        mc_samples: mc,
        entropy_omitted: true,
    })
}

/// Random nonlinear Gaussian chains for exercising `vlb_gap`:
/// `p_t(x) = N(tanh(W x) + b, L Lᵀ)` with full-rank `L`, and
/// `q_t(x) = N(tanh(W' x) + b', diag(softplus(U x + c) + 0.1)²)`.
#[derive(Clone, Debug)]
pub struct ToyChain {
    pub depth: usize,
    pub dim: usize,
    p_w: Vec<Matrix>,
    p_b: Vec<Vec<f64>>,
    p_l: Vec<Matrix>,
    q_w: Vec<Matrix>,
    q_b: Vec<Vec<f64>>,
    q_u: Vec<Matrix>,
    q_c: Vec<Vec<f64>>,
}

pub struct ToyKernel<'a>(pub &'a ToyChain);

impl ToyChain {
    pub fn random(depth: usize, dim: usize, seed: u64) -> Self {
        let mut rng = SplitRng::with_stream(seed, 0x70);
        let mut mat = |r: usize, c: usize, s: f64| Matrix::new(r, c, (0..r * c).map(|_| s * rng.normal()).collect());
        let mut chain = ToyChain {
            depth,
            dim,
            p_w: Vec::new(),
            p_b: Vec::new(),
            p_l: Vec::new(),
            q_w: Vec::new(),
            q_b: Vec::new(),
            q_u: Vec::new(),
            q_c: Vec::new(),
        };
        for _ in 0..depth {
            let w = mat(dim, dim, 0.8);
            let b = mat(dim, 1, 0.5).data;
            let mut l = mat(dim, dim, 0.15);
            for i in 0..dim {
                for j in i + 1..dim {
                    l.set(i, j, 0.0);
                }
                l.set(i, i, 0.4 + l.get(i, i).abs());
            }
            let qw = Matrix::new(dim, dim, w.data.iter().zip(&mat(dim, dim, 0.2).data).map(|(a, b)| a + b).collect());
            let qb = b.iter().zip(&mat(dim, 1, 0.2).data).map(|(a, e)| a + e).collect();
            chain.p_w.push(w);
            chain.p_b.push(b);
            chain.p_l.push(l);
            chain.q_w.push(qw);
            chain.q_b.push(qb);
            chain.q_u.push(mat(dim, dim, 0.2));
            chain.q_c.push(mat(dim, 1, 0.3).data);
        }
        chain
    }

    fn affine_tanh(w: &Matrix, b: &[f64], x: &[f64]) -> Vec<f64> {
        (0..w.rows)
            .map(|i| ((0..w.cols).map(|j| w.get(i, j) * x[j]).sum::<f64>() + b[i]).tanh())
            .collect()
    }
}

impl FactorChain for ToyChain {
    fn depth(&self) -> usize {
        self.depth
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn step(&self, t: usize, x: &[f64]) -> Result<(Vec<f64>, Matrix)> {
        let k = t - 1;
        Ok((Self::affine_tanh(&self.p_w[k], &self.p_b[k], x), self.p_l[k].clone()))
    }
}

impl DiagChain for ToyKernel<'_> {
    fn step_diag(&self, t: usize, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let c = self.0;
        let k = t - 1;
        let m = ToyChain::affine_tanh(&c.q_w[k], &c.q_b[k], x);
        let s = (0..c.dim)
            .map(|i| {
                let z = (0..c.dim).map(|j| c.q_u[k].get(i, j) * x[j]).sum::<f64>() + c.q_c[k][i];
                crate::tensor::graph::softplus(z) + 0.1
            })
            .collect();
        Ok((m, s))
    }
}

// ---------------------------------------------------------------------------
// Training

/// `λ_mean L_mean + λ_Chol L_Chol + λ_NLL L2` with one uniform `t` per
/// element and a fresh path simulation per batch. Only kernel parameters
/// move; the backbone checksum is asserted unchanged.
pub fn distill_train(path: &ProbabilityPath<'_>, kernel: &mut KernelNet, x: &Tensor, y: &[usize], cfg: &DistillConfig) -> Result<DistillReport> {
    let start = Instant::now();
    if cfg.batch == 0 || cfg.l2_samples == 0 {
        return Err(Error::contract("distill batch and l2_samples must be at least 1"));
    }
    cfg.weights.validate()?;
    let n = y.len();
    if x.shape()[0] != n || n == 0 {
        return Err(Error::contract("distillation inputs and labels disagree in length"));
    }
    if kernel.cfg.depth != path.depth() || kernel.cfg.n_tokens != path.n_tokens() || kernel.cfg.d_model != path.d_model() {
        return Err(Error::contract("kernel and path dimensions differ"));
    }
    let bb = path.backbone();
    let checksum = bb.checksum();
    let stochastic = path.is_stochastic();
    let w = cfg.weights.effective(stochastic);
    let depth = path.depth();
    let (nt, d) = (path.n_tokens(), path.d_model());
    let per = nt * d;
    let sched = LrSchedule {
        base_lr: cfg.lr,
        min_lr: cfg.min_lr.min(cfg.lr),
        warmup_epochs: cfg.warmup_epochs,
        cycle_epochs: cfg.cycle_epochs,
    };
    let mut opt = OptimState::new(kernel.params.tensors(), cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt.lr = if cfg.lr == 0.0 { 0.0 } else { lr_at(&sched, epoch) };
        let e = epoch as u64;
        let mut order: Vec<usize> = (0..n).collect();
        SplitRng::with_stream(cfg.seed, 0xD100 + e).shuffle(&mut order);
        let mut path_rng = SplitRng::with_stream(cfg.seed, 0xD200 + e);
        let mut t_rng = SplitRng::with_stream(cfg.seed, 0xD300 + e);
        let mut l2_rng = SplitRng::with_stream(cfg.seed, 0xD400 + e);
        let mut drop_rng = SplitRng::with_stream(cfg.seed, 0xD500 + e);
        let mut sums = [0.0; 4];
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            let b = chunk.len();
            let xb = take_rows(x, chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let x_t = path.embed(&xb)?;
            let tr = path.simulate_path(&x_t, stochastic, path_rng.next_u64())?;
            let ts: Vec<usize> = (0..b).map(|_| 1 + t_rng.below(depth)).collect();
            let mut xs = Vec::with_capacity(b * per);
            let mut ms = Vec::with_capacity(b * per);
            let mut ss = Vec::with_capacity(b * per);
            for (bi, &t) in ts.iter().enumerate() {
                let k = depth - t;
                xs.extend_from_slice(&tr.states[k].data()[bi * per..(bi + 1) * per]);
                ms.extend_from_slice(&tr.transitions[k][bi].mean);
                if w.lambda_cholesky > 0.0 {
                    ss.extend(tr.transitions[k][bi].std_diag());
                }
            }

            let mut g = Graph::new();
            let pk = kernel.params.bind(&mut g);
            let xin = g.constant(&[b, nt, d], xs);
            let out = kernel.forward_graph(&mut g, &pk, xin, &ts, Some(&mut drop_rng))?;
            let target = g.constant(&[b, nt, d], ms);
            let diff = g.sub(out.mean, target)?;
            let sq = g.square(diff)?;
            let s = g.sum(sq);
            let l_mean = g.scale(s, 1.0 / b as f64);
            let mut total = g.scale(l_mean, w.lambda_mean);
            let mut l_chol_v = 0.0;
            if w.lambda_cholesky > 0.0 {
                let target = g.constant(&[b, nt, d], ss);
                let diff = g.sub(out.scale, target)?;
                let sq = g.square(diff)?;
                let s = g.sum(sq);
                let l_chol = g.scale(s, 1.0 / b as f64);
                l_chol_v = g.scalar(l_chol);
                let term = g.scale(l_chol, w.lambda_cholesky);
                total = g.add(total, term)?;
            }
            let mut l2_v = 0.0;
            if w.lambda_nll > 0.0 {
                let pb = bb.params.bind_frozen(&mut g);
                let xt_v = g.constant(x_t.shape(), x_t.data().to_vec());
                let mut acc: Option<crate::tensor::Var> = None;
                for _ in 0..cfg.l2_samples {
                    let x0 = kernel.generate_graph(&mut g, &pk, xt_v, Some(&mut l2_rng), Some(&mut drop_rng))?;
                    let logits = path.head_graph(&mut g, &pb, x0)?;
                    let ce = g.cross_entropy(logits, &yb)?;
                    acc = Some(match acc {
                        Some(a) => g.add(a, ce)?,
                        None => ce,
                    });
                }
                let l2 = g.scale(acc.unwrap(), 1.0 / cfg.l2_samples as f64);
                l2_v = g.scalar(l2);
                let term = g.scale(l2, w.lambda_nll);
                total = g.add(total, term)?;
            }
            let tv = g.scalar(total);
            let lm = g.scalar(l_mean);
            if !tv.is_finite() {
                return Err(Error::Divergence {
                    stage: "distill",
                    step: epoch,
                    detail: format!("epoch {epoch}, batch {step}: non-finite loss"),
                });
            }
            g.backward(total)?;
            kernel.params.absorb_grads(&g, &pk)?;
            adam_step(kernel.params.tensors_mut(), &mut opt)?;
            let bf = b as f64;
            sums[0] += lm * bf;
            sums[1] += l_chol_v * bf;
            sums[2] += l2_v * bf;
            sums[3] += tv * bf;
        }
        let nf = n as f64;
        epochs.push(EpochLosses {
            epoch,
            lr: opt.lr,
            mean: sums[0] / nf,
            cholesky: sums[1] / nf,
            nll: sums[2] / nf,
            total: sums[3] / nf,
        });
    }
    if bb.checksum() != checksum {
        return Err(Error::contract("backbone parameters changed during distillation"));
    }
    Ok(DistillReport {
        weights: w,
        config: *cfg,
        epochs,
        bound: None,
        kernel_params: kernel.param_count(),
        backbone_params: bb.param_count(),
        backbone_checksum: checksum,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

/// Path-side bound for a trained kernel on the first `inputs` rows of `x`.
pub fn report_bound(path: &ProbabilityPath<'_>, kernel: &KernelNet, x: &Tensor, inputs: usize, chains: usize, seed: u64) -> Result<BoundEstimate> {
    let k = inputs.min(x.shape()[0]);
    let rows: Vec<usize> = (0..k).collect();
    let x_t = path.embed(&take_rows(x, &rows))?;
    let per = path.n_tokens() * path.d_model();
    let starts: Vec<Vec<f64>> = (0..k).map(|i| x_t.data()[i * per..(i + 1) * per].to_vec()).collect();
    bound_estimate(path, kernel, &starts, chains, seed)
}

/// Trailing-window mean of a series.
pub fn moving_average(v: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..v.len().saturating_sub(w - 1)).map(|i| v[i..i + w].iter().sum::<f64>() / w as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{AttentionConfig, AttentionMode, Backbone, BackboneConfig, Fusion, InputSpec};
    use crate::kernelnet::KernelConfig;
    use crate::pathify::repartition;

    fn cfg(mode: AttentionMode, depth: usize) -> BackboneConfig {
        BackboneConfig {
            attention: AttentionConfig {
                mode,
                n_heads: 2,
                d_model: 8,
                s: 3,
                fusion: Fusion::Add,
            },
            depth,
            mlp_hidden: 16,
            n_classes: 3,
            input: InputSpec::Grid { side: 4, patch: 2 },
            eval_samples: 1,
        }
    }

    fn kernel_for(bb: &Backbone, seed: u64) -> KernelNet {
        KernelNet::new(KernelConfig::for_backbone(bb.depth(), bb.n_tokens(), bb.d_model()), seed).unwrap()
    }

    fn diag(v: &[f64]) -> Matrix {
        let k = v.len();
        let mut m = Matrix::zeros(k, k);
        for (i, &x) in v.iter().enumerate() {
            m.set(i, i, x);
        }
        m
    }

    #[test]
    fn kl_examples() {
        let kl = kl_gaussian(&[0.0], &diag(&[1.0]), &[1.0], &[1.0]).unwrap();
        assert!((kl - 0.5).abs() < 1e-12);
        let kl = kl_gaussian(&[0.3, -1.0], &diag(&[0.7, 2.0]), &[0.3, -1.0], &[0.7, 2.0]).unwrap();
        assert!(kl.abs() < 1e-12);
        assert!(matches!(kl_gaussian(&[0.0], &diag(&[1.0]), &[0.0], &[0.0]), Err(Error::Domain(_))));
        assert_eq!(kl_gaussian(&[0.0, 0.0], &Matrix::zeros(2, 2), &[0.0, 0.0], &[1.0, 1.0]).unwrap(), f64::INFINITY);
    }

    #[test]
    fn kl_agrees_with_sampling() {
        let mut rng = SplitRng::new(4);
        for case in 0..4 {
            let k = 1 + case;
            let pm: Vec<f64> = rng.normals(k);
            let qm: Vec<f64> = rng.normals(k);
            let ps: Vec<f64> = (0..k).map(|_| rng.uniform_range(0.5, 1.5)).collect();
            let qs: Vec<f64> = (0..k).map(|_| rng.uniform_range(0.5, 1.5)).collect();
            let exact = kl_gaussian(&pm, &diag(&ps), &qm, &qs).unwrap();
            let (mc, se) = kl_monte_carlo(&pm, &diag(&ps), &qm, &qs, 20_000, case as u64).unwrap();
            assert!((exact - mc).abs() < 4.0 * se, "{exact} vs {mc} ± {se}");
        }
    }

    #[test]
    fn matched_factor_leaves_mahalanobis() {
        let s = [0.4, 1.3, 0.9];
        let kl = kl_gaussian(&[1.0, 2.0, 3.0], &diag(&s), &[0.0, 2.5, 3.0], &s).unwrap();
        assert!((kl - mahalanobis_term(&[1.0, 2.0, 3.0], &[0.0, 2.5, 3.0], &s)).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_is_kl_plus_entropy() {
        let l = Matrix::new(2, 2, vec![0.8, 0.0, 0.3, 0.5]);
        let (pm, qm, qs) = ([0.1, -0.4], [0.5, 0.2], [0.9, 1.4]);
        let kl = kl_gaussian(&pm, &l, &qm, &qs).unwrap();
        let ce = cross_entropy_gaussian(&pm, &l, &qm, &qs).unwrap();
        let h = FullGaussian::from_factor(&pm, &l).unwrap().entropy();
        assert!((ce - kl - h).abs() < 1e-12);
    }

    fn trace(mode: AttentionMode) -> (Backbone, Tensor) {
        let bb = Backbone::new(cfg(mode, 2), 7).unwrap();
        let x = Tensor::randn(&[3, 16], 1.0, &mut SplitRng::new(2));
        (bb, x)
    }

    #[test]
    fn mean_loss_of_constant_offset() {
        let (bb, x) = trace(AttentionMode::Kep);
        let path = repartition(&bb).unwrap();
        let k = kernel_for(&bb, 1);
        let tr = path.simulate_path(&path.embed(&x).unwrap(), true, 3).unwrap();
        let mut s = TraceSummary::from_trace(&tr);
        assert!(loss_mean(&s, &k).unwrap() > 0.0);
        let (m, _) = kernel_on_trace(&s, &k).unwrap();
        let c = 0.25;
        s.means = m.iter().map(|t| Tensor::new(t.shape(), t.data().iter().map(|v| v + c).collect()).unwrap()).collect();
        let expect = c * c * (bb.n_tokens() * bb.d_model()) as f64;
        assert!((loss_mean(&s, &k).unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn factor_loss_requires_a_stochastic_path() {
        let (bb, x) = trace(AttentionMode::Standard);
        let path = repartition(&bb).unwrap();
        let k = kernel_for(&bb, 1);
        let s = TraceSummary::from_trace(&path.simulate_path(&path.embed(&x).unwrap(), false, 0).unwrap());
        assert!(matches!(loss_cholesky(&s, &k), Err(Error::Contract(_))));
    }

    #[test]
    fn factor_loss_at_the_floor() {
        let (bb, x) = trace(AttentionMode::Kep);
        let path = repartition(&bb).unwrap();
        let mut k = kernel_for(&bb, 1);
        k.params.by_name_mut("scale.b").unwrap().data_mut().fill(-800.0);
        let mut s = TraceSummary::from_trace(&path.simulate_path(&path.embed(&x).unwrap(), true, 0).unwrap());
        for t in &mut s.stds {
            t.data_mut().fill(0.0);
        }
        let nd = (bb.n_tokens() * bb.d_model()) as f64;
        let l = loss_cholesky(&s, &k).unwrap();
        assert!((l - 1e-12 * nd).abs() < 1e-20, "{l}");
    }

    #[test]
    fn perf_loss_with_uniform_logits_is_log_c() {
        let (mut bb, x) = trace(AttentionMode::Kep);
        bb.params.by_name_mut("head.w").unwrap().data_mut().fill(0.0);
        let path = repartition(&bb).unwrap();
        let k = kernel_for(&bb, 1);
        let l = loss_perf(&path, &k, &x, &[0, 1, 2], 3, 5).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn vlb_needs_enough_samples() {
        let c = ToyChain::random(2, 3, 1);
        assert!(matches!(vlb_gap(&c, &ToyKernel(&c), &[0.0; 3], 999, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn single_step_nll_equals_bound() {
        let c = ToyChain::random(1, 3, 9);
        let v = vlb_gap(&c, &ToyKernel(&c), &[0.2, -0.1, 0.5], 2000, 1).unwrap();
        let nll = v.nll.unwrap();
        assert_eq!(v.bound.kind, BoundKind::KlSum);
        assert!((nll - v.bound.value).abs() < 3.0 * v.combined_se() + 1e-12, "{nll} vs {:?}", v.bound);
    }

    #[test]
    fn bound_holds_on_a_three_step_chain() {
        let c = ToyChain::random(3, 4, 2);
        let v = vlb_gap(&c, &ToyKernel(&c), &[0.3, 0.0, -0.2, 0.1], 1000, 4).unwrap();
        assert!(v.nll.unwrap() <= v.bound.value + 3.0 * v.combined_se());
        assert!(v.path_cross_entropy > v.bound.value);
    }

    #[test]
    fn degenerate_path_reports_cross_entropy() {
        let (bb, x) = trace(AttentionMode::Kep);
        let path = repartition(&bb).unwrap();
        let k = kernel_for(&bb, 1);
        let b = report_bound(&path, &k, &x, 2, 2, 0).unwrap();
        assert_eq!(b.kind, BoundKind::CrossEntropy);
        assert!(b.value.is_finite());
        assert_eq!(b.per_step.len(), 2);
    }

    fn labels(n: usize) -> Vec<usize> {
        (0..n).map(|i| i % 3).collect()
    }

    fn small_cfg(epochs: usize, mode_stochastic: bool) -> DistillConfig {
        let mut c = DistillConfig::reference(epochs, 8, LossWeights::for_path(mode_stochastic), 11);
        c.lr = 3e-3;
        c.warmup_epochs = 0;
        c
    }

    #[test]
    fn zero_epochs_leaves_kernel_unchanged() {
        let (bb, _) = trace(AttentionMode::Kep);
        let x = Tensor::randn(&[16, 16], 1.0, &mut SplitRng::new(3));
        let path = repartition(&bb).unwrap();
        let mut k = kernel_for(&bb, 2);
        let before = k.params.clone();
        let r = distill_train(&path, &mut k, &x, &labels(16), &small_cfg(0, true)).unwrap();
        assert!(r.epochs.is_empty());
        assert_eq!(k.params, before);
    }

    #[test]
    fn training_lowers_the_loss_and_leaves_the_backbone() {
        for mode in [AttentionMode::Kep, AttentionMode::Standard] {
            let (bb, _) = trace(mode);
            let sum = bb.checksum();
            let x = Tensor::randn(&[32, 16], 1.0, &mut SplitRng::new(3));
            let path = repartition(&bb).unwrap();
            let mut k = kernel_for(&bb, 2);
            let cfg = small_cfg(15, mode.is_gp());
            let r = distill_train(&path, &mut k, &x, &labels(32), &cfg).unwrap();
            assert_eq!(bb.checksum(), sum);
            assert_eq!(r.weights.lambda_cholesky > 0.0, mode.is_gp());
            let ma = moving_average(&r.epochs.iter().map(|e| e.total).collect::<Vec<_>>(), 5);
            assert!(ma.last().unwrap() < ma.first().unwrap(), "{mode:?}: {ma:?}");
        }
    }

    #[test]
    fn bad_weights_are_rejected() {
        let w = LossWeights {
            lambda_mean: -0.1,
            ..LossWeights::GP_DEFAULT
        };
        assert!(w.validate().is_err());
        assert_eq!(LossWeights::GP_DEFAULT.effective(false).lambda_cholesky, 0.0);
    }
}
