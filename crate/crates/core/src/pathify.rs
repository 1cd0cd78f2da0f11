//! A trained backbone re-read as a chain of Gaussian transitions.
//!
//! Blocks are re-cut so each one ends with attention: the path state after
//! step `t` is the backbone's post-attention feature `Z_t`, and the MLP that
//! followed it moves to the front of the next step. The last MLP is absorbed
//! into the path head.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Noise, Term};
use crate::error::{Error, Result};
use crate::rng::SplitRng;
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::linalg::Matrix;
use crate::tensor::{Graph, Tensor, Var};

/// `N(mean, L Lᵀ)` over a flattened `[N, d]` state, with
/// `L = [A_1 ⊗ v_1 | A_2 ⊗ v_2 | ...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianTransition {
    pub t: usize,
    pub n: usize,
    pub d: usize,
    pub mean: Vec<f64>,
    pub terms: Vec<Term>,
}

impl GaussianTransition {
    pub fn dim(&self) -> usize {
        self.n * self.d
    }

    /// Number of noise coordinates.
    pub fn rank(&self) -> usize {
        self.terms.iter().map(|t| t.a.cols).sum()
    }

    /// Dense `[N·d, rank]` factor.
    pub fn factor_dense(&self) -> Matrix {
        let r = self.rank();
        let mut l = Matrix::zeros(self.dim(), r);
        let mut c0 = 0;
        for term in &self.terms {
            for row in 0..self.n {
                for c in 0..term.a.cols {
                    let a = term.a.get(row, c);
                    for j in 0..self.d {
                        l.data[(row * self.d + j) * r + c0 + c] = a * term.v[j];
                    }
                }
            }
            c0 += term.a.cols;
        }
        l
    }

    pub fn covariance_dense(&self) -> Matrix {
        let l = self.factor_dense();
        l.matmul(&l.t())
    }

    /// `sqrt(diag(L Lᵀ))`, i.e. the row norms of the factor.
    pub fn std_diag(&self) -> Vec<f64> {
        let mut var = vec![0.0; self.dim()];
        for term in &self.terms {
            for row in 0..self.n {
                let rs: f64 = (0..term.a.cols).map(|c| term.a.get(row, c).powi(2)).sum();
                for j in 0..self.d {
                    var[row * self.d + j] += rs * term.v[j] * term.v[j];
                }
            }
        }
        var.into_iter().map(f64::sqrt).collect()
    }

    pub fn factor_norm(&self) -> f64 {
        self.terms
            .iter()
            .map(|t| t.a.data.iter().map(|x| x * x).sum::<f64>() * t.v.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_deterministic(&self) -> bool {
        self.factor_norm() == 0.0
    }

    /// `mean + L ε` with `ε` consumed term by term.
    pub fn sample_with(&self, eps: &[f64]) -> Result<Vec<f64>> {
        if eps.len() != self.rank() {
            return Err(Error::shape("transition noise", &[eps.len()], &[self.rank()]));
        }
        let mut out = self.mean.clone();
        let mut off = 0;
        for term in &self.terms {
            let e = &eps[off..off + term.a.cols];
            for row in 0..self.n {
                let ae: f64 = (0..term.a.cols).map(|c| term.a.get(row, c) * e[c]).sum();
                if ae != 0.0 {
                    for j in 0..self.d {
                        out[row * self.d + j] += ae * term.v[j];
                    }
                }
            }
            off += term.a.cols;
        }
        Ok(out)
    }
}

/// Read-only view of a backbone as a probability path.
#[derive(Clone, Copy, Debug)]
pub struct ProbabilityPath<'a> {
    bb: &'a Backbone,
}

pub fn repartition(bb: &Backbone) -> Result<ProbabilityPath<'_>> {
    if bb.depth() == 0 {
        return Err(Error::contract("empty path: the backbone has no blocks"));
    }
    Ok(ProbabilityPath { bb })
}

/// One simulated chain for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PathTrace {
    pub seed: u64,
    pub noise: bool,
    /// The path comes from a GP-attention backbone.
    pub stochastic: bool,
    /// `T, T-1, ..., 1`.
    pub t_indices: Vec<usize>,
    /// `X_T, X_{T-1}, ..., X_0`, each `[B, N, d]`.
    pub states: Vec<Tensor>,
    /// Per step, per batch element.
    pub transitions: Vec<Vec<GaussianTransition>>,
    /// Per step, the `[B·rank]` standard normals used (empty when off).
    pub eps: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct TraceMeta {
    seed: u64,
    noise: bool,
    stochastic: bool,
    t_indices: Vec<usize>,
    batch: usize,
    n_tokens: usize,
    d_model: usize,
}

impl PathTrace {
    pub fn depth(&self) -> usize {
        self.t_indices.len()
    }

    pub fn batch(&self) -> usize {
        self.states[0].shape()[0]
    }

    /// State `X_t` as `[B, N, d]`.
    pub fn state(&self, t: usize) -> &Tensor {
        &self.states[self.depth() - t]
    }

    /// Stacked means `m_t`, `[B, N, d]`.
    pub fn means(&self, step: usize) -> Tensor {
        self.stack(step, |tr| tr.mean.clone())
    }

    /// Stacked `sqrt(diag σ_t)`, `[B, N, d]`.
    pub fn stds(&self, step: usize) -> Tensor {
        self.stack(step, GaussianTransition::std_diag)
    }

    fn stack(&self, step: usize, f: impl Fn(&GaussianTransition) -> Vec<f64>) -> Tensor {
        let shape = self.states[0].shape().to_vec();
        let data = self.transitions[step].iter().flat_map(f).collect();
        Tensor::new(&shape, data).expect("trace shape")
    }

    /// Metadata as JSON plus states, means and per-coordinate factor scales
    /// in the checkpoint payload. Full factors are not stored.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let sh = self.states[0].shape();
        let meta = TraceMeta {
            seed: self.seed,
            noise: self.noise,
            stochastic: self.stochastic,
            t_indices: self.t_indices.clone(),
            batch: sh[0],
            n_tokens: sh[1],
            d_model: sh[2],
        };
        let mut named = Vec::new();
        for (i, s) in self.states.iter().enumerate() {
            named.push((format!("state.{}", self.depth() - i), s.clone()));
        }
        for (k, &t) in self.t_indices.iter().enumerate() {
            named.push((format!("mean.{t}"), self.means(k)));
            named.push((format!("std.{t}"), self.stds(k)));
            named.push((format!("eps.{t}"), Tensor::new(&[self.eps[k].len()], self.eps[k].clone())?));
        }
        Ok(Checkpoint::from_named("trace", self.seed, "", serde_json::to_value(meta)?, named))
    }
}

/// Flattened summary of a stored trace: what the distillation losses read.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceSummary {
    pub seed: u64,
    pub noise: bool,
    pub stochastic: bool,
    pub t_indices: Vec<usize>,
    pub states: Vec<Tensor>,
    pub means: Vec<Tensor>,
    pub stds: Vec<Tensor>,
}

impl TraceSummary {
    pub fn from_trace(tr: &PathTrace) -> Self {
        TraceSummary {
            seed: tr.seed,
            noise: tr.noise,
            stochastic: tr.stochastic,
            t_indices: tr.t_indices.clone(),
            states: tr.states.clone(),
            means: (0..tr.depth()).map(|k| tr.means(k)).collect(),
            stds: (0..tr.depth()).map(|k| tr.stds(k)).collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header.section != "trace" {
            return Err(Error::contract(format!("expected a trace, got `{}`", ck.header.section)));
        }
        let meta: TraceMeta = serde_json::from_value(ck.header.meta.clone())?;
        let get = |name: String| ck.get(&name).cloned().ok_or_else(|| Error::Parse(format!("trace is missing `{name}`")));
        let t_max = meta.t_indices.len();
        let states = (0..=t_max).rev().map(|t| get(format!("state.{t}"))).collect::<Result<_>>()?;
        let means = meta.t_indices.iter().map(|t| get(format!("mean.{t}"))).collect::<Result<_>>()?;
        let stds = meta.t_indices.iter().map(|t| get(format!("std.{t}"))).collect::<Result<_>>()?;
        Ok(TraceSummary {
            seed: meta.seed,
            noise: meta.noise,
            stochastic: meta.stochastic,
            t_indices: meta.t_indices,
            states,
            means,
            stds,
        })
    }
}

impl<'a> ProbabilityPath<'a> {
    pub fn depth(&self) -> usize {
        self.bb.depth()
    }

    pub fn backbone(&self) -> &'a Backbone {
        self.bb
    }

    pub fn n_tokens(&self) -> usize {
        self.bb.n_tokens()
    }

    pub fn d_model(&self) -> usize {
        self.bb.d_model()
    }

    pub fn is_stochastic(&self) -> bool {
        self.bb.cfg.attention.mode.is_gp()
    }

    /// `X_T = embed(X)`, `[B, N, d]`.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bb.params.bind_frozen(&mut g);
        let v = self.bb.embed_graph(&mut g, &p, x)?;
        Ok(g.to_tensor(v))
    }

    /// `Z_t`: the state itself at `t = T`, else the previous block's MLP residual.
    pub fn prefix_graph(&self, g: &mut Graph, p: &[Var], t: usize, x: Var) -> Result<Var> {
        let k = self.bb.block_index(t)?;
        if k == 0 {
            Ok(x)
        } else {
            self.bb.mlp_residual(g, p, k - 1, x)
        }
    }

    /// Final MLP residual, then the solution head.
    pub fn head_graph(&self, g: &mut Graph, p: &[Var], x0: Var) -> Result<Var> {
        let h = self.bb.mlp_residual(g, p, self.depth() - 1, x0)?;
        self.bb.head_graph(g, p, h)
    }

    pub fn head(&self, x0: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bb.params.bind_frozen(&mut g);
        let x = g.constant(x0.shape(), x0.data().to_vec());
        let l = self.head_graph(&mut g, &p, x)?;
        Ok(g.to_tensor(l))
    }

    /// Transitions for every element of a `[B, N, d]` batch of states `X_t`.
    pub fn transition_batch(&self, t: usize, x_t: &Tensor) -> Result<Vec<GaussianTransition>> {
        let k = self.bb.block_index(t)?;
        let (n, d) = (self.n_tokens(), self.d_model());
        if x_t.shape().len() != 3 || x_t.shape()[1] != n || x_t.shape()[2] != d {
            return Err(Error::shape("transition_eval", x_t.shape(), &[usize::MAX, n, d]));
        }
        let b = x_t.shape()[0];
        let mut g = Graph::new();
        let p = self.bb.params.bind_frozen(&mut g);
        let x = g.constant(x_t.shape(), x_t.data().to_vec());
        let z = self.prefix_graph(&mut g, &p, t, x)?;
        let attn = self.bb.attention_graph(&mut g, &p, k, z, &mut Noise::Off, true)?;
        let m = g.add(attn.mean, z)?;
        let mv = g.value(m);
        let mut terms = attn.terms.unwrap_or_else(|| vec![Vec::new(); b]);
        let per = n * d;
        let mut out = Vec::with_capacity(b);
        for (bi, tb) in terms.iter_mut().enumerate() {
            let mean = mv[bi * per..(bi + 1) * per].to_vec();
            if mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric("transition_eval", format!("non-finite mean at t = {t}")));
            }
            out.push(GaussianTransition {
                t,
                n,
                d,
                mean,
                terms: std::mem::take(tb),
            });
        }
        Ok(out)
    }

    /// Transition at a single `[N, d]` state.
    pub fn transition_eval(&self, t: usize, x_t: &Tensor) -> Result<GaussianTransition> {
        let (n, d) = (self.n_tokens(), self.d_model());
        let x = x_t.clone().reshaped(&[1, n, d]).map_err(|_| Error::shape("transition_eval", x_t.shape(), &[n, d]))?;
        Ok(self.transition_batch(t, &x)?.remove(0))
    }

    /// Runs `t = T..1` from a `[B, N, d]` (or `[N, d]`) start. With noise on,
    /// each step draws `B·rank` normals from `SplitRng::new(seed)` in
    /// batch-major, term-major order, the same order the backbone uses.
    pub fn simulate_path(&self, x_t: &Tensor, noise: bool, seed: u64) -> Result<PathTrace> {
        let (n, d) = (self.n_tokens(), self.d_model());
        let start = if x_t.shape().len() == 2 { x_t.clone().reshaped(&[1, n, d])? } else { x_t.clone() };
        let b = start.shape()[0];
        let mut rng = SplitRng::new(seed);
        let mut states = vec![start];
        let mut transitions = Vec::with_capacity(self.depth());
        let mut all_eps = Vec::with_capacity(self.depth());
        let t_indices: Vec<usize> = (1..=self.depth()).rev().collect();
        for &t in &t_indices {
            let trs = self.transition_batch(t, states.last().unwrap())?;
            let mut next = Vec::with_capacity(b * n * d);
            let mut step_eps = Vec::new();
            for tr in &trs {
                if noise && tr.rank() > 0 {
                    let e = rng.normals(tr.rank());
                    next.extend(tr.sample_with(&e)?);
                    step_eps.extend(e);
                } else {
                    next.extend_from_slice(&tr.mean);
                }
            }
            if let Some(pos) = next.iter().position(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    stage: "simulate-path",
                    step: t,
                    detail: format!("non-finite state entry {pos} at t = {t}"),
                });
            }
            states.push(Tensor::new(&[b, n, d], next)?);
            transitions.push(trs);
            all_eps.push(step_eps);
        }
        Ok(PathTrace {
            seed,
            noise,
            stochastic: self.is_stochastic(),
            t_indices,
            states,
            transitions,
            eps: all_eps,
        })
    }

    /// Head logits on the final state of a trace.
    pub fn trace_logits(&self, tr: &PathTrace) -> Result<Tensor> {
        self.head(tr.states.last().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{AttentionConfig, AttentionMode, BackboneConfig, Fusion, InputSpec};

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

    fn inputs(b: usize, seed: u64) -> Tensor {
        Tensor::randn(&[b, 16], 1.0, &mut SplitRng::new(seed))
    }

    #[test]
    fn zero_depth_is_an_empty_path() {
        let bb = Backbone::new(cfg(AttentionMode::Standard, 0), 1).unwrap();
        assert!(matches!(repartition(&bb), Err(Error::Contract(_))));
    }

    #[test]
    fn noise_off_states_are_backbone_features() {
        for mode in AttentionMode::ALL {
            let bb = Backbone::new(cfg(mode, 3), 2).unwrap();
            let path = repartition(&bb).unwrap();
            let x = inputs(4, 3);
            let direct = bb.forward(&x, Noise::Off).unwrap();
            let tr = path.simulate_path(&path.embed(&x).unwrap(), false, 0).unwrap();
            assert_eq!(tr.states.len(), 4);
            assert_eq!(tr.states[0], direct.x_t);
            for (k, (z, _)) in direct.traces.iter().enumerate() {
                assert_eq!(tr.states[k + 1].data(), z.data(), "{mode:?} step {k}");
            }
            let logits = path.trace_logits(&tr).unwrap();
            assert!(logits.max_abs_diff(&direct.logits) < 1e-10);
        }
    }

    #[test]
    fn noise_on_matches_backbone_sampling() {
        for (mode, fusion) in [(AttentionMode::Sgpa, Fusion::Add), (AttentionMode::Kep, Fusion::Add), (AttentionMode::Kep, Fusion::Cat)] {
            let mut c = cfg(mode, 2);
            c.attention.fusion = fusion;
            let bb = Backbone::new(c, 5).unwrap();
            let path = repartition(&bb).unwrap();
            let x = inputs(3, 6);
            let direct = bb.forward(&x, Noise::On(&mut SplitRng::new(77))).unwrap();
            let tr = path.simulate_path(&path.embed(&x).unwrap(), true, 77).unwrap();
            let logits = path.trace_logits(&tr).unwrap();
            assert!(logits.max_abs_diff(&direct.logits) < 1e-8, "{mode:?}");
        }
    }

    #[test]
    fn standard_mode_has_zero_factors() {
        let bb = Backbone::new(cfg(AttentionMode::Standard, 2), 1).unwrap();
        let path = repartition(&bb).unwrap();
        let xt = path.embed(&inputs(2, 1)).unwrap();
        for t in [2, 1] {
            for tr in path.transition_batch(t, &xt).unwrap() {
                assert_eq!(tr.factor_norm(), 0.0);
                assert!(tr.is_deterministic());
            }
        }
        let on = path.simulate_path(&xt, true, 4).unwrap();
        let off = path.simulate_path(&xt, false, 4).unwrap();
        assert_eq!(on.states, off.states);
    }

    #[test]
    fn kep_with_zero_variational_factor_is_deterministic() {
        let mut bb = Backbone::new(cfg(AttentionMode::Kep, 2), 1).unwrap();
        for (name, t) in bb.params.names().to_vec().iter().zip(bb.params.tensors_mut()) {
            if name.ends_with("sfac") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let path = repartition(&bb).unwrap();
        let xt = path.embed(&inputs(2, 1)).unwrap();
        let on = path.simulate_path(&xt, true, 4).unwrap();
        let off = path.simulate_path(&xt, false, 4).unwrap();
        assert_eq!(on.states, off.states);
        let direct = bb.forward(&inputs(2, 1), Noise::Off).unwrap();
        assert_eq!(on.states[1].data(), direct.traces[0].0.data());
    }

    #[test]
    fn zeroed_output_projection_is_pure_skip() {
        let mut bb = Backbone::new(cfg(AttentionMode::Sgpa, 2), 1).unwrap();
        for (name, t) in bb.params.names().to_vec().iter().zip(bb.params.tensors_mut()) {
            if name.ends_with("attn.o") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let path = repartition(&bb).unwrap();
        let xt = path.embed(&inputs(1, 2)).unwrap();
        let x2 = xt.clone().reshaped(&[5, 8]).unwrap();
        let tr = path.transition_eval(2, &x2).unwrap();
        assert_eq!(tr.mean, xt.data());
        assert_eq!(tr.factor_norm(), 0.0);
    }

    #[test]
    fn transition_indices_and_range() {
        let bb = Backbone::new(cfg(AttentionMode::Kep, 3), 1).unwrap();
        let path = repartition(&bb).unwrap();
        let xt = path.embed(&inputs(1, 2)).unwrap();
        let tr = path.simulate_path(&xt, true, 1).unwrap();
        assert_eq!(tr.t_indices, vec![3, 2, 1]);
        assert_eq!(tr.transitions.len(), 3);
        let x2 = xt.reshaped(&[5, 8]).unwrap();
        assert!(matches!(path.transition_eval(0, &x2), Err(Error::Range { .. })));
        assert!(matches!(path.transition_eval(4, &x2), Err(Error::Range { .. })));
    }

    #[test]
    fn recorded_noise_reproduces_states() {
        let bb = Backbone::new(cfg(AttentionMode::Sgpa, 2), 8).unwrap();
        let path = repartition(&bb).unwrap();
        let tr = path.simulate_path(&path.embed(&inputs(2, 9)).unwrap(), true, 10).unwrap();
        for (k, trs) in tr.transitions.iter().enumerate() {
            let mut off = 0;
            let mut rebuilt = Vec::new();
            for g in trs {
                rebuilt.extend(g.sample_with(&tr.eps[k][off..off + g.rank()]).unwrap());
                off += g.rank();
            }
            assert_eq!(rebuilt, tr.states[k + 1].data());
        }
        let again = path.simulate_path(&tr.states[0], true, 10).unwrap();
        assert_eq!(again, tr);
    }

    #[test]
    fn trace_checkpoint_roundtrip() {
        let bb = Backbone::new(cfg(AttentionMode::Kep, 2), 8).unwrap();
        let path = repartition(&bb).unwrap();
        let tr = path.simulate_path(&path.embed(&inputs(2, 9)).unwrap(), true, 10).unwrap();
        let ck = tr.to_checkpoint().unwrap();
        let back = TraceSummary::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, TraceSummary::from_trace(&tr));
    }

    #[test]
    fn std_diag_is_covariance_diagonal() {
        let bb = Backbone::new(cfg(AttentionMode::Kep, 1), 3).unwrap();
        let path = repartition(&bb).unwrap();
        let xt = path.embed(&inputs(1, 4)).unwrap().reshaped(&[5, 8]).unwrap();
        let tr = path.transition_eval(1, &xt).unwrap();
        let cov = tr.covariance_dense();
        for (i, s) in tr.std_diag().iter().enumerate() {
            assert!((s * s - cov.get(i, i)).abs() < 1e-12);
        }
    }
}
