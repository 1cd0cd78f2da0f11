//! Attention heads. Graph versions drive training and the path; the dense
//! single-input functions at the bottom are the reference forms.

use super::{AttentionMode, Backbone, Fuse, HeadIds, Noise, Term, LN_EPS, SGPA_JITTER};
use crate::error::{Error, Result};
use crate::tensor::linalg::{self, Matrix};
use crate::tensor::{Graph, Var};

pub struct AttnOut {
    /// `concat(mean F_h) · O`, `[B, N, d]`.
    pub mean: Var,
    /// Same with reparameterized noise, when noise is on in a GP mode.
    pub sample: Option<Var>,
    /// Per batch element, terms in `[h][i]` order.
    pub terms: Option<Vec<Vec<Term>>>,
}

struct HeadOut {
    mean: Var,
    sample: Option<Var>,
    /// `[b][i]` factor matrices `A`.
    factors: Option<Vec<Vec<Matrix>>>,
}

/// Noise columns per output coordinate of one head.
fn noise_rank(bb: &Backbone) -> (usize, usize) {
    let a = bb.cfg.attention;
    let n = bb.n_tokens();
    match a.mode {
        AttentionMode::Sgpa => (a.d_head(), 2 * n),
        AttentionMode::Kep => (a.s, a.s),
        _ => (0, 0),
    }
}

impl Backbone {
    /// Attention of block `k` applied to `LN1(x)`.
    pub fn attention_graph(&self, g: &mut Graph, p: &[Var], k: usize, x: Var, noise: &mut Noise<'_>, want_terms: bool) -> Result<AttnOut> {
        let bl = &self.layout.blocks[k];
        let u = g.layer_norm(x, Some(p[bl.ln1.0 .0]), Some(p[bl.ln1.1 .0]), LN_EPS)?;
        self.attention_core(g, p, k, u, noise, want_terms)
    }

    /// Attention of block `k` on an already normalised input `u: [B, N, d]`.
    pub fn attention_core(&self, g: &mut Graph, p: &[Var], k: usize, u: Var, noise: &mut Noise<'_>, want_terms: bool) -> Result<AttnOut> {
        let bl = &self.layout.blocks[k];
        let a = self.cfg.attention;
        let (b, n) = (g.shape(u)[0], g.shape(u)[1]);
        let gp = a.mode.is_gp();
        let (n_i, r) = noise_rank(self);
        let eps = match noise {
            Noise::On(rng) if gp => Some(rng.normals(b * a.n_heads * n_i * r)),
            _ => None,
        };
        let mut means = Vec::with_capacity(a.n_heads);
        let mut samples = Vec::with_capacity(a.n_heads);
        let mut factors = Vec::with_capacity(a.n_heads);
        for (h, ids) in bl.heads.iter().enumerate() {
            let eps_h = eps.as_ref().map(|e| {
                let per_b = a.n_heads * n_i * r;
                let mut out = Vec::with_capacity(b * n_i * r);
                for bi in 0..b {
                    let base = bi * per_b + h * n_i * r;
                    out.extend_from_slice(&e[base..base + n_i * r]);
                }
                out
            });
            let ho = self.head_forward(g, p, ids, u, b, n, eps_h, want_terms && gp)?;
            means.push(ho.mean);
            samples.push(ho.sample.unwrap_or(ho.mean));
            factors.push(ho.factors);
        }
        let o = p[bl.o.0];
        let cat = g.concat(&means, 2)?;
        let mean = g.matmul(cat, o)?;
        let sample = if eps.is_some() {
            let cat = g.concat(&samples, 2)?;
            Some(g.matmul(cat, o)?)
        } else {
            None
        };
        let terms = if want_terms {
            Some(self.assemble_terms(g, p, k, b, factors))
        } else {
            None
        };
        Ok(AttnOut { mean, sample, terms })
    }

    fn assemble_terms(&self, g: &Graph, p: &[Var], k: usize, b: usize, factors: Vec<Option<Vec<Vec<Matrix>>>>) -> Vec<Vec<Term>> {
        let bl = &self.layout.blocks[k];
        let a = self.cfg.attention;
        let (d, dh) = (a.d_model, a.d_head());
        let o = g.value(p[bl.o.0]);
        let mut per_b: Vec<Vec<Term>> = vec![Vec::new(); b];
        for (h, f) in factors.into_iter().enumerate() {
            let Some(f) = f else { continue };
            let vs: Vec<Vec<f64>> = match &bl.heads[h] {
                HeadIds::Sgpa { .. } => (0..dh).map(|i| o[(h * dh + i) * d..(h * dh + i + 1) * d].to_vec()).collect(),
                HeadIds::Kep { fuse, .. } => {
                    let w = match fuse {
                        Fuse::Add { w } => g.value(p[w.0]),
                        Fuse::Cat { w2, .. } => g.value(p[w2.0]),
                    };
                    (0..a.s)
                        .map(|i| {
                            (0..d)
                                .map(|j| (0..dh).map(|kk| w[i * dh + kk] * o[(h * dh + kk) * d + j]).sum())
                                .collect()
                        })
                        .collect()
                }
                _ => continue,
            };
            for (bi, mats) in f.into_iter().enumerate() {
                for (i, m) in mats.into_iter().enumerate() {
                    per_b[bi].push(Term { a: m, v: vs[i].clone() });
                }
            }
        }
        per_b
    }

    #[allow(clippy::too_many_arguments)]
    fn head_forward(&self, g: &mut Graph, p: &[Var], ids: &HeadIds, u: Var, b: usize, n: usize, eps: Option<Vec<f64>>, want_factors: bool) -> Result<HeadOut> {
        let a = self.cfg.attention;
        let dh = a.d_head();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        match ids {
            HeadIds::Standard { wq, wk, wv } => {
                let q = g.matmul(u, p[wq.0])?;
                let kk = g.matmul(u, p[wk.0])?;
                let v = g.matmul(u, p[wv.0])?;
                let s = g.matmul_nt(q, kk)?;
                let s = g.scale(s, inv_sqrt);
                let att = g.softmax(s)?;
                Ok(HeadOut {
                    mean: g.matmul(att, v)?,
                    sample: None,
                    factors: None,
                })
            }
            HeadIds::Kernel { wqk, wv } => {
                let kmat = exp_kernel(g, u, p[wqk.0], inv_sqrt)?;
                let v = g.matmul(u, p[wv.0])?;
                Ok(HeadOut {
                    mean: g.matmul(kmat, v)?,
                    sample: None,
                    factors: None,
                })
            }
            HeadIds::Sgpa { wqk, wv, sfac } => {
                let kmat = exp_kernel(g, u, p[wqk.0], inv_sqrt)?;
                let v = g.matmul(u, p[wv.0])?;
                let mean = g.matmul(kmat, v)?;
                if eps.is_none() && !want_factors {
                    return Ok(HeadOut {
                        mean,
                        sample: None,
                        factors: None,
                    });
                }
                // Σ_i = ε_j·Pᵀ + P S_i Pᵀ with P = K (K + ε_j I)⁻¹.
                let mut eye = vec![0.0; n * n];
                for i in 0..n {
                    eye[i * n + i] = SGPA_JITTER;
                }
                let jit = g.constant(&[n, n], eye);
                let kj = g.add(kmat, jit)?;
                let kinv = g.spd_inverse(kj).map_err(|e| match e {
                    Error::Conditioning(m) => Error::Conditioning(format!("K_kk after jitter: {m}")),
                    other => other,
                })?;
                let pm = g.matmul(kmat, kinv)?;
                let pv = g.value(pm).to_vec();
                let mut schur_f = Vec::with_capacity(b * n * n);
                for bi in 0..b {
                    let pb = &pv[bi * n * n..(bi + 1) * n * n];
                    let mut sym = vec![0.0; n * n];
                    for r in 0..n {
                        for c in 0..n {
                            sym[r * n + c] = 0.5 * SGPA_JITTER * (pb[r * n + c] + pb[c * n + r]);
                        }
                    }
                    schur_f.extend(linalg::cholesky_psd(&sym, n)?);
                }
                let factors = want_factors.then(|| {
                    let sf = g.value(p[sfac.0]);
                    (0..b)
                        .map(|bi| {
                            let pb = &pv[bi * n * n..(bi + 1) * n * n];
                            let cs = &schur_f[bi * n * n..(bi + 1) * n * n];
                            (0..dh)
                                .map(|i| {
                                    let li = &sf[i * n * n..(i + 1) * n * n];
                                    let pl = linalg::matmul(pb, li, n, n, n);
                                    let mut m = Matrix::zeros(n, 2 * n);
                                    for r in 0..n {
                                        m.data[r * 2 * n..r * 2 * n + n].copy_from_slice(&cs[r * n..(r + 1) * n]);
                                        m.data[r * 2 * n + n..(r + 1) * 2 * n].copy_from_slice(&pl[r * n..(r + 1) * n]);
                                    }
                                    m
                                })
                                .collect()
                        })
                        .collect()
                });
                let sample = match eps {
                    None => None,
                    Some(e) => {
                        let e = g.constant(&[b, dh, 2 * n], e);
                        let e1 = g.slice(e, 2, 0, n)?;
                        let e1 = g.transpose(e1)?;
                        let cs = g.constant(&[b, n, n], schur_f);
                        let n1 = g.matmul(cs, e1)?;
                        // (L_i ε_i) for each i: [dh, N, N] ⊙ [B, dh, 1, N] summed over the last axis.
                        let e2 = g.slice(e, 2, n, n)?;
                        let e2 = g.reshape(e2, &[b, dh, 1, n])?;
                        let le = g.mul(p[sfac.0], e2)?;
                        let le = g.sum_axis(le, 3)?;
                        let le = g.transpose(le)?;
                        let n2 = g.matmul(pm, le)?;
                        let s = g.add(mean, n1)?;
                        Some(g.add(s, n2)?)
                    }
                };
                Ok(HeadOut { mean, sample, factors })
            }
            HeadIds::Kep {
                we,
                be,
                wr,
                br,
                lam,
                mu,
                sfac,
                fuse,
            } => {
                let s = a.s;
                let lam_raw = g.value(p[lam.0]);
                if lam_raw.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Parameterization("non-finite KEP singular value".into()));
                }
                let e = g.matmul(u, p[we.0])?;
                let e = g.add(e, p[be.0])?;
                let e = g.gelu(e)?;
                let r = g.matmul(u, p[wr.0])?;
                let r = g.add(r, p[br.0])?;
                let r = g.gelu(r)?;
                let lam_v = g.softplus(p[lam.0])?;
                if g.value(lam_v).iter().any(|&v| v <= 0.0) {
                    return Err(Error::Parameterization("KEP singular value underflowed to zero".into()));
                }
                let inv = g.recip(lam_v)?;
                let ei = g.mul(e, inv)?;
                let ri = g.mul(r, inv)?;
                let fused = |g: &mut Graph, m: Var| -> Result<Var> {
                    match fuse {
                        Fuse::Add { w } => {
                            let er = g.add(ei, ri)?;
                            let f = g.matmul(er, m)?;
                            g.matmul(f, p[w.0])
                        }
                        Fuse::Cat { w1, w2 } => {
                            let fe = g.matmul(ei, m)?;
                            let fr = g.matmul(ri, m)?;
                            let c = g.concat(&[fe, fr], 1)?;
                            let f = g.matmul(p[w1.0], c)?;
                            g.matmul(f, p[w2.0])
                        }
                    }
                };
                let mean = fused(g, p[mu.0])?;
                let sample = match eps {
                    None => None,
                    Some(ev) => {
                        // G[:, i] = L_i ε_i, built as Gᵀ then transposed.
                        let ev = g.constant(&[b, s, 1, s], ev);
                        let le = g.mul(p[sfac.0], ev)?;
                        let gt = g.sum_axis(le, 3)?;
                        let gm = g.transpose(gt)?;
                        let m = g.add(gm, p[mu.0])?;
                        Some(fused(g, m)?)
                    }
                };
                let factors = want_factors.then(|| {
                    let (ev, rv) = (g.value(ei), g.value(ri));
                    let sf = g.value(p[sfac.0]);
                    (0..b)
                        .map(|bi| {
                            let eb = &ev[bi * n * s..(bi + 1) * n * s];
                            let rb = &rv[bi * n * s..(bi + 1) * n * s];
                            let left: Vec<f64> = match fuse {
                                Fuse::Add { .. } => eb.iter().zip(rb).map(|(x, y)| x + y).collect(),
                                Fuse::Cat { w1, .. } => {
                                    let mut stacked = eb.to_vec();
                                    stacked.extend_from_slice(rb);
                                    linalg::matmul(g.value(p[w1.0]), &stacked, n, 2 * n, s)
                                }
                            };
                            (0..s)
                                .map(|i| Matrix::new(n, s, linalg::matmul(&left, &sf[i * s * s..(i + 1) * s * s], n, s, s)))
                                .collect()
                        })
                        .collect()
                });
                Ok(HeadOut { mean, sample, factors })
            }
        }
    }
}

/// `K = exp(Q Qᵀ / √d_h)` with `Q = u · w` (shared query/key projection).
fn exp_kernel(g: &mut Graph, u: Var, w: Var, inv_sqrt: f64) -> Result<Var> {
    let q = g.matmul(u, w)?;
    let s = g.matmul_nt(q, q)?;
    let s = g.scale(s, inv_sqrt);
    g.exp(s)
}

/// Single-input MHSA of block `k` on normalised tokens `u: [N, d]`.
pub fn mhsa_forward(bb: &Backbone, k: usize, u: &Matrix) -> Result<Matrix> {
    let mut g = Graph::new();
    let p = bb.params.bind_frozen(&mut g);
    let uv = g.constant(&[1, u.rows, u.cols], u.data.clone());
    let out = bb.attention_core(&mut g, &p, k, uv, &mut Noise::Off, false)?;
    Ok(Matrix::new(u.rows, bb.d_model(), g.value(out.mean).to_vec()))
}

/// `F = K_qk V` with `[K_qk]_ij = κ(U_i, U_j)` and `V = U · w_v`.
pub fn kernel_attention_forward(u: &Matrix, wv: &Matrix, kappa: impl Fn(&[f64], &[f64]) -> f64) -> Result<Matrix> {
    let n = u.rows;
    let row = |i: usize| &u.data[i * u.cols..(i + 1) * u.cols];
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let v = kappa(row(i), row(j));
            if !v.is_finite() {
                return Err(Error::numeric("kernel_attention", format!("κ(U_{i}, U_{j}) = {v}")));
            }
            k.set(i, j, v);
        }
    }
    Ok(k.matmul(&u.matmul(wv)))
}

/// Dense SGPA posterior: `μ_i = K_qk V[:, i]`,
/// `Σ_i = K_qq + K_qk (K̃⁻¹ S_i K̃⁻¹ − K̃⁻¹) K_kq` with `K̃ = K_kk + jitter·I`.
pub fn sgpa_posterior(k_qq: &Matrix, k_kk: &Matrix, k_qk: &Matrix, v: &Matrix, s: &[Matrix], jitter: f64) -> Result<(Matrix, Vec<Matrix>)> {
    let m = k_kk.rows;
    let mut kj = k_kk.clone();
    for i in 0..m {
        kj.data[i * m + i] += jitter;
    }
    let kinv = Matrix::new(
        m,
        m,
        linalg::spd_inverse(&kj.data, m).map_err(|e| Error::Conditioning(format!("K_kk after jitter: {e}")))?,
    );
    let mu = k_qk.matmul(v);
    let k_kq = k_qk.t();
    let sig = s
        .iter()
        .map(|si| {
            let mut inner = kinv.matmul(si).matmul(&kinv);
            for (x, y) in inner.data.iter_mut().zip(&kinv.data) {
                *x -= y;
            }
            let mut out = k_qk.matmul(&inner).matmul(&k_kq);
            for (x, y) in out.data.iter_mut().zip(&k_qq.data) {
                *x += y;
            }
            out
        })
        .collect();
    Ok((mu, sig))
}

/// One KEP branch: mean `[N, s]` and, per output column `i`, the factor
/// `L_i = X Λ⁻¹ chol(S_uu[i])` so that `Σ_i = L_i L_iᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct KepBranch {
    pub mean: Matrix,
    pub factors: Vec<Matrix>,
}

impl KepBranch {
    pub fn covariance(&self, i: usize) -> Matrix {
        self.factors[i].gram()
    }
}

/// Closed-form KEP posteriors for the e- and r-branches. `sfac[i]` is the
/// Cholesky-like factor of `S_uu[i]`.
pub fn kep_posterior(e: &Matrix, r: &Matrix, lam: &[f64], m_u: &Matrix, sfac: &[Matrix]) -> Result<(KepBranch, KepBranch)> {
    if let Some(l) = lam.iter().find(|&&l| l.is_nan() || l <= 0.0) {
        return Err(Error::Parameterization(format!("Λ entry {l} is not strictly positive")));
    }
    let s = lam.len();
    let scale = |x: &Matrix| {
        let mut y = x.clone();
        for row in 0..y.rows {
            for c in 0..s {
                y.data[row * s + c] /= lam[c];
            }
        }
        y
    };
    let branch = |x: &Matrix| {
        let xl = scale(x);
        KepBranch {
            mean: xl.matmul(m_u),
            factors: sfac.iter().map(|f| xl.matmul(f)).collect(),
        }
    };
    Ok((branch(e), branch(r)))
}

pub enum FuseWeights {
    Add(Matrix),
    Cat(Matrix, Matrix),
}

/// Fuse branch outputs `[N, s]` into `[N, d_h]`.
pub fn kep_fuse(fe: &Matrix, fr: &Matrix, w: &FuseWeights) -> Result<Matrix> {
    if (fe.rows, fe.cols) != (fr.rows, fr.cols) {
        return Err(Error::shape("kep_fuse", &[fe.rows, fe.cols], &[fr.rows, fr.cols]));
    }
    match w {
        FuseWeights::Add(wa) => {
            let mut sum = fe.clone();
            sum.data.iter_mut().zip(&fr.data).for_each(|(a, b)| *a += b);
            Ok(sum.matmul(wa))
        }
        FuseWeights::Cat(w1, w2) => {
            let mut stacked = fe.data.clone();
            stacked.extend_from_slice(&fr.data);
            let c = Matrix::new(2 * fe.rows, fe.cols, stacked);
            Ok(w1.matmul(&c).matmul(w2))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::cfg;
    use super::*;
    use crate::rng::SplitRng;
    use crate::tensor::Tensor;

    fn rand_mat(r: usize, c: usize, rng: &mut SplitRng) -> Matrix {
        Matrix::new(r, c, rng.normals(r * c))
    }

    fn rand_psd(n: usize, rng: &mut SplitRng) -> Matrix {
        let a = rand_mat(n, n, rng);
        let mut g = a.gram();
        for i in 0..n {
            g.data[i * n + i] += 0.5;
        }
        g
    }

    fn set(bb: &mut Backbone, name: &str, data: Vec<f64>) {
        let i = bb.params.names().iter().position(|n| n == name).unwrap();
        bb.params.tensors_mut()[i].data_mut().copy_from_slice(&data);
    }

    #[test]
    fn single_token_attention_is_projected_value() {
        let bb = Backbone::new(cfg(AttentionMode::Standard, 1), 3).unwrap();
        let mut rng = SplitRng::new(1);
        let u = rand_mat(1, 8, &mut rng);
        let out = mhsa_forward(&bb, 0, &u).unwrap();
        let get = |n: &str| bb.params.by_name(n).unwrap();
        let o = get("blocks.0.attn.o");
        let mut vcat = Vec::new();
        for h in 0..2 {
            let wv = get(&format!("blocks.0.attn.h{h}.wv"));
            vcat.extend(linalg::matmul(&u.data, wv.data(), 1, 8, 4));
        }
        let expect = linalg::matmul(&vcat, o.data(), 1, 8, 8);
        for (a, b) in out.data.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_query_weights_give_uniform_attention() {
        let mut bb = Backbone::new(cfg(AttentionMode::Standard, 1), 3).unwrap();
        for h in 0..2 {
            set(&mut bb, &format!("blocks.0.attn.h{h}.wq"), vec![0.0; 32]);
        }
        let mut rng = SplitRng::new(2);
        let u = rand_mat(5, 8, &mut rng);
        let out = mhsa_forward(&bb, 0, &u).unwrap();
        let get = |n: &str| bb.params.by_name(n).unwrap().clone();
        let mut vcat = vec![0.0; 8];
        for h in 0..2 {
            let v = linalg::matmul(&u.data, get(&format!("blocks.0.attn.h{h}.wv")).data(), 5, 8, 4);
            for c in 0..4 {
                vcat[h * 4 + c] = (0..5).map(|r| v[r * 4 + c]).sum::<f64>() / 5.0;
            }
        }
        let row = linalg::matmul(&vcat, get("blocks.0.attn.o").data(), 1, 8, 8);
        for r in 0..5 {
            for c in 0..8 {
                assert!((out.get(r, c) - row[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_token_single_head_matches_hand_expansion() {
        let mut c = cfg(AttentionMode::Standard, 1);
        c.attention.n_heads = 1;
        c.attention.d_model = 2;
        let mut bb = Backbone::new(c, 1).unwrap();
        set(&mut bb, "blocks.0.attn.h0.wq", vec![1.0, 0.0, 0.0, 1.0]);
        set(&mut bb, "blocks.0.attn.h0.wk", vec![0.5, 0.0, 0.0, 2.0]);
        set(&mut bb, "blocks.0.attn.h0.wv", vec![1.0, 1.0, 0.0, 1.0]);
        set(&mut bb, "blocks.0.attn.o", vec![1.0, 0.0, 0.0, 1.0]);
        let u = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let out = mhsa_forward(&bb, 0, &u).unwrap();
        // q = u, k = [[.5,0],[0,2]], v = [[1,1],[0,1]], scores / √2
        let s = [[0.5, 0.0], [0.0, 2.0]];
        let v = [[1.0, 1.0], [0.0, 1.0]];
        for (i, srow) in s.iter().enumerate() {
            let e0 = (srow[0] / 2f64.sqrt()).exp();
            let e1 = (srow[1] / 2f64.sqrt()).exp();
            let (a0, a1) = (e0 / (e0 + e1), e1 / (e0 + e1));
            for j in 0..2 {
                assert!((out.get(i, j) - (a0 * v[0][j] + a1 * v[1][j])).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn kernel_attention_examples() {
        let mut rng = SplitRng::new(3);
        let u = rand_mat(3, 4, &mut rng);
        let wv = rand_mat(4, 2, &mut rng);
        let v = u.matmul(&wv);
        let delta = |a: &[f64], b: &[f64]| if a == b { 1.0 } else { 0.0 };
        let f = kernel_attention_forward(&u, &wv, delta).unwrap();
        assert!(f.max_abs_diff(&v) < 1e-15);
        let f = kernel_attention_forward(&u, &wv, |_, _| 1.0).unwrap();
        for r in 0..3 {
            for c in 0..2 {
                let col: f64 = (0..3).map(|k| v.get(k, c)).sum();
                assert!((f.get(r, c) - col).abs() < 1e-14);
            }
        }
        let rbf = |a: &[f64], b: &[f64]| (-a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 2.0).exp();
        let f = kernel_attention_forward(&u, &wv, rbf).unwrap();
        for i in 0..3 {
            for c in 0..2 {
                let mut acc = 0.0;
                for j in 0..3 {
                    let mut d2 = 0.0;
                    for k in 0..4 {
                        d2 += (u.get(i, k) - u.get(j, k)).powi(2);
                    }
                    acc += (-d2 / 2.0).exp() * v.get(j, c);
                }
                assert!((f.get(i, c) - acc).abs() < 1e-13);
            }
        }
        assert!(kernel_attention_forward(&u, &wv, |_, _| f64::INFINITY).is_err());
    }

    #[test]
    fn sgpa_identity_cases() {
        let i3 = Matrix::identity(3);
        let mut rng = SplitRng::new(4);
        let v = rand_mat(3, 2, &mut rng);
        let (mu, sig) = sgpa_posterior(&i3, &i3, &i3, &v, &[i3.clone(), Matrix::zeros(3, 3)], 0.0).unwrap();
        assert!(mu.max_abs_diff(&v) < 1e-15);
        assert!(sig[0].max_abs_diff(&i3) < 1e-15);
        assert!(sig[1].max_abs_diff(&Matrix::zeros(3, 3)) < 1e-15);
    }

    #[test]
    fn sgpa_matches_dense_oracle() {
        use nalgebra::DMatrix;
        let mut rng = SplitRng::new(5);
        let (kqq, kkk) = (rand_psd(3, &mut rng), rand_psd(3, &mut rng));
        let kqk = rand_mat(3, 3, &mut rng);
        let v = rand_mat(3, 2, &mut rng);
        let s = rand_psd(3, &mut rng);
        let (_, sig) = sgpa_posterior(&kqq, &kkk, &kqk, &v, &[s.clone()], SGPA_JITTER).unwrap();
        let nm = |m: &Matrix| DMatrix::from_row_slice(m.rows, m.cols, &m.data);
        let kj = nm(&kkk) + DMatrix::identity(3, 3) * SGPA_JITTER;
        let ki = kj.try_inverse().unwrap();
        let want = nm(&kqq) + nm(&kqk) * (&ki * nm(&s) * &ki - &ki) * nm(&kqk).transpose();
        for r in 0..3 {
            for c in 0..3 {
                assert!((sig[0].get(r, c) - want[(r, c)]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sgpa_conditioning_error() {
        let z = Matrix::zeros(2, 2);
        let err = sgpa_posterior(&z, &z, &z, &z, &[], 0.0).unwrap_err();
        assert!(matches!(err, Error::Conditioning(_)));
    }

    #[test]
    fn kep_identity_and_oracle() {
        let mut rng = SplitRng::new(6);
        let i3 = Matrix::identity(3);
        let m_u = rand_mat(3, 3, &mut rng);
        let f = rand_mat(3, 3, &mut rng);
        let (e, _) = kep_posterior(&i3, &i3, &[1.0; 3], &m_u, &[f.clone(), Matrix::zeros(3, 3)]).unwrap();
        assert!(e.mean.max_abs_diff(&m_u) < 1e-15);
        assert!(e.covariance(0).max_abs_diff(&f.gram()) < 1e-14);
        assert!(e.covariance(1).max_abs_diff(&Matrix::zeros(3, 3)) < 1e-15);

        // s = 2, N = 3 against E Λ⁻¹ S Λ⁻¹ Eᵀ
        let ev = rand_mat(3, 2, &mut rng);
        let lam = [0.7, 1.9];
        let sf = rand_mat(2, 2, &mut rng);
        let (eb, _) = kep_posterior(&ev, &ev, &lam, &rand_mat(2, 2, &mut rng), &[sf.clone()]).unwrap();
        let li = Matrix::new(2, 2, vec![1.0 / lam[0], 0.0, 0.0, 1.0 / lam[1]]);
        let want = ev.matmul(&li).matmul(&sf.gram()).matmul(&li).matmul(&ev.t());
        assert!(eb.covariance(0).max_abs_diff(&want) < 1e-12);
        assert!(matches!(
            kep_posterior(&ev, &ev, &[1.0, 0.0], &m_u, &[]),
            Err(Error::Parameterization(_))
        ));
    }

    #[test]
    fn kep_fuse_examples() {
        let mut rng = SplitRng::new(7);
        let fe = rand_mat(3, 2, &mut rng);
        let w = rand_mat(2, 4, &mut rng);
        let out = kep_fuse(&fe, &Matrix::zeros(3, 2), &FuseWeights::Add(w.clone())).unwrap();
        assert!(out.max_abs_diff(&fe.matmul(&w)) < 1e-15);
        let out = kep_fuse(&fe, &fe, &FuseWeights::Add(w.clone())).unwrap();
        let mut twice = fe.matmul(&w);
        twice.data.iter_mut().for_each(|v| *v *= 2.0);
        assert!(out.max_abs_diff(&twice) < 1e-14);
        let fr = rand_mat(3, 2, &mut rng);
        let w1 = rand_mat(3, 6, &mut rng);
        let out = kep_fuse(&fe, &fr, &FuseWeights::Cat(w1.clone(), w.clone())).unwrap();
        // explicit block product: W1[:, :3] Fe + W1[:, 3:] Fr
        let mut want = Matrix::zeros(3, 2);
        for r in 0..3 {
            for c in 0..2 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += w1.get(r, k) * fe.get(k, c) + w1.get(r, 3 + k) * fr.get(k, c);
                }
                want.set(r, c, acc);
            }
        }
        assert!(out.max_abs_diff(&want.matmul(&w)) < 1e-13);
    }

    #[test]
    fn graph_terms_reproduce_sampled_noise() {
        for (mode, fusion) in [
            (AttentionMode::Sgpa, super::super::Fusion::Add),
            (AttentionMode::Kep, super::super::Fusion::Add),
            (AttentionMode::Kep, super::super::Fusion::Cat),
        ] {
            let mut c = cfg(mode, 1);
            c.attention.fusion = fusion;
            let bb = Backbone::new(c, 11).unwrap();
            let mut rng = SplitRng::new(12);
            let x = Tensor::randn(&[2, 5, 8], 1.0, &mut rng);
            let mut g = Graph::new();
            let p = bb.params.bind_frozen(&mut g);
            let xv = g.constant(&[2, 5, 8], x.data().to_vec());
            let mut nr = SplitRng::new(99);
            let out = bb.attention_core(&mut g, &p, 0, xv, &mut Noise::On(&mut nr), true).unwrap();
            let terms = out.terms.unwrap();
            let mean = g.value(out.mean);
            let sample = g.value(out.sample.unwrap());
            let mut nr = SplitRng::new(99);
            for (bi, tb) in terms.iter().enumerate() {
                let mut y = mean[bi * 40..(bi + 1) * 40].to_vec();
                for t in tb {
                    let eps = nr.normals(t.a.cols);
                    let ae = linalg::matmul(&t.a.data, &eps, t.a.rows, t.a.cols, 1);
                    for r in 0..5 {
                        for j in 0..8 {
                            y[r * 8 + j] += ae[r] * t.v[j];
                        }
                    }
                }
                for (a, b) in y.iter().zip(&sample[bi * 40..(bi + 1) * 40]) {
                    assert!((a - b).abs() < 1e-9, "{mode:?} {fusion:?}: {a} vs {b}");
                }
            }
        }
    }
}
