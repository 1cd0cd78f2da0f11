//! Central finite-difference checks for every differentiable graph op.

use super::{Graph, Tensor, Var};
use crate::error::Result;
use crate::rng::SplitRng;

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var> + Send + Sync>;

/// How a random input point is drawn.
#[derive(Clone, Copy, Debug)]
pub enum Domain {
    Real,
    /// Bounded away from zero: `|x| ∈ [0.5, 1.5]`, positive.
    Positive,
    /// `X Xᵀ + I` over the trailing two axes (symmetric positive-definite).
    Spd,
}

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<(Vec<usize>, Domain)>,
    pub build: Build,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: &'static str,
    pub points: usize,
    pub max_rel_err: f64,
}

fn draw(shape: &[usize], dom: Domain, rng: &mut SplitRng) -> Tensor {
    let n: usize = shape.iter().product();
    match dom {
        Domain::Real => Tensor::new(shape, rng.normals(n)).unwrap(),
        Domain::Positive => Tensor::new(shape, (0..n).map(|_| rng.uniform_range(0.5, 1.5)).collect()).unwrap(),
        Domain::Spd => {
            let k = shape[shape.len() - 1];
            let nb = n / (k * k);
            let mut out = Vec::with_capacity(n);
            for _ in 0..nb {
                let x = rng.normals(k * k);
                for i in 0..k {
                    for j in 0..k {
                        let mut s: f64 = (0..k).map(|p| x[i * k + p] * x[j * k + p]).sum();
                        if i == j {
                            s += 1.0;
                        }
                        out.push(s);
                    }
                }
            }
            Tensor::new(shape, out).unwrap()
        }
    }
}

/// Scalarise with fixed random weights so every output coordinate matters.
fn scalar_loss(g: &mut Graph, out: Var, w: &[f64]) -> Result<Var> {
    if g.value(out).len() == 1 {
        return Ok(out);
    }
    let shape = g.shape(out).to_vec();
    let wv = g.constant(&shape, w[..g.value(out).len()].to_vec());
    let m = g.mul(out, wv)?;
    Ok(g.sum(m))
}

fn eval_loss(case: &OpCase, xs: &[Tensor], w: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.shape(), x.data().to_vec())).collect();
    let out = (case.build)(&mut g, &vars)?;
    let l = scalar_loss(&mut g, out, w)?;
    Ok(g.scalar(l))
}

/// Max over `points` random inputs of `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-8)`.
/// Symmetric-matrix inputs are perturbed symmetrically, matching the
/// symmetrised adjoint.
pub fn check_case(case: &OpCase, points: usize, h: f64, rng: &mut SplitRng) -> Result<GradReport> {
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let xs: Vec<Tensor> = case.inputs.iter().map(|(s, d)| draw(s, *d, rng)).collect();
        let w = rng.normals(4096);
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.shape(), x.data().to_vec())).collect();
        let out = (case.build)(&mut g, &vars)?;
        let l = scalar_loss(&mut g, out, &w)?;
        g.backward(l)?;
        let mut an = Vec::new();
        let mut nu = Vec::new();
        for (k, x) in xs.iter().enumerate() {
            let ga = g.grad(vars[k]).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; x.len()]);
            let sym = matches!(case.inputs[k].1, Domain::Spd);
            let kdim = *x.shape().last().unwrap_or(&1);
            for j in 0..x.len() {
                let mut plus = xs.clone();
                let mut minus = xs.clone();
                let mirror = if sym {
                    let (blk, rem) = (j / (kdim * kdim), j % (kdim * kdim));
                    let (r, c) = (rem / kdim, rem % kdim);
                    Some(blk * kdim * kdim + c * kdim + r)
                } else {
                    None
                };
                plus[k].data_mut()[j] += h;
                minus[k].data_mut()[j] -= h;
                if let Some(m) = mirror.filter(|&m| m != j) {
                    plus[k].data_mut()[m] += h;
                    minus[k].data_mut()[m] -= h;
                }
                let fd = (eval_loss(case, &plus, &w)? - eval_loss(case, &minus, &w)?) / (2.0 * h);
                // With a mirrored perturbation the directional derivative is
                // the sum of both entries' adjoints.
                let a = match mirror {
                    Some(m) if m != j => ga[j] + ga[m],
                    _ => ga[j],
                };
                an.push(a);
                nu.push(fd);
            }
        }
        let diff = an.iter().zip(&nu).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na = an.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = nu.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nn).max(1e-8));
    }
    Ok(GradReport {
        name: case.name,
        points,
        max_rel_err: worst,
    })
}

macro_rules! case {
    ($name:expr, [$(($shape:expr, $dom:expr)),*], $f:expr) => {
        OpCase {
            name: $name,
            inputs: vec![$(($shape.to_vec(), $dom)),*],
            build: Box::new($f),
        }
    };
}

/// The catalogue of differentiable ops, each wrapped so its inputs are leaves.
pub fn op_suite() -> Vec<OpCase> {
    use Domain::*;
    vec![
        case!("add", [([2, 3], Real), ([2, 3], Real)], |g, v| g.add(v[0], v[1])),
        case!("add_broadcast", [([2, 3, 4], Real), ([4], Real)], |g, v| g.add(v[0], v[1])),
        case!("sub_broadcast", [([3, 1], Real), ([1, 4], Real)], |g, v| g.sub(v[0], v[1])),
        case!("mul_broadcast", [([2, 3, 4], Real), ([3, 4], Real)], |g, v| g.mul(v[0], v[1])),
        case!("mul_mid_broadcast", [([2, 3, 4], Real), ([2, 1, 4], Real)], |g, v| g.mul(v[0], v[1])),
        case!("slice_last_axis", [([2, 1, 12], Real)], |g, v| {
            let a = g.slice(v[0], 2, 4, 4)?;
            let b = g.slice(v[0], 2, 0, 4)?;
            g.mul(a, b)
        }),
        case!("div", [([3, 4], Real), ([3, 4], Positive)], |g, v| g.div(v[0], v[1])),
        case!("scale", [([5], Real)], |g, v| Ok(g.scale(v[0], -1.7))),
        case!("shift", [([5], Real)], |g, v| Ok(g.shift(v[0], 0.3))),
        case!("exp", [([6], Real)], |g, v| g.exp(v[0])),
        case!("log", [([6], Positive)], |g, v| g.log(v[0])),
        case!("sqrt", [([6], Positive)], |g, v| g.sqrt(v[0])),
        case!("softplus", [([6], Real)], |g, v| g.softplus(v[0])),
        case!("gelu", [([6], Real)], |g, v| g.gelu(v[0])),
        case!("silu", [([6], Real)], |g, v| g.silu(v[0])),
        case!("square", [([6], Real)], |g, v| g.square(v[0])),
        case!("recip", [([6], Positive)], |g, v| g.recip(v[0])),
        case!("matmul", [([3, 4], Real), ([4, 2], Real)], |g, v| g.matmul(v[0], v[1])),
        case!("matmul_nt", [([3, 4], Real), ([5, 4], Real)], |g, v| g.matmul_nt(v[0], v[1])),
        case!("matmul_tn", [([4, 3], Real), ([4, 2], Real)], |g, v| g.matmul_tn(v[0], v[1])),
        case!("matmul_batched", [([2, 3, 4], Real), ([2, 4, 2], Real)], |g, v| g.matmul(v[0], v[1])),
        case!("matmul_shared_rhs", [([2, 3, 4], Real), ([4, 2], Real)], |g, v| g.matmul(v[0], v[1])),
        case!("matmul_shared_lhs", [([3, 4], Real), ([2, 4, 2], Real)], |g, v| g.matmul(v[0], v[1])),
        case!("softmax", [([2, 3, 4], Real)], |g, v| g.softmax(v[0])),
        case!("layer_norm", [([3, 5], Real), ([5], Real), ([5], Real)], |g, v| g.layer_norm(
            v[0],
            Some(v[1]),
            Some(v[2]),
            1e-5
        )),
        case!("layer_norm_plain", [([2, 2, 4], Real)], |g, v| g.layer_norm(v[0], None, None, 1e-5)),
        case!("reshape", [([2, 6], Real)], |g, v| {
            let r = g.reshape(v[0], &[3, 4])?;
            g.square(r)
        }),
        case!("transpose", [([2, 3, 4], Real)], |g, v| {
            let t = g.transpose(v[0])?;
            g.square(t)
        }),
        case!("concat", [([2, 3, 2], Real), ([2, 1, 2], Real)], |g, v| g.concat(&[v[0], v[1]], 1)),
        case!("slice", [([2, 5, 3], Real)], |g, v| g.slice(v[0], 1, 1, 3)),
        case!("sum", [([3, 4], Real)], |g, v| {
            let s = g.square(v[0])?;
            Ok(g.sum(s))
        }),
        case!("mean", [([3, 4], Real)], |g, v| {
            let s = g.square(v[0])?;
            Ok(g.mean(s))
        }),
        case!("sum_axis", [([2, 3, 4], Real)], |g, v| g.sum_axis(v[0], 1)),
        case!("mean_axis", [([2, 3, 4], Real)], |g, v| g.mean_axis(v[0], 2)),
        case!("gather", [([4, 3], Real)], |g, v| g.gather(v[0], &[2, 0, 2, 3])),
        case!("cross_entropy", [([4, 3], Real)], |g, v| g.cross_entropy(v[0], &[0, 2, 1, 2])),
        case!("cholesky", [([2, 3, 3], Spd)], |g, v| g.cholesky(v[0])),
        case!("spd_inverse", [([3, 3], Spd)], |g, v| g.spd_inverse(v[0])),
        case!("attention_composite", [([2, 4, 6], Real), ([6, 3], Real), ([6, 3], Real)], |g, v| {
            let q = g.matmul(v[0], v[1])?;
            let k = g.matmul(v[0], v[2])?;
            let s = g.matmul_nt(q, k)?;
            let a = g.softmax(s)?;
            let h = g.matmul(a, k)?;
            let h = g.gelu(h)?;
            g.layer_norm(h, None, None, 1e-5)
        }),
    ]
}

pub fn run_suite(seed: u64, points: usize, h: f64) -> Result<Vec<GradReport>> {
    op_suite()
        .iter()
        .enumerate()
        .map(|(i, c)| check_case(c, points, h, &mut SplitRng::with_stream(seed, i as u64)))
        .collect()
}
