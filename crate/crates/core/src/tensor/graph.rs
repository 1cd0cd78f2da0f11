//! Reverse-mode tape over row-major f64 buffers.
//!
//! Nodes are appended in evaluation order, so walking the node list backwards
//! is a valid topological order for the adjoint sweep.

use super::linalg;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Exp,
    Log,
    Sqrt,
    Softplus,
    Gelu,
    Silu,
    Square,
    Recip,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Unary(Unary, Var),
    Matmul { a: Var, b: Var, ta: bool, tb: bool },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Reshape(Var),
    Transpose(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    SumAll(Var),
    SumAxis { a: Var, axis: usize },
    Gather { table: Var, idx: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Cholesky(Var),
    SpdInverse(Var),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out`, the flat index into an input of `shape`
/// broadcast against it. `None` when the shapes are identical.
fn broadcast_map(shape: &[usize], out: &[usize]) -> Option<Vec<usize>> {
    if shape == out {
        return None;
    }
    let r = out.len();
    let off = r - shape.len();
    let mut strides = vec![0usize; r];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        strides[i + off] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    let n = numel(out);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; r];
    let mut cur = 0usize;
    for _ in 0..n {
        map.push(cur);
        for d in (0..r).rev() {
            idx[d] += 1;
            cur += strides[d];
            if idx[d] < out[d] {
                break;
            }
            cur -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    Some(map)
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let th = u.tanh();
    let y = 0.5 * x * (1.0 + th);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let d = *shape.last().unwrap_or(&1);
    (numel(shape) / d.max(1), d)
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::from_parts(self.shape(v).to_vec(), self.value(v).to_vec())
    }

    /// Gradient accumulated on a leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Leaf carrying the tensor's `requires_grad` flag.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Var {
        assert_eq!(numel(shape), data.len(), "constant shape/data mismatch");
        self.push(shape.to_vec(), data, Op::Leaf, false)
    }

    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>) -> Var {
        assert_eq!(numel(shape), data.len(), "leaf shape/data mismatch");
        self.push(shape.to_vec(), data, Op::Leaf, true)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(&sa, &sb).ok_or_else(|| Error::shape(name, &sa, &sb))?;
        let ma = broadcast_map(&sa, &out);
        let mb = broadcast_map(&sb, &out);
        let (va, vb) = (self.value(a), self.value(b));
        let n = numel(&out);
        let value = (0..n)
            .map(|i| {
                let x = match &ma {
                    Some(m) => va[m[i]],
                    None => va[i],
                };
                let y = match &mb {
                    Some(m) => vb[m[i]],
                    None => vb[i],
                };
                f(x, y)
            })
            .collect();
        Ok((out, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(s, v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(s, v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(s, v, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "div", |x, y| x / y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(s, v, Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).iter().map(|x| x * c).collect();
        let (s, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(s, v, Op::Scale(a, c), rg)
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).iter().map(|x| x + c).collect();
        let (s, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(s, v, Op::Shift(a), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let name = match kind {
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Sqrt => "sqrt",
            Unary::Softplus => "softplus",
            Unary::Gelu => "gelu",
            Unary::Silu => "silu",
            Unary::Square => "square",
            Unary::Recip => "recip",
        };
        let v: Vec<f64> = self
            .value(a)
            .iter()
            .map(|&x| match kind {
                Unary::Exp => x.exp(),
                Unary::Log => x.ln(),
                Unary::Sqrt => x.sqrt(),
                Unary::Softplus => softplus(x),
                Unary::Gelu => gelu(x).0,
                Unary::Silu => x * sigmoid(x),
                Unary::Square => x * x,
                Unary::Recip => 1.0 / x,
            })
            .collect();
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::numeric(
                name,
                format!("non-finite output at index {i} (input {})", self.value(a)[i]),
            ));
        }
        let (s, rg) = (self.shape(a).to_vec(), self.rg(a));
        Ok(self.push(s, v, Op::Unary(kind, a), rg))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, a)
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Softplus, a)
    }
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Gelu, a)
    }
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Silu, a)
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Square, a)
    }
    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Recip, a)
    }

    fn matmul_dims(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<(Vec<usize>, usize, usize, usize, usize, bool, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k1) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k1 != k2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = match (ba.is_empty(), bb.is_empty()) {
            (_, true) => ba.to_vec(),
            (true, false) => bb.to_vec(),
            (false, false) if ba == bb => ba.to_vec(),
            _ => return Err(Error::shape("matmul", sa, sb)),
        };
        Ok((batch, m, k1, n, 0, !ba.is_empty(), !bb.is_empty()))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (batch, m, k, n, _, a_batched, b_batched) = self.matmul_dims(a, b, ta, tb)?;
        let nb = numel(&batch);
        let mut out = vec![0.0; nb * m * n];
        {
            let (va, vb) = (self.value(a), self.value(b));
            for bi in 0..nb {
                let sa = if a_batched { &va[bi * m * k..(bi + 1) * m * k] } else { va };
                let sb = if b_batched { &vb[bi * k * n..(bi + 1) * k * n] } else { vb };
                linalg::gemm(m, n, k, sa, ta, sb, tb, &mut out[bi * m * n..(bi + 1) * m * n]);
            }
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Matmul { a, b, ta, tb }, rg))
    }

    /// Matrix product over the last two axes. Leading batch axes must agree,
    /// or one operand may be a plain 2-D matrix shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, false)
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, true)
    }

    /// `aᵀ · b` over the last two axes.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true, false)
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, d) = split_last(self.shape(a));
        let x = self.value(a);
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::numeric("softmax", "NaN input"));
        }
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            let xs = &x[r * d..(r + 1) * d];
            let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ys = &mut y[r * d..(r + 1) * d];
            let mut z = 0.0;
            for (yi, &xi) in ys.iter_mut().zip(xs) {
                *yi = (xi - mx).exp();
                z += *yi;
            }
            for yi in ys.iter_mut() {
                *yi /= z;
            }
        }
        let (s, rg) = (self.shape(a).to_vec(), self.rg(a));
        Ok(self.push(s, y, Op::Softmax(a), rg))
    }

    /// Layer normalisation over the last axis; `eps` sits inside the square
    /// root. `gamma`/`beta` must have the size of the last axis when given.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, d) = split_last(&shape);
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [d] {
                return Err(Error::shape("layer_norm", &shape, self.shape(p)));
            }
        }
        let xv = self.value(x);
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let xs = &xv[r * d..(r + 1) * d];
            let mean = xs.iter().sum::<f64>() / d as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for (h, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(xs) {
                *h = (v - mean) * rs;
            }
        }
        let g = gamma.map(|g| self.value(g).to_vec());
        let b = beta.map(|b| self.value(b).to_vec());
        let y = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let j = i % d;
                h * g.as_ref().map_or(1.0, |g| g[j]) + b.as_ref().map_or(0.0, |b| b[j])
            })
            .collect();
        let rg = self.rg(x) || gamma.is_some_and(|g| self.rg(g)) || beta.is_some_and(|b| self.rg(b));
        Ok(self.push(shape, y, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let (v, rg) = (self.value(a).to_vec(), self.rg(a));
        Ok(self.push(shape.to_vec(), v, Op::Reshape(a), rg))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("transpose", &shape, &[]));
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let nb = numel(&shape) / (r * c).max(1);
        let x = self.value(a);
        let mut y = Vec::with_capacity(x.len());
        for b in 0..nb {
            y.extend(linalg::transpose(&x[b * r * c..(b + 1) * r * c], r, c));
        }
        let mut out = shape.clone();
        let l = out.len();
        out.swap(l - 2, l - 1);
        let rg = self.rg(a);
        Ok(self.push(out, y, Op::Transpose(a), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = outer_inner(&first, axis);
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut y = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                y.extend_from_slice(&self.value(p)[o * len..(o + 1) * len]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out_shape, y, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, len]));
        }
        let (outer, n, inner) = outer_inner(&shape, axis);
        let x = self.value(a);
        let mut y = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            y.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out = shape;
        out[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(out, y, Op::Slice { a, axis, start }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![], vec![s], Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", &shape, &[axis]));
        }
        let (outer, n, inner) = outer_inner(&shape, axis);
        let x = self.value(a);
        let mut y = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &x[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, s) in y[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out = shape;
        out.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(out, y, Op::SumAxis { a, axis }, rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = self.shape(a).get(axis).copied().unwrap_or(1).max(1) as f64;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n))
    }

    /// Rows of a `[rows, d]` table selected by `idx`, giving `[idx.len(), d]`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("gather", &shape, &[]));
        }
        let (rows, d) = (shape[0], shape[1]);
        let t = self.value(table);
        let mut y = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= rows {
                return Err(Error::Range {
                    what: "gather index",
                    value: i as i64,
                    lo: 0,
                    hi: rows as i64 - 1,
                });
            }
            y.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(vec![idx.len(), d], y, Op::Gather { table, idx: idx.to_vec() }, rg))
    }

    /// Mean cross-entropy of `[batch, classes]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
        }
        let (b, c) = (shape[0], shape[1]);
        let z = self.value(logits);
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for r in 0..b {
            let zs = &z[r * c..(r + 1) * c];
            let mx = zs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + zs.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for j in 0..c {
                probs[r * c + j] = (zs[j] - lse).exp();
            }
            if labels[r] >= c {
                return Err(Error::Range {
                    what: "label",
                    value: labels[r] as i64,
                    lo: 0,
                    hi: c as i64 - 1,
                });
            }
            loss += lse - zs[labels[r]];
        }
        loss /= b as f64;
        if !loss.is_finite() {
            return Err(Error::numeric("cross_entropy", "non-finite loss"));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Lower Cholesky-like factor of each trailing `n x n` block (reads the
    /// lower triangle; semi-definite blocks get zero columns).
    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().unwrap_or(&0);
        if shape.len() < 2 || shape[shape.len() - 2] != n {
            return Err(Error::shape("cholesky", &shape, &[]));
        }
        let nb = numel(&shape) / (n * n).max(1);
        let x = self.value(a);
        let mut y = Vec::with_capacity(x.len());
        for b in 0..nb {
            y.extend(linalg::cholesky_psd(&x[b * n * n..(b + 1) * n * n], n)?);
        }
        let rg = self.rg(a);
        Ok(self.push(shape, y, Op::Cholesky(a), rg))
    }

    /// Inverse of each trailing symmetric positive-definite block.
    pub fn spd_inverse(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().unwrap_or(&0);
        if shape.len() < 2 || shape[shape.len() - 2] != n {
            return Err(Error::shape("spd_inverse", &shape, &[]));
        }
        let nb = numel(&shape) / (n * n).max(1);
        let x = self.value(a);
        let mut y = Vec::with_capacity(x.len());
        for b in 0..nb {
            y.extend(linalg::spd_inverse(&x[b * n * n..(b + 1) * n * n], n)?);
        }
        let rg = self.rg(a);
        Ok(self.push(shape, y, Op::SpdInverse(a), rg))
    }

    /// Populate the gradient of every reachable `requires_grad` leaf.
    /// Repeated calls accumulate into leaf gradients until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn acc(&self, adj: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut adj[v.0] {
            Some(a) => a.iter_mut().zip(&contrib).for_each(|(x, y)| *x += y),
            slot @ None => *slot = Some(contrib),
        }
    }

    /// Reduce an output-shaped adjoint onto a broadcast input.
    fn unbroadcast(&self, v: Var, out_shape: &[usize], g: &[f64], scale: impl Fn(usize) -> f64) -> Vec<f64> {
        let shape = self.shape(v);
        match broadcast_map(shape, out_shape) {
            None => g.iter().enumerate().map(|(i, x)| x * scale(i)).collect(),
            Some(map) => {
                let mut r = vec![0.0; numel(shape)];
                for (i, &m) in map.iter().enumerate() {
                    r[m] += g[i] * scale(i);
                }
                r
            }
        }
    }

    fn gathered(&self, v: Var, out_shape: &[usize]) -> Vec<f64> {
        match broadcast_map(self.shape(v), out_shape) {
            None => self.value(v).to_vec(),
            Some(map) => map.iter().map(|&m| self.value(v)[m]).collect(),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out_shape = &node.shape;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let c = self.unbroadcast(a, out_shape, g, |_| 1.0);
                    self.acc(adj, a, c);
                }
                if self.rg(b) {
                    let c = self.unbroadcast(b, out_shape, g, |_| 1.0);
                    self.acc(adj, b, c);
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let c = self.unbroadcast(a, out_shape, g, |_| 1.0);
                    self.acc(adj, a, c);
                }
                if self.rg(b) {
                    let c = self.unbroadcast(b, out_shape, g, |_| -1.0);
                    self.acc(adj, b, c);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let vb = self.gathered(b, out_shape);
                    let c = self.unbroadcast(a, out_shape, g, |k| vb[k]);
                    self.acc(adj, a, c);
                }
                if self.rg(b) {
                    let va = self.gathered(a, out_shape);
                    let c = self.unbroadcast(b, out_shape, g, |k| va[k]);
                    self.acc(adj, b, c);
                }
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let vb = self.gathered(b, out_shape);
                if self.rg(a) {
                    let c = self.unbroadcast(a, out_shape, g, |k| 1.0 / vb[k]);
                    self.acc(adj, a, c);
                }
                if self.rg(b) {
                    let y = &node.value;
                    let c = self.unbroadcast(b, out_shape, g, |k| -y[k] / vb[k]);
                    self.acc(adj, b, c);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(adj, *a, g.iter().map(|x| x * c).collect());
            }
            Op::Shift(a) => self.acc(adj, *a, g.to_vec()),
            Op::Unary(kind, a) => {
                let x = self.value(*a);
                let y = &node.value;
                let d: Vec<f64> = (0..g.len())
                    .map(|k| {
                        g[k] * match kind {
                            Unary::Exp => y[k],
                            Unary::Log => 1.0 / x[k],
                            Unary::Sqrt => 0.5 / y[k],
                            Unary::Softplus => sigmoid(x[k]),
                            Unary::Gelu => gelu(x[k]).1,
                            Unary::Silu => {
                                let s = sigmoid(x[k]);
                                s + x[k] * s * (1.0 - s)
                            }
                            Unary::Square => 2.0 * x[k],
                            Unary::Recip => -y[k] * y[k],
                        }
                    })
                    .collect();
                self.acc(adj, *a, d);
            }
            Op::Matmul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let (batch, m, k, n, _, a_b, b_b) = self.matmul_dims(a, b, ta, tb).expect("validated in forward");
                let nb = numel(&batch);
                let (va, vb) = (self.value(a), self.value(b));
                if self.rg(a) {
                    let mut da = vec![0.0; va.len()];
                    for bi in 0..nb {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let sb = if b_b { &vb[bi * k * n..(bi + 1) * k * n] } else { vb };
                        let dst = if a_b { &mut da[bi * m * k..(bi + 1) * m * k] } else { &mut da[..] };
                        if ta {
                            linalg::gemm(k, m, n, sb, tb, gs, true, dst);
                        } else {
                            linalg::gemm(m, k, n, gs, false, sb, !tb, dst);
                        }
                    }
                    self.acc(adj, a, da);
                }
                if self.rg(b) {
                    let mut db = vec![0.0; vb.len()];
                    for bi in 0..nb {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let sa = if a_b { &va[bi * m * k..(bi + 1) * m * k] } else { va };
                        let dst = if b_b { &mut db[bi * k * n..(bi + 1) * k * n] } else { &mut db[..] };
                        if tb {
                            linalg::gemm(n, k, m, gs, true, sa, ta, dst);
                        } else {
                            linalg::gemm(k, n, m, sa, !ta, gs, false, dst);
                        }
                    }
                    self.acc(adj, b, db);
                }
            }
            Op::Softmax(a) => {
                let (rows, d) = split_last(out_shape);
                let y = &node.value;
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let s = r * d..(r + 1) * d;
                    let dot: f64 = g[s.clone()].iter().zip(&y[s.clone()]).map(|(a, b)| a * b).sum();
                    for k in s {
                        dx[k] = y[k] * (g[k] - dot);
                    }
                }
                self.acc(adj, *a, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (rows, d) = split_last(out_shape);
                let gv = gamma.map(|gm| self.value(gm));
                if let Some(gm) = gamma {
                    if self.rg(*gm) {
                        let mut dg = vec![0.0; d];
                        for k in 0..g.len() {
                            dg[k % d] += g[k] * xhat[k];
                        }
                        self.acc(adj, *gm, dg);
                    }
                }
                if let Some(bt) = beta {
                    if self.rg(*bt) {
                        let mut db = vec![0.0; d];
                        for k in 0..g.len() {
                            db[k % d] += g[k];
                        }
                        self.acc(adj, *bt, db);
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let s = r * d;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        let dxh: Vec<f64> = (0..d).map(|j| g[s + j] * gv.map_or(1.0, |gv| gv[j])).collect();
                        for j in 0..d {
                            m1 += dxh[j];
                            m2 += dxh[j] * xhat[s + j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            dx[s + j] = rstd[r] * (dxh[j] - m1 - xhat[s + j] * m2);
                        }
                    }
                    self.acc(adj, *x, dx);
                }
            }
            Op::Reshape(a) => self.acc(adj, *a, g.to_vec()),
            Op::Transpose(a) => {
                let l = out_shape.len();
                let (r, c) = (out_shape[l - 2], out_shape[l - 1]);
                let nb = g.len() / (r * c).max(1);
                let mut dx = Vec::with_capacity(g.len());
                for b in 0..nb {
                    dx.extend(linalg::transpose(&g[b * r * c..(b + 1) * r * c], r, c));
                }
                self.acc(adj, *a, dx);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = outer_inner(out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        self.acc(adj, p, dp);
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let shape = self.shape(*a);
                let (outer, n, inner) = outer_inner(shape, *axis);
                let len = out_shape[*axis];
                let mut dx = vec![0.0; numel(shape)];
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc(adj, *a, dx);
            }
            Op::SumAll(a) => {
                let n = self.value(*a).len();
                self.acc(adj, *a, vec![g[0]; n]);
            }
            Op::SumAxis { a, axis } => {
                let shape = self.shape(*a);
                let (outer, n, inner) = outer_inner(shape, *axis);
                let mut dx = vec![0.0; numel(shape)];
                for o in 0..outer {
                    for k in 0..n {
                        dx[(o * n + k) * inner..(o * n + k + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                self.acc(adj, *a, dx);
            }
            Op::Gather { table, idx } => {
                let d = self.shape(*table)[1];
                let mut dt = vec![0.0; self.value(*table).len()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += g[r * d + j];
                    }
                }
                self.acc(adj, *table, dt);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let b = labels.len();
                let c = probs.len() / b.max(1);
                let mut dz = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    dz[r * c + y] -= 1.0;
                }
                let s = g[0] / b as f64;
                dz.iter_mut().for_each(|v| *v *= s);
                self.acc(adj, *logits, dz);
            }
            Op::Cholesky(a) => {
                // Ā = ½ sym(L⁻ᵀ Φ(Lᵀ L̄) L⁻¹), Φ = lower triangle with halved diagonal.
                let n = *out_shape.last().unwrap();
                let nb = g.len() / (n * n).max(1);
                let mut dx = Vec::with_capacity(g.len());
                for b in 0..nb {
                    let l = &node.value[b * n * n..(b + 1) * n * n];
                    let gl = &g[b * n * n..(b + 1) * n * n];
                    let mut phi = vec![0.0; n * n];
                    linalg::gemm(n, n, n, l, true, gl, false, &mut phi);
                    for r in 0..n {
                        for c in 0..n {
                            if c > r {
                                phi[r * n + c] = 0.0;
                            } else if c == r {
                                phi[r * n + c] *= 0.5;
                            }
                        }
                    }
                    let linv = linalg::lower_inverse(l, n);
                    let mut tmp = vec![0.0; n * n];
                    linalg::gemm(n, n, n, &linv, true, &phi, false, &mut tmp);
                    let mut s = vec![0.0; n * n];
                    linalg::gemm(n, n, n, &tmp, false, &linv, false, &mut s);
                    for r in 0..n {
                        for c in 0..n {
                            dx.push(0.5 * (s[r * n + c] + s[c * n + r]));
                        }
                    }
                }
                self.acc(adj, *a, dx);
            }
            Op::SpdInverse(a) => {
                let n = *out_shape.last().unwrap();
                let nb = g.len() / (n * n).max(1);
                let mut dx = Vec::with_capacity(g.len());
                for b in 0..nb {
                    let inv = &node.value[b * n * n..(b + 1) * n * n];
                    let gb = &g[b * n * n..(b + 1) * n * n];
                    let mut tmp = vec![0.0; n * n];
                    linalg::gemm(n, n, n, inv, false, gb, false, &mut tmp);
                    let mut s = vec![0.0; n * n];
                    linalg::gemm(n, n, n, &tmp, false, inv, false, &mut s);
                    for r in 0..n {
                        for c in 0..n {
                            dx.push(-0.5 * (s[r * n + c] + s[c * n + r]));
                        }
                    }
                }
                self.acc(adj, *a, dx);
            }
        }
    }
}
