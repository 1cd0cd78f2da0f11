//! Dense f64 tensors, a reverse-mode tape, Adam, and the checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod optim;
pub mod params;

pub use graph::{Graph, Var};
pub use optim::{adam_step, lr_at, LrSchedule, OptimState};
pub use params::{ParamId, ParamStore};

use crate::error::{Error, Result};
use crate::rng::SplitRng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if graph::numel(shape) != data.len() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(graph::numel(&shape), data.len());
        Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![0.0; graph::numel(shape)])
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![v; graph::numel(shape)])
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![], vec![v])
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Normal(0, std²) entries.
    pub fn randn(shape: &[usize], std: f64, rng: &mut SplitRng) -> Self {
        let n = graph::numel(shape);
        Self::from_parts(shape.to_vec(), (0..n).map(|_| std * rng.normal()).collect())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape("accumulate_grad", &self.shape, &[g.len()]));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if graph::numel(shape) != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Evaluate `f` on a fresh graph and return its single output.
pub fn eval1(f: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = f(&mut g)?;
    Ok(g.to_tensor(v))
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    eval1(|g| {
        let (x, y) = (g.input(a), g.input(b));
        g.matmul(x, y)
    })
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    eval1(|g| {
        let v = g.input(x);
        g.softmax(v)
    })
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    eval1(|g| {
        let (v, gm, bt) = (g.input(x), g.input(gamma), g.input(beta));
        g.layer_norm(v, Some(gm), Some(bt), eps)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor {
        Tensor::new(shape, d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&Tensor::eye(2), &m).unwrap().data(), m.data());
        let p = t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(matmul(&m, &p).unwrap().data(), &[2.0, 1.0, 4.0, 3.0]);
        let z = matmul(&Tensor::zeros(&[2, 3]), &t(&[3, 4], &[1.5; 12])).unwrap();
        assert_eq!(z.shape(), &[2, 4]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&t(&[1], &[7.3])).unwrap().data(), &[1.0]);
        for v in softmax(&t(&[3], &[0.0; 3])).unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&t(&[2], &[2.0, 0.0])).unwrap();
        let e2 = 2f64.exp();
        assert!((s.data()[0] - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((s.data()[0] - 0.8808).abs() < 1e-4);
        assert!(softmax(&t(&[2], &[f64::NAN, 0.0])).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::filled(&[3], 1.0);
        let zeros = Tensor::zeros(&[3]);
        let y = layer_norm(&t(&[1, 3], &[4.0; 3]), &ones, &zeros, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let y = layer_norm(&t(&[1, 2], &[1.0, -1.0]), &Tensor::filled(&[2], 1.0), &Tensor::zeros(&[2]), 1e-14).unwrap();
        assert!(y.max_abs_diff(&t(&[1, 2], &[1.0, -1.0])) < 1e-12);
        let y = layer_norm(&t(&[1, 2], &[1.0, 3.0]), &Tensor::filled(&[2], 2.0), &Tensor::filled(&[2], 1.0), 0.0).unwrap();
        assert!(y.max_abs_diff(&t(&[1, 2], &[-1.0, 3.0])) < 1e-12);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.leaf(&[1], vec![3.0]);
        let y = g.square(x).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
        // repeated calls accumulate
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[12.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());

        let mut g = Graph::new();
        let x = g.leaf(&[2, 3], vec![0.3, -1.0, 2.0, 0.1, 0.0, 5.0]);
        let s = g.softmax(x).unwrap();
        let l = g.sum(s);
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|v| v.abs() < 1e-12));

        let mut g = Graph::new();
        let x = g.leaf(&[2], vec![1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(&[2, 3], vec![1.0; 6]);
        let b = g.leaf(&[3], vec![0.5, 0.5, 0.5]);
        let c = g.mul(a, b).unwrap();
        let l = g.sum(c);
        g.backward(l).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.grad(a).unwrap(), &[0.5; 6]);
    }
}
