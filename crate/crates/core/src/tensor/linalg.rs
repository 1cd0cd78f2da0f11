//! Dense row-major kernels shared by the graph ops and the non-graph
//! Gaussian algebra.

use crate::error::{Error, Result};

/// Pivots at or below this fraction of the largest diagonal entry are
/// treated as exact zeros by [`cholesky_psd`].
pub const PSD_PIVOT_TOL: f64 = 1e-13;

/// `c += op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
/// With `ta` set, `a` is stored `k x m`; with `tb` set, `b` is stored `n x k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, n: usize, k: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let a_owned;
    let a = if ta {
        a_owned = transpose(a, k, m);
        &a_owned[..]
    } else {
        a
    };
    let b_owned;
    let b = if tb {
        b_owned = transpose(b, n, k);
        &b_owned[..]
    } else {
        b
    };
    // Four rows of `c` per pass over `b`; per-element summation order is
    // still `p = 0..k`.
    let mut i = 0;
    while i + 4 <= m {
        let block = &mut c[i * n..(i + 4) * n];
        let (c0, rest) = block.split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        for p in 0..k {
            let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let bj = brow[j];
                c0[j] += a0 * bj;
                c1[j] += a1 * bj;
                c2[j] += a2 * bj;
                c3[j] += a3 * bj;
            }
        }
        i += 4;
    }
    for i in i..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

/// Transpose of a `rows x cols` matrix.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, n, k, a, false, b, false, &mut c);
    c
}

/// Lower Cholesky-like factor of a symmetric positive semi-definite matrix.
///
/// Only the lower triangle of `a` is read. Columns whose pivot falls below
/// [`PSD_PIVOT_TOL`] (relative) are set to zero, so rank-deficient inputs
/// yield `L` with `L Lᵀ = A` up to rounding. A clearly negative pivot is an
/// error.
pub fn cholesky_psd(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max);
    let tol = PSD_PIVOT_TOL * scale.max(f64::MIN_POSITIVE);
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for p in 0..j {
            d -= l[j * n + p] * l[j * n + p];
        }
        if !d.is_finite() {
            return Err(Error::numeric("cholesky", format!("non-finite pivot at column {j}")));
        }
        if d <= tol {
            if d < -1e-8 * scale.max(1.0) {
                return Err(Error::Conditioning(format!(
                    "matrix is not positive semi-definite (pivot {d:e} at column {j})"
                )));
            }
            continue;
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for p in 0..j {
                s -= l[i * n + p] * l[j * n + p];
            }
            l[i * n + j] = s / djj;
        }
    }
    Ok(l)
}

/// Strict Cholesky factor; fails unless every pivot is positive.
pub fn cholesky_pd(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for p in 0..j {
            d -= l[j * n + p] * l[j * n + p];
        }
        if d.is_nan() || d <= 0.0 {
            return Err(Error::Conditioning(format!(
                "Cholesky pivot {d:e} at column {j} is not positive"
            )));
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for p in 0..j {
                s -= l[i * n + p] * l[j * n + p];
            }
            l[i * n + j] = s / djj;
        }
    }
    Ok(l)
}

/// Inverse of a lower-triangular matrix. Zero diagonal entries produce zero
/// rows and columns (pseudo-inverse on the supported block).
pub fn lower_inverse(l: &[f64], n: usize) -> Vec<f64> {
    let mut inv = vec![0.0; n * n];
    for j in 0..n {
        if l[j * n + j] == 0.0 {
            continue;
        }
        inv[j * n + j] = 1.0 / l[j * n + j];
        for i in j + 1..n {
            if l[i * n + i] == 0.0 {
                continue;
            }
            let mut s = 0.0;
            for p in j..i {
                s += l[i * n + p] * inv[p * n + j];
            }
            inv[i * n + j] = -s / l[i * n + i];
        }
    }
    inv
}

/// Inverse of a symmetric positive-definite matrix via its Cholesky factor.
pub fn spd_inverse(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let l = cholesky_pd(a, n)?;
    let linv = lower_inverse(&l, n);
    // A⁻¹ = L⁻ᵀ L⁻¹
    let mut out = vec![0.0; n * n];
    gemm(n, n, n, &linv, true, &linv, false, &mut out);
    Ok(out)
}

/// `log |det A|` of a square matrix by partial-pivot LU; `-inf` when singular.
pub fn log_abs_det(a: &[f64], n: usize) -> f64 {
    let mut m = a.to_vec();
    let mut acc = 0.0;
    for col in 0..n {
        let mut piv = col;
        let mut best = m[col * n + col].abs();
        for r in col + 1..n {
            let v = m[r * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best == 0.0 {
            return f64::NEG_INFINITY;
        }
        if piv != col {
            for c in 0..n {
                m.swap(col * n + c, piv * n + c);
            }
        }
        let d = m[col * n + col];
        acc += d.abs().ln();
        for r in col + 1..n {
            let f = m[r * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                m[r * n + c] -= f * m[col * n + c];
            }
        }
    }
    acc
}

/// Dense row-major matrix used outside the autodiff graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        Matrix::new(
            self.rows,
            other.cols,
            matmul(&self.data, &other.data, self.rows, self.cols, other.cols),
        )
    }

    pub fn t(&self) -> Matrix {
        Matrix::new(self.cols, self.rows, transpose(&self.data, self.rows, self.cols))
    }

    /// `self * selfᵀ`
    pub fn gram(&self) -> Matrix {
        let mut out = vec![0.0; self.rows * self.rows];
        gemm(self.rows, self.rows, self.cols, &self.data, false, &self.data, true, &mut out);
        Matrix::new(self.rows, self.rows, out)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
