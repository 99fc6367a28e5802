//! Small dense linear-algebra kernels.
//!
//! Matrices are stored row-major. The `vec` operator stacks columns, so the
//! storage order never leaks into anything that touches Kronecker identities.

use std::fmt;

use crate::error::{Error, Result};

/// Default upper bound on the number of entries a Kronecker product may produce.
pub const KRON_CAP: usize = 100_000_000;

/// Relative pivot threshold for [`Cholesky::factor`].
pub const PIVOT_REL_TOL: f64 = 1e-12;

/// Symmetry tolerance accepted by [`solve_spd`], relative to the largest entry.
pub const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Clone, PartialEq)]
pub struct DenseVector {
    data: Vec<f64>,
}

impl DenseVector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vector entries"));
        }
        Ok(Self { data })
    }

    pub(crate) fn from_vec_unchecked(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(len: usize) -> Self {
        Self { data: vec![0.0; len] }
    }

    pub fn ones(len: usize) -> Self {
        Self { data: vec![1.0; len] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn dot(&self, other: &DenseVector) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::dims("dot", self.len(), other.len()));
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn sub(&self, other: &DenseVector) -> Result<DenseVector> {
        if self.len() != other.len() {
            return Err(Error::dims("sub", self.len(), other.len()));
        }
        Ok(Self::from_vec_unchecked(
            self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        ))
    }

    pub fn hadamard(&self, other: &DenseVector) -> Result<DenseVector> {
        if self.len() != other.len() {
            return Err(Error::dims("hadamard", self.len(), other.len()));
        }
        Ok(Self::from_vec_unchecked(
            self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
        ))
    }

    pub fn scale(&self, s: f64) -> DenseVector {
        Self::from_vec_unchecked(self.data.iter().map(|v| v * s).collect())
    }

    pub fn max_abs_diff(&self, other: &DenseVector) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<usize> for DenseVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl fmt::Debug for DenseVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(&self.data).finish()
    }
}

#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Builds a matrix from row-major entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims(
                "DenseMatrix::new",
                format!("{} entries", rows * cols),
                format!("{} entries", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entries"));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::dims("from_rows", cols, bad.len()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        Self::from_fn(n, n, |i, j| if i == j { diag[i] } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Row-major entries.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub(crate) fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> DenseVector {
        DenseVector::from_vec_unchecked((0..self.rows).map(|i| self.get(i, j)).collect())
    }

    pub fn set_column(&mut self, j: usize, v: &DenseVector) -> Result<()> {
        if v.len() != self.rows || j >= self.cols {
            return Err(Error::dims(
                "set_column",
                format!("column < {} of length {}", self.cols, self.rows),
                format!("column {j} of length {}", v.len()),
            ));
        }
        for (i, &x) in v.iter().enumerate() {
            self.set(i, j, x);
        }
        Ok(())
    }

    pub fn transpose(&self) -> DenseMatrix {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::dims(
                "matmul",
                format!("{} rows", self.cols),
                format!("{} rows", other.rows),
            ));
        }
        let mut out = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            let out_row = &mut out[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(Self::from_vec_unchecked(self.rows, other.cols, out))
    }

    /// `selfᵀ · other` without materialising the transpose.
    pub fn tr_matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.rows != other.rows {
            return Err(Error::dims(
                "tr_matmul",
                format!("{} rows", self.rows),
                format!("{} rows", other.rows),
            ));
        }
        let mut out = vec![0.0; self.cols * other.cols];
        for k in 0..self.rows {
            let b = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &bv) in out[i * other.cols..(i + 1) * other.cols].iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Ok(Self::from_vec_unchecked(self.cols, other.cols, out))
    }

    /// `selfᵀ · v`.
    pub fn tr_matvec(&self, v: &DenseVector) -> Result<DenseVector> {
        if self.rows != v.len() {
            return Err(Error::dims("tr_matvec", self.rows, v.len()));
        }
        let mut out = vec![0.0; self.cols];
        for (k, &vk) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(k)) {
                *o += a * vk;
            }
        }
        Ok(DenseVector::from_vec_unchecked(out))
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with("hadamard", other, |a, b| a * b)
    }

    fn zip_with(&self, op: &'static str, other: &DenseMatrix, f: impl Fn(f64, f64) -> f64) -> Result<DenseMatrix> {
        if self.shape() != other.shape() {
            return Err(Error::dims(
                op,
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(Self::from_vec_unchecked(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn scale(&self, s: f64) -> DenseMatrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        Self::from_vec_unchecked(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `‖self − other‖_F / ‖other‖_F`, falling back to the absolute error when `other` is zero.
    pub fn rel_error(&self, other: &DenseMatrix) -> f64 {
        let diff: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let scale = other.frobenius_norm();
        if scale > 0.0 {
            diff / scale
        } else {
            diff
        }
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        let bound = tol * self.max_abs().max(1.0);
        (0..self.rows).all(|i| (i + 1..self.cols).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= bound))
    }

    /// `(A + Aᵀ) / 2`.
    pub fn symmetrize(&self) -> DenseMatrix {
        debug_assert!(self.is_square());
        Self::from_fn(self.rows, self.cols, |i, j| 0.5 * (self.get(i, j) + self.get(j, i)))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn matvec(a: &DenseMatrix, x: &DenseVector) -> Result<DenseVector> {
    if a.cols() != x.len() {
        return Err(Error::dims("matvec", a.cols(), x.len()));
    }
    Ok(DenseVector::from_vec_unchecked(
        (0..a.rows()).map(|i| dot(a.row(i), x.as_slice())).collect(),
    ))
}

pub fn outer(u: &DenseVector, v: &DenseVector) -> DenseMatrix {
    DenseMatrix::from_fn(u.len(), v.len(), |i, j| u[i] * v[j])
}

pub fn kron(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    kron_with_cap(a, b, KRON_CAP)
}

pub fn kron_with_cap(a: &DenseMatrix, b: &DenseMatrix, cap: usize) -> Result<DenseMatrix> {
    let rows = a.rows() * b.rows();
    let cols = a.cols() * b.cols();
    let entries = rows.checked_mul(cols).ok_or(Error::CapacityExceeded {
        entries: usize::MAX,
        cap,
    })?;
    if entries > cap {
        return Err(Error::CapacityExceeded { entries, cap });
    }
    Ok(DenseMatrix::from_fn(rows, cols, |i, j| {
        a.get(i / b.rows(), j / b.cols()) * b.get(i % b.rows(), j % b.cols())
    }))
}

/// Column-stacking vectorisation.
pub fn vec(a: &DenseMatrix) -> DenseVector {
    let mut out = Vec::with_capacity(a.len());
    for j in 0..a.cols() {
        for i in 0..a.rows() {
            out.push(a.get(i, j));
        }
    }
    DenseVector::from_vec_unchecked(out)
}

/// Inverse of [`vec`].
pub fn unvec(v: &DenseVector, rows: usize, cols: usize) -> Result<DenseMatrix> {
    if v.len() != rows * cols {
        return Err(Error::dims("unvec", rows * cols, v.len()));
    }
    Ok(DenseMatrix::from_fn(rows, cols, |i, j| v[j * rows + i]))
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    /// Fails with [`Error::SingularSystem`] when a pivot drops below
    /// `PIVOT_REL_TOL · max diagonal`. Only the lower triangle is read.
    pub fn factor(a: &DenseMatrix) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::dims(
                "cholesky",
                "square matrix",
                format!("{}x{}", a.rows(), a.cols()),
            ));
        }
        let n = a.rows();
        let max_diag = (0..n).map(|i| a.get(i, i)).fold(0.0, f64::max);
        let threshold = PIVOT_REL_TOL * max_diag;
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = a.get(j, j) - dot(&l[j * n..j * n + j], &l[j * n..j * n + j]);
            if !(d > threshold) || max_diag <= 0.0 {
                return Err(Error::SingularSystem { pivot: j, value: d });
            }
            d = d.sqrt();
            l[j * n + j] = d;
            for i in j + 1..n {
                let s = a.get(i, j) - dot(&l[i * n..i * n + j], &l[j * n..j * n + j]);
                l[i * n + j] = s / d;
            }
        }
        Ok(Self { n, lower: l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &DenseVector) -> Result<DenseVector> {
        if b.len() != self.n {
            return Err(Error::dims("cholesky solve", self.n, b.len()));
        }
        let mut x = b.as_slice().to_vec();
        self.solve_in_place(&mut x);
        Ok(DenseVector::from_vec_unchecked(x))
    }

    /// Solves `A X = B` column by column.
    pub fn solve_matrix(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        if b.rows() != self.n {
            return Err(Error::dims("cholesky solve_matrix", self.n, b.rows()));
        }
        let mut out = DenseMatrix::zeros(b.rows(), b.cols());
        let mut col = vec![0.0; self.n];
        for j in 0..b.cols() {
            for (i, c) in col.iter_mut().enumerate() {
                *c = b.get(i, j);
            }
            self.solve_in_place(&mut col);
            for (i, &c) in col.iter().enumerate() {
                out.set(i, j, c);
            }
        }
        Ok(out)
    }

    fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.n;
        let l = &self.lower;
        for i in 0..n {
            let s = x[i] - dot(&l[i * n..i * n + i], &x[..i]);
            x[i] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n {
                s -= l[k * n + i] * x[k];
            }
            x[i] = s / l[i * n + i];
        }
    }
}

/// Solves `A x = b` for symmetric positive-definite `A`.
pub fn solve_spd(a: &DenseMatrix, b: &DenseVector) -> Result<DenseVector> {
    if !a.is_square() || a.rows() != b.len() {
        return Err(Error::dims(
            "solve_spd",
            format!("{0}x{0} system", b.len()),
            format!("{}x{}", a.rows(), a.cols()),
        ));
    }
    if !a.is_symmetric(SYMMETRY_TOL) {
        return Err(Error::Contract("solve_spd requires a symmetric matrix".into()));
    }
    Cholesky::factor(a)?.solve(b)
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    /// Ascending.
    pub values: Vec<f64>,
    /// Column `k` is the eigenvector for `values[k]`.
    pub vectors: DenseMatrix,
}

impl SymmetricEigen {
    /// Cyclic Jacobi rotations. Intended for the r×r covariance factors,
    /// where r is at most a few dozen.
    pub fn new(a: &DenseMatrix) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::dims(
                "symmetric eigen",
                "square matrix",
                format!("{}x{}", a.rows(), a.cols()),
            ));
        }
        let n = a.rows();
        let mut m = a.symmetrize();
        let mut v = DenseMatrix::identity(n);
        let scale = m.frobenius_norm();
        for _sweep in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| m.get(i, j).powi(2))
                .sum::<f64>()
                .sqrt();
            if off <= f64::EPSILON * scale * 1e-2 || off == 0.0 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = m.get(p, q);
                    if apq == 0.0 {
                        continue;
                    }
                    let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let mkp = m.get(k, p);
                        let mkq = m.get(k, q);
                        m.set(k, p, c * mkp - s * mkq);
                        m.set(k, q, s * mkp + c * mkq);
                    }
                    for k in 0..n {
                        let mpk = m.get(p, k);
                        let mqk = m.get(q, k);
                        m.set(p, k, c * mpk - s * mqk);
                        m.set(q, k, s * mpk + c * mqk);
                    }
                    for k in 0..n {
                        let vkp = v.get(k, p);
                        let vkq = v.get(k, q);
                        v.set(k, p, c * vkp - s * vkq);
                        v.set(k, q, s * vkp + c * vkq);
                    }
                }
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| m.get(i, i).total_cmp(&m.get(j, j)));
        let values = order.iter().map(|&i| m.get(i, i)).collect();
        let vectors = DenseMatrix::from_fn(n, n, |i, k| v.get(i, order[k]));
        Ok(Self { values, vectors })
    }

    pub fn min(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }

    /// `Q diag(f(λ)) Qᵀ`.
    pub fn reassemble(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        let n = self.values.len();
        let d: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        DenseMatrix::from_fn(n, n, |i, j| {
            (0..n)
                .map(|k| self.vectors.get(i, k) * d[k] * self.vectors.get(j, k))
                .sum()
        })
    }
}

pub fn min_eigenvalue(a: &DenseMatrix) -> Result<f64> {
    Ok(SymmetricEigen::new(a)?.min())
}
