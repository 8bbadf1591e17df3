//! Dense linear algebra and exact neighbor queries.
//!
//! Everything here is a pure function of its inputs. Sample sets are passed
//! as slices of rows (`&[Vec<f64>]`); matrices are row-major.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_TOL: f64 = 1e-12;
const NEG_EIGEN_TOL: f64 = 1e-10;

/// Sum with pairwise (cascade) reduction. The result depends only on the
/// order of `values`, never on how work is scheduled.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 16;
    if values.len() <= BLOCK {
        values.iter().sum()
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn squared_euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    squared_euclidean(a, b).sqrt()
}

/// Cosine distance `1 - cos(u, v)`, clamped to `[0, 2]`.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::validation(format!(
            "cosine distance between vectors of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu <= 1e-12 || nv <= 1e-12 {
        return Err(Error::domain("cosine distance of a zero-norm vector"));
    }
    // ‖û ∓ v̂‖² / 2, picking the sign that avoids cancellation; exact for
    // parallel and anti-parallel inputs
    let sign = if dot(u, v) >= 0.0 { -1.0 } else { 1.0 };
    let sq: f64 = u
        .iter()
        .zip(v)
        .map(|(a, b)| {
            let d = a / nu + sign * b / nv;
            d * d
        })
        .sum();
    let half_sq = if sign < 0.0 { sq / 2.0 } else { 2.0 - sq / 2.0 };
    Ok(half_sq.clamp(0.0, 2.0))
}

/// Distance used by neighbor queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    Cosine,
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> Result<f64> {
        match self {
            Metric::Euclidean => Ok(euclidean(a, b)),
            Metric::Cosine => cosine_distance(a, b),
        }
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::validation("ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m.data[i * values.len() + i] = *v;
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.get(i, j);
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::validation(format!(
                "matmul shape mismatch {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        Ok(out)
    }

    /// `self · v`
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `selfᵀ · v`
    pub fn tmul_vec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        out
    }

    pub fn frobenius(&self) -> f64 {
        norm(&self.data)
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }
}

/// Symmetric matrix. Construction checks symmetry and finiteness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix {
    dim: usize,
    entries: Vec<f64>,
}

impl SymMatrix {
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("symmetric matrix of dimension 0"));
        }
        if entries.len() != dim * dim {
            return Err(Error::validation(format!(
                "expected {} entries for a {dim}x{dim} matrix, got {}",
                dim * dim,
                entries.len()
            )));
        }
        if let Some(pos) = entries.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite entry at ({}, {})",
                pos / dim,
                pos % dim
            )));
        }
        for i in 0..dim {
            for j in (i + 1)..dim {
                let (a, b) = (entries[i * dim + j], entries[j * dim + i]);
                if (a - b).abs() > SYMMETRY_TOL {
                    return Err(Error::validation(format!(
                        "matrix not symmetric at ({i}, {j}): {a} vs {b}"
                    )));
                }
            }
        }
        Ok(Self { dim, entries })
    }

    pub fn from_matrix(m: Matrix) -> Result<Self> {
        if m.rows != m.cols {
            return Err(Error::validation(format!(
                "non-square {}x{} matrix",
                m.rows, m.cols
            )));
        }
        Self::new(m.rows, m.data)
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            entries: Matrix::identity(dim).data,
        }
    }

    pub fn diag(values: &[f64]) -> Result<Self> {
        Self::new(values.len(), Matrix::diag(values).data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix {
            rows: self.dim,
            cols: self.dim,
            data: self.entries.clone(),
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }
}

/// Eigenpairs of a symmetric matrix, sorted by descending eigenvalue.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenDecomposition {
    pub values: Vec<f64>,
    /// One eigenvector per entry of `values`.
    pub vectors: Vec<Vec<f64>>,
}

impl EigenDecomposition {
    /// `V · diag(f(λ)) · Vᵀ`
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.values.len();
        let mut out = Matrix::zeros(n, n);
        for (lambda, v) in self.values.iter().zip(&self.vectors) {
            let s = f(*lambda);
            if s == 0.0 {
                continue;
            }
            for i in 0..n {
                let vi = s * v[i];
                for j in 0..n {
                    out.data[i * n + j] += vi * v[j];
                }
            }
        }
        out
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Eigenvectors carry a fixed sign: the first component with magnitude
/// above 1e-12 is positive.
pub fn sym_eig(m: &SymMatrix) -> Result<EigenDecomposition> {
    sym_eig_named(m, "matrix")
}

pub(crate) fn sym_eig_named(m: &SymMatrix, name: &str) -> Result<EigenDecomposition> {
    let n = m.dim;
    let mut a = m.entries.clone();
    let mut v = Matrix::identity(n).data;
    let scale = norm(&a);

    let off_norm = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += 2.0 * a[i * n + j] * a[i * n + j];
            }
        }
        s.sqrt()
    };

    let mut converged = scale == 0.0;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        if converged || off_norm(&a) <= JACOBI_TOL * scale {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = if theta.is_infinite() {
                    0.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged && off_norm(&a) > JACOBI_TOL * scale {
        return Err(Error::numerical(format!(
            "Jacobi eigensolver did not converge on {name} ({n}x{n}) after {JACOBI_MAX_SWEEPS} sweeps"
        )));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical(format!(
            "non-finite values in eigendecomposition of {name}"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = order
        .iter()
        .map(|&col| {
            let mut vec: Vec<f64> = (0..n).map(|k| v[k * n + col]).collect();
            if let Some(first) = vec.iter().find(|x| x.abs() > 1e-12) {
                if *first < 0.0 {
                    vec.iter_mut().for_each(|x| *x = -*x);
                }
            }
            vec
        })
        .collect();
    Ok(EigenDecomposition { values, vectors })
}

/// Principal square root of a symmetric positive semi-definite matrix.
///
/// Negative eigenvalues no smaller than `-1e-10 · max(1, λ_max)` are treated
/// as roundoff and clamped to zero.
pub fn sqrtm_spd(m: &SymMatrix) -> Result<SymMatrix> {
    let eig = sym_eig(m)?;
    let top = eig.values.first().copied().unwrap_or(0.0).abs().max(1.0);
    if let Some(bad) = eig.values.iter().find(|&&l| l < -NEG_EIGEN_TOL * top) {
        return Err(Error::domain(format!(
            "matrix square root of a matrix with eigenvalue {bad:e}"
        )));
    }
    let root = eig.reconstruct_with(|l| l.max(0.0).sqrt());
    symmetrize(root)
}

/// Average a nearly-symmetric matrix with its transpose.
pub(crate) fn symmetrize(mut m: Matrix) -> Result<SymMatrix> {
    let n = m.rows;
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m.get(i, j) + m.get(j, i));
            m.set(i, j, avg);
            m.set(j, i, avg);
        }
    }
    SymMatrix::from_matrix(m)
}

/// Sample mean and unbiased (divisor `N - 1`) covariance.
pub fn mean_cov(x: &[Vec<f64>]) -> Result<(Vec<f64>, SymMatrix)> {
    let n = x.len();
    if n < 2 {
        return Err(Error::validation(format!(
            "covariance needs at least 2 samples, got {n}"
        )));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(Error::validation("samples must share a positive dimension"));
    }
    let mut column = vec![0.0; n];
    let mean: Vec<f64> = (0..d)
        .map(|j| {
            column.iter_mut().zip(x).for_each(|(c, r)| *c = r[j]);
            pairwise_sum(&column) / n as f64
        })
        .collect();
    let centered: Vec<Vec<f64>> = x
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for a in 0..d {
        for b in a..d {
            column
                .iter_mut()
                .zip(&centered)
                .for_each(|(c, r)| *c = r[a] * r[b]);
            let v = pairwise_sum(&column) / (n - 1) as f64;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    Ok((mean, SymMatrix::new(d, cov)?))
}

fn check_rows(points: &[Vec<f64>], what: &str) -> Result<usize> {
    let d = points.first().map_or(0, Vec::len);
    if points.iter().any(|r| r.len() != d) {
        return Err(Error::validation(format!("{what}: rows differ in dimension")));
    }
    Ok(d)
}

/// Distance from each query to its `k`-th nearest point.
pub fn knn_distance(
    points: &[Vec<f64>],
    queries: &[Vec<f64>],
    k: usize,
    metric: Metric,
) -> Result<Vec<f64>> {
    kth_distances(points, queries, k, metric, false)
}

/// Distance from each point to its `k`-th nearest *other* point of the same
/// set. The point's own index is excluded; exact duplicates at other
/// indices still count.
pub fn knn_radii(points: &[Vec<f64>], k: usize, metric: Metric) -> Result<Vec<f64>> {
    kth_distances(points, points, k, metric, true)
}

fn kth_distances(
    points: &[Vec<f64>],
    queries: &[Vec<f64>],
    k: usize,
    metric: Metric,
    exclude_self: bool,
) -> Result<Vec<f64>> {
    let available = points.len() - usize::from(exclude_self && !points.is_empty());
    if k == 0 || k > available {
        return Err(Error::validation(format!(
            "k = {k} must be in 1..={available}"
        )));
    }
    let dp = check_rows(points, "points")?;
    let dq = check_rows(queries, "queries")?;
    if !queries.is_empty() && dp != dq {
        return Err(Error::validation(format!(
            "points have dimension {dp}, queries {dq}"
        )));
    }
    queries
        .par_iter()
        .enumerate()
        .map(|(qi, q)| {
            let mut d = Vec::with_capacity(points.len());
            for (pi, p) in points.iter().enumerate() {
                if exclude_self && pi == qi {
                    continue;
                }
                d.push(metric.distance(q, p)?);
            }
            let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
            Ok(*kth)
        })
        .collect()
}
