//! Dense linear-algebra primitives: a row-major matrix, a cyclic Jacobi
//! symmetric eigensolver, top-m PCA, subspace decomposition and
//! Gram–Schmidt orthonormalization.
//!
//! Everything here is `f64` and allocation-light; dimensions in this crate
//! stay in the low hundreds, so no blocking or BLAS is attempted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows. An empty slice yields a 0×0 matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Dimension {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Gathers the listed rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension {
                expected: self.cols,
                got: other.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                axpy(aik, other.row(k), o);
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

/// Column means of `points`.
pub fn column_mean(points: &Matrix) -> Vec<f64> {
    let mut mean = vec![0.0; points.cols()];
    for r in points.iter_rows() {
        axpy(1.0, r, &mut mean);
    }
    let n = points.rows().max(1) as f64;
    mean.iter_mut().for_each(|v| *v /= n);
    mean
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    /// Eigenvalues in descending order.
    pub values: Vec<f64>,
    /// One eigenvector per row, matching `values`.
    pub vectors: Matrix,
}

/// Cyclic Jacobi eigensolver for a real symmetric matrix.
///
/// Sweeps over every off-diagonal pair, annihilating each with a plane
/// rotation, until the off-diagonal Frobenius mass falls below
/// `1e-15 * ‖A‖_F` (or 100 sweeps). Eigenvectors are sign-normalized so that
/// the largest-magnitude coordinate is positive.
pub fn symmetric_eigen(a: &Matrix) -> Result<SymmetricEigen> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Dimension {
            expected: n,
            got: a.cols(),
        });
    }
    let mut a = a.clone();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm();
    let tol = 1e-15 * scale;

    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() <= tol || scale == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                // signum(+0.0) == 1.0, so theta == 0 rotates by 45 degrees
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                // columns of v accumulate the rotations
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (r, &i) in order.iter().enumerate() {
        let row = vectors.row_mut(r);
        for k in 0..n {
            row[k] = v[(k, i)];
        }
        fix_sign(row);
    }
    Ok(SymmetricEigen { values, vectors })
}

/// Flips `v` so that its largest-magnitude coordinate (first on ties) is positive.
pub fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Tolerance used by the basis invariant checks.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

/// A set of `m` orthonormal vectors in `d`-dimensional space, stored one per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthonormalBasis {
    vectors: Matrix,
}

impl OrthonormalBasis {
    /// Wraps `vectors` after checking unit norms and pairwise orthogonality
    /// within [`ORTHONORMAL_TOL`].
    pub fn new(vectors: Matrix) -> Result<Self> {
        let basis = Self { vectors };
        basis.check()?;
        Ok(basis)
    }

    pub(crate) fn new_unchecked(vectors: Matrix) -> Self {
        Self { vectors }
    }

    /// Basis of the first `m` coordinate axes.
    pub fn axes(m: usize, d: usize) -> Result<Self> {
        if m > d {
            return Err(Error::Dimension {
                expected: d,
                got: m,
            });
        }
        let mut v = Matrix::zeros(m, d);
        for k in 0..m {
            v[(k, k)] = 1.0;
        }
        Ok(Self { vectors: v })
    }

    pub fn check(&self) -> Result<()> {
        let m = self.rank();
        if m > self.ambient_dim() {
            return Err(Error::Dimension {
                expected: self.ambient_dim(),
                got: m,
            });
        }
        for i in 0..m {
            let vi = self.vectors.row(i);
            if (norm(vi) - 1.0).abs() > ORTHONORMAL_TOL {
                return Err(Error::Invalid(format!(
                    "basis vector {i} has norm {}",
                    norm(vi)
                )));
            }
            for j in i + 1..m {
                let d = dot(vi, self.vectors.row(j));
                if d.abs() > ORTHONORMAL_TOL {
                    return Err(Error::Invalid(format!(
                        "basis vectors {i} and {j} have dot product {d}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.vectors.rows()
    }

    pub fn ambient_dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn vector(&self, k: usize) -> &[f64] {
        self.vectors.row(k)
    }

    /// Coordinates of `x` along each basis vector.
    pub fn coordinates(&self, x: &[f64]) -> Vec<f64> {
        self.vectors.iter_rows().map(|v| dot(v, x)).collect()
    }

    /// Orthogonal projection of `x` onto the span.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.ambient_dim()];
        for v in self.vectors.iter_rows() {
            axpy(dot(v, x), v, &mut out);
        }
        out
    }

    /// The `d×d` projector `Σ_k ψ_k ψ_kᵀ`.
    pub fn projector(&self) -> Matrix {
        let d = self.ambient_dim();
        let mut p = Matrix::zeros(d, d);
        for v in self.vectors.iter_rows() {
            for i in 0..d {
                for j in 0..d {
                    p[(i, j)] += v[i] * v[j];
                }
            }
        }
        p
    }
}

/// Result of [`pca_top_m`].
#[derive(Debug, Clone)]
pub struct PcaFit {
    pub basis: OrthonormalBasis,
    pub centroid: Vec<f64>,
    /// Variances along each basis vector (zero for completion vectors).
    pub variances: Vec<f64>,
    /// Number of genuine principal directions before completion.
    pub principal_rank: usize,
}

impl PcaFit {
    /// Distance from `x` to the fitted affine subspace.
    pub fn residual(&self, x: &[f64]) -> f64 {
        let c = sub(x, &self.centroid);
        let p = self.basis.project(&c);
        distance(&c, &p)
    }
}

/// Top-`m` principal subspace of the rows of `points`.
///
/// Eigendecomposes whichever of the `d×d` scatter matrix or the `n×n` Gram
/// matrix of the centered rows is smaller. Directions with (relative)
/// zero variance are dropped and replaced by the deterministic axis completion
/// of [`complete_basis`].
pub fn pca_top_m(points: &Matrix, m: usize) -> Result<PcaFit> {
    let n = points.rows();
    let d = points.cols();
    if n == 0 {
        return Err(Error::Empty("pca_top_m needs at least one point"));
    }
    if m > d {
        return Err(Error::Dimension {
            expected: d,
            got: m,
        });
    }
    let centroid = column_mean(points);
    let mut centered = points.clone();
    for i in 0..n {
        centered
            .row_mut(i)
            .iter_mut()
            .zip(&centroid)
            .for_each(|(x, c)| *x -= c);
    }

    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut variances = Vec::with_capacity(m);
    if n < d {
        let mut gram = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let g = dot(centered.row(i), centered.row(j));
                gram[(i, j)] = g;
                gram[(j, i)] = g;
            }
        }
        let eig = symmetric_eigen(&gram)?;
        let floor = rank_floor(&eig.values);
        for (k, &lambda) in eig.values.iter().enumerate().take(m) {
            if lambda <= floor {
                break;
            }
            let u = eig.vectors.row(k);
            let mut v = vec![0.0; d];
            for (i, &ui) in u.iter().enumerate() {
                axpy(ui, centered.row(i), &mut v);
            }
            directions.push(v);
            variances.push(lambda / n as f64);
        }
    } else {
        let mut scatter = Matrix::zeros(d, d);
        for r in centered.iter_rows() {
            for i in 0..d {
                if r[i] == 0.0 {
                    continue;
                }
                for j in i..d {
                    scatter[(i, j)] += r[i] * r[j];
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                scatter[(i, j)] = scatter[(j, i)];
            }
        }
        let eig = symmetric_eigen(&scatter)?;
        let floor = rank_floor(&eig.values);
        for (k, &lambda) in eig.values.iter().enumerate().take(m) {
            if lambda <= floor {
                break;
            }
            directions.push(eig.vectors.row(k).to_vec());
            variances.push(lambda / n as f64);
        }
    }

    // Gram–Schmidt polishes the Gram-route directions (and is a no-op up to
    // rounding on the scatter route) before the sign convention is applied.
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(m);
    for mut v in directions {
        for u in &rows {
            let c = dot(u, &v);
            axpy(-c, u, &mut v);
        }
        let nv = norm(&v);
        if nv <= 1e-12 {
            break;
        }
        v.iter_mut().for_each(|x| *x /= nv);
        fix_sign(&mut v);
        rows.push(v);
    }
    variances.truncate(rows.len());
    let principal_rank = rows.len();
    complete_basis(&mut rows, m, d);
    variances.resize(m, 0.0);
    let basis = OrthonormalBasis::new_unchecked(stack(&rows, d));
    Ok(PcaFit {
        basis,
        centroid,
        variances,
        principal_rank,
    })
}

// `Matrix::from_rows` cannot recover the column count of an empty set.
fn stack(rows: &[Vec<f64>], d: usize) -> Matrix {
    Matrix {
        rows: rows.len(),
        cols: d,
        data: rows.concat(),
    }
}

fn rank_floor(values: &[f64]) -> f64 {
    let top = values.first().copied().unwrap_or(0.0).max(0.0);
    (top * 1e-12).max(1e-300)
}

/// Extends orthonormal `rows` to `m` vectors using coordinate axes in
/// ascending index order, each Gram–Schmidt'ed against the current set.
/// Returns the number of vectors appended.
pub fn complete_basis(rows: &mut Vec<Vec<f64>>, m: usize, d: usize) -> usize {
    let start = rows.len();
    for axis in 0..d {
        if rows.len() >= m {
            break;
        }
        if let Some(v) = orthogonal_axis(rows, axis, d) {
            rows.push(v);
        }
    }
    rows.len() - start
}

fn orthogonal_axis(rows: &[Vec<f64>], axis: usize, d: usize) -> Option<Vec<f64>> {
    let mut v = vec![0.0; d];
    v[axis] = 1.0;
    // two passes of classical Gram–Schmidt
    for _ in 0..2 {
        for u in rows {
            let c = dot(u, &v);
            axpy(-c, u, &mut v);
        }
    }
    let nv = norm(&v);
    // an axis almost inside the span would amplify rounding error
    if nv < 1e-6 {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= nv);
    Some(v)
}

/// Splits `diff` into the lengths of its component inside the span of
/// `basis` and its component orthogonal to it.
pub fn decompose(diff: &[f64], basis: &OrthonormalBasis) -> Result<(f64, f64)> {
    if diff.len() != basis.ambient_dim() {
        return Err(Error::Dimension {
            expected: basis.ambient_dim(),
            got: diff.len(),
        });
    }
    let inplane = basis.project(diff);
    let orth = sub(diff, &inplane);
    Ok((norm(&inplane), norm(&orth)))
}

/// Output of [`reorthonormalize`].
#[derive(Debug, Clone)]
pub struct Reorthonormalized {
    pub basis: OrthonormalBasis,
    /// Input rows that were linearly dependent on earlier rows and were
    /// replaced by an axis completion vector.
    pub replaced: Vec<usize>,
}

/// Relative residual below which an input row counts as dependent.
const DEPENDENCE_TOL: f64 = 1e-10;

/// Modified Gram–Schmidt over the rows of `vectors` (with one
/// re-orthogonalization pass), preserving the span of each leading prefix.
pub fn reorthonormalize(vectors: &Matrix) -> Result<Reorthonormalized> {
    let m = vectors.rows();
    let d = vectors.cols();
    if m > d {
        return Err(Error::Dimension {
            expected: d,
            got: m,
        });
    }
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut replaced = Vec::new();
    for (k, input) in vectors.iter_rows().enumerate() {
        let scale = norm(input);
        let mut v = input.to_vec();
        for _ in 0..2 {
            for u in &rows {
                let c = dot(u, &v);
                axpy(-c, u, &mut v);
            }
        }
        let nv = norm(&v);
        if !nv.is_finite() {
            return Err(Error::NonFinite(format!("row {k} of frame")));
        }
        if nv <= DEPENDENCE_TOL * scale.max(1.0) || nv == 0.0 {
            let axis = (0..d)
                .find_map(|a| orthogonal_axis(&rows, a, d))
                .expect("m <= d leaves room for an axis");
            rows.push(axis);
            replaced.push(k);
        } else {
            v.iter_mut().for_each(|x| *x /= nv);
            rows.push(v);
        }
    }
    let basis = OrthonormalBasis::new_unchecked(stack(&rows, d));
    Ok(Reorthonormalized { basis, replaced })
}
