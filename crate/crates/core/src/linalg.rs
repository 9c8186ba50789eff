//! Dense kernels: dot products, cosine similarity, batch PCA and the two
//! linear-map solvers used for post-hoc alignment.
//!
//! Everything here works in `f64`. Decompositions are delegated to
//! `nalgebra`; the wrappers fix the conventions the rest of the crate relies
//! on (row-major storage, descending eigenvalue order, deterministic signs).

use nalgebra::{DMatrix, SymmetricEigen, SVD};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                axpy(a, other.row(k), out_row);
            }
        }
        Ok(out)
    }

    /// `v · M` for a row vector `v` of length `rows`.
    pub fn left_mul(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (r, &x) in v.iter().enumerate() {
            if x != 0.0 {
                axpy(x, self.row(r), out);
            }
        }
    }

    /// `M · v` for a column vector `v` of length `cols`.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), v)).collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub(crate) fn from_nalgebra(m: &DMatrix<f64>) -> Self {
        let mut out = Self::zeros(m.nrows(), m.ncols());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                out.data[r * m.ncols() + c] = m[(r, c)];
            }
        }
        out
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a * x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity together with a flag raised when either input has zero
/// norm (the value is then defined as 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    pub degenerate: bool,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Cosine {
    assert_eq!(a.len(), b.len(), "cosine of vectors with different lengths");
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Cosine {
            value: 0.0,
            degenerate: true,
        };
    }
    Cosine {
        value: (dot(a, b) / (na * nb)).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

/// Cosine similarity, 0 for degenerate inputs.
#[inline]
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    cosine_similarity(a, b).value
}

/// Leading principal components of a sample matrix.
#[derive(Debug, Clone)]
pub struct Pca {
    /// `d × k`, orthonormal columns in descending eigenvalue order.
    pub components: DenseMatrix,
    /// Eigenvalues of the sample covariance for the returned columns.
    pub eigenvalues: Vec<f64>,
    /// Sum of all `d` covariance eigenvalues.
    pub total_variance: f64,
    pub mean: Vec<f64>,
    /// Set when the samples span fewer than `k` directions; the trailing
    /// columns are then an arbitrary orthonormal completion.
    pub low_rank: bool,
}

impl Pca {
    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        if self.total_variance <= 0.0 {
            return vec![0.0; self.eigenvalues.len()];
        }
        self.eigenvalues
            .iter()
            .map(|e| e / self.total_variance)
            .collect()
    }

    /// Centers `x` with the fitted mean and projects it on the components.
    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        let mut out = vec![0.0; self.components.cols()];
        self.components.left_mul(&centered, &mut out);
        out
    }
}

/// Column means and mean-centered sample covariance of the rows of `samples`.
pub fn covariance(samples: &DenseMatrix) -> (Vec<f64>, DenseMatrix) {
    let (n, d) = (samples.rows(), samples.cols());
    let mut mean = vec![0.0; d];
    for r in 0..n {
        axpy(1.0, samples.row(r), &mut mean);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = DenseMatrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for r in 0..n {
        for (c, (x, m)) in centered.iter_mut().zip(samples.row(r).iter().zip(&mean)) {
            *c = x - m;
        }
        for i in 0..d {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            let row = cov.row_mut(i);
            for j in i..d {
                row[j] += ci * centered[j];
            }
        }
    }
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    for i in 0..d {
        for j in i..d {
            let v = cov.get(i, j) / denom;
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }
    (mean, cov)
}

/// Flips the sign of each column so its first non-negligible coordinate is positive.
fn canonical_signs(m: &mut DenseMatrix) {
    for c in 0..m.cols() {
        let first = (0..m.rows())
            .map(|r| m.get(r, c))
            .find(|v| v.abs() > 1e-12)
            .unwrap_or(0.0);
        if first < 0.0 {
            for r in 0..m.rows() {
                let v = m.get(r, c);
                m.set(r, c, -v);
            }
        }
    }
}

/// The first `k` principal components of the rows of `samples` (`n × d`).
pub fn pca_components(samples: &DenseMatrix, k: usize) -> Result<Pca> {
    let (n, d) = (samples.rows(), samples.cols());
    if k == 0 || k > d || n < k {
        return Err(Error::Shape(format!(
            "pca needs samples >= components >= 1 and dim >= components (samples {n}, dim {d}, components {k})"
        )));
    }
    let (mean, cov) = covariance(samples);
    let eig = SymmetricEigen::new(cov.to_nalgebra());

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut components = DenseMatrix::zeros(d, k);
    let mut eigenvalues = Vec::with_capacity(k);
    for (c, &idx) in order.iter().take(k).enumerate() {
        for r in 0..d {
            components.set(r, c, eig.eigenvectors[(r, idx)]);
        }
        eigenvalues.push(eig.eigenvalues[idx].max(0.0));
    }
    canonical_signs(&mut components);

    let total_variance: f64 = eig.eigenvalues.iter().map(|e| e.max(0.0)).sum();
    let largest = eigenvalues.first().copied().unwrap_or(0.0);
    let tol = 1e-12 * largest.max(f64::MIN_POSITIVE);
    let low_rank = largest <= 0.0 || eigenvalues.iter().any(|&e| e <= tol);

    Ok(Pca {
        components,
        eigenvalues,
        total_variance,
        mean,
        low_rank,
    })
}

fn check_pairs(a: &DenseMatrix, b: &DenseMatrix) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "paired matrices differ: {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    if a.rows() == 0 {
        return Err(Error::Shape("no row pairs".into()));
    }
    Ok(())
}

/// `Σᵢ ‖W aᵢ − bᵢ‖²` over the row pairs.
pub fn pair_residual(w: &DenseMatrix, a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    (0..a.rows())
        .map(|i| {
            let wa = w.mul_vec(a.row(i));
            wa.iter()
                .zip(b.row(i))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
        })
        .sum()
}

/// Solves `min_W Σᵢ‖W aᵢ − bᵢ‖² + ridge·‖W‖²_F` over the row pairs of `a`, `b`.
pub fn least_squares(a: &DenseMatrix, b: &DenseMatrix, ridge: f64) -> Result<DenseMatrix> {
    check_pairs(a, b)?;
    if !(ridge >= 0.0) {
        return Err(Error::Config(format!("ridge must be >= 0, got {ridge}")));
    }
    let d = a.cols();
    let an = a.to_nalgebra();
    let bn = b.to_nalgebra();
    // W G = Bᵀ A with G = AᵀA + λI symmetric, so G Wᵀ = AᵀB.
    let mut gram = an.transpose() * &an;
    for i in 0..d {
        gram[(i, i)] += ridge;
    }
    let rhs = an.transpose() * &bn;

    let eig = gram.clone().symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(0.0_f64, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if max <= 0.0 || min <= 1e-13 * max {
        return Err(Error::Singular(format!(
            "normal matrix is singular (eigenvalue range {min:.3e}..{max:.3e}); use a positive ridge"
        )));
    }
    let chol = gram.cholesky().ok_or_else(|| {
        Error::Singular("normal matrix is not positive definite; use a positive ridge".into())
    })?;
    let wt = chol.solve(&rhs);
    Ok(DenseMatrix::from_nalgebra(&wt.transpose()))
}

/// Orthogonal map solving the Procrustes problem over the row pairs.
#[derive(Debug, Clone)]
pub struct Procrustes {
    pub w: DenseMatrix,
    /// Raised when the cross-covariance is rank deficient, so the solution
    /// is one of several valid orthogonal completions.
    pub degenerate: bool,
}

pub fn orthogonal_procrustes(a: &DenseMatrix, b: &DenseMatrix) -> Result<Procrustes> {
    check_pairs(a, b)?;
    let d = a.cols();
    if a.rows() < d {
        return Err(Error::Shape(format!(
            "procrustes needs at least {d} pairs, got {}",
            a.rows()
        )));
    }
    // maximize tr(Wᵀ M) with M = Σ bᵢ aᵢᵀ = BᵀA
    let m = b.to_nalgebra().transpose() * a.to_nalgebra();
    let svd = SVD::new(m, true, true);
    let u = svd.u.as_ref().expect("svd computed u");
    let vt = svd.v_t.as_ref().expect("svd computed v_t");
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let degenerate = smax <= 0.0 || smin <= 1e-12 * smax;
    Ok(Procrustes {
        w: DenseMatrix::from_nalgebra(&(u * vt)),
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        let expected = 32.0 / (14f64.sqrt() * 77f64.sqrt());
        assert_abs_diff_eq!(expected, 0.974631846, epsilon = 1e-9);
        assert_abs_diff_eq!(
            cosine(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]),
            expected,
            epsilon = 1e-12
        );
    }

    #[test]
    fn cosine_zero_norm_is_flagged() {
        let c = cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]);
        assert_eq!(c.value, 0.0);
        assert!(c.degenerate);
    }

    #[test]
    fn pca_rank_one_line() {
        let rows: Vec<[f64; 2]> = (-3..=3).map(|t| [t as f64 * 3.0, t as f64 * 4.0]).collect();
        let pca = pca_components(&DenseMatrix::from_rows(&rows).unwrap(), 1).unwrap();
        assert_abs_diff_eq!(pca.components.get(0, 0), 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(pca.components.get(1, 0), 0.8, epsilon = 1e-12);
        assert!(!pca.low_rank);
    }

    #[test]
    fn pca_flags_low_rank_and_completes_basis() {
        let rows: Vec<[f64; 3]> = (0..6).map(|t| [t as f64, 2.0 * t as f64, 0.0]).collect();
        let pca = pca_components(&DenseMatrix::from_rows(&rows).unwrap(), 2).unwrap();
        assert!(pca.low_rank);
        let c0 = pca.components.column(0);
        let c1 = pca.components.column(1);
        assert_abs_diff_eq!(dot(&c0, &c1), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(norm(&c1), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn pca_rejects_bad_shapes() {
        let m = DenseMatrix::zeros(2, 3);
        assert!(pca_components(&m, 3).is_err());
        assert!(pca_components(&m, 0).is_err());
        assert!(pca_components(&DenseMatrix::zeros(5, 2), 3).is_err());
    }

    #[test]
    fn least_squares_identity() {
        let a = DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, -1.0], [0.5, 0.25]]).unwrap();
        let w = least_squares(&a, &a, 0.0).unwrap();
        let eye = DenseMatrix::identity(2);
        for (x, y) in w.as_slice().iter().zip(eye.as_slice()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn least_squares_singular_needs_ridge() {
        let a = DenseMatrix::from_rows(&[[1.0, 2.0], [2.0, 4.0]]).unwrap();
        let err = least_squares(&a, &a, 0.0).unwrap_err();
        assert!(err.to_string().contains("ridge"), "{err}");
        assert!(least_squares(&a, &a, 1e-3).is_ok());
    }

    #[test]
    fn procrustes_identity_and_shape_guard() {
        let a = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap();
        let p = orthogonal_procrustes(&a, &a).unwrap();
        assert!(!p.degenerate);
        for (x, y) in p.w.as_slice().iter().zip(DenseMatrix::identity(2).as_slice()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        let short = DenseMatrix::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        assert!(orthogonal_procrustes(&short, &short).is_err());
    }

    #[test]
    fn matmul_and_transpose() {
        let a = DenseMatrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let at = a.transpose();
        let g = a.matmul(&at).unwrap();
        assert_eq!(g.as_slice(), &[14.0, 32.0, 32.0, 77.0]);
        assert!(a.matmul(&a).is_err());
    }
}
