//! Symmetric positive semi-definite matrices and the Loewner order.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Relative Frobenius asymmetry accepted when validating a covariance input.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Relative asymmetry of a computed covariance above which it is flagged.
pub const ASYMMETRY_FLAG: f64 = 1e-8;
/// Negative eigenvalues down to `-PSD_TOL * max(lambda_max, 1)` are accepted as rounding.
pub const PSD_TOL: f64 = 1e-10;
/// Default eigenvalue threshold for numerical rank.
pub const RANK_THRESHOLD: f64 = 1e-10;
/// Eigenvalues below this fraction of the largest are dropped when factoring `P = X X^T`.
pub const FACTOR_TRUNCATION: f64 = 1e-14;

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// `||A - A^T||_F / ||A||_F`, zero for the zero matrix.
pub fn relative_asymmetry(a: &DMatrix<f64>) -> f64 {
    let norm = a.norm();
    if norm == 0.0 {
        return 0.0;
    }
    (a - a.transpose()).norm() / norm
}

/// `||A - B||_F / max(||B||_F, floor)`.
pub fn relative_distance(a: &DMatrix<f64>, b: &DMatrix<f64>, floor: f64) -> f64 {
    (a - b).norm() / b.norm().max(floor)
}

fn check_square(a: &DMatrix<f64>, what: &str) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::invalid(format!("{what} must be square, got {}x{}", a.nrows(), a.ncols())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what} has non-finite entries")));
    }
    Ok(())
}

/// A symmetric positive semi-definite matrix.
///
/// Construction through [`CovarianceMatrix::new`] validates symmetry and semi-definiteness.
/// Matrices produced by the filter operations are symmetrized on output and keep the
/// relative asymmetry they had before symmetrization, so drift can be detected.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceMatrix {
    m: DMatrix<f64>,
    asymmetry: f64,
}

impl CovarianceMatrix {
    /// Validate and wrap `m`.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        check_square(&m, "covariance")?;
        let asym = relative_asymmetry(&m);
        if asym > SYMMETRY_TOL {
            return Err(Error::invalid(format!("covariance is not symmetric (relative asymmetry {asym:.3e})")));
        }
        let m = symmetrize(&m);
        if m.nrows() > 0 {
            let eig = m.clone().symmetric_eigen();
            let max = eig.eigenvalues.max();
            let min = eig.eigenvalues.min();
            if min < -PSD_TOL * max.max(1.0) {
                return Err(Error::invalid(format!("covariance is not positive semi-definite (min eigenvalue {min:.3e})")));
            }
        }
        Ok(Self { m, asymmetry: asym })
    }

    /// Wrap a computed matrix: symmetrize and record its asymmetry without a PSD check.
    pub fn from_computed(m: DMatrix<f64>) -> Self {
        let asymmetry = relative_asymmetry(&m);
        Self { m: symmetrize(&m), asymmetry }
    }

    pub fn identity(n: usize) -> Self {
        Self { m: DMatrix::identity(n, n), asymmetry: 0.0 }
    }

    pub fn zeros(n: usize) -> Self {
        Self { m: DMatrix::zeros(n, n), asymmetry: 0.0 }
    }

    /// `X X^T`.
    pub fn from_factor(x: &DMatrix<f64>) -> Self {
        Self::from_computed(x * x.transpose())
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.m
    }

    /// Relative asymmetry before symmetrization.
    pub fn asymmetry(&self) -> f64 {
        self.asymmetry
    }

    /// True when the pre-symmetrization asymmetry exceeded [`ASYMMETRY_FLAG`].
    pub fn asymmetry_flagged(&self) -> bool {
        self.asymmetry > ASYMMETRY_FLAG
    }
}

/// Eigenvalues in descending order with matching orthonormal eigenvector columns.
#[derive(Clone, Debug)]
pub struct EigenDecomposition {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl EigenDecomposition {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let v = &self.eigenvectors;
        v * DMatrix::from_diagonal(&self.eigenvalues) * v.transpose()
    }
}

/// Symmetric eigendecomposition, eigenvalues sorted descending.
///
/// Fails when `a` is not square, has non-finite entries or is asymmetric beyond
/// [`SYMMETRY_TOL`] in relative Frobenius norm.
pub fn sym_eig(a: &DMatrix<f64>) -> Result<EigenDecomposition> {
    check_square(a, "matrix")?;
    let asym = relative_asymmetry(a);
    if asym > SYMMETRY_TOL {
        return Err(Error::invalid(format!("matrix is not symmetric (relative asymmetry {asym:.3e})")));
    }
    Ok(sym_eig_unchecked(&symmetrize(a)))
}

pub(crate) fn sym_eig_unchecked(a: &DMatrix<f64>) -> EigenDecomposition {
    let n = a.nrows();
    let eig = a.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    EigenDecomposition { eigenvalues, eigenvectors }
}

fn check_same_shape(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!("dimension mismatch: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Smallest eigenvalue of `B - A`; non-negative exactly when `A <= B` in the Loewner order.
pub fn loewner_margin(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    check_same_shape(a, b)?;
    let diff = b - a;
    check_square(&diff, "matrix")?;
    if diff.nrows() == 0 {
        return Ok(0.0);
    }
    Ok(symmetrize(&diff).symmetric_eigen().eigenvalues.min())
}

/// [`loewner_margin`] divided by `max(||A||_2, ||B||_2)`, zero when both vanish.
pub fn relative_loewner_margin(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let margin = loewner_margin(a, b)?;
    let scale = spectral_norm_sym(a).max(spectral_norm_sym(b));
    Ok(if scale > 0.0 { margin / scale } else { margin })
}

/// Largest absolute eigenvalue of the symmetric part of `a`.
pub fn spectral_norm_sym(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    symmetrize(a).symmetric_eigen().eigenvalues.amax()
}

/// `A <= B` up to `tol`: every eigenvalue of `B - A` is at least `-tol`.
pub fn loewner_leq(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> Result<bool> {
    Ok(loewner_margin(a, b)? >= -tol)
}

/// Number of eigenvalues strictly above `threshold`.
pub fn numerical_rank(a: &DMatrix<f64>, threshold: f64) -> Result<usize> {
    if !(threshold > 0.0) {
        return Err(Error::invalid(format!("rank threshold must be positive, got {threshold}")));
    }
    let eig = sym_eig(a)?;
    Ok(eig.eigenvalues.iter().filter(|&&l| l > threshold).count())
}

/// Matrix of independent standard normal entries, filled row by row.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    DMatrix::from_row_slice(rows, cols, &data)
}

/// Random `n x rank` factor with standard normal entries.
pub fn random_factor<R: Rng + ?Sized>(rng: &mut R, n: usize, rank: usize) -> Result<DMatrix<f64>> {
    if n == 0 || rank > n {
        return Err(Error::invalid(format!("random factor needs 0 <= rank <= n and n > 0, got n={n}, rank={rank}")));
    }
    Ok(standard_normal(rng, n, rank))
}

/// `X X^T` with `X` an `n x rank` standard normal matrix drawn from `rng`.
pub fn random_spd_with<R: Rng + ?Sized>(rng: &mut R, n: usize, rank: usize) -> Result<CovarianceMatrix> {
    if rank == 0 {
        return Err(Error::invalid("random covariance needs rank >= 1"));
    }
    Ok(CovarianceMatrix::from_factor(&random_factor(rng, n, rank)?))
}

/// Seeded random positive semi-definite matrix of rank `rank` (almost surely).
pub fn random_spd(n: usize, rank: usize, seed: u64) -> Result<CovarianceMatrix> {
    let mut rng = crate::rng::seeded(seed, crate::rng::Stream::Matrix);
    random_spd_with(&mut rng, n, rank)
}

/// Factor `P = X X^T` from the eigendecomposition, keeping eigenvalues above
/// `rel_tol * lambda_max`. The columns of `X` are orthogonal, ordered by decreasing variance.
pub fn psd_factor(p: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = p.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = sym_eig_unchecked(&symmetrize(p));
    let max = eig.eigenvalues[0];
    if !(max > 0.0) {
        return DMatrix::zeros(n, 0);
    }
    let cut = rel_tol * max;
    let r = eig.eigenvalues.iter().take_while(|&&l| l > cut).count();
    let mut x = eig.eigenvectors.columns(0, r).into_owned();
    for j in 0..r {
        let s = eig.eigenvalues[j].sqrt();
        x.column_mut(j).scale_mut(s);
    }
    x
}

/// Thin QR factorization with non-negative diagonal in `R`.
pub fn qr_positive(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let qr = a.clone().qr();
    let mut q = qr.q();
    let mut r = qr.r();
    for i in 0..r.nrows() {
        if r[(i, i)] < 0.0 {
            r.row_mut(i).neg_mut();
            q.column_mut(i).neg_mut();
        }
    }
    (q, r)
}

/// Factor a square `A = T V` with `T` upper triangular (non-negative diagonal) and `V`
/// orthogonal. Householder QR on the reversed transpose keeps the factorization
/// backward stable row by row, which preserves rows of very different scale.
pub fn rq_upper(a: &DMatrix<f64>) -> DMatrix<f64> {
    let r = a.nrows();
    let mut b = DMatrix::zeros(a.ncols(), r);
    for i in 0..r {
        b.set_column(i, &a.row(r - 1 - i).transpose());
    }
    let rr = b.qr().r();
    let mut t = DMatrix::zeros(r, r);
    for i in 0..r {
        for j in 0..r {
            t[(i, j)] = rr[(r - 1 - j, r - 1 - i)];
        }
    }
    for j in 0..r {
        if t[(j, j)] < 0.0 {
            t.column_mut(j).neg_mut();
        }
    }
    t
}

/// Singular values of `a`, descending, by one-sided Jacobi on the rows of `a`.
///
/// For row-graded triangular factors this resolves small singular values to high
/// relative accuracy, far below `eps * sigma_max`.
pub fn graded_singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    let w = a.transpose();
    let rows = w.nrows();
    let m = w.ncols();
    let mut data: Vec<f64> = w.as_slice().to_vec();
    let mut norms: Vec<f64> = data.chunks(rows.max(1)).map(|c| c.iter().map(|v| v * v).sum()).collect();
    if rows == 0 {
        return vec![0.0; m];
    }
    let tol = rows as f64 * f64::EPSILON;
    for _sweep in 0..80 {
        let mut rotated = false;
        for i in 0..m {
            for j in (i + 1)..m {
                let (ni, nj) = (norms[i], norms[j]);
                // Squared norms near the subnormal range are too coarse for the rotation to
                // converge; such columns are left as they are.
                if ni.min(nj) < 1e-290 {
                    continue;
                }
                let scale = ni.sqrt() * nj.sqrt();
                let (head, tail) = data.split_at_mut(j * rows);
                let ci = &mut head[i * rows..(i + 1) * rows];
                let cj = &mut tail[..rows];
                let g: f64 = ci.iter().zip(cj.iter()).map(|(x, y)| x * y).sum();
                if g.abs() <= tol * scale {
                    continue;
                }
                rotated = true;
                let zeta = (nj - ni) / (2.0 * g);
                let t = if zeta == 0.0 { 1.0 } else { zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt()) };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (mut si, mut sj) = (0.0, 0.0);
                for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
                    let (wi, wj) = (*x, *y);
                    *x = c * wi - s * wj;
                    *y = s * wi + c * wj;
                    si += *x * *x;
                    sj += *y * *y;
                }
                norms[i] = si;
                norms[j] = sj;
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = norms.iter().map(|n| n.sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Inverse of a symmetric positive definite matrix by Cholesky, symmetrized.
pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = symmetrize(a)
        .cholesky()
        .ok_or_else(|| Error::numerical("matrix is not numerically positive definite"))?;
    Ok(symmetrize(&chol.inverse()))
}

/// 2-norm condition number from the singular values; infinite when singular.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 1.0;
    }
    let sv = a.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// `||A (I + B A)^{-1} - (I + A B)^{-1} A||_F` for `A` (`n x m`) and `B` (`m x n`), the
/// residual of the matrix shift identity.
pub fn shift_lemma_residual(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let (n, m) = a.shape();
    if b.shape() != (m, n) {
        return Err(Error::invalid(format!("shift identity needs B of shape {m}x{n}, got {:?}", b.shape())));
    }
    let fail = || Error::numerical("singular matrix in shift identity");
    let small = (DMatrix::identity(m, m) + b * a).lu().solve(&DMatrix::identity(m, m)).ok_or_else(fail)?;
    let large = (DMatrix::identity(n, n) + a * b).lu().solve(a).ok_or_else(fail)?;
    Ok((a * small - large).norm())
}
