use nalgebra::DMatrix;

use crate::cone::{graded_singular_values, psd_factor, qr_positive, rq_upper, symmetrize, CovarianceMatrix, FACTOR_TRUNCATION};
use crate::error::{Error, Result};
use crate::models::ModelStep;

/// Covariance held as `P = Q T T^T Q^T` with `Q` (`n x r`) orthonormal and `T` upper
/// triangular.
///
/// Forecasts re-orthonormalize `M Q` and fold the triangular factor into `T`; analyses
/// replace `T` by the triangular factor of `T (I + T^T Q^T Omega Q T)^{-1/2}`. Rows of
/// `T` then carry the growth or decay of each direction separately, so eigenvalues many
/// orders of magnitude below the largest are still resolved. The rank of `P` is fixed
/// by `r`.
#[derive(Clone, Debug)]
pub struct SqrtCovariance {
    frame: DMatrix<f64>,
    factor: DMatrix<f64>,
}

impl SqrtCovariance {
    /// From a factor `X` with `P = X X^T`.
    pub fn from_factor(x: &DMatrix<f64>) -> Self {
        let (frame, factor) = qr_positive(x);
        Self { frame, factor }
    }

    pub fn from_covariance(p: &CovarianceMatrix) -> Self {
        Self::from_factor(&psd_factor(p.matrix(), FACTOR_TRUNCATION))
    }

    pub fn dim(&self) -> usize {
        self.frame.nrows()
    }

    /// Number of columns of the frame, an upper bound on the rank.
    pub fn width(&self) -> usize {
        self.frame.ncols()
    }

    pub fn frame(&self) -> &DMatrix<f64> {
        &self.frame
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    /// Analysis with observation precision `omega`.
    pub fn analysis(&self, omega: &DMatrix<f64>) -> Result<Self> {
        let r = self.width();
        if r == 0 {
            return Ok(self.clone());
        }
        let s = self.frame.transpose() * omega * &self.frame;
        let g = DMatrix::identity(r, r) + self.factor.transpose() * s * &self.factor;
        let chol = symmetrize(&g)
            .cholesky()
            .ok_or_else(|| Error::numerical("I + T^T Omega T is not positive definite"))?;
        // A = T L^{-T}, so A A^T = T G^{-1} T^T.
        let a = chol
            .l()
            .solve_lower_triangular(&self.factor.transpose())
            .ok_or_else(|| Error::numerical("singular Cholesky factor in analysis"))?
            .transpose();
        Ok(Self { frame: self.frame.clone(), factor: rq_upper(&a) })
    }

    /// Analysis with observations `(H, R)` given `H` and the lower Cholesky factor of `R`.
    ///
    /// Triangularizes the array `[[R^{1/2}, H Q T], [0, T]]` by an orthogonal transformation
    /// from the right; the trailing block of the result is a factor of the analysis in the
    /// frame `Q`. Neither `Omega` nor `H P H^T + R` is formed, so a nearly singular `R` costs
    /// no accuracy.
    pub fn assimilate(&self, h: &DMatrix<f64>, r_sqrt: &DMatrix<f64>) -> Result<Self> {
        let r = self.width();
        let d = h.nrows();
        if r == 0 || d == 0 {
            return Ok(self.clone());
        }
        if h.ncols() != self.dim() || r_sqrt.shape() != (d, d) {
            return Err(Error::invalid("observation operator or noise factor has the wrong shape"));
        }
        let mut pre = DMatrix::zeros(d + r, d + r);
        pre.view_mut((0, 0), (d, d)).copy_from(r_sqrt);
        pre.view_mut((0, d), (d, r)).copy_from(&(h * &self.frame * &self.factor));
        pre.view_mut((d, d), (r, r)).copy_from(&self.factor);
        // Householder QR of pre^T acts on the rows of pre one at a time, so rows of
        // very different scale keep their own relative accuracy.
        let w = pre.transpose().qr().r();
        let z = w.view((d, d), (r, r)).transpose();
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("square-root analysis factor is not finite"));
        }
        Ok(Self { frame: self.frame.clone(), factor: rq_upper(&z) })
    }

    /// Forecast through `m` (perfect model).
    pub fn forecast(&self, m: &DMatrix<f64>) -> Result<Self> {
        if self.width() == 0 {
            return Ok(self.clone());
        }
        let (frame, r) = qr_positive(&(m * &self.frame));
        let factor = r * &self.factor;
        if factor.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("square-root forecast factor is not finite"));
        }
        Ok(Self { frame, factor })
    }

    /// Analysis followed by forecast with a perfect-model step.
    pub fn cycle(&self, step: &ModelStep) -> Result<(Self, Self)> {
        if !step.is_perfect() {
            return Err(Error::invalid("square-root propagation supports perfect-model steps only"));
        }
        let pa = if step.obs_dim() > 0 && step.obs_sqrt().nrows() == step.obs_dim() {
            self.assimilate(step.obs_operator(), step.obs_sqrt())?
        } else {
            self.analysis(step.precision().matrix())?
        };
        let next = pa.forecast(step.propagator())?;
        Ok((pa, next))
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let y = &self.frame * &self.factor;
        symmetrize(&(&y * y.transpose()))
    }

    pub fn to_covariance(&self) -> CovarianceMatrix {
        CovarianceMatrix::from_computed(self.dense())
    }

    /// Eigenvalues of `P`, descending, padded with zeros to length `n`.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = graded_singular_values(&self.factor).iter().map(|s| s * s).collect();
        ev.resize(self.dim(), 0.0);
        ev
    }

    /// Number of eigenvalues above `threshold`.
    pub fn rank(&self, threshold: f64) -> usize {
        self.eigenvalues().iter().filter(|&&l| l > threshold).count()
    }
}
