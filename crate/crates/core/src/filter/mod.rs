//! Covariance propagation: Riccati recursion, analysis/forecast split, information filter,
//! aggregate matrices and the closed-form covariance.

mod aggregates;
mod factored;
mod sqrt;

pub use aggregates::{accumulate, closed_form_covariance, closed_form_information, Aggregates, ClosedForm};
pub use factored::FactoredClosedForm;
pub use sqrt::SqrtCovariance;

use nalgebra::DMatrix;

use crate::cone::{psd_factor, symmetrize, CovarianceMatrix, FACTOR_TRUNCATION};
use crate::error::{Error, Result};
use crate::models::ModelStep;

/// Condition number of a propagator above which a warning is reported.
pub const PROPAGATOR_COND_WARN: f64 = 1e12;
/// Condition number of `I + Theta_k P_0` above which the closed form is flagged.
pub const CLOSED_FORM_COND_WARN: f64 = 1e14;

/// `Omega = H^T R^{-1} H`, computed as `W^T W` with `W = L^{-1} H`, `R = L L^T`.
pub fn obs_precision(h: &DMatrix<f64>, r: &CovarianceMatrix) -> Result<CovarianceMatrix> {
    if r.dim() != h.nrows() {
        return Err(Error::invalid(format!(
            "observation covariance is {0}x{0}, operator has {1} rows",
            r.dim(),
            h.nrows()
        )));
    }
    if r.dim() == 0 {
        return Ok(CovarianceMatrix::zeros(h.ncols()));
    }
    let chol = r
        .matrix()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::invalid("observation covariance R is singular"))?;
    let w = chol
        .l()
        .solve_lower_triangular(h)
        .ok_or_else(|| Error::invalid("observation covariance R is singular"))?;
    Ok(CovarianceMatrix::from_computed(w.transpose() * w))
}

fn check_dims(a: &CovarianceMatrix, b: &CovarianceMatrix) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!("dimension mismatch: {} vs {}", a.dim(), b.dim())));
    }
    Ok(())
}

/// `X (I + X^T Omega X)^{-1} X^T` for a factor `X` of the prior covariance.
pub(crate) fn analysis_from_factor(x: &DMatrix<f64>, omega: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    let r = x.ncols();
    if r == 0 {
        return Ok(DMatrix::zeros(n, n));
    }
    let g = DMatrix::identity(r, r) + x.transpose() * omega * x;
    let chol = symmetrize(&g)
        .cholesky()
        .ok_or_else(|| Error::numerical("I + X^T Omega X is not positive definite"))?;
    let z = chol
        .l()
        .solve_lower_triangular(&x.transpose())
        .ok_or_else(|| Error::numerical("singular Cholesky factor in analysis"))?;
    Ok(z.transpose() * z)
}

/// `P^a = (I + P Omega)^{-1} P`, evaluated in the symmetric form
/// `X (I + X^T Omega X)^{-1} X^T` with `P = X X^T`.
///
/// The factor keeps eigenvalues of `P` above `1e-14` times the largest one, so
/// rounding noise outside the column space of `P` is not carried forward.
pub fn analysis_update(p: &CovarianceMatrix, omega: &CovarianceMatrix) -> Result<CovarianceMatrix> {
    check_dims(p, omega)?;
    if omega.matrix().iter().all(|&v| v == 0.0) {
        return Ok(p.clone());
    }
    let x = psd_factor(p.matrix(), FACTOR_TRUNCATION);
    let pa = analysis_from_factor(&x, omega.matrix())?;
    if pa.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("analysis covariance is not finite"));
    }
    Ok(CovarianceMatrix::from_computed(pa))
}

/// `M P^a M^T + Q`.
pub fn forecast_step(pa: &CovarianceMatrix, m: &DMatrix<f64>, q: &CovarianceMatrix) -> Result<CovarianceMatrix> {
    check_dims(pa, q)?;
    if m.nrows() != pa.dim() || m.ncols() != pa.dim() {
        return Err(Error::invalid("propagator dimension differs from covariance dimension"));
    }
    let p = m * pa.matrix() * m.transpose() + q.matrix();
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("forecast covariance is not finite"));
    }
    Ok(CovarianceMatrix::from_computed(p))
}

/// One Riccati step: analysis with the step's observation precision, then forecast.
pub fn riccati_step(p: &CovarianceMatrix, step: &ModelStep) -> Result<CovarianceMatrix> {
    let pa = analysis_update(p, step.precision())?;
    forecast_step(&pa, step.propagator(), step.model_noise())
}

pub(crate) fn invert_propagator(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::invalid("propagator must be square"));
    }
    let inv = m
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::invalid("propagator is singular"))?;
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("propagator is singular"));
    }
    Ok(inv)
}

/// Information-filter step `M^{-T} (P^{-1} + Omega) M^{-1}`.
pub fn information_step(pinv: &CovarianceMatrix, m: &DMatrix<f64>, omega: &CovarianceMatrix) -> Result<CovarianceMatrix> {
    check_dims(pinv, omega)?;
    if m.nrows() != pinv.dim() {
        return Err(Error::invalid("propagator dimension differs from covariance dimension"));
    }
    let minv = invert_propagator(m)?;
    Ok(CovarianceMatrix::from_computed(minv.transpose() * (pinv.matrix() + omega.matrix()) * &minv))
}
