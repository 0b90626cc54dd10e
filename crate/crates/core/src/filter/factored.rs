use nalgebra::DMatrix;

use crate::cone::{psd_factor, qr_positive, CovarianceMatrix, FACTOR_TRUNCATION};
use crate::error::{Error, Result};
use crate::models::ModelStep;

/// Closed-form covariance `M_{k:0} P_0 [I + Theta_k P_0]^{-1} M_{k:0}^T` evaluated in an
/// orthonormal frame of `M_{k:0} Im(P_0)`.
///
/// With `P_0 = X_0 X_0^T` and `M_{k:0} X_0 = Q_k T_k`, the formula becomes
/// `Q_k J_k^{-1} Q_k^T` where
/// `J_k = T_k^{-T} T_k^{-1} + sum_{l<k} (R_{k:l})^{-T} Q_l^T Omega_l Q_l (R_{k:l})^{-1}`
/// and `R_{k:l} = R_k ... R_{l+1}` are the triangular factors of the frame updates.
/// The resolvent and `Theta_k` are never formed, so the result stays accurate when
/// `M_{k:0}` is too ill-conditioned for the dense formula.
#[derive(Clone, Debug)]
pub struct FactoredClosedForm {
    frame: DMatrix<f64>,
    t0: DMatrix<f64>,
    r_factors: Vec<DMatrix<f64>>,
    projected: Vec<DMatrix<f64>>,
    initial: CovarianceMatrix,
}

impl FactoredClosedForm {
    pub fn new(p0: &CovarianceMatrix) -> Result<Self> {
        let mut cf = Self::from_factor(&psd_factor(p0.matrix(), FACTOR_TRUNCATION))?;
        cf.initial = p0.clone();
        Ok(cf)
    }

    /// Start from `P_0 = X_0 X_0^T` with `X_0` of full column rank.
    pub fn from_factor(x0: &DMatrix<f64>) -> Result<Self> {
        let (frame, t0) = qr_positive(x0);
        let r = t0.nrows();
        for i in 0..r {
            if !(t0[(i, i)] > 1e-14 * t0[(0, 0)]) {
                return Err(Error::invalid("initial factor is not of full column rank"));
            }
        }
        let initial = CovarianceMatrix::from_factor(x0);
        Ok(Self { frame, t0, r_factors: Vec::new(), projected: Vec::new(), initial })
    }

    /// Current step index `k`.
    pub fn k(&self) -> usize {
        self.r_factors.len()
    }

    /// Absorb one cycle: record `Q_k^T Omega_k Q_k`, then re-orthonormalize `M_{k+1} Q_k`.
    pub fn push(&mut self, step: &ModelStep) -> Result<()> {
        if step.state_dim() != self.frame.nrows() {
            return Err(Error::invalid("step dimension differs from covariance dimension"));
        }
        let omega = step.precision().matrix();
        self.projected.push(self.frame.transpose() * omega * &self.frame);
        let (q, r) = qr_positive(&(step.propagator() * &self.frame));
        self.frame = q;
        self.r_factors.push(r);
        Ok(())
    }

    /// `P_k` at the current step; `P_0` is returned as given.
    pub fn covariance(&self) -> Result<CovarianceMatrix> {
        let k = self.k();
        if k == 0 {
            return Ok(self.initial.clone());
        }
        let fail = || Error::numerical_at(k, "singular triangular factor in closed form");
        let r = self.t0.nrows();
        let mut j = DMatrix::zeros(r, r);
        let mut ainv = DMatrix::identity(r, r);
        for l in (0..k).rev() {
            ainv = self.r_factors[l].solve_upper_triangular(&ainv).ok_or_else(fail)?;
            j += ainv.transpose() * &self.projected[l] * &ainv;
        }
        let tinv = self.t0.solve_upper_triangular(&ainv).ok_or_else(fail)?;
        j += tinv.transpose() * &tinv;
        let chol = crate::cone::symmetrize(&j)
            .cholesky()
            .ok_or_else(|| Error::numerical_at(k, "closed-form information matrix is not positive definite"))?;
        let z = chol.l().solve_lower_triangular(&self.frame.transpose()).ok_or_else(fail)?;
        let p = z.transpose() * z;
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical_at(k, "closed-form covariance is not finite"));
        }
        Ok(CovarianceMatrix::from_computed(p))
    }
}
