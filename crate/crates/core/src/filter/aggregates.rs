use nalgebra::DMatrix;

use super::{invert_propagator, CLOSED_FORM_COND_WARN};
use crate::cone::{condition_number, CovarianceMatrix};
use crate::error::{Error, Result};
use crate::models::ModelStep;

/// Running resolvent, information, pulled-back information and controllability matrices.
#[derive(Clone, Debug)]
pub struct Aggregates {
    /// Step index `k`.
    pub k: usize,
    /// `M_{k:0}`.
    pub resolvent: DMatrix<f64>,
    /// `Gamma_k`, observation precision accumulated and propagated to `t_k`.
    pub gamma: CovarianceMatrix,
    /// `Theta_k = M_{k:0}^T Gamma_k M_{k:0}`, the same information pulled back to `t_0`.
    pub theta: CovarianceMatrix,
    /// `Xi_k`, model noise accumulated and propagated to `t_k`.
    pub xi: CovarianceMatrix,
    /// True while every accumulated model noise was zero.
    pub perfect: bool,
}

impl Aggregates {
    /// `M_{0:0} = I` and zero information and controllability.
    pub fn initial(n: usize) -> Self {
        Self {
            k: 0,
            resolvent: DMatrix::identity(n, n),
            gamma: CovarianceMatrix::zeros(n),
            theta: CovarianceMatrix::zeros(n),
            xi: CovarianceMatrix::zeros(n),
            perfect: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.resolvent.nrows()
    }
}

/// Advance the aggregates across one cycle (observation at `t_k`, propagation to `t_{k+1}`).
pub fn accumulate(agg: &Aggregates, step: &ModelStep) -> Result<Aggregates> {
    let n = agg.dim();
    if step.state_dim() != n {
        return Err(Error::invalid("step dimension differs from aggregates dimension"));
    }
    let m = step.propagator();
    let minv = invert_propagator(m)?;
    let omega = step.precision().matrix();
    let gamma = minv.transpose() * (agg.gamma.matrix() + omega) * &minv;
    let theta = agg.theta.matrix() + agg.resolvent.transpose() * omega * &agg.resolvent;
    let xi = m * agg.xi.matrix() * m.transpose() + step.model_noise().matrix();
    Ok(Aggregates {
        k: agg.k + 1,
        resolvent: m * &agg.resolvent,
        gamma: CovarianceMatrix::from_computed(gamma),
        theta: CovarianceMatrix::from_computed(theta),
        xi: CovarianceMatrix::from_computed(xi),
        perfect: agg.perfect && step.is_perfect(),
    })
}

/// A closed-form covariance with the conditioning of the matrix that was inverted.
#[derive(Clone, Debug)]
pub struct ClosedForm {
    pub covariance: CovarianceMatrix,
    /// 2-norm condition number of the inverted matrix.
    pub condition: f64,
    /// `condition` exceeded [`CLOSED_FORM_COND_WARN`].
    pub ill_conditioned: bool,
}

fn check_closed_form_inputs(p0: &CovarianceMatrix, agg: &Aggregates) -> Result<()> {
    if !agg.perfect {
        return Err(Error::invalid("closed form requires a perfect model (all Q = 0)"));
    }
    if p0.dim() != agg.dim() {
        return Err(Error::invalid("initial covariance dimension differs from aggregates dimension"));
    }
    Ok(())
}

/// `P_k = M_{k:0} P_0 [I + Theta_k P_0]^{-1} M_{k:0}^T`, valid for degenerate `P_0`.
pub fn closed_form_covariance(p0: &CovarianceMatrix, agg: &Aggregates) -> Result<ClosedForm> {
    check_closed_form_inputs(p0, agg)?;
    let n = agg.dim();
    let p = p0.matrix();
    // P0 [I + Theta P0]^{-1} = [I + P0 Theta]^{-1} P0
    let a = DMatrix::identity(n, n) + p * agg.theta.matrix();
    let condition = condition_number(&a);
    let inner = a
        .lu()
        .solve(p)
        .ok_or_else(|| Error::numerical_at(agg.k, "I + P0 Theta is singular"))?;
    let pk = &agg.resolvent * inner * agg.resolvent.transpose();
    Ok(ClosedForm {
        covariance: CovarianceMatrix::from_computed(pk),
        condition,
        ill_conditioned: condition > CLOSED_FORM_COND_WARN,
    })
}

/// `P_k = F [I + Gamma_k F]^{-1}` with the free forecast `F = M_{k:0} P_0 M_{k:0}^T`.
pub fn closed_form_information(p0: &CovarianceMatrix, agg: &Aggregates) -> Result<ClosedForm> {
    check_closed_form_inputs(p0, agg)?;
    let n = agg.dim();
    let f = &agg.resolvent * p0.matrix() * agg.resolvent.transpose();
    let a = DMatrix::identity(n, n) + &f * agg.gamma.matrix();
    let condition = condition_number(&a);
    let pk = a
        .lu()
        .solve(&f)
        .ok_or_else(|| Error::numerical_at(agg.k, "I + F Gamma is singular"))?;
    Ok(ClosedForm {
        covariance: CovarianceMatrix::from_computed(pk),
        condition,
        ill_conditioned: condition > CLOSED_FORM_COND_WARN,
    })
}
