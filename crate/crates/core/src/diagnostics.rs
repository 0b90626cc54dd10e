//! Measurements over filter traces: decay-rate fits, BLV projections, the asymptotic
//! sequence, pair distances, observability conditions and Loewner-bound audits.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cone::{
    graded_singular_values, psd_factor, qr_positive, relative_loewner_margin, spectral_norm_sym, symmetrize, CovarianceMatrix,
    FACTOR_TRUNCATION,
};
use crate::filter::SqrtCovariance;
use crate::models::ModelStep;
use crate::{Error, Result};

/// Eigenvalues at or below this value are left out of decay fits.
pub const DECAY_FLOOR: f64 = 1e-280;
/// Fraction of the run skipped at the start of a decay fit.
pub const DECAY_TRANSIENT: f64 = 0.2;
/// `Gamma_k` counts as invertible once its smallest eigenvalue reaches this value.
pub const INVERTIBLE_THRESHOLD: f64 = 1e-10;

/// Least-squares fit of `ln sigma_i^k` against `k` for one eigenvalue index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub index: usize,
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the fit in natural-log units.
    pub residual: f64,
    /// `-2 |lambda_i|`.
    pub reference: f64,
    pub points: usize,
}

impl DecayFit {
    pub fn relative_error(&self) -> f64 {
        ((self.slope - self.reference) / self.reference).abs()
    }
}

/// Decay fits for the stable indices, with indices that lacked usable data listed apart.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub fits: Vec<DecayFit>,
    /// Indices dropped because fewer than two eigenvalues in the window exceeded the floor.
    pub truncated: Vec<usize>,
}

/// Ordinary least squares `y = a + b x`, returning `(b, a, rms residual)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("a linear fit needs at least two paired points"));
    }
    let m = x.len() as f64;
    let mx = x.iter().sum::<f64>() / m;
    let my = y.iter().sum::<f64>() / m;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("a linear fit needs distinct abscissae"));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    Ok((slope, intercept, (rss / m).sqrt()))
}

/// Fit the decay rate of eigenvalues `n0..exponents.len()` over steps `window.0..=window.1`.
///
/// `trace[k]` holds the eigenvalues of the covariance at step `k`, descending.
pub fn eigen_decay_fit(trace: &[Vec<f64>], exponents: &[f64], n0: usize, window: (usize, usize)) -> Result<DecayReport> {
    let (lo, hi) = window;
    if lo >= hi || hi >= trace.len() {
        return Err(Error::invalid(format!("fit window {lo}..={hi} outside trace of length {}", trace.len())));
    }
    let mut report = DecayReport::default();
    for i in n0..exponents.len() {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (k, ev) in trace.iter().enumerate().take(hi + 1).skip(lo) {
            let v = *ev.get(i).ok_or_else(|| Error::invalid("eigenvalue trace is shorter than the spectrum"))?;
            if v > DECAY_FLOOR {
                xs.push(k as f64);
                ys.push(v.ln());
            }
        }
        if xs.len() < 2 {
            report.truncated.push(i);
            continue;
        }
        let (slope, intercept, residual) = linear_fit(&xs, &ys)?;
        report.fits.push(DecayFit {
            index: i,
            slope,
            intercept,
            residual,
            reference: -2.0 * exponents[i].abs(),
            points: xs.len(),
        });
    }
    Ok(report)
}

/// Largest excess of `ln sigma_i^k` over `ln sigma_1^0 + 2 lambda_i^k k` across the
/// supplied `(k, finite-time exponents)` checkpoints; non-positive when the bound holds.
pub fn decay_bound_excess(trace: &[Vec<f64>], finite: &[(usize, Vec<f64>)]) -> Result<f64> {
    let sigma10 = trace.first().and_then(|e| e.first()).copied().ok_or_else(|| Error::invalid("empty trace"))?;
    let mut worst = f64::NEG_INFINITY;
    for (k, lam) in finite {
        let ev = trace.get(*k).ok_or_else(|| Error::invalid(format!("checkpoint {k} outside trace")))?;
        for (s, l) in ev.iter().zip(lam) {
            if *s > DECAY_FLOOR {
                worst = worst.max(s.ln() - sigma10.ln() - 2.0 * l * *k as f64);
            }
        }
    }
    Ok(worst)
}

fn check_orthonormal(u: &DMatrix<f64>) -> Result<()> {
    let g = u.transpose() * u;
    let dev = (g - DMatrix::identity(u.ncols(), u.ncols())).amax();
    if dev > 1e-8 {
        return Err(Error::invalid(format!("basis is not orthonormal (deviation {dev:.2e})")));
    }
    Ok(())
}

/// `U^T P U` for an orthonormal basis `U`.
pub fn blv_projection(p: &CovarianceMatrix, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if u.nrows() != p.dim() {
        return Err(Error::invalid("basis and covariance dimensions differ"));
    }
    check_orthonormal(u)?;
    Ok(symmetrize(&(u.transpose() * p.matrix() * u)))
}

/// `||P u_i||` for each column `u_i` of `u`.
pub fn collapse_norms(p: &DMatrix<f64>, u: &DMatrix<f64>) -> Vec<f64> {
    let pu = p * u;
    pu.column_iter().map(|c| c.norm()).collect()
}

/// `S = C (C^T Gamma C)^{-1} C^T`.
pub fn asymptote(cplus: &DMatrix<f64>, gamma: &DMatrix<f64>) -> Result<CovarianceMatrix> {
    let inner = symmetrize(&(cplus.transpose() * gamma * cplus));
    let chol = inner
        .cholesky()
        .ok_or_else(|| Error::Unobservable("C^T Gamma C is not positive definite".into()))?;
    let z = chol
        .l()
        .solve_lower_triangular(&cplus.transpose())
        .ok_or_else(|| Error::Unobservable("singular Cholesky factor".into()))?;
    Ok(CovarianceMatrix::from_computed(z.transpose() * z))
}

/// `Gamma_k` restricted to the leading BLVs, `B_k = U_{+,k}^T Gamma_k U_{+,k}`.
///
/// With `M_{k+1} U_{+,k} = U_{+,k+1} R_{++}` this obeys
/// `B_{k+1} = R_{++}^{-T} (B_k + U_{+,k}^T Omega_k U_{+,k}) R_{++}^{-1}`,
/// which stays bounded while `Gamma_k` itself grows without bound along stable directions.
#[derive(Clone, Debug)]
pub struct AsymptoteTracker {
    restricted: DMatrix<f64>,
}

impl AsymptoteTracker {
    pub fn new(n0: usize) -> Self {
        Self { restricted: DMatrix::zeros(n0, n0) }
    }

    pub fn dim(&self) -> usize {
        self.restricted.nrows()
    }

    pub fn restricted(&self) -> &DMatrix<f64> {
        &self.restricted
    }

    /// Advance from `t_k` to `t_{k+1}` given the BLV frame `u` at `t_k` and the QR factor `r`
    /// of `M_{k+1} U_k`.
    pub fn push(&mut self, u: &DMatrix<f64>, r: &DMatrix<f64>, omega: &DMatrix<f64>) -> Result<()> {
        let n0 = self.dim();
        if n0 == 0 {
            return Ok(());
        }
        let up = u.columns(0, n0);
        let inner = &self.restricted + up.transpose() * omega * up;
        let rpp = r.view((0, 0), (n0, n0)).into_owned();
        let left = rpp
            .transpose()
            .solve_lower_triangular(&inner)
            .ok_or_else(|| Error::numerical("singular leading QR block"))?;
        let next = rpp
            .transpose()
            .solve_lower_triangular(&left.transpose())
            .ok_or_else(|| Error::numerical("singular leading QR block"))?;
        self.restricted = symmetrize(&next);
        Ok(())
    }

    /// `S_k = U_+ B_k^{-1} U_+^T`, equal to [`asymptote`] with any basis of the same span.
    pub fn asymptote(&self, u: &DMatrix<f64>) -> Result<CovarianceMatrix> {
        let n0 = self.dim();
        let up = u.columns(0, n0).into_owned();
        if n0 == 0 {
            return Ok(CovarianceMatrix::zeros(u.nrows()));
        }
        let chol = self
            .restricted
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Unobservable("restricted information is not positive definite".into()))?;
        let z = chol
            .l()
            .solve_lower_triangular(&up.transpose())
            .ok_or_else(|| Error::Unobservable("singular restricted information".into()))?;
        Ok(CovarianceMatrix::from_computed(z.transpose() * z))
    }

    /// Smallest eigenvalue of `C_+^T Gamma_k C_+` where `C_+ = U_+ T_{++}`.
    pub fn covariant_min_eigenvalue(&self, t_plus: &DMatrix<f64>) -> f64 {
        if self.dim() == 0 {
            return f64::INFINITY;
        }
        let inner = symmetrize(&(t_plus.transpose() * &self.restricted * t_plus));
        inner.symmetric_eigen().eigenvalues.min()
    }
}

/// Frobenius distance between matching entries of two traces.
pub fn pair_distance(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("traces have lengths {} and {}", a.len(), b.len())));
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            if x.shape() != y.shape() {
                return Err(Error::invalid("trace entries differ in shape"));
            }
            Ok((x - y).norm())
        })
        .collect()
}

/// `||P_k - P_{k-1}||_F` for `k >= 1`.
pub fn consecutive_distance(trace: &[DMatrix<f64>]) -> Vec<f64> {
    trace.windows(2).map(|w| (&w[1] - &w[0]).norm()).collect()
}

/// Observability and projection conditions of an initial factor against the Lyapunov bases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub n0: usize,
    pub rank_p0: usize,
    /// Numerical rank of `V_{+,0}^T X_0`.
    pub condition1_rank: usize,
    /// Smallest singular value of `V_{+,0}^T X_0`, relative to the largest.
    pub condition1_min_singular: f64,
    /// Smallest eigenvalue of `C_{+,k}^T Gamma_k C_{+,k}` per step.
    pub condition2: Vec<f64>,
    /// Smallest singular value of `Phi_k` per step; `None` when no neutral mode exists.
    pub condition3: Option<Vec<f64>>,
}

impl ConditionReport {
    pub fn condition1(&self) -> bool {
        self.condition1_rank == self.n0
    }

    /// Condition 2 judged on the last `fraction` of the run: the smallest eigenvalue stays
    /// above `eps`.
    pub fn condition2_holds(&self, fraction: f64, eps: f64) -> bool {
        let start = ((1.0 - fraction) * self.condition2.len() as f64) as usize;
        self.condition2[start..].iter().all(|&v| v > eps)
    }
}

/// `rank(V_{+,0}^T X_0)` at relative threshold `rel_tol`, and the relative smallest
/// singular value.
pub fn condition1(x0: &DMatrix<f64>, v0: &DMatrix<f64>, n0: usize, rel_tol: f64) -> (usize, f64) {
    if n0 == 0 || x0.ncols() == 0 {
        return (0, 0.0);
    }
    let proj = v0.columns(0, n0).transpose() * x0;
    let s = proj.singular_values();
    let max = s.max();
    if max == 0.0 {
        return (0, 0.0);
    }
    let rank = s.iter().filter(|&&v| v > rel_tol * max).count();
    let min = if s.len() < n0 { 0.0 } else { s.min() / max };
    (rank, min)
}

/// `Phi_k = Lhat^{-T} C_{0}^T Theta_k C_{0} Lhat^{-1}` over the neutral CLV columns.
///
/// With per-step stretches `s`, `Lhat_{k:0} = prod max(1, s)` and
/// `Lambda_{k:0} / Lhat_{k:0} = prod min(1, s)`, so
/// `Phi_{k+1} = m^{-1} (Phi_k + a_k c_k^T Omega_k c_k a_k) m^{-1}` with `m = max(1, s_{k+1})`,
/// `a_k = prod_{q <= k} min(1, s_q)`. Every factor stays bounded.
#[derive(Clone, Debug)]
pub struct NeutralObservability {
    neutral: Vec<usize>,
    phi: DMatrix<f64>,
    log_attenuation: DVector<f64>,
}

impl NeutralObservability {
    pub fn new(neutral: Vec<usize>) -> Self {
        let m = neutral.len();
        Self { neutral, phi: DMatrix::zeros(m, m), log_attenuation: DVector::zeros(m) }
    }

    pub fn is_vacuous(&self) -> bool {
        self.neutral.is_empty()
    }

    /// Advance with the CLVs `c` at `t_k`, the step's `Omega_k`, and the log stretches of the
    /// step from `t_k` to `t_{k+1}`. Returns the smallest singular value of `Phi_{k+1}`.
    pub fn push(&mut self, c: &DMatrix<f64>, omega: &DMatrix<f64>, log_stretch: &DVector<f64>) -> f64 {
        let m = self.neutral.len();
        if m == 0 {
            return f64::INFINITY;
        }
        let cn = DMatrix::from_fn(c.nrows(), m, |i, j| c[(i, self.neutral[j])]);
        let a = self.log_attenuation.map(f64::exp);
        let w = cn.transpose() * omega * &cn;
        let added = DMatrix::from_fn(m, m, |i, j| a[i] * w[(i, j)] * a[j]);
        let grow = DVector::from_fn(m, |j, _| log_stretch[self.neutral[j]].max(0.0).exp());
        let sum = &self.phi + added;
        self.phi = DMatrix::from_fn(m, m, |i, j| sum[(i, j)] / (grow[i] * grow[j]));
        for j in 0..m {
            self.log_attenuation[j] += log_stretch[self.neutral[j]].min(0.0);
        }
        self.phi.singular_values().min()
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }
}

/// Signed relative Loewner margins of the covariance bounds at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundMargins {
    pub k: usize,
    /// `min(margin(Q_k <= P_k), margin(P_k <= M P_0 M^T + Xi_k))`.
    pub bound0: f64,
    /// `P_k <= M_{k:0} P_0 M_{k:0}^T` (perfect model only).
    pub bound1: Option<f64>,
    /// `P_k <= Gamma_k^{-1}` once `Gamma_k` is invertible (perfect model only).
    pub bound2: Option<f64>,
    /// `P_k <= min(M P_0 M^T, Gamma_k^{-1})`: the smaller of both arms.
    pub bound3: Option<f64>,
}

/// Triangular factor `S` of the information matrix `Gamma_k = S^T S` before it becomes
/// invertible, its inverse afterwards.
#[derive(Clone, Debug)]
enum InverseInformation {
    Accumulating(DMatrix<f64>),
    Inverted(SqrtCovariance),
}

/// Tracks the free forecast `M_{k:0} P_0 M_{k:0}^T + Xi_k` and `Gamma_k^{-1}` alongside a
/// filter run and measures the Loewner bounds against each `P_k`.
///
/// The free forecast is held as `e^{scale} F` with `||F|| = 1`, since the unscaled matrix
/// overflows along unstable directions on long runs. Margins are relative to the larger of
/// the two compared norms. `Gamma_k` is accumulated as a triangular factor, whose graded
/// singular values give its smallest eigenvalue to high relative accuracy even though its
/// largest grows exponentially. `Gamma_k^{-1}` obeys the Riccati recursion with no prior
/// information, so once `Gamma_k` is invertible it is propagated in square-root covariance
/// form.
#[derive(Clone, Debug)]
pub struct BoundAuditor {
    k: usize,
    free: DMatrix<f64>,
    log_scale: f64,
    perfect: bool,
    information: InverseInformation,
}

impl BoundAuditor {
    pub fn new(p0: &CovarianceMatrix) -> Self {
        let n = p0.dim();
        let norm = spectral_norm_sym(p0.matrix());
        let (free, log_scale) = if norm > 0.0 { (p0.matrix() / norm, norm.ln()) } else { (p0.matrix().clone(), 0.0) };
        Self { k: 0, free, log_scale, perfect: true, information: InverseInformation::Accumulating(DMatrix::zeros(n, n)) }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Free forecast at the current step, rescaled; `None` if it does not fit in a double.
    pub fn free_forecast(&self) -> Option<DMatrix<f64>> {
        let s = self.log_scale.exp();
        s.is_finite().then(|| &self.free * s)
    }

    /// `Gamma_k^{-1}` if `Gamma_k` has become invertible.
    pub fn inverse_information(&self) -> Option<DMatrix<f64>> {
        match &self.information {
            InverseInformation::Inverted(g) => Some(g.dense()),
            InverseInformation::Accumulating(_) => None,
        }
    }

    /// Margins of the bounds for the forecast covariance `p` at the current step.
    pub fn audit(&self, p: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<BoundMargins> {
        let down = (-self.log_scale).exp();
        let upper = relative_loewner_margin(&(p * down), &self.free)?;
        let lower = if self.k == 0 { 0.0 } else { relative_loewner_margin(q, p)? };
        let bound0 = upper.min(lower);
        let (bound1, bound2, bound3) = if self.perfect {
            let g = self.inverse_information();
            let b2 = match &g {
                Some(g) => Some(relative_loewner_margin(p, g)?),
                None => None,
            };
            (Some(upper), b2, b2.map(|v| v.min(upper)))
        } else {
            (None, None, None)
        };
        Ok(BoundMargins { k: self.k, bound0, bound1, bound2, bound3 })
    }

    /// Advance by one cycle.
    pub fn push(&mut self, step: &ModelStep) -> Result<()> {
        let m = step.propagator();
        let q = step.model_noise().matrix();
        if !step.is_perfect() {
            self.perfect = false;
        }
        let mut next = m * &self.free * m.transpose();
        if !step.is_perfect() {
            next += q * (-self.log_scale).exp();
        }
        let norm = spectral_norm_sym(&next);
        if !norm.is_finite() {
            return Err(Error::numerical_at(self.k + 1, "free forecast is not finite"));
        }
        if norm > 0.0 {
            next /= norm;
            self.log_scale += norm.ln();
        }
        self.free = symmetrize(&next);
        if !self.perfect {
            self.k += 1;
            return Ok(());
        }
        let omega = step.precision();
        self.information = match std::mem::replace(&mut self.information, InverseInformation::Accumulating(DMatrix::zeros(0, 0))) {
            InverseInformation::Accumulating(s) => {
                let next = information_factor_step(&s, omega.matrix(), m).map_err(|e| e.at_step(self.k + 1))?;
                let sv = graded_singular_values(&next);
                let lo = sv.last().copied().unwrap_or(0.0);
                if lo * lo >= INVERTIBLE_THRESHOLD {
                    let n = next.nrows();
                    let x = next
                        .solve_upper_triangular(&DMatrix::identity(n, n))
                        .ok_or_else(|| Error::numerical_at(self.k + 1, "singular information factor"))?;
                    InverseInformation::Inverted(SqrtCovariance::from_factor(&x))
                } else {
                    InverseInformation::Accumulating(next)
                }
            }
            InverseInformation::Inverted(g) => InverseInformation::Inverted(g.cycle(step)?.1),
        };
        self.k += 1;
        Ok(())
    }
}

/// `S'` upper triangular with `S'^T S' = M^{-T} (S^T S + Omega) M^{-1}`.
fn information_factor_step(s: &DMatrix<f64>, omega: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = s.nrows();
    let f = psd_factor(omega, FACTOR_TRUNCATION);
    let mut stacked = DMatrix::zeros(n + f.ncols(), n);
    stacked.view_mut((0, 0), (n, n)).copy_from(s);
    stacked.view_mut((n, 0), (f.ncols(), n)).copy_from(&f.transpose());
    let (_, r) = qr_positive(&stacked);
    let r = r.rows(0, n).into_owned();
    // X = R M^{-1}, i.e. M^T X^T = R^T.
    let xt = m
        .transpose()
        .lu()
        .solve(&r.transpose())
        .ok_or_else(|| Error::numerical("propagator is singular"))?;
    if xt.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("information factor is not finite"));
    }
    Ok(qr_positive(&xt.transpose()).1)
}
