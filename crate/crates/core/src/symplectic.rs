//! Covariance propagation through linear symplectic blocks, and the discrete Lyapunov
//! (Stein) equation for autonomous systems. Both serve as oracles for the Riccati route.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::cone::{condition_number, psd_factor, qr_positive, relative_distance, CovarianceMatrix, FACTOR_TRUNCATION};
use crate::error::{Error, Result};
use crate::filter::invert_propagator;
use crate::models::ModelStep;

/// `J = [[0, I], [-I, 0]]`.
pub fn symplectic_unit(n: usize) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        j[(i, n + i)] = 1.0;
        j[(n + i, i)] = -1.0;
    }
    j
}

/// `||Z^{-1} + J Z^T J||_F / ||Z||_F`; zero for a symplectic matrix.
pub fn symplectic_defect(z: &DMatrix<f64>) -> Result<f64> {
    let n2 = z.nrows();
    if n2 % 2 != 0 || z.ncols() != n2 {
        return Err(Error::invalid("symplectic matrix must be 2n x 2n"));
    }
    let j = symplectic_unit(n2 / 2);
    let zinv = z.clone().try_inverse().ok_or_else(|| Error::numerical("block is singular"))?;
    Ok((zinv + &j * z.transpose() * &j).norm() / z.norm())
}

/// One step of the Hamiltonian form of the Riccati recursion:
/// `Z = [[A, B], [C, D]]` with `A = M + Q M^{-T} Omega`, `B = Q M^{-T}`,
/// `C = M^{-T} Omega`, `D = M^{-T}`.
#[derive(Clone, Debug)]
pub struct SymplecticBlock {
    z: DMatrix<f64>,
}

impl SymplecticBlock {
    pub fn n(&self) -> usize {
        self.z.nrows() / 2
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn a(&self) -> DMatrix<f64> {
        let n = self.n();
        self.z.view((0, 0), (n, n)).into_owned()
    }

    pub fn b(&self) -> DMatrix<f64> {
        let n = self.n();
        self.z.view((0, n), (n, n)).into_owned()
    }

    pub fn c(&self) -> DMatrix<f64> {
        let n = self.n();
        self.z.view((n, 0), (n, n)).into_owned()
    }

    pub fn d(&self) -> DMatrix<f64> {
        let n = self.n();
        self.z.view((n, n), (n, n)).into_owned()
    }

    pub fn defect(&self) -> Result<f64> {
        symplectic_defect(&self.z)
    }
}

pub fn build_block(m: &DMatrix<f64>, omega: &CovarianceMatrix, q: &CovarianceMatrix) -> Result<SymplecticBlock> {
    let n = m.nrows();
    if omega.dim() != n || q.dim() != n {
        return Err(Error::invalid("block inputs have inconsistent dimensions"));
    }
    let mit = invert_propagator(m)?.transpose();
    let c = &mit * omega.matrix();
    let b = q.matrix() * &mit;
    let a = m + &b * omega.matrix();
    let mut z = DMatrix::zeros(2 * n, 2 * n);
    z.view_mut((0, 0), (n, n)).copy_from(&a);
    z.view_mut((0, n), (n, n)).copy_from(&b);
    z.view_mut((n, 0), (n, n)).copy_from(&c);
    z.view_mut((n, n), (n, n)).copy_from(&mit);
    Ok(SymplecticBlock { z })
}

/// Block for one assimilation cycle (`Omega_k`, then `M_{k+1}`, `Q_{k+1}`).
pub fn block_from_step(step: &ModelStep) -> Result<SymplecticBlock> {
    build_block(step.propagator(), step.precision(), step.model_noise())
}

/// Stacked pair `W = (X; Y)` representing a covariance through `P = X Y^{-1}`.
///
/// A state may also be thin (`n x r`, `r < n`); it then represents the rank-`r`
/// covariance `X (Y^T X)^{-1} X^T`, which equals `X Y^{-1}` whenever `Y` is square.
#[derive(Clone, Debug)]
pub struct RatioState {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
}

impl RatioState {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if x.shape() != y.shape() || x.ncols() > x.nrows() {
            return Err(Error::invalid("ratio state blocks must share an n x r shape with r <= n"));
        }
        Ok(Self { x, y })
    }

    /// `W_0 = (P_0; I)`.
    pub fn seeded(p0: &CovarianceMatrix) -> Self {
        let n = p0.dim();
        Self { x: p0.matrix().clone(), y: DMatrix::identity(n, n) }
    }

    /// Thin seed `(X_0; X_0 (X_0^T X_0)^{-1})` for `P_0 = X_0 X_0^T`.
    pub fn thin(p0: &CovarianceMatrix) -> Result<Self> {
        Self::from_factor(&psd_factor(p0.matrix(), FACTOR_TRUNCATION))
    }

    pub fn from_factor(x0: &DMatrix<f64>) -> Result<Self> {
        let gram = x0.transpose() * x0;
        let ginv = gram
            .cholesky()
            .ok_or_else(|| Error::invalid("initial factor is not of full column rank"))?
            .inverse();
        Ok(Self { x: x0.clone(), y: x0 * ginv })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn is_square(&self) -> bool {
        self.x.nrows() == self.x.ncols()
    }

    pub fn stacked(&self) -> DMatrix<f64> {
        let (n, r) = self.x.shape();
        let mut w = DMatrix::zeros(2 * n, r);
        w.view_mut((0, 0), (n, r)).copy_from(&self.x);
        w.view_mut((n, 0), (n, r)).copy_from(&self.y);
        w
    }

    fn from_stacked(w: DMatrix<f64>) -> Self {
        let n = w.nrows() / 2;
        let r = w.ncols();
        Self { x: w.view((0, 0), (n, r)).into_owned(), y: w.view((n, 0), (n, r)).into_owned() }
    }

    /// `W -> Z W`.
    pub fn apply(&self, block: &SymplecticBlock) -> Result<Self> {
        if block.n() != self.x.nrows() {
            return Err(Error::invalid("block dimension differs from state dimension"));
        }
        Ok(Self::from_stacked(block.matrix() * self.stacked()))
    }

    /// `W -> W G`; leaves the represented covariance unchanged.
    pub fn right_multiply(&self, g: &DMatrix<f64>) -> Result<Self> {
        if g.nrows() != self.x.ncols() || g.ncols() != self.x.ncols() {
            return Err(Error::invalid("right factor must be r x r"));
        }
        Ok(Self { x: &self.x * g, y: &self.y * g })
    }

    /// The represented covariance, symmetrized.
    pub fn covariance(&self) -> Result<CovarianceMatrix> {
        let p = if self.is_square() {
            let z = self
                .y
                .transpose()
                .lu()
                .solve(&self.x.transpose())
                .ok_or_else(|| Error::numerical("Y is singular"))?;
            z.transpose()
        } else {
            let s = self.y.transpose() * &self.x;
            let inner = s.lu().solve(&self.x.transpose()).ok_or_else(|| Error::numerical("Y^T X is singular"))?;
            &self.x * inner
        };
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("ratio covariance is not finite"));
        }
        Ok(CovarianceMatrix::from_computed(p))
    }

    fn reset_y(&self, step: usize) -> Result<Self> {
        if !self.is_square() {
            return Err(Error::invalid("resetting Y requires a square ratio state"));
        }
        let cond = condition_number(&self.y);
        if !(cond < 1e14) {
            return Err(Error::numerical_at(step, format!("Y is numerically singular (condition {cond:.3e})")));
        }
        let xt = self
            .y
            .transpose()
            .lu()
            .solve(&self.x.transpose())
            .ok_or_else(|| Error::numerical_at(step, "Y is singular"))?;
        let n = self.y.nrows();
        Ok(Self { x: xt.transpose(), y: DMatrix::identity(n, n) })
    }

    fn orthonormalize(&self, step: usize) -> Result<Self> {
        let (q, t) = qr_positive(&self.x);
        let y = t
            .transpose()
            .solve_lower_triangular(&self.y.transpose())
            .ok_or_else(|| Error::numerical_at(step, "X lost column rank"))?
            .transpose();
        if self.is_square() {
            return Ok(Self { x: q, y });
        }
        // Only Y^T X enters the thin ratio; the part of Y outside Im X is dropped before
        // the expanding M^{-T} blocks can inflate it.
        let s = q.transpose() * &y;
        Ok(Self { y: &q * s, x: q })
    }

    fn orthonormalize_stacked(&self, step: usize) -> Result<Self> {
        let w = if self.is_square() {
            self.stacked()
        } else {
            let (q, _) = qr_positive(&self.x);
            let y = &q * (q.transpose() * &self.y);
            Self { x: self.x.clone(), y }.stacked()
        };
        let (q, t) = qr_positive(&w);
        if t.diagonal().iter().any(|&v| !(v > 0.0)) {
            return Err(Error::numerical_at(step, "stacked state lost column rank"));
        }
        Ok(Self::from_stacked(q))
    }
}

/// How the stacked state is renormalized during propagation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Recondition {
    /// Right-multiply by `Y^{-1}` so that `Y = I` (square states only).
    ResetY,
    /// Right-multiply by the inverse triangular factor of `X = Q T`, making `X` orthonormal;
    /// thin states also drop the component of `Y` outside `Im X`.
    Orthogonal,
    /// Orthonormalize the stacked `(X; Y)`; thin states first drop the component of `Y`
    /// outside `Im X`.
    Stacked,
}

/// Propagate `W_{k+1} = Z_k W_k`, renormalizing every `recondition_every` steps,
/// and return `P_0, ..., P_K`.
pub fn propagate_ratio(
    w0: RatioState,
    blocks: &[SymplecticBlock],
    recondition_every: usize,
    mode: Recondition,
) -> Result<Vec<CovarianceMatrix>> {
    if recondition_every == 0 {
        return Err(Error::invalid("recondition_every must be at least 1"));
    }
    let mut trace = Vec::with_capacity(blocks.len() + 1);
    trace.push(w0.covariance()?);
    let mut w = w0;
    for (i, block) in blocks.iter().enumerate() {
        let k = i + 1;
        w = w.apply(block)?;
        if k % recondition_every == 0 {
            w = match mode {
                Recondition::ResetY => w.reset_y(k)?,
                Recondition::Orthogonal => w.orthonormalize(k)?,
                Recondition::Stacked => w.orthonormalize_stacked(k)?,
            };
        }
        trace.push(w.covariance().map_err(|e| e.at_step(k))?);
    }
    Ok(trace)
}

/// Propagate a covariance through the symplectic form of a step sequence, choosing a
/// square state with `Y` reset every step for full-rank `P_0` and an orthonormalized thin
/// state otherwise.
pub fn symplectic_trace(p0: &CovarianceMatrix, steps: &[ModelStep]) -> Result<Vec<CovarianceMatrix>> {
    let blocks = steps.iter().map(block_from_step).collect::<Result<Vec<_>>>()?;
    let x0 = psd_factor(p0.matrix(), FACTOR_TRUNCATION);
    let mut trace = if x0.ncols() == p0.dim() {
        propagate_ratio(RatioState::seeded(p0), &blocks, 1, Recondition::ResetY)?
    } else {
        propagate_ratio(RatioState::from_factor(&x0)?, &blocks, 1, Recondition::Stacked)?
    };
    trace[0] = p0.clone();
    Ok(trace)
}

/// Solution of `Psi = M^T Psi M + Omega`.
#[derive(Clone, Debug)]
pub struct SteinSolution {
    pub psi: DMatrix<f64>,
    /// `||Psi - M^T Psi M - Omega||_F / max(||Psi||_F, ||Omega||_F)`.
    pub residual: f64,
    /// True when the direct system was singular and the regularized ladder was used.
    pub regularized: bool,
}

/// Regularization ladder for the complex-shifted Stein system.
pub const STEIN_LADDER: [f64; 3] = [1e-2, 1e-4, 1e-6];

fn stein_residual(m: &DMatrix<f64>, omega: &DMatrix<f64>, psi: &DMatrix<f64>) -> f64 {
    let r = psi - m.transpose() * psi * m - omega;
    r.norm() / psi.norm().max(omega.norm()).max(f64::MIN_POSITIVE)
}

fn check_stein_inputs(m: &DMatrix<f64>, omega: &CovarianceMatrix) -> Result<usize> {
    let n = m.nrows();
    if m.ncols() != n || omega.dim() != n {
        return Err(Error::invalid("Stein inputs must be n x n"));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("propagator has non-finite entries"));
    }
    Ok(n)
}

/// Smallest `|1 - mu_i mu_j|` over eigenvalue pairs of `M`.
fn stein_gap(m: &DMatrix<f64>) -> f64 {
    let mu = m.complex_eigenvalues();
    let mut gap = f64::INFINITY;
    for a in mu.iter() {
        for b in mu.iter() {
            gap = gap.min((Complex64::new(1.0, 0.0) - a * b).norm());
        }
    }
    gap
}

fn vec_of(a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(a.as_slice())
}

fn unvec(v: &DVector<f64>, n: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(n, n, v.as_slice())
}

fn shifted_solve(m: &DMatrix<f64>, rhs: &DMatrix<f64>, eps: f64) -> Result<DMatrix<Complex64>> {
    let n = m.nrows();
    let mt = m.transpose();
    let kron = mt.kronecker(&mt);
    let shift = Complex64::from_polar(1.0, eps);
    let a = DMatrix::from_fn(n * n, n * n, |i, j| {
        let diag = if i == j { shift } else { Complex64::new(0.0, 0.0) };
        diag - Complex64::new(kron[(i, j)], 0.0)
    });
    let b = DVector::from_iterator(n * n, rhs.as_slice().iter().map(|&v| Complex64::new(v, 0.0)));
    let x = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::numerical(format!("shifted Stein system singular at eps={eps:e}")))?;
    Ok(DMatrix::from_column_slice(n, n, x.as_slice()))
}

/// Richardson limit of a quantity computed along [`STEIN_LADDER`]: extrapolate each
/// consecutive pair linearly to zero and require the two extrapolations to agree.
fn ladder_limit<F>(ladder: [f64; 3], mut at: F, what: &str) -> Result<DMatrix<f64>>
where
    F: FnMut(f64) -> Result<DMatrix<Complex64>>,
{
    let values = ladder.iter().map(|&e| at(e)).collect::<Result<Vec<_>>>()?;
    let extrapolate = |i: usize| {
        let (e1, e2) = (ladder[i], ladder[i + 1]);
        (&values[i + 1] * Complex64::new(e1, 0.0) - &values[i] * Complex64::new(e2, 0.0)) / Complex64::new(e1 - e2, 0.0)
    };
    let first = extrapolate(0);
    let second = extrapolate(1);
    let scale = second.norm().max(1.0);
    let gap = (&second - &first).norm() / scale;
    let imag = second.map(|c| c.im).norm() / scale;
    if !(gap < 1e-4) || !(imag < 1e-4) {
        let norms: Vec<String> = values.iter().map(|v| format!("{:.3e}", v.norm())).collect();
        return Err(Error::NoLimit(format!(
            "{what}: extrapolations differ by {gap:.3e} (imaginary part {imag:.3e}); norms along ladder {}",
            norms.join(", ")
        )));
    }
    Ok(second.map(|c| c.re))
}

/// Solve `Psi = M^T Psi M + Omega` as the `n^2`-dimensional system
/// `(I - M^T (x) M^T) vec(Psi) = vec(Omega)`.
///
/// When some product of eigenvalues of `M` equals one the system is singular; the
/// shifted system `(e^{i eps} I - M^T (x) M^T)` is then solved along [`STEIN_LADDER`]
/// and the limit `eps -> 0` reported, or [`Error::NoLimit`] if it does not settle.
pub fn stein_solve(m: &DMatrix<f64>, omega: &CovarianceMatrix) -> Result<SteinSolution> {
    let n = check_stein_inputs(m, omega)?;
    let om = omega.matrix();
    if stein_gap(m) > 1e-10 {
        let mt = m.transpose();
        let a = DMatrix::identity(n * n, n * n) - mt.kronecker(&mt);
        if let Some(x) = a.lu().solve(&vec_of(om)) {
            let psi = crate::cone::symmetrize(&unvec(&x, n));
            let residual = stein_residual(m, om, &psi);
            if residual <= 1e-8 {
                return Ok(SteinSolution { psi, residual, regularized: false });
            }
        }
    }
    let psi = crate::cone::symmetrize(&ladder_limit(STEIN_LADDER, |e| shifted_solve(m, om, e), "Stein solution")?);
    let residual = stein_residual(m, om, &psi);
    Ok(SteinSolution { psi, residual, regularized: true })
}

/// `Theta_k = sum_{l<k} (M^l)^T Omega M^l` by the recursion `Theta_{j+1} = M^T Theta_j M + Omega`.
pub fn theta_by_recursion(m: &DMatrix<f64>, omega: &CovarianceMatrix, k: usize) -> Result<DMatrix<f64>> {
    let n = check_stein_inputs(m, omega)?;
    let mut theta = DMatrix::zeros(n, n);
    for _ in 0..k {
        theta = m.transpose() * &theta * m + omega.matrix();
    }
    Ok(theta)
}

/// Which route produced an autonomous `Theta_k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThetaBranch {
    Stein,
    Recursion,
}

/// `Theta_k` for autonomous `(M, Omega)`: `Psi - (M^k)^T Psi M^k` from the Stein solution
/// when the direct system is admissible, else the recursion.
pub fn autonomous_theta(m: &DMatrix<f64>, omega: &CovarianceMatrix, k: usize) -> Result<(DMatrix<f64>, ThetaBranch)> {
    let n = check_stein_inputs(m, omega)?;
    if k == 0 {
        return Ok((DMatrix::zeros(n, n), ThetaBranch::Recursion));
    }
    match stein_solve(m, omega) {
        Ok(sol) if !sol.regularized => {
            let mk = m.pow(k as u32);
            let theta = &sol.psi - mk.transpose() * &sol.psi * &mk;
            Ok((crate::cone::symmetrize(&theta), ThetaBranch::Stein))
        }
        _ => Ok((theta_by_recursion(m, omega, k)?, ThetaBranch::Recursion)),
    }
}

/// `Theta_k = lim_{eps->0} [Psi_eps - e^{-i k eps} (M^k)^T Psi_eps M^k]`, where `Psi_eps`
/// solves the shifted Stein system. The limit exists for every `M`, including those for
/// which the unshifted system is singular.
pub fn regularized_theta(m: &DMatrix<f64>, omega: &CovarianceMatrix, k: usize) -> Result<DMatrix<f64>> {
    check_stein_inputs(m, omega)?;
    let mk = m.pow(k as u32).map(|v| Complex64::new(v, 0.0));
    let mkt = mk.transpose();
    // The phase `e^{-i k eps}` is only near one for `k eps` small, so the ladder shrinks with `k`.
    let ladder = STEIN_LADDER.map(|e| e / k.max(1) as f64);
    let theta = ladder_limit(
        ladder,
        |e| {
            let psi = shifted_solve(m, omega.matrix(), e)?;
            let phase = Complex64::from_polar(1.0, -(k as f64) * e);
            Ok(&psi - &mkt * &psi * &mk * phase)
        },
        "regularized Theta",
    )?;
    Ok(crate::cone::symmetrize(&theta))
}

/// Accumulated product `Z^{(k)} = Z_{k-1} ... Z_0` of the blocks.
pub fn block_product(blocks: &[SymplecticBlock]) -> Result<DMatrix<f64>> {
    let n = blocks.first().map_or(0, |b| b.n());
    let mut z = DMatrix::identity(2 * n, 2 * n);
    for b in blocks {
        if b.n() != n {
            return Err(Error::invalid("blocks have different dimensions"));
        }
        z = b.matrix() * z;
    }
    Ok(z)
}

/// Relative Frobenius distance with the default floor used by oracle comparisons.
pub fn oracle_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    relative_distance(a, b, 1e-300)
}
