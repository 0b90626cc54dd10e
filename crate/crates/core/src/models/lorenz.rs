//! Lorenz-95 dynamics and their tangent-linear propagators.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of the cyclic Lorenz-95 system and its integration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lorenz95Config {
    /// Number of variables (at least 4).
    pub n: usize,
    /// Constant forcing `F`.
    pub forcing: f64,
    /// Time between propagators.
    pub dt: f64,
    /// RK4 substeps per `dt`.
    pub substeps: usize,
    /// Nonlinear steps of length `dt` discarded before the first propagator.
    pub spinup: usize,
}

impl Default for Lorenz95Config {
    fn default() -> Self {
        Self { n: 40, forcing: 8.0, dt: 0.1, substeps: 10, spinup: 5000 }
    }
}

impl Lorenz95Config {
    pub fn validate(&self) -> Result<()> {
        if self.n < 4 {
            return Err(Error::invalid(format!("Lorenz-95 needs n >= 4, got {}", self.n)));
        }
        if self.substeps == 0 {
            return Err(Error::invalid("Lorenz-95 needs at least one substep"));
        }
        if !(self.dt >= 0.0) || !self.dt.is_finite() {
            return Err(Error::invalid(format!("Lorenz-95 time step must be finite and non-negative, got {}", self.dt)));
        }
        if self.dt / self.substeps as f64 > 0.05 {
            return Err(Error::invalid(format!(
                "RK4 substep {} exceeds 0.05",
                self.dt / self.substeps as f64
            )));
        }
        if !self.forcing.is_finite() {
            return Err(Error::invalid("forcing must be finite"));
        }
        Ok(())
    }
}

#[inline]
fn wrap(j: isize, n: usize) -> usize {
    j.rem_euclid(n as isize) as usize
}

/// `dx_j/dt = x_{j-1} (x_{j+1} - x_{j-2}) - x_j + F` with cyclic indices.
pub fn lorenz95_tendency(x: &DVector<f64>, forcing: f64) -> Result<DVector<f64>> {
    let n = x.len();
    if n < 4 {
        return Err(Error::invalid(format!("Lorenz-95 needs n >= 4, got {n}")));
    }
    Ok(tendency(x, forcing))
}

fn tendency(x: &DVector<f64>, forcing: f64) -> DVector<f64> {
    let n = x.len();
    DVector::from_fn(n, |j, _| {
        let j = j as isize;
        x[wrap(j - 1, n)] * (x[wrap(j + 1, n)] - x[wrap(j - 2, n)]) - x[j as usize] + forcing
    })
}

/// Jacobian of [`lorenz95_tendency`]; four non-zero entries per row.
pub fn lorenz95_jacobian(x: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = x.len();
    if n < 4 {
        return Err(Error::invalid(format!("Lorenz-95 needs n >= 4, got {n}")));
    }
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        let ji = j as isize;
        let (m2, m1, p1) = (wrap(ji - 2, n), wrap(ji - 1, n), wrap(ji + 1, n));
        jac[(j, m2)] -= x[m1];
        jac[(j, m1)] += x[p1] - x[m2];
        jac[(j, j)] -= 1.0;
        jac[(j, p1)] += x[m1];
    }
    Ok(jac)
}

/// `J(x) * V` using the stencil directly.
fn jacobian_apply(x: &DVector<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.len();
    let mut out = DMatrix::zeros(n, v.ncols());
    for j in 0..n {
        let ji = j as isize;
        let (m2, m1, p1) = (wrap(ji - 2, n), wrap(ji - 1, n), wrap(ji + 1, n));
        let (a, b, c) = (-x[m1], x[p1] - x[m2], x[m1]);
        for col in 0..v.ncols() {
            out[(j, col)] = a * v[(m2, col)] + b * v[(m1, col)] - v[(j, col)] + c * v[(p1, col)];
        }
    }
    out
}

fn rk4_state(x: &DVector<f64>, forcing: f64, h: f64) -> DVector<f64> {
    let k1 = tendency(x, forcing);
    let k2 = tendency(&(x + &k1 * (h / 2.0)), forcing);
    let k3 = tendency(&(x + &k2 * (h / 2.0)), forcing);
    let k4 = tendency(&(x + &k3 * h), forcing);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Advance the nonlinear state by one interval `dt`.
pub fn integrate(x: &DVector<f64>, cfg: &Lorenz95Config) -> Result<DVector<f64>> {
    cfg.validate()?;
    check_state(x, cfg)?;
    let h = cfg.dt / cfg.substeps as f64;
    let mut x = x.clone();
    for _ in 0..cfg.substeps {
        x = rk4_state(&x, cfg.forcing, h);
    }
    Ok(x)
}

fn check_state(x: &DVector<f64>, cfg: &Lorenz95Config) -> Result<()> {
    if x.len() != cfg.n {
        return Err(Error::invalid(format!("state has length {}, config expects {}", x.len(), cfg.n)));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("state has non-finite entries"));
    }
    Ok(())
}

/// Integrate state and variational equation `dM/dt = J(x(t)) M`, `M(0) = I`, over one `dt`
/// with RK4. Returns the propagator and the state at the end of the interval.
pub fn tangent_linear_propagator(x: &DVector<f64>, cfg: &Lorenz95Config) -> Result<(DMatrix<f64>, DVector<f64>)> {
    cfg.validate()?;
    check_state(x, cfg)?;
    let n = cfg.n;
    let h = cfg.dt / cfg.substeps as f64;
    let f = cfg.forcing;
    let mut x = x.clone();
    let mut m = DMatrix::identity(n, n);
    for _ in 0..cfg.substeps {
        let k1x = tendency(&x, f);
        let k1m = jacobian_apply(&x, &m);
        let x2 = &x + &k1x * (h / 2.0);
        let k2x = tendency(&x2, f);
        let k2m = jacobian_apply(&x2, &(&m + &k1m * (h / 2.0)));
        let x3 = &x + &k2x * (h / 2.0);
        let k3x = tendency(&x3, f);
        let k3m = jacobian_apply(&x3, &(&m + &k2m * (h / 2.0)));
        let x4 = &x + &k3x * h;
        let k4x = tendency(&x4, f);
        let k4m = jacobian_apply(&x4, &(&m + &k3m * h));
        x += (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (h / 6.0);
        m += (k1m + k2m * 2.0 + k3m * 2.0 + k4m) * (h / 6.0);
    }
    Ok((m, x))
}
