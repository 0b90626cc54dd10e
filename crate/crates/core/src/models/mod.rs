//! Propagator, observation and noise sequences for the three experiment suites.

mod container;
mod lorenz;

pub use container::{read_matrices, read_sequence, write_matrices, write_sequence};
pub use lorenz::{integrate, lorenz95_jacobian, lorenz95_tendency, tangent_linear_propagator, Lorenz95Config};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cone::{standard_normal, CovarianceMatrix};
use crate::error::{Error, Result};
use crate::filter::obs_precision;
use crate::rng::{seeded, Stream};

/// One assimilation cycle: observe at `t_k` with `(H_k, R_k)`, then propagate to `t_{k+1}`
/// with `M_{k+1}` and model noise `Q_{k+1}`.
#[derive(Clone, Debug)]
pub struct ModelStep {
    propagator: DMatrix<f64>,
    obs_operator: DMatrix<f64>,
    obs_cov: CovarianceMatrix,
    model_noise: CovarianceMatrix,
    precision: CovarianceMatrix,
    obs_sqrt: DMatrix<f64>,
}

impl ModelStep {
    /// Validate dimensions and compute the observation precision `H^T R^{-1} H`.
    pub fn new(
        propagator: DMatrix<f64>,
        obs_operator: DMatrix<f64>,
        obs_cov: CovarianceMatrix,
        model_noise: CovarianceMatrix,
    ) -> Result<Self> {
        let n = propagator.nrows();
        if propagator.ncols() != n {
            return Err(Error::invalid("propagator must be square"));
        }
        if propagator.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("propagator has non-finite entries"));
        }
        if obs_operator.ncols() != n {
            return Err(Error::invalid(format!(
                "observation operator has {} columns, state dimension is {n}",
                obs_operator.ncols()
            )));
        }
        if model_noise.dim() != n {
            return Err(Error::invalid("model noise dimension differs from state dimension"));
        }
        let precision = obs_precision(&obs_operator, &obs_cov)?;
        let obs_sqrt = match obs_cov.matrix().clone().cholesky() {
            Some(c) => c.l(),
            None => DMatrix::zeros(0, 0),
        };
        Ok(Self { propagator, obs_operator, obs_cov, model_noise, precision, obs_sqrt })
    }

    /// Perfect-model step (`Q = 0`).
    pub fn perfect(propagator: DMatrix<f64>, obs_operator: DMatrix<f64>, obs_cov: CovarianceMatrix) -> Result<Self> {
        let n = propagator.nrows();
        Self::new(propagator, obs_operator, obs_cov, CovarianceMatrix::zeros(n))
    }

    pub fn state_dim(&self) -> usize {
        self.propagator.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_operator.nrows()
    }

    pub fn propagator(&self) -> &DMatrix<f64> {
        &self.propagator
    }

    pub fn obs_operator(&self) -> &DMatrix<f64> {
        &self.obs_operator
    }

    pub fn obs_cov(&self) -> &CovarianceMatrix {
        &self.obs_cov
    }

    pub fn model_noise(&self) -> &CovarianceMatrix {
        &self.model_noise
    }

    /// Lower Cholesky factor of `R_k`.
    pub fn obs_sqrt(&self) -> &DMatrix<f64> {
        &self.obs_sqrt
    }

    /// `Omega_k = H_k^T R_k^{-1} H_k`.
    pub fn precision(&self) -> &CovarianceMatrix {
        &self.precision
    }

    pub fn is_perfect(&self) -> bool {
        self.model_noise.matrix().iter().all(|&v| v == 0.0)
    }
}

/// Which system generates the sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuiteKind {
    /// One random `(M, H, R)` reused at every step.
    AutonomousRandom,
    /// Fresh random `(M_k, H_k, R_k)` at every step.
    NonautonomousRandom,
    /// Tangent-linear propagators of Lorenz-95 along a trajectory.
    Lorenz95,
}

/// How observation operators are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObsMode {
    /// `d x n` standard normal entries.
    Dense,
    /// `H = [1, 0, ..., 0]`, `d = 1`.
    FirstComponent,
}

/// Default standard deviation of random propagator entries: `sqrt(2.2 / n)`.
///
/// With this variance roughly half of the Lyapunov exponents of a product of
/// iid Gaussian matrices are non-negative (16 of 30 at `n = 30`).
pub fn default_entry_scale(n: usize) -> f64 {
    (2.2 / n.max(1) as f64).sqrt()
}

/// Everything that determines a generated sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceConfig {
    pub kind: SuiteKind,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub steps: usize,
    pub obs_mode: ObsMode,
    /// Standard deviation of the entries of random propagators.
    pub entry_scale: f64,
    /// `Q_k = model_noise * I`.
    pub model_noise: f64,
    /// Lorenz-95 parameters; `n` is taken from this config's `n`.
    pub lorenz: Lorenz95Config,
}

impl SequenceConfig {
    pub fn new(kind: SuiteKind, n: usize, d: usize, seed: u64, steps: usize) -> Self {
        Self {
            kind,
            n,
            d,
            seed,
            steps,
            obs_mode: ObsMode::Dense,
            entry_scale: default_entry_scale(n),
            model_noise: 0.0,
            lorenz: Lorenz95Config { n, ..Lorenz95Config::default() },
        }
    }

    /// Observation dimension after applying the observation mode.
    pub fn effective_obs_dim(&self) -> usize {
        match self.obs_mode {
            ObsMode::Dense => self.d,
            ObsMode::FirstComponent => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("state dimension must be positive"));
        }
        if self.obs_mode == ObsMode::Dense && (self.d == 0 || self.d > self.n) {
            return Err(Error::invalid(format!("observation dimension must satisfy 1 <= d <= n, got d={}", self.d)));
        }
        if !(self.entry_scale > 0.0) || !self.entry_scale.is_finite() {
            return Err(Error::invalid("entry scale must be positive"));
        }
        if !(self.model_noise >= 0.0) || !self.model_noise.is_finite() {
            return Err(Error::invalid("model noise must be non-negative"));
        }
        if self.kind == SuiteKind::Lorenz95 {
            Lorenz95Config { n: self.n, ..self.lorenz.clone() }.validate()?;
        }
        Ok(())
    }
}

/// A generated sequence of assimilation cycles.
#[derive(Clone, Debug)]
pub struct ModelSequence {
    pub config: SequenceConfig,
    pub steps: Vec<ModelStep>,
    /// Lorenz-95 state at the start of each cycle (empty for random suites).
    pub trajectory: Vec<DVector<f64>>,
}

impl ModelSequence {
    pub fn state_dim(&self) -> usize {
        self.config.n
    }

    pub fn propagators(&self) -> Vec<DMatrix<f64>> {
        self.steps.iter().map(|s| s.propagator().clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

fn draw_observation<R: Rng>(rng: &mut R, n: usize, d: usize, mode: ObsMode) -> (DMatrix<f64>, CovarianceMatrix) {
    let h = match mode {
        ObsMode::Dense => standard_normal(rng, d, n),
        ObsMode::FirstComponent => {
            let mut h = DMatrix::zeros(1, n);
            h[(0, 0)] = 1.0;
            h
        }
    };
    let b = standard_normal(rng, h.nrows(), h.nrows());
    (h, CovarianceMatrix::from_factor(&b))
}

/// Generate `config.steps` cycles of the requested suite.
pub fn gen_model_sequence(config: &SequenceConfig) -> Result<ModelSequence> {
    config.validate()?;
    let n = config.n;
    let d = config.effective_obs_dim();
    let mut rng = seeded(config.seed, Stream::Model);
    let noise = if config.model_noise > 0.0 {
        CovarianceMatrix::from_computed(DMatrix::identity(n, n) * config.model_noise)
    } else {
        CovarianceMatrix::zeros(n)
    };
    let mut steps = Vec::with_capacity(config.steps);
    let mut trajectory = Vec::new();
    match config.kind {
        SuiteKind::AutonomousRandom => {
            let m = standard_normal(&mut rng, n, n) * config.entry_scale;
            let (h, r) = draw_observation(&mut rng, n, d, config.obs_mode);
            for _ in 0..config.steps {
                steps.push(ModelStep::new(m.clone(), h.clone(), r.clone(), noise.clone())?);
            }
        }
        SuiteKind::NonautonomousRandom => {
            for _ in 0..config.steps {
                let m = standard_normal(&mut rng, n, n) * config.entry_scale;
                let (h, r) = draw_observation(&mut rng, n, d, config.obs_mode);
                steps.push(ModelStep::new(m, h, r, noise.clone())?);
            }
        }
        SuiteKind::Lorenz95 => {
            let cfg = Lorenz95Config { n, ..config.lorenz.clone() };
            let mut spin = seeded(config.seed, Stream::Spinup);
            let mut x = DVector::from_fn(n, |_, _| cfg.forcing + 0.01 * spin.sample::<f64, _>(StandardNormal));
            for k in 0..cfg.spinup {
                x = integrate(&x, &cfg)?;
                check_bounded(&x, k)?;
            }
            for k in 0..config.steps {
                let (m, next) = tangent_linear_propagator(&x, &cfg)?;
                check_bounded(&next, k)?;
                let (h, r) = draw_observation(&mut rng, n, d, config.obs_mode);
                trajectory.push(x);
                steps.push(ModelStep::new(m, h, r, noise.clone())?);
                x = next;
            }
        }
    }
    Ok(ModelSequence { config: config.clone(), steps, trajectory })
}

fn check_bounded(x: &DVector<f64>, k: usize) -> Result<()> {
    if x.iter().any(|v| !v.is_finite() || v.abs() > 1e3) {
        return Err(Error::Divergence { step: k, message: "Lorenz-95 state left the bounded region".into() });
    }
    Ok(())
}
