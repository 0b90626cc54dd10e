//! Lyapunov exponents and vectors of a sequence of propagators by the QR method.
//!
//! Propagators are indexed so that `props[j] = M_{j+1}` maps `t_j` to `t_{j+1}`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cone::{qr_positive, standard_normal};
use crate::rng::{seeded, Stream};
use crate::{Error, Result};

/// Default half-width of the band of exponents treated as zero (per step).
pub const NEUTRAL_TOL: f64 = 1e-3;
/// Consecutive exponents closer than this are flagged as near-degenerate.
pub const DEGENERACY_GAP: f64 = 1e-4;
/// Default fraction of the window discarded at each end for vector convergence.
pub const TRANSIENT_FRACTION: f64 = 0.2;

fn random_orthonormal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DMatrix<f64> {
    qr_positive(&standard_normal(rng, n, n)).0
}

fn check_square(props: &[DMatrix<f64>]) -> Result<usize> {
    let first = props.first().ok_or_else(|| Error::invalid("at least one propagator is required"))?;
    let n = first.nrows();
    if n == 0 || props.iter().any(|m| m.nrows() != n || m.ncols() != n) {
        return Err(Error::invalid("propagators must be square and of equal dimension"));
    }
    Ok(n)
}

/// One positive-diagonal QR step `Q' R = M Q`, returning `(Q', R, ln diag R)`.
fn qr_step(m: &DMatrix<f64>, q: &DMatrix<f64>, k: usize) -> Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
    let (q1, r) = qr_positive(&(m * q));
    let logs = DVector::from_fn(r.nrows(), |i, _| r[(i, i)].ln());
    if logs.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical_at(k, "zero or non-finite diagonal in the QR factor"));
    }
    Ok((q1, r, logs))
}

fn mean_logs(logs: &[DVector<f64>], n: usize) -> Vec<f64> {
    let mut sum = DVector::zeros(n);
    for l in logs {
        sum += l;
    }
    let k = logs.len().max(1) as f64;
    sum.iter().map(|v| v / k).collect()
}

/// Result of a forward QR pass with every frame and triangular factor stored.
#[derive(Clone, Debug)]
pub struct ForwardQr {
    /// `frames[k] = Q_k` for `k = 0..=K`; after the transient these are the BLVs at `t_k`.
    pub frames: Vec<DMatrix<f64>>,
    /// `factors[k - 1] = R_k` for `k = 1..=K`.
    pub factors: Vec<DMatrix<f64>>,
    /// `log_diag[k - 1] = ln diag R_k`.
    pub log_diag: Vec<DVector<f64>>,
    /// `(1/K) sum_k ln [R_k]_ii`.
    pub exponents: Vec<f64>,
}

impl ForwardQr {
    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    /// Exponents averaged over steps `from+1..=to` only.
    pub fn window_exponents(&self, from: usize, to: usize) -> Result<Vec<f64>> {
        if from >= to || to > self.len() {
            return Err(Error::invalid(format!("window {from}..{to} outside 0..{}", self.len())));
        }
        Ok(mean_logs(&self.log_diag[from..to], self.frames[0].nrows()))
    }
}

/// QR method forward in time from a random orthonormal `Q_0` drawn from `seed`.
pub fn forward_qr_pass(props: &[DMatrix<f64>], seed: u64) -> Result<ForwardQr> {
    let n = check_square(props)?;
    let mut rng = seeded(seed, Stream::ForwardBasis);
    let mut q = random_orthonormal(&mut rng, n);
    let mut frames = Vec::with_capacity(props.len() + 1);
    let mut factors = Vec::with_capacity(props.len());
    let mut log_diag = Vec::with_capacity(props.len());
    for (j, m) in props.iter().enumerate() {
        let (q1, r, logs) = qr_step(m, &q, j + 1)?;
        frames.push(q);
        factors.push(r);
        log_diag.push(logs);
        q = q1;
    }
    frames.push(q);
    let exponents = mean_logs(&log_diag, n);
    Ok(ForwardQr { frames, factors, log_diag, exponents })
}

/// Exponents only, without storing frames. Same `Q_0` as [`forward_qr_pass`].
///
/// The first `transient` steps only align the frame; the average runs over the rest.
pub fn lyapunov_exponents(props: &[DMatrix<f64>], seed: u64, transient: usize) -> Result<Vec<f64>> {
    let n = check_square(props)?;
    if transient >= props.len() {
        return Err(Error::invalid(format!("transient {transient} leaves no steps out of {}", props.len())));
    }
    let mut rng = seeded(seed, Stream::ForwardBasis);
    let mut q = random_orthonormal(&mut rng, n);
    let mut sum = DVector::zeros(n);
    for (j, m) in props.iter().enumerate() {
        let (q1, _, logs) = qr_step(m, &q, j + 1)?;
        if j >= transient {
            sum += logs;
        }
        q = q1;
    }
    Ok(sum.iter().map(|v| v / (props.len() - transient) as f64).collect())
}

/// Result of the adjoint QR pass, run backward from `t_K` on transposed propagators.
#[derive(Clone, Debug)]
pub struct AdjointQr {
    /// `frames[k]` for `k = 0..=K`; converges to the FLVs at `t_k` away from `t_K`.
    pub frames: Vec<DMatrix<f64>>,
    pub exponents: Vec<f64>,
}

impl AdjointQr {
    /// FLVs at the initial time.
    pub fn initial(&self) -> &DMatrix<f64> {
        &self.frames[0]
    }
}

/// QR iteration `V_{k-1} R = M_k^T V_k` from a random `V_K` down to `t_0`.
pub fn adjoint_qr_pass(props: &[DMatrix<f64>], seed: u64) -> Result<AdjointQr> {
    let n = check_square(props)?;
    let mut rng = seeded(seed, Stream::AdjointBasis);
    let mut v = random_orthonormal(&mut rng, n);
    let mut frames = vec![DMatrix::zeros(0, 0); props.len() + 1];
    let mut sum = DVector::zeros(n);
    for (j, m) in props.iter().enumerate().rev() {
        let (v0, _, logs) = qr_step(&m.transpose(), &v, j + 1)?;
        frames[j + 1] = v;
        sum += logs;
        v = v0;
    }
    frames[0] = v;
    let exponents = sum.iter().map(|s| s / props.len() as f64).collect();
    Ok(AdjointQr { frames, exponents })
}

/// FLVs at `t_0` only, without storing intermediate frames. Same start as
/// [`adjoint_qr_pass`].
pub fn adjoint_initial(props: &[DMatrix<f64>], seed: u64) -> Result<DMatrix<f64>> {
    let n = check_square(props)?;
    let mut rng = seeded(seed, Stream::AdjointBasis);
    let v = random_orthonormal(&mut rng, n);
    adjoint_sweep(props, &v)
}

/// Singular value decomposition of a resolvent `M_{k:0}` with exponents `ln(sigma_i) / k`.
#[derive(Clone, Debug)]
pub struct FiniteTimeSvd {
    pub u: DMatrix<f64>,
    /// `ln sigma_i`, descending. Kept in log form so long products do not overflow.
    pub log_sigma: Vec<f64>,
    pub v: DMatrix<f64>,
    pub exponents: Vec<f64>,
}

impl FiniteTimeSvd {
    pub fn sigma(&self) -> DVector<f64> {
        DVector::from_iterator(self.log_sigma.len(), self.log_sigma.iter().map(|l| l.exp()))
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.u * DMatrix::from_diagonal(&self.sigma()) * self.v.transpose()
    }
}

/// SVD of an explicitly formed resolvent.
pub fn finite_time_svd(resolvent: &DMatrix<f64>, k: usize) -> Result<FiniteTimeSvd> {
    if k == 0 {
        return Err(Error::invalid("finite-time exponents need k >= 1"));
    }
    if !resolvent.is_square() || resolvent.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("resolvent is not a finite square matrix; use the staged form"));
    }
    let n = resolvent.nrows();
    let svd = resolvent.clone().svd(true, true);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let u_full = svd.u.ok_or_else(|| Error::numerical("SVD did not return U"))?;
    let vt_full = svd.v_t.ok_or_else(|| Error::numerical("SVD did not return V"))?;
    let u = DMatrix::from_fn(n, n, |i, j| u_full[(i, order[j])]);
    let v = DMatrix::from_fn(n, n, |i, j| vt_full[(order[j], i)]);
    let log_sigma: Vec<f64> = order.iter().map(|&i| svd.singular_values[i].ln()).collect();
    if log_sigma.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
        return Err(Error::numerical("singular values are not finite"));
    }
    let exponents = log_sigma.iter().map(|l| l / k as f64).collect();
    Ok(FiniteTimeSvd { u, log_sigma, v, exponents })
}

fn forward_sweep(props: &[DMatrix<f64>], q0: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let mut q = q0.clone();
    let mut logs = DVector::zeros(q0.ncols());
    for (j, m) in props.iter().enumerate() {
        let (q1, _, l) = qr_step(m, &q, j + 1)?;
        logs += l;
        q = q1;
    }
    Ok((q, logs))
}

fn adjoint_sweep(props: &[DMatrix<f64>], v_end: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut v = v_end.clone();
    for (j, m) in props.iter().enumerate().rev() {
        v = qr_step(&m.transpose(), &v, j + 1)?.0;
    }
    Ok(v)
}

/// Finite-time SVD of `M_{K:0}` without forming the product.
///
/// Alternating adjoint and forward QR sweeps converge to the singular vectors, at a rate
/// set by the ratios of neighbouring singular values. A forward sweep started from the
/// right singular vectors `V` accumulates a diagonal triangular factor whose logarithms
/// are `ln sigma_i`, and ends on `U`.
pub fn finite_time_svd_staged(props: &[DMatrix<f64>]) -> Result<FiniteTimeSvd> {
    const MAX_ROUNDS: usize = 50;
    const SETTLED: f64 = 1e-13;
    let n = check_square(props)?;
    let mut v = adjoint_qr_pass(props, 0)?.frames.swap_remove(0);
    for _ in 0..MAX_ROUNDS {
        let (u, _) = forward_sweep(props, &v)?;
        let next = adjoint_sweep(props, &u)?;
        let change = (&next - &v).amax();
        v = next;
        if change <= SETTLED * n as f64 {
            break;
        }
    }
    let (u, logs) = forward_sweep(props, &v)?;
    let log_sigma: Vec<f64> = logs.iter().copied().collect();
    let exponents = log_sigma.iter().map(|l| l / props.len() as f64).collect();
    Ok(FiniteTimeSvd { u, log_sigma, v, exponents })
}

/// Finite-time SVD of the product of `props`: dense when the product is finite and
/// its singular values span less than `1e13`, staged otherwise.
pub fn finite_time_svd_steps(props: &[DMatrix<f64>]) -> Result<FiniteTimeSvd> {
    let n = check_square(props)?;
    let mut product = DMatrix::identity(n, n);
    for m in props {
        product = m * product;
    }
    if product.iter().all(|v| v.is_finite()) {
        let dense = finite_time_svd(&product, props.len())?;
        let spread = dense.log_sigma[0] - dense.log_sigma[n - 1];
        if spread.is_finite() && spread < 13.0 * std::f64::consts::LN_10 {
            return Ok(dense);
        }
    }
    finite_time_svd_staged(props)
}

/// Covariant Lyapunov vectors over a window of a stored forward pass.
#[derive(Clone, Debug)]
pub struct CovariantTrace {
    /// Index of `vectors[0]` in the forward pass (time `t_start`).
    pub start: usize,
    /// `vectors[j] = C_{start + j}`, unit-norm columns.
    pub vectors: Vec<DMatrix<f64>>,
    /// `log_stretch[j][i] = ln ||M c_i||` for the step from `start + j` to `start + j + 1`.
    pub log_stretch: Vec<DVector<f64>>,
}

impl CovariantTrace {
    pub fn end(&self) -> usize {
        self.start + self.vectors.len() - 1
    }

    pub fn at(&self, k: usize) -> Option<&DMatrix<f64>> {
        k.checked_sub(self.start).and_then(|j| self.vectors.get(j))
    }

    /// Exponents from the averaged local stretching factors.
    pub fn exponents(&self) -> Vec<f64> {
        let n = self.vectors[0].ncols();
        mean_logs(&self.log_stretch, n)
    }
}

/// Ginelli backward iteration over a stored forward pass.
///
/// Starting from a random upper-triangular `T_K`, iterate `T_{k-1} = R_k^{-1} T_k` with
/// column normalization. The last `tail` steps are discarded for convergence and the
/// returned window is `head..=K - tail`.
pub fn ginelli_clv_pass(forward: &ForwardQr, head: usize, tail: usize, seed: u64) -> Result<CovariantTrace> {
    let big_k = forward.len();
    if big_k == 0 || head + tail >= big_k {
        return Err(Error::invalid(format!(
            "transients {head} + {tail} leave no window inside {big_k} steps"
        )));
    }
    let n = forward.frames[0].nrows();
    let mut rng = seeded(seed, Stream::Covariant);
    let mut t = standard_normal(&mut rng, n, n).upper_triangle();
    for j in 0..n {
        t[(j, j)] = t[(j, j)].abs() + 1.0;
    }
    normalize_columns(&mut t);
    let last = big_k - tail;
    let mut vectors = Vec::with_capacity(last - head + 1);
    let mut log_stretch = Vec::with_capacity(last - head);
    for k in (1..=big_k).rev() {
        if k <= last && k >= head {
            vectors.push(&forward.frames[k] * &t);
        }
        let r = &forward.factors[k - 1];
        let prev = r
            .solve_upper_triangular(&t)
            .filter(|p| p.iter().all(|v| v.is_finite()))
            .ok_or_else(|| Error::numerical_at(k, "singular stored triangular factor"))?;
        let norms = normalize_columns_into(prev, &mut t);
        if k <= last && k > head {
            log_stretch.push(DVector::from_iterator(n, norms.iter().map(|v| -v.ln())));
        }
    }
    if head == 0 {
        vectors.push(&forward.frames[0] * &t);
    }
    vectors.reverse();
    log_stretch.reverse();
    Ok(CovariantTrace { start: head, vectors, log_stretch })
}

fn normalize_columns(t: &mut DMatrix<f64>) {
    for mut c in t.column_iter_mut() {
        let s = c.norm();
        c /= s;
    }
}

fn normalize_columns_into(src: DMatrix<f64>, dst: &mut DMatrix<f64>) -> Vec<f64> {
    *dst = src;
    let mut norms = Vec::with_capacity(dst.ncols());
    for mut c in dst.column_iter_mut() {
        let s = c.norm();
        c /= s;
        norms.push(s);
    }
    norms
}

/// Split of a spectrum into unstable-neutral and stable parts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumClassification {
    /// Number of exponents greater than `-neutral_tol`.
    pub n0: usize,
    /// Indices with `|lambda_i| <= neutral_tol`.
    pub neutral: Vec<usize>,
    /// Indices with `lambda_i <= -neutral_tol`.
    pub stable: Vec<usize>,
    pub neutral_tol: f64,
    /// Consecutive pairs `(i, i + 1)` closer than [`DEGENERACY_GAP`] or out of order.
    pub degenerate_pairs: Vec<usize>,
}

impl SpectrumClassification {
    pub fn is_stable_index(&self, i: usize) -> bool {
        self.stable.contains(&i)
    }
}

pub fn classify_spectrum(exponents: &[f64], neutral_tol: f64) -> SpectrumClassification {
    let n0 = exponents.iter().filter(|&&l| l > -neutral_tol).count();
    let neutral = (0..exponents.len()).filter(|&i| exponents[i].abs() <= neutral_tol).collect();
    let stable = (0..exponents.len()).filter(|&i| exponents[i] <= -neutral_tol).collect();
    let degenerate_pairs = exponents
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[0] - w[1] < DEGENERACY_GAP)
        .map(|(i, _)| i)
        .collect();
    SpectrumClassification { n0, neutral, stable, neutral_tol, degenerate_pairs }
}

/// Lyapunov quantities of one sequence over the window `0..=K`.
#[derive(Clone, Debug)]
pub struct LyapunovBases {
    pub forward: ForwardQr,
    /// FLVs at every time (reliable away from `t_K`).
    pub adjoint: AdjointQr,
    pub covariant: CovariantTrace,
    pub exponents: Vec<f64>,
    pub classification: SpectrumClassification,
}

impl LyapunovBases {
    /// BLVs at `t_k`.
    pub fn backward(&self, k: usize) -> &DMatrix<f64> {
        &self.forward.frames[k]
    }

    /// FLVs at `t_0`.
    pub fn forward_initial(&self) -> &DMatrix<f64> {
        self.adjoint.initial()
    }
}

/// Run the forward, adjoint and covariant passes.
///
/// `head` and `tail` are the transient lengths at each end used by the covariant
/// pass; exponents are averaged over the whole window.
pub fn lyapunov_bases(props: &[DMatrix<f64>], seed: u64, head: usize, tail: usize, neutral_tol: f64) -> Result<LyapunovBases> {
    let forward = forward_qr_pass(props, seed)?;
    let adjoint = adjoint_qr_pass(props, seed)?;
    let covariant = ginelli_clv_pass(&forward, head, tail, seed)?;
    let exponents = forward.exponents.clone();
    let classification = classify_spectrum(&exponents, neutral_tol);
    Ok(LyapunovBases { forward, adjoint, covariant, exponents, classification })
}

/// Largest principal angle (radians) between the column spans of `a` and `b`.
pub fn principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = a.clone().qr().q();
    let qb = b.clone().qr().q();
    let s = (qa.transpose() * qb).singular_values();
    let min = s.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    min.clamp(-1.0, 1.0).acos()
}
