//! Experiment orchestration: sequence generation, Lyapunov passes, one or two filter runs,
//! diagnostics and the data files that record them.

mod config;
mod output;

pub use config::{parse_config, ExperimentConfig, InitialRank, Suite, CROSS_CHECK_STEPS, DEFAULT_STEPS};
pub use output::{indexed_header, num, sha256_hex, verify_manifest, Csv, FileRecord, Manifest, OutputDir, Table, MANIFEST_NAME};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cone::{psd_factor, random_factor, sym_eig, CovarianceMatrix, FACTOR_TRUNCATION};
use crate::diagnostics::{
    blv_projection, collapse_norms, condition1, decay_bound_excess, eigen_decay_fit, AsymptoteTracker, BoundAuditor,
    BoundMargins, DecayReport, NeutralObservability, DECAY_TRANSIENT,
};
use crate::filter::{accumulate, closed_form_covariance, riccati_step, Aggregates, FactoredClosedForm, SqrtCovariance};
use crate::filter::CLOSED_FORM_COND_WARN;
use crate::lyapunov::{
    adjoint_initial, classify_spectrum, finite_time_svd_steps, forward_qr_pass, ginelli_clv_pass, lyapunov_exponents,
    CovariantTrace, ForwardQr, SpectrumClassification,
};
use crate::models::{gen_model_sequence, ModelSequence, ModelStep};
use crate::rng::{seeded, Stream, PRNG_IDENTITY};
use crate::symplectic::{oracle_distance, symplectic_trace};
use crate::{Error, Result};

/// Fractions of `K` at which analysis covariances are projected onto the BLVs.
pub const PROJECTION_CHECKPOINTS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 1.0];
/// Fraction of the run, counted from the end, over which terminal criteria are judged.
pub const TAIL_FRACTION: f64 = 0.1;
/// Relative rank threshold for Condition 1.
pub const CONDITION1_TOL: f64 = 1e-10;

/// Lyapunov quantities over the filter window, indexed by filter step `k = 0..=K`.
#[derive(Clone, Debug)]
pub struct LyapunovWindow {
    /// Offset of filter step 0 in the generated sequence.
    pub offset: usize,
    pub steps: usize,
    pub forward: ForwardQr,
    /// FLVs at filter step 0.
    pub adjoint_initial: DMatrix<f64>,
    pub covariant: CovariantTrace,
    /// Exponents averaged over the filter window.
    pub exponents: Vec<f64>,
    pub classification: SpectrumClassification,
}

impl LyapunovWindow {
    /// BLVs at filter step `k`.
    pub fn blv(&self, k: usize) -> &DMatrix<f64> {
        &self.forward.frames[self.offset + k]
    }

    /// Triangular factor of `M_{k+1} U_k`.
    pub fn factor(&self, k: usize) -> &DMatrix<f64> {
        &self.forward.factors[self.offset + k]
    }

    pub fn clv(&self, k: usize) -> Option<&DMatrix<f64>> {
        self.covariant.at(self.offset + k)
    }

    /// Log stretches of the CLVs over the step from `k` to `k + 1`.
    pub fn log_stretch(&self, k: usize) -> Option<&nalgebra::DVector<f64>> {
        (self.offset + k)
            .checked_sub(self.covariant.start)
            .and_then(|j| self.covariant.log_stretch.get(j))
    }

    /// Exponents averaged over filter steps `from+1..=to`.
    pub fn window_exponents(&self, from: usize, to: usize) -> Result<Vec<f64>> {
        self.forward.window_exponents(self.offset + from, self.offset + to)
    }

    pub fn n0(&self) -> usize {
        self.classification.n0
    }
}

/// A generated sequence with its Lyapunov passes, shared by any number of filter runs.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub sequence: ModelSequence,
    pub lyapunov: LyapunovWindow,
}

impl Prepared {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let sequence = gen_model_sequence(&config.sequence_config())?;
        let props = sequence.propagators();
        let offset = config.transient_steps();
        let steps = config.steps;
        let seed = config.seed;
        let (forward, adjoint) =
            rayon::join(|| forward_qr_pass(&props, seed), || adjoint_initial(&props[offset..], seed));
        let forward = forward?;
        let adjoint_initial = adjoint?;
        let tail = props.len() - offset - steps - 1;
        let covariant = ginelli_clv_pass(&forward, offset, tail, seed)?;
        let exponents = forward.window_exponents(offset, offset + steps)?;
        let classification = classify_spectrum(&exponents, config.neutral_tol);
        let lyapunov = LyapunovWindow { offset, steps, forward, adjoint_initial, covariant, exponents, classification };
        Ok(Self { config: config.clone(), sequence, lyapunov })
    }

    /// Cycles `0..=K` of the filter window.
    pub fn filter_steps(&self) -> &[ModelStep] {
        let o = self.lyapunov.offset;
        &self.sequence.steps[o..=o + self.config.steps]
    }

    /// Random initial factor of the given rank from one of the two covariance streams.
    pub fn initial_factor(&self, rank: usize, second: bool) -> Result<DMatrix<f64>> {
        let stream = if second { Stream::SecondCovariance } else { Stream::InitialCovariance };
        let mut rng = seeded(self.config.seed, stream);
        random_factor(&mut rng, self.config.n, rank).map_err(|e| Error::Config(e.to_string()))
    }

    /// Run the filter from `P_0 = X_0 X_0^T` over the window.
    pub fn run(&self, x0: &DMatrix<f64>, options: &RunOptions) -> Result<RunTrace> {
        run_filter(self, x0, options)
    }
}

/// What a filter run records besides eigenvalue traces.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    pub bounds: bool,
    pub asymptote: bool,
    /// Keep dense analysis covariances for pairing with another run.
    pub keep_analysis: bool,
    pub rank_threshold: f64,
}

impl RunOptions {
    pub fn full(config: &ExperimentConfig) -> Self {
        Self { bounds: config.bounds, asymptote: config.asymptote, keep_analysis: false, rank_threshold: config.rank_threshold }
    }

    pub fn light(config: &ExperimentConfig) -> Self {
        Self { bounds: false, asymptote: false, keep_analysis: false, rank_threshold: config.rank_threshold }
    }
}

/// Per-step record of one filter run over `k = 0..=K`.
#[derive(Clone, Debug)]
pub struct RunTrace {
    pub rank_p0: usize,
    pub x0: DMatrix<f64>,
    /// Eigenvalues of `P_k`, descending.
    pub forecast_eigs: Vec<Vec<f64>>,
    /// Eigenvalues of `P^a_k`, descending.
    pub analysis_eigs: Vec<Vec<f64>>,
    pub forecast_rank: Vec<usize>,
    pub analysis_rank: Vec<usize>,
    /// `||P^a_k - P^a_{k-1}||_F` for `k >= 1`.
    pub consecutive: Vec<f64>,
    pub analysis: Vec<DMatrix<f64>>,
    pub bounds: Vec<BoundMargins>,
    /// `(||P_k - S_k||_F, ||S_k||_F)`; `NaN` until `S_k` exists.
    pub asymptote: Vec<(f64, f64)>,
    /// Smallest eigenvalue of `C_+^T Gamma_k C_+`.
    pub condition2: Vec<f64>,
    /// Smallest singular value of `Phi_k`; empty when no neutral mode exists.
    pub condition3: Vec<f64>,
    /// `(k, diag U_k^T P^a_k U_k)` at the projection checkpoints.
    pub projections: Vec<(usize, Vec<f64>)>,
    /// `||P_K u_i||` for every BLV at `t_K`.
    pub collapse: Vec<f64>,
    pub initial: DMatrix<f64>,
    pub terminal: DMatrix<f64>,
}

enum FilterState {
    Sqrt(SqrtCovariance),
    Dense(CovarianceMatrix),
}

impl FilterState {
    fn eigenvalues(&self) -> Result<Vec<f64>> {
        match self {
            FilterState::Sqrt(s) => Ok(s.eigenvalues()),
            FilterState::Dense(p) => Ok(sym_eig(p.matrix())?.eigenvalues.iter().copied().collect()),
        }
    }

    fn dense(&self) -> DMatrix<f64> {
        match self {
            FilterState::Sqrt(s) => s.dense(),
            FilterState::Dense(p) => p.matrix().clone(),
        }
    }

    fn cycle(&self, step: &ModelStep) -> Result<(FilterState, Option<FilterState>)> {
        match self {
            FilterState::Sqrt(s) => {
                let (pa, next) = s.cycle(step)?;
                Ok((FilterState::Sqrt(pa), Some(FilterState::Sqrt(next))))
            }
            FilterState::Dense(p) => {
                let pa = crate::filter::analysis_update(p, step.precision())?;
                let next = crate::filter::forecast_step(&pa, step.propagator(), step.model_noise())?;
                Ok((FilterState::Dense(pa), Some(FilterState::Dense(next))))
            }
        }
    }
}

fn checkpoints(steps: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = PROJECTION_CHECKPOINTS.iter().map(|f| (f * steps as f64).round() as usize).collect();
    ks.dedup();
    ks
}

fn run_filter(prep: &Prepared, x0: &DMatrix<f64>, opts: &RunOptions) -> Result<RunTrace> {
    let cfg = &prep.config;
    let lyap = &prep.lyapunov;
    let n = cfg.n;
    let big_k = cfg.steps;
    let steps = prep.filter_steps();
    let perfect = steps.iter().all(ModelStep::is_perfect);
    let p0 = CovarianceMatrix::from_factor(x0);
    let mut state = if perfect {
        FilterState::Sqrt(SqrtCovariance::from_factor(x0))
    } else {
        FilterState::Dense(p0.clone())
    };
    let n0 = lyap.n0();
    let mut auditor = opts.bounds.then(|| BoundAuditor::new(&p0));
    let mut tracker = opts.asymptote.then(|| AsymptoteTracker::new(n0));
    let mut neutral = opts.asymptote.then(|| NeutralObservability::new(lyap.classification.neutral.clone()));
    let marks = checkpoints(big_k);

    let mut trace = RunTrace {
        rank_p0: x0.ncols(),
        x0: x0.clone(),
        forecast_eigs: Vec::with_capacity(big_k + 1),
        analysis_eigs: Vec::with_capacity(big_k + 1),
        forecast_rank: Vec::with_capacity(big_k + 1),
        analysis_rank: Vec::with_capacity(big_k + 1),
        consecutive: Vec::with_capacity(big_k),
        analysis: Vec::new(),
        bounds: Vec::new(),
        asymptote: Vec::new(),
        condition2: Vec::new(),
        condition3: Vec::new(),
        projections: Vec::new(),
        collapse: Vec::new(),
        initial: p0.matrix().clone(),
        terminal: DMatrix::zeros(n, n),
    };
    let zeros = DMatrix::zeros(n, n);
    let mut prev_analysis: Option<DMatrix<f64>> = None;
    for (k, step) in steps.iter().enumerate() {
        let ev = state.eigenvalues().map_err(|e| e.at_step(k))?;
        trace.forecast_rank.push(ev.iter().filter(|&&l| l > opts.rank_threshold).count());
        trace.forecast_eigs.push(ev);
        let p = state.dense();
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: k, message: "forecast covariance is not finite".into() });
        }
        if let Some(aud) = auditor.as_mut() {
            let q = if k == 0 { &zeros } else { steps[k - 1].model_noise().matrix() };
            trace.bounds.push(aud.audit(&p, q).map_err(|e| e.at_step(k))?);
            aud.push(step).map_err(|e| e.at_step(k))?;
        }
        if let Some(tr) = tracker.as_mut() {
            let u = lyap.blv(k);
            let entry = match tr.asymptote(u) {
                Ok(s) => ((&p - s.matrix()).norm(), s.matrix().norm()),
                Err(Error::Unobservable(_)) => (f64::NAN, f64::NAN),
                Err(e) => return Err(e.at_step(k)),
            };
            trace.asymptote.push(entry);
            let c = lyap.clv(k).ok_or_else(|| Error::invalid(format!("no covariant vectors at step {k}")))?;
            let t = u.transpose() * c;
            trace.condition2.push(tr.covariant_min_eigenvalue(&t.view((0, 0), (n0, n0)).into_owned()));
            tr.push(u, lyap.factor(k), step.precision().matrix()).map_err(|e| e.at_step(k))?;
            if let Some(nt) = neutral.as_mut() {
                if !nt.is_vacuous() {
                    let s = lyap
                        .log_stretch(k)
                        .ok_or_else(|| Error::invalid(format!("no covariant stretches at step {k}")))?;
                    trace.condition3.push(nt.push(c, step.precision().matrix(), s));
                }
            }
        }
        let (pa, next) = state.cycle(step).map_err(|e| e.at_step(k))?;
        let eva = pa.eigenvalues().map_err(|e| e.at_step(k))?;
        trace.analysis_rank.push(eva.iter().filter(|&&l| l > opts.rank_threshold).count());
        trace.analysis_eigs.push(eva);
        let pad = pa.dense();
        if let Some(prev) = &prev_analysis {
            trace.consecutive.push((&pad - prev).norm());
        }
        if marks.contains(&k) {
            let proj = blv_projection(&CovarianceMatrix::from_computed(pad.clone()), lyap.blv(k))?;
            trace.projections.push((k, proj.diagonal().iter().copied().collect()));
        }
        if k == big_k {
            trace.collapse = collapse_norms(&p, lyap.blv(k));
            trace.terminal = p;
        }
        if opts.keep_analysis {
            trace.analysis.push(pad.clone());
        }
        prev_analysis = Some(pad);
        if k < big_k {
            state = next.expect("forecast");
        }
    }
    Ok(trace)
}

/// Rank law at the end of a run: `rank = r0` below `n0`, otherwise `n0 - 1` or `n0`.
pub fn rank_law_holds(terminal_rank: usize, r0: usize, n0: usize) -> bool {
    if r0 < n0 {
        terminal_rank == r0
    } else {
        terminal_rank == n0 || terminal_rank + 1 == n0
    }
}

fn tail_start(len: usize) -> usize {
    len - ((TAIL_FRACTION * len as f64).ceil() as usize).clamp(1, len)
}

fn finite_max(v: impl Iterator<Item = f64>) -> Option<f64> {
    v.filter(|x| !x.is_nan()).fold(None, |m, x| Some(m.map_or(x, |m: f64| m.max(x))))
}

fn finite_min(v: impl Iterator<Item = f64>) -> Option<f64> {
    v.filter(|x| !x.is_nan()).fold(None, |m, x| Some(m.map_or(x, |m: f64| m.min(x))))
}

/// Smallest margin of each bound over a run: `[bound0, bound1, bound2, bound3]`.
pub fn bound_minima(bounds: &[BoundMargins]) -> [Option<f64>; 4] {
    [
        finite_min(bounds.iter().map(|b| b.bound0)),
        finite_min(bounds.iter().filter_map(|b| b.bound1)),
        finite_min(bounds.iter().filter_map(|b| b.bound2)),
        finite_min(bounds.iter().filter_map(|b| b.bound3)),
    ]
}

/// Headline numbers of one filter run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub rank_p0: usize,
    pub terminal_rank: usize,
    pub terminal_analysis_rank: usize,
    pub rank_law: bool,
    pub condition1_rank: usize,
    pub condition1_min_singular: f64,
    pub condition1: bool,
    /// Smallest Condition 2 eigenvalue over the last tenth of the run.
    pub condition2_tail_min: Option<f64>,
    /// Smallest Condition 3 singular value over the last tenth; `None` when vacuous.
    pub condition3_tail_min: Option<f64>,
    /// Largest `||P_k - S_k|| / ||S_k||` over the last tenth.
    pub asymptote_tail_max: Option<f64>,
    pub bound_min: [Option<f64>; 4],
    /// Largest `||P_K u_i||` over stable indices.
    pub strong_collapse: Option<f64>,
    pub decay: DecayReport,
    /// Largest excess of `ln sigma_i^k` over the finite-time exponent bound; `<= 0` when it holds.
    pub rate_bound_excess: Option<f64>,
}

/// Headline numbers of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub suite: Suite,
    pub n: usize,
    pub d: usize,
    pub steps: usize,
    pub seed: u64,
    pub prng: String,
    pub exponents: Vec<f64>,
    pub classification: SpectrumClassification,
    pub runs: Vec<RunSummary>,
    /// Largest `||P^a_k - P'^a_k||_F` over the last tenth, when two runs were made.
    pub pair_distance_tail_max: Option<f64>,
}

/// Decay fit window `(0.2 K, K)` and the exponents averaged over it.
pub fn decay_window(prep: &Prepared) -> Result<((usize, usize), Vec<f64>)> {
    let k = prep.config.steps;
    let lo = ((DECAY_TRANSIENT * k as f64).ceil() as usize).min(k.saturating_sub(1));
    let exps = prep.lyapunov.window_exponents(lo, k)?;
    Ok(((lo, k), exps))
}

/// Fitted decay slopes of the analysis eigenvalues below index `n0`.
pub fn run_decay(prep: &Prepared, run: &RunTrace) -> Result<DecayReport> {
    if prep.config.steps < 2 {
        return Ok(DecayReport::default());
    }
    let (window, exps) = decay_window(prep)?;
    eigen_decay_fit(&run.analysis_eigs, &exps, prep.lyapunov.n0(), window)
}

/// Check `sigma_i^k <= sigma_1^0 exp(2 lambda_i^k k)` at quarter points of the window.
pub fn rate_bound(prep: &Prepared, run: &RunTrace) -> Result<f64> {
    let big_k = prep.config.steps;
    let props: Vec<DMatrix<f64>> = prep.filter_steps().iter().map(|s| s.propagator().clone()).collect();
    let mut finite = Vec::new();
    for q in 1..=4 {
        let k = (big_k * q / 4).max(1);
        if finite.iter().any(|(kk, _): &(usize, Vec<f64>)| *kk == k) {
            continue;
        }
        finite.push((k, finite_time_svd_steps(&props[..k])?.exponents));
    }
    decay_bound_excess(&run.forecast_eigs, &finite)
}

/// Summarize one run against the prepared Lyapunov data.
pub fn summarize_run(prep: &Prepared, run: &RunTrace) -> Result<RunSummary> {
    let lyap = &prep.lyapunov;
    let n0 = lyap.n0();
    let (c1_rank, c1_min) = condition1(&run.x0, &lyap.adjoint_initial, n0, CONDITION1_TOL);
    let terminal_rank = *run.forecast_rank.last().unwrap_or(&0);
    let terminal_analysis_rank = *run.analysis_rank.last().unwrap_or(&0);
    let cond2 = (!run.condition2.is_empty())
        .then(|| finite_min(run.condition2[tail_start(run.condition2.len())..].iter().copied()))
        .flatten();
    let cond3 = (!run.condition3.is_empty())
        .then(|| finite_min(run.condition3[tail_start(run.condition3.len())..].iter().copied()))
        .flatten();
    let asym = (!run.asymptote.is_empty())
        .then(|| finite_max(run.asymptote[tail_start(run.asymptote.len())..].iter().map(|(d, s)| d / s)))
        .flatten();
    let strong = finite_max(lyap.classification.stable.iter().map(|&i| run.collapse[i]));
    let rate_bound_excess = if prep.config.steps >= 4 && prep.sequence.steps.iter().all(ModelStep::is_perfect) {
        Some(rate_bound(prep, run)?)
    } else {
        None
    };
    Ok(RunSummary {
        rank_p0: run.rank_p0,
        terminal_rank,
        terminal_analysis_rank,
        rank_law: rank_law_holds(terminal_rank, run.rank_p0, n0),
        condition1_rank: c1_rank,
        condition1_min_singular: c1_min,
        condition1: c1_rank == n0,
        condition2_tail_min: cond2,
        condition3_tail_min: cond3,
        asymptote_tail_max: asym,
        bound_min: bound_minima(&run.bounds),
        strong_collapse: strong,
        decay: run_decay(prep, run)?,
        rate_bound_excess,
    })
}

/// Everything computed by `run`.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub prepared: Prepared,
    pub runs: Vec<RunTrace>,
    /// `||P^a_k - P'^a_k||_F` when two runs were made.
    pub pair_distance: Option<Vec<f64>>,
    pub summary: Summary,
}

/// Generate the sequence, run the Lyapunov passes and one or two filter runs.
pub fn execute(config: &ExperimentConfig) -> Result<Experiment> {
    let prepared = Prepared::new(config)?;
    let x0 = prepared.initial_factor(config.rank.resolve(config.n), false)?;
    let paired = config.rank2.is_some();
    let mut opts = RunOptions::full(config);
    opts.keep_analysis = paired;
    let (first, second) = match config.rank2 {
        Some(r2) => {
            let x1 = prepared.initial_factor(r2.resolve(config.n), true)?;
            let mut light = RunOptions::light(config);
            light.keep_analysis = true;
            let (a, b) = rayon::join(|| prepared.run(&x0, &opts), || prepared.run(&x1, &light));
            (a?, Some(b?))
        }
        None => (prepared.run(&x0, &opts)?, None),
    };
    let mut runs = vec![first];
    runs.extend(second);
    let pair_distance = if paired {
        Some(crate::diagnostics::pair_distance(&runs[0].analysis, &runs[1].analysis)?)
    } else {
        None
    };
    for r in runs.iter_mut() {
        r.analysis = Vec::new();
    }
    let run_summaries = runs.iter().map(|r| summarize_run(&prepared, r)).collect::<Result<Vec<_>>>()?;
    let pair_tail = pair_distance
        .as_ref()
        .and_then(|d| finite_max(d[tail_start(d.len())..].iter().copied()));
    let summary = Summary {
        suite: config.suite,
        n: config.n,
        d: config.d,
        steps: config.steps,
        seed: config.seed,
        prng: PRNG_IDENTITY.to_string(),
        exponents: prepared.lyapunov.exponents.clone(),
        classification: prepared.lyapunov.classification.clone(),
        runs: run_summaries,
        pair_distance_tail_max: pair_tail,
    };
    Ok(Experiment { prepared, runs, pair_distance, summary })
}

fn meta(config: &ExperimentConfig) -> String {
    format!("seed={} prng={} version={}", config.seed, PRNG_IDENTITY, crate::VERSION)
}

fn matrix_csv(meta: &str, m: &DMatrix<f64>) -> Csv {
    let mut csv = Csv::new(meta, &indexed_header(&[], "col", m.ncols()));
    for row in m.row_iter() {
        csv.row(row.iter().map(|&v| num(v)).collect());
    }
    csv
}

fn eig_csv(meta: &str, trace: &[Vec<f64>], ranks: &[usize], n: usize) -> Csv {
    let mut header = indexed_header(&["k"], "eigenvalue", n);
    header.push("rank".into());
    let mut csv = Csv::new(meta, &header);
    for (k, (ev, r)) in trace.iter().zip(ranks).enumerate() {
        let mut row = vec![k.to_string()];
        row.extend(ev.iter().map(|&v| num(v)));
        row.push(r.to_string());
        csv.row(row);
    }
    csv
}

fn spectrum_class(c: &SpectrumClassification, i: usize) -> &'static str {
    if c.neutral.contains(&i) {
        "neutral"
    } else if i < c.n0 {
        "unstable"
    } else {
        "stable"
    }
}

fn exponents_csv(meta: &str, exps: &[f64], fit: &[f64], c: &SpectrumClassification) -> Csv {
    let mut csv = Csv::with_columns(meta, &["index", "exponent", "fit_window_exponent", "class"]);
    for (i, (l, f)) in exps.iter().zip(fit).enumerate() {
        csv.row(vec![(i + 1).to_string(), num(*l), num(*f), spectrum_class(c, i).into()]);
    }
    csv
}

fn decay_csv(meta: &str, report: &DecayReport) -> Csv {
    let mut csv = Csv::with_columns(meta, &["index", "slope", "reference", "relative_error", "residual", "points"]);
    for f in &report.fits {
        csv.row(vec![
            (f.index + 1).to_string(),
            num(f.slope),
            num(f.reference),
            num(f.relative_error()),
            num(f.residual),
            f.points.to_string(),
        ]);
    }
    csv
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, num)
}

/// Write every data file of an experiment plus the manifest.
pub fn write_experiment(exp: &Experiment, out: &std::path::Path) -> Result<Manifest> {
    let cfg = &exp.prepared.config;
    let m = meta(cfg);
    let lyap = &exp.prepared.lyapunov;
    let n = cfg.n;
    let mut dir = OutputDir::create(out)?;
    let fit_exps = if cfg.steps >= 2 { decay_window(&exp.prepared)?.1 } else { lyap.exponents.clone() };
    dir.write_csv("exponents.csv", exponents_csv(&m, &lyap.exponents, &fit_exps, &lyap.classification))?;
    let a = &exp.runs[0];
    dir.write_csv("forecast_trace.csv", eig_csv(&m, &a.forecast_eigs, &a.forecast_rank, n))?;
    dir.write_csv("fig5a.csv", eig_csv(&m, &a.analysis_eigs, &a.analysis_rank, n))?;

    let b = exp.runs.get(1);
    let mut header = vec!["k", "rank"];
    if b.is_some() {
        header.push("rank_second");
    }
    let mut fig1 = Csv::with_columns(&m, &header);
    for k in 0..a.analysis_rank.len() {
        let mut row = vec![k.to_string(), a.analysis_rank[k].to_string()];
        if let Some(b) = b {
            row.push(b.analysis_rank[k].to_string());
        }
        fig1.row(row);
    }
    dir.write_csv("fig1.csv", fig1)?;

    if let Some(d) = &exp.pair_distance {
        let mut fig2 = Csv::with_columns(&m, &["k", "pair_distance"]);
        for (k, v) in d.iter().enumerate() {
            fig2.row(vec![k.to_string(), num(*v)]);
        }
        dir.write_csv("fig2.csv", fig2)?;
    }

    let mut fig3 = Csv::new(&m, &indexed_header(&["k"], "projection", n));
    for (k, diag) in &a.projections {
        let mut row = vec![k.to_string()];
        row.extend(diag.iter().map(|&v| num(v)));
        fig3.row(row);
    }
    dir.write_csv("fig3.csv", fig3)?;

    let mut fig4 = Csv::with_columns(&m, &["k", "consecutive_distance"]);
    for (j, v) in a.consecutive.iter().enumerate() {
        fig4.row(vec![(j + 1).to_string(), num(*v)]);
    }
    dir.write_csv("fig4.csv", fig4)?;
    dir.write_csv("fig5b.csv", decay_csv(&m, &exp.summary.runs[0].decay))?;

    if !a.bounds.is_empty() {
        let mut csv = Csv::with_columns(&m, &["k", "bound0", "bound1", "bound2", "bound3"]);
        for b in &a.bounds {
            csv.row(vec![b.k.to_string(), num(b.bound0), opt(b.bound1), opt(b.bound2), opt(b.bound3)]);
        }
        dir.write_csv("bounds.csv", csv)?;
    }
    if !a.asymptote.is_empty() {
        let mut csv = Csv::with_columns(
            &m,
            &["k", "distance", "asymptote_norm", "relative_distance", "condition2_min_eigenvalue", "condition3_min_singular"],
        );
        for (k, (d, s)) in a.asymptote.iter().enumerate() {
            csv.row(vec![
                k.to_string(),
                num(*d),
                num(*s),
                num(d / s),
                num(a.condition2[k]),
                a.condition3.get(k).map_or_else(String::new, |v| num(*v)),
            ]);
        }
        dir.write_csv("asymptote.csv", csv)?;
    }

    let mut collapse = Csv::with_columns(&m, &["index", "exponent", "class", "collapse_norm"]);
    for (i, v) in a.collapse.iter().enumerate() {
        collapse.row(vec![
            (i + 1).to_string(),
            num(lyap.exponents[i]),
            spectrum_class(&lyap.classification, i).into(),
            num(*v),
        ]);
    }
    dir.write_csv("collapse.csv", collapse)?;
    dir.write_csv("initial_covariance.csv", matrix_csv(&m, &a.initial))?;
    dir.write_csv("terminal_covariance.csv", matrix_csv(&m, &a.terminal))?;
    dir.write_json("summary.json", &exp.summary)?;
    dir.finish("run", cfg.seed, cfg.to_pairs())
}

/// `execute` followed by `write_experiment` into `config.out`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<(Experiment, Manifest)> {
    let exp = execute(config)?;
    let manifest = write_experiment(&exp, &config.out)?;
    Ok((exp, manifest))
}

/// Per-step deviations between the three covariance propagations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossCheckRow {
    pub k: usize,
    pub riccati_closed: f64,
    pub riccati_symplectic: f64,
    pub closed_symplectic: f64,
    pub riccati_sqrt: f64,
    /// Condition number of `I + P_0 Theta_k` in the dense closed form.
    pub dense_condition: f64,
}

impl CrossCheckRow {
    /// Largest of the three-way deviations.
    pub fn max_deviation(&self) -> f64 {
        self.riccati_closed.max(self.riccati_symplectic).max(self.closed_symplectic)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossCheckReport {
    pub rows: Vec<CrossCheckRow>,
    pub max_deviation: f64,
    /// First step where the dense closed form's inverted matrix exceeds the conditioning limit.
    pub degraded_at: Option<usize>,
}

/// Propagate one `P_0` by the Riccati recursion, the factored closed form, symplectic
/// blocks and the square-root filter over the first `K` cycles of the config's sequence.
pub fn cross_check(config: &ExperimentConfig) -> Result<CrossCheckReport> {
    config.validate()?;
    let mut seq_cfg = config.sequence_config();
    seq_cfg.steps = config.steps;
    if config.noise > 0.0 {
        return Err(Error::Config("cross-check needs a perfect model (noise = 0)".into()));
    }
    let seq = gen_model_sequence(&seq_cfg)?;
    let mut rng = seeded(config.seed, Stream::InitialCovariance);
    let x0 = random_factor(&mut rng, config.n, config.rank.resolve(config.n)).map_err(|e| Error::Config(e.to_string()))?;
    let p0 = CovarianceMatrix::from_factor(&x0);
    let x0 = psd_factor(p0.matrix(), FACTOR_TRUNCATION);
    let symp = symplectic_trace(&p0, &seq.steps)?;
    let mut ric = p0.clone();
    let mut closed = FactoredClosedForm::new(&p0)?;
    let mut sqrt = SqrtCovariance::from_factor(&x0);
    let mut agg = Aggregates::initial(config.n);
    let mut rows = Vec::with_capacity(config.steps + 1);
    for k in 0..=config.steps {
        let cf = closed.covariance()?;
        let dense = closed_form_covariance(&p0, &agg)?;
        let r = ric.matrix();
        rows.push(CrossCheckRow {
            k,
            riccati_closed: oracle_distance(cf.matrix(), r),
            riccati_symplectic: oracle_distance(symp[k].matrix(), r),
            closed_symplectic: oracle_distance(symp[k].matrix(), cf.matrix()),
            riccati_sqrt: oracle_distance(&sqrt.dense(), r),
            dense_condition: dense.condition,
        });
        if k == config.steps {
            break;
        }
        let step = &seq.steps[k];
        ric = riccati_step(&ric, step).map_err(|e| e.at_step(k))?;
        closed.push(step)?;
        sqrt = sqrt.cycle(step).map_err(|e| e.at_step(k))?.1;
        agg = accumulate(&agg, step)?;
    }
    let max_deviation = rows.iter().map(CrossCheckRow::max_deviation).fold(0.0, f64::max);
    let degraded_at = rows.iter().find(|r| r.dense_condition > CLOSED_FORM_COND_WARN).map(|r| r.k);
    Ok(CrossCheckReport { rows, max_deviation, degraded_at })
}

/// Write `cross_check.csv`, `cross_check.json` and the manifest.
pub fn write_cross_check(config: &ExperimentConfig, report: &CrossCheckReport) -> Result<Manifest> {
    let m = meta(config);
    let mut dir = OutputDir::create(&config.out)?;
    let mut csv = Csv::with_columns(
        &m,
        &["k", "riccati_closed", "riccati_symplectic", "closed_symplectic", "riccati_sqrt", "max_deviation", "dense_condition"],
    );
    for r in &report.rows {
        csv.row(vec![
            r.k.to_string(),
            num(r.riccati_closed),
            num(r.riccati_symplectic),
            num(r.closed_symplectic),
            num(r.riccati_sqrt),
            num(r.max_deviation()),
            num(r.dense_condition),
        ]);
    }
    dir.write_csv("cross_check.csv", csv)?;
    #[derive(Serialize)]
    struct Head {
        max_deviation: f64,
        degraded_at: Option<usize>,
    }
    dir.write_json("cross_check.json", &Head { max_deviation: report.max_deviation, degraded_at: report.degraded_at })?;
    dir.finish("cross-check", config.seed, config.to_pairs())
}

/// Exponents of the config's sequence over `K` steps after a discarded alignment transient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub exponents: Vec<f64>,
    pub classification: SpectrumClassification,
    pub transient: usize,
    pub steps: usize,
}

pub fn lyapunov_spectrum(config: &ExperimentConfig) -> Result<SpectrumReport> {
    config.validate()?;
    let transient = config.transient_steps();
    let mut seq_cfg = config.sequence_config();
    seq_cfg.steps = config.steps + transient;
    let seq = gen_model_sequence(&seq_cfg)?;
    let exponents = lyapunov_exponents(&seq.propagators(), config.seed, transient)?;
    let classification = classify_spectrum(&exponents, config.neutral_tol);
    Ok(SpectrumReport { exponents, classification, transient, steps: config.steps })
}

pub fn write_spectrum(config: &ExperimentConfig, report: &SpectrumReport) -> Result<Manifest> {
    let m = meta(config);
    let mut dir = OutputDir::create(&config.out)?;
    let mut csv = Csv::with_columns(&m, &["index", "exponent", "class"]);
    for (i, l) in report.exponents.iter().enumerate() {
        csv.row(vec![(i + 1).to_string(), num(*l), spectrum_class(&report.classification, i).into()]);
    }
    dir.write_csv("exponents.csv", csv)?;
    dir.write_json("spectrum.json", report)?;
    dir.finish("lyapunov", config.seed, config.to_pairs())
}

/// Diagnostics re-derived from a run directory's stored traces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredReport {
    pub n0: usize,
    pub terminal_rank: usize,
    pub rank_p0: usize,
    pub rank_law: bool,
    pub decay: DecayReport,
}

/// Re-derive the rank law and decay fits from `exponents.csv`, `fig5a.csv` and the manifest.
pub fn report_from_dir(dir: &std::path::Path) -> Result<(ExperimentConfig, StoredReport)> {
    let path = dir.join(MANIFEST_NAME);
    let manifest = Manifest::read(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let config = ExperimentConfig::from_pairs(&manifest.config)?;
    let exps = Table::read(&dir.join("exponents.csv"))?;
    let class = exps.column("class")?;
    let fit = exps.numeric_column("fit_window_exponent")?;
    let n0 = exps.rows.iter().filter(|r| r[class] != "stable").count();
    let trace = Table::read(&dir.join("fig5a.csv"))?;
    let rank_col = trace.column("rank")?;
    let values = trace.numeric_from(1)?;
    let eigs: Vec<Vec<f64>> = values.iter().map(|r| r[..rank_col - 1].to_vec()).collect();
    let ranks = Table::read(&dir.join("forecast_trace.csv"))?;
    let rc = ranks.column("rank")?;
    let terminal_rank: usize = ranks
        .rows
        .last()
        .ok_or_else(|| Error::Config("empty forecast trace".into()))?[rc]
        .parse()
        .map_err(|_| Error::Config("rank column is not an integer".into()))?;
    let k = config.steps;
    let decay = if k >= 2 {
        let lo = ((DECAY_TRANSIENT * k as f64).ceil() as usize).min(k - 1);
        eigen_decay_fit(&eigs, &fit, n0, (lo, k))?
    } else {
        DecayReport::default()
    };
    let rank_p0 = config.rank.resolve(config.n);
    Ok((config, StoredReport { n0, terminal_rank, rank_p0, rank_law: rank_law_holds(terminal_rank, rank_p0, n0), decay }))
}

/// Write `report.json` and a re-derived `fig5b.csv` into `out`.
pub fn write_report(config: &ExperimentConfig, report: &StoredReport, out: &std::path::Path) -> Result<Manifest> {
    let m = meta(config);
    let mut dir = OutputDir::create(out)?;
    dir.write_csv("fig5b.csv", decay_csv(&m, &report.decay))?;
    dir.write_json("report.json", report)?;
    dir.finish("report", config.seed, config.to_pairs())
}
