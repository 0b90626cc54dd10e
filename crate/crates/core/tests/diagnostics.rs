mod common;

use kfcollapse::cone::{condition_number, numerical_rank, random_spd, CovarianceMatrix};
use kfcollapse::diagnostics::{
    asymptote, blv_projection, condition1, consecutive_distance, decay_bound_excess, eigen_decay_fit, linear_fit,
    pair_distance, AsymptoteTracker, BoundAuditor, ConditionReport, NeutralObservability, DECAY_FLOOR,
};
use kfcollapse::filter::riccati_step;
use kfcollapse::lyapunov::forward_qr_pass;
use kfcollapse::models::{gen_model_sequence, ModelStep, SequenceConfig, SuiteKind};
use kfcollapse::symplectic::oracle_distance;
use kfcollapse::Error;
use nalgebra::{DMatrix, DVector};

fn sequence(n: usize, d: usize, seed: u64, steps: usize, noise: f64) -> Vec<ModelStep> {
    let mut cfg = SequenceConfig::new(SuiteKind::NonautonomousRandom, n, d, seed, steps);
    cfg.model_noise = noise;
    gen_model_sequence(&cfg).unwrap().steps
}

#[test]
fn linear_fit_recovers_exact_lines() {
    let x: Vec<f64> = (0..30).map(f64::from).collect();
    let y: Vec<f64> = x.iter().map(|v| 3.0 - 0.6 * v).collect();
    let (slope, intercept, residual) = linear_fit(&x, &y).unwrap();
    assert!((slope + 0.6).abs() < 1e-9);
    assert!((intercept - 3.0).abs() < 1e-9);
    assert!(residual < 1e-9);
    let (flat, level, _) = linear_fit(&x, &vec![2.5; 30]).unwrap();
    assert_eq!(flat, 0.0);
    assert_eq!(level, 2.5);
    assert!(linear_fit(&[1.0], &[1.0]).is_err());
    assert!(linear_fit(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    assert!(linear_fit(&[1.0, 2.0], &[1.0]).is_err());
}

#[test]
fn decay_fit_on_exact_exponentials() {
    let trace: Vec<Vec<f64>> = (0..=100).map(|k| vec![1.0, (-1.2 * k as f64).exp(), 1e-300]).collect();
    let report = eigen_decay_fit(&trace, &[0.0, -0.6, -2.0], 1, (20, 100)).unwrap();
    assert_eq!(report.fits.len(), 1);
    let fit = &report.fits[0];
    assert_eq!((fit.index, fit.points), (1, 81));
    assert!((fit.slope + 1.2).abs() < 1e-9);
    assert_eq!(fit.reference, -1.2);
    assert!(fit.relative_error() < 1e-9);
    assert!(1e-300 <= DECAY_FLOOR);
    assert_eq!(report.truncated, vec![2]);
    assert!(eigen_decay_fit(&trace, &[0.0, -0.6, -2.0], 1, (50, 50)).is_err());
    assert!(eigen_decay_fit(&trace, &[0.0, -0.6, -2.0], 1, (20, 101)).is_err());
}

#[test]
fn decay_bound_excess_sign() {
    let trace: Vec<Vec<f64>> = (0..=10).map(|k| vec![2.0 * (-1.0 * k as f64).exp()]).collect();
    let holds = decay_bound_excess(&trace, &[(5, vec![-0.4]), (10, vec![-0.45])]).unwrap();
    assert!(holds <= 0.0);
    let fails = decay_bound_excess(&trace, &[(10, vec![-0.55])]).unwrap();
    assert!((fails - 1.0).abs() < 1e-12);
    assert!(decay_bound_excess(&trace, &[(11, vec![0.0])]).is_err());
}

#[test]
fn blv_projection_examples() {
    let mut g = common::rng(61);
    let u = common::subspace(&mut g, 4, 4);
    let u0 = u.columns(0, 1).into_owned();
    let p = CovarianceMatrix::from_computed(&u0 * u0.transpose() * 3.0);
    let proj = blv_projection(&p, &u).unwrap();
    let mut want = DMatrix::zeros(4, 4);
    want[(0, 0)] = 3.0;
    assert!((proj - want).amax() < 1e-12);
    let id = blv_projection(&CovarianceMatrix::identity(4), &u).unwrap();
    assert!((id - DMatrix::identity(4, 4)).amax() < 1e-12);
    assert!(blv_projection(&CovarianceMatrix::identity(4), &(&u * 2.0)).is_err());
    assert!(blv_projection(&CovarianceMatrix::identity(3), &u).is_err());
}

#[test]
fn asymptote_examples() {
    let s = asymptote(&DMatrix::from_element(1, 1, 1.0), &DMatrix::from_element(1, 1, 4.0)).unwrap();
    assert!((s.matrix()[(0, 0)] - 0.25).abs() < 1e-15);
    let mut g = common::rng(62);
    let c = common::gaussian(&mut g, 6, 2);
    let gamma = common::spd(&mut g, 6, 0.1);
    let s = asymptote(&c, &gamma).unwrap();
    assert_eq!(numerical_rank(s.matrix(), 1e-10).unwrap(), 2);
    // S Gamma S = S and the range of S is the span of C.
    assert!(oracle_distance(&(s.matrix() * &gamma * s.matrix()), s.matrix()) < 1e-10);
    let basis = c.clone().qr().q();
    let outside = s.matrix() - &basis * basis.transpose() * s.matrix();
    assert!(outside.norm() < 1e-10 * s.matrix().norm());
    assert!(matches!(asymptote(&c, &DMatrix::zeros(6, 6)), Err(Error::Unobservable(_))));
}

#[test]
fn asymptote_tracker_matches_projected_information() {
    let steps = sequence(6, 2, 63, 12, 0.0);
    let props: Vec<_> = steps.iter().map(|s| s.propagator().clone()).collect();
    let fwd = forward_qr_pass(&props, 63).unwrap();
    let n0 = 3;
    let mut tracker = AsymptoteTracker::new(n0);
    let mut gamma = DMatrix::<f64>::zeros(6, 6);
    for (k, step) in steps.iter().enumerate() {
        tracker.push(&fwd.frames[k], &fwd.factors[k], step.precision().matrix()).unwrap();
        let minv = step.propagator().clone().try_inverse().unwrap();
        gamma = minv.transpose() * (&gamma + step.precision().matrix()) * &minv;
        let up = fwd.frames[k + 1].columns(0, n0).into_owned();
        let want = up.transpose() * &gamma * &up;
        assert!(oracle_distance(tracker.restricted(), &want) < 1e-8, "step {}", k + 1);
        if k >= 2 {
            let direct = asymptote(&up, &gamma).unwrap();
            let tracked = tracker.asymptote(&fwd.frames[k + 1]).unwrap();
            // The dense route inverts Gamma_k directly and loses accuracy with its conditioning.
            let tol = (1e-15 * condition_number(&gamma)).max(1e-10);
            assert!(oracle_distance(tracked.matrix(), direct.matrix()) < tol, "step {}", k + 1);
            let min = tracker.covariant_min_eigenvalue(&DMatrix::identity(n0, n0));
            assert!((min - want.symmetric_eigenvalues().min()).abs() < 1e-8 * want.norm());
        }
    }
    let empty = AsymptoteTracker::new(0);
    assert_eq!(empty.asymptote(&fwd.frames[0]).unwrap().matrix(), &DMatrix::zeros(6, 6));
    assert_eq!(empty.covariant_min_eigenvalue(&DMatrix::zeros(0, 0)), f64::INFINITY);
}

#[test]
fn distances_between_traces() {
    let mut g = common::rng(64);
    let a: Vec<_> = (0..4).map(|_| common::gaussian(&mut g, 3, 3)).collect();
    assert!(pair_distance(&a, &a).unwrap().iter().all(|&d| d == 0.0));
    assert!(pair_distance(&a, &a[..3]).is_err());
    let shifted: Vec<_> = a.iter().map(|m| m + DMatrix::from_element(3, 3, 1.0)).collect();
    assert!(pair_distance(&a, &shifted).unwrap().iter().all(|&d| (d - 3.0).abs() < 1e-12));
    let steps = vec![DMatrix::zeros(2, 2), DMatrix::identity(2, 2), DMatrix::identity(2, 2)];
    assert_eq!(consecutive_distance(&steps), vec![2f64.sqrt(), 0.0]);
}

#[test]
fn condition1_detects_missing_directions() {
    let mut g = common::rng(65);
    let v = common::subspace(&mut g, 5, 5);
    let (rank, min) = condition1(&v, &v, 2, 1e-10);
    assert_eq!(rank, 2);
    assert!((min - 1.0).abs() < 1e-12);
    // A factor orthogonal to the leading forward vector loses one observable direction.
    let blind = v.columns(1, 4).into_owned();
    let (rank, min) = condition1(&blind, &v, 2, 1e-10);
    assert_eq!(rank, 1);
    assert_eq!(min, 0.0);
    let report = ConditionReport {
        n0: 2,
        rank_p0: 4,
        condition1_rank: rank,
        condition1_min_singular: min,
        condition2: vec![0.0, 1.0, 2.0, 3.0],
        condition3: None,
    };
    assert!(!report.condition1());
    assert!(report.condition2_holds(0.5, 0.5));
    assert!(!report.condition2_holds(1.0, 0.5));
    assert_eq!(condition1(&blind, &v, 0, 1e-10), (0, 0.0));
}

#[test]
fn neutral_observability_grows_linearly_for_neutral_dynamics() {
    let mut phi = NeutralObservability::new(vec![0]);
    assert!(!phi.is_vacuous());
    let c = DMatrix::<f64>::identity(2, 2);
    let mut omega = DMatrix::zeros(2, 2);
    omega[(0, 0)] = 0.3;
    let stretch = DVector::from_vec(vec![0.0, -0.5]);
    for k in 1..=50 {
        let min = phi.push(&c, &omega, &stretch);
        assert!((min - 0.3 * k as f64).abs() < 1e-12);
    }
    let mut none = NeutralObservability::new(Vec::new());
    assert!(none.is_vacuous());
    assert_eq!(none.push(&c, &omega, &stretch), f64::INFINITY);
}

#[test]
fn neutral_observability_rescales_growth() {
    // A mode stretched by e^{0.1} each step: Phi stays bounded by the attenuated sum.
    let mut phi = NeutralObservability::new(vec![0]);
    let c = DMatrix::<f64>::identity(1, 1);
    let omega = DMatrix::from_element(1, 1, 1.0);
    let stretch = DVector::from_element(1, 0.1);
    let mut want = 0.0;
    for _ in 0..100 {
        let min = phi.push(&c, &omega, &stretch);
        want = (want + 1.0) * (-0.2f64).exp();
        assert!((min - want).abs() < 1e-12);
    }
    assert!(phi.phi()[(0, 0)] < 1.0 / (1.0 - (-0.2f64).exp()));
}

#[test]
fn free_forecast_matches_direct_propagation() {
    let steps = sequence(5, 2, 66, 10, 0.2);
    let p0 = random_spd(5, 3, 66).unwrap();
    let mut auditor = BoundAuditor::new(&p0);
    let mut resolvent = DMatrix::<f64>::identity(5, 5);
    let mut xi = DMatrix::<f64>::zeros(5, 5);
    assert!(oracle_distance(&auditor.free_forecast().unwrap(), p0.matrix()) < 1e-14);
    for step in &steps {
        auditor.push(step).unwrap();
        let m = step.propagator();
        resolvent = m * resolvent;
        xi = m * xi * m.transpose() + step.model_noise().matrix();
        let want = &resolvent * p0.matrix() * resolvent.transpose() + &xi;
        assert!(oracle_distance(&auditor.free_forecast().unwrap(), &want) < 1e-10);
    }
    assert_eq!(auditor.k(), 10);
    assert!(auditor.inverse_information().is_none());
}

#[test]
fn inverse_information_matches_dense_inverse() {
    // Orthogonal propagators keep the dense information sum well conditioned.
    let mut g = common::rng(67);
    let steps: Vec<_> = (0..8)
        .map(|_| {
            let m = common::subspace(&mut g, 4, 4);
            ModelStep::perfect(m, common::gaussian(&mut g, 2, 4), CovarianceMatrix::identity(2)).unwrap()
        })
        .collect();
    let p0 = random_spd(4, 2, 67).unwrap();
    let mut auditor = BoundAuditor::new(&p0);
    let mut gamma = DMatrix::<f64>::zeros(4, 4);
    let mut seen = 0;
    for step in &steps {
        auditor.push(step).unwrap();
        let minv = step.propagator().clone().try_inverse().unwrap();
        gamma = minv.transpose() * (&gamma + step.precision().matrix()) * &minv;
        if let Some(inv) = auditor.inverse_information() {
            let want = gamma.clone().try_inverse().unwrap();
            assert!(oracle_distance(&inv, &want) < 1e-8, "step {}", auditor.k());
            seen += 1;
        }
    }
    assert!(seen >= 5, "information became invertible only for {seen} steps");
}

#[test]
fn bound_margins_hold_along_filter_runs() {
    for noise in [0.0, 0.3] {
        let steps = sequence(8, 3, 68, 120, noise);
        let p0 = random_spd(8, 8, 68).unwrap();
        let mut auditor = BoundAuditor::new(&p0);
        let mut p = p0.clone();
        let first = auditor.audit(p.matrix(), &DMatrix::zeros(8, 8)).unwrap();
        assert!(first.bound0.abs() < 1e-12);
        for step in &steps {
            p = riccati_step(&p, step).unwrap();
            auditor.push(step).unwrap();
            let m = auditor.audit(p.matrix(), step.model_noise().matrix()).unwrap();
            assert!(m.bound0 >= -1e-8, "noise {noise} step {}: {m:?}", m.k);
            for b in [m.bound1, m.bound2, m.bound3].into_iter().flatten() {
                assert!(b >= -1e-8, "noise {noise} step {}: {m:?}", m.k);
            }
            assert_eq!(m.bound1.is_some(), noise == 0.0);
        }
    }
}
