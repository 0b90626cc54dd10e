//! Randomized properties of the Loewner order, the shift identity and the Stein solver.

mod common;

use common::rng;
use kfcollapse::cone::{loewner_leq, numerical_rank, random_spd, sym_eig};
use kfcollapse::filter::{analysis_update, riccati_step};
use kfcollapse::models::ModelStep;
use kfcollapse::cone::CovarianceMatrix;
use nalgebra::DMatrix;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn order_matches_quadratic_forms(seed in any::<u64>()) {
        let r = common::cone_point1(&mut rng(seed));
        prop_assert!(r.is_ok(), "{:?}", r);
    }

    #[test]
    fn inversion_reverses_order(seed in any::<u64>()) {
        let r = common::cone_point3(&mut rng(seed));
        prop_assert!(r.is_ok(), "{:?}", r);
    }

    #[test]
    fn spectrum_sandwich(seed in any::<u64>()) {
        let r = common::cone_point5(&mut rng(seed));
        prop_assert!(r.is_ok(), "{:?}", r);
    }

    #[test]
    fn subspace_bound_counts_eigenvalues(seed in any::<u64>()) {
        let r = common::cone_point6(&mut rng(seed));
        prop_assert!(r.is_ok(), "{:?}", r);
    }

    #[test]
    fn shift_identity(seed in any::<u64>()) {
        let r = common::shift_lemma(&mut rng(seed));
        prop_assert!(r.is_ok(), "{:?}", r);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn stein_on_contractive_systems(seed in any::<u64>()) {
        let r = common::stein_contractive(&mut rng(seed));
        prop_assert!(r.is_ok(), "{:?}", r);
    }

    #[test]
    fn congruence_preserves_order(seed in any::<u64>(), q in 1usize..6) {
        let mut g = rng(seed);
        let n = 4;
        let a = common::psd(&mut g, n, n);
        let b = &a + common::psd(&mut g, n, 2);
        let t = common::gaussian(&mut g, q, n);
        let ga = &t * &a * t.transpose();
        let gb = &t * &b * t.transpose();
        prop_assert!(loewner_leq(&ga, &gb, 1e-10 * gb.norm().max(1.0)).unwrap());
    }

    #[test]
    fn random_spd_has_requested_rank(n in 1usize..9, seed in any::<u64>(), frac in 0.0f64..1.0) {
        let r = 1 + ((n - 1) as f64 * frac) as usize;
        let p = random_spd(n, r, seed).unwrap();
        prop_assert_eq!(numerical_rank(p.matrix(), 1e-10).unwrap(), r);
        let eig = sym_eig(p.matrix()).unwrap();
        prop_assert!(eig.eigenvalues[n - 1] >= -1e-10 * eig.eigenvalues[0].max(1.0));
    }

    #[test]
    fn perfect_model_preserves_rank(seed in any::<u64>(), r in 1usize..6) {
        let mut g = rng(seed);
        let n = 6;
        let m = common::gaussian(&mut g, n, n) * 0.6;
        let h = common::gaussian(&mut g, 3, n);
        let rr = CovarianceMatrix::from_computed(common::spd(&mut g, 3, 0.5));
        let step = ModelStep::perfect(m, h, rr).unwrap();
        let x = common::gaussian(&mut g, n, r);
        let p0 = CovarianceMatrix::from_factor(&x);
        let p1 = riccati_step(&p0, &step).unwrap();
        let rank = |p: &DMatrix<f64>| {
            let e = sym_eig(p).unwrap().eigenvalues;
            e.iter().filter(|&&l| l > 1e-10 * e[0]).count()
        };
        prop_assert_eq!(rank(p1.matrix()), rank(p0.matrix()));
    }

    #[test]
    fn analysis_never_increases_covariance(seed in any::<u64>()) {
        let mut g = rng(seed);
        let n = 5;
        let p = CovarianceMatrix::from_computed(common::psd(&mut g, n, 3));
        let omega = CovarianceMatrix::from_computed(common::psd(&mut g, n, 2));
        let pa = analysis_update(&p, &omega).unwrap();
        prop_assert!(loewner_leq(pa.matrix(), p.matrix(), 1e-10 * p.matrix().norm().max(1.0)).unwrap());
        prop_assert!(loewner_leq(&DMatrix::zeros(n, n), pa.matrix(), 1e-10 * p.matrix().norm().max(1.0)).unwrap());
    }
}
