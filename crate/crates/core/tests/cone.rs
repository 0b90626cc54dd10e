mod common;

use kfcollapse::cone::{
    graded_singular_values, loewner_leq, loewner_margin, numerical_rank, psd_factor, random_spd, random_spd_with,
    relative_loewner_margin, shift_lemma_residual, sym_eig, CovarianceMatrix, FACTOR_TRUNCATION,
};
use kfcollapse::Error;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

/// Coefficients `c_0..c_n` of `det(x I - A) = sum c_j x^j` by the Faddeev-LeVerrier recursion.
fn characteristic_polynomial(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut coeffs = vec![0.0; n + 1];
    coeffs[n] = 1.0;
    let mut m = DMatrix::<f64>::zeros(n, n);
    let id = DMatrix::<f64>::identity(n, n);
    for k in 1..=n {
        m = a * &m + &id * coeffs[n - k + 1];
        coeffs[n - k] = -(a * &m).trace() / k as f64;
    }
    coeffs
}

fn horner(coeffs: &[f64], x: Complex64) -> Complex64 {
    coeffs.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, &c| acc * x + c)
}

/// All roots of a monic polynomial by Durand-Kerner iteration.
fn durand_kerner(coeffs: &[f64]) -> Vec<Complex64> {
    let n = coeffs.len() - 1;
    let bound = 1.0 + coeffs[..n].iter().map(|c| c.abs()).fold(0.0, f64::max);
    let seed = Complex64::new(0.4, 0.9);
    let mut roots: Vec<Complex64> = (0..n).map(|i| seed.powu(i as u32) * bound).collect();
    for _ in 0..2000 {
        let mut change: f64 = 0.0;
        for i in 0..n {
            let denom = (0..n).filter(|&j| j != i).fold(Complex64::new(1.0, 0.0), |acc, j| acc * (roots[i] - roots[j]));
            let step = horner(coeffs, roots[i]) / denom;
            roots[i] -= step;
            change = change.max(step.norm());
        }
        if change < 1e-15 * bound {
            break;
        }
    }
    roots
}

#[test]
fn identity_eigenvalues() {
    let eig = sym_eig(&DMatrix::identity(4, 4)).unwrap();
    assert_eq!(eig.eigenvalues, DVector::from_element(4, 1.0));
}

#[test]
fn diagonal_eigenvalues_sorted_descending() {
    let a = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0, 2.0]));
    let eig = sym_eig(&a).unwrap();
    assert_eq!(eig.eigenvalues.as_slice(), &[3.0, 2.0, 1.0]);
    assert!((eig.reconstruct() - &a).norm() < 1e-14);
}

#[test]
fn eigenvalues_match_characteristic_polynomial_roots() {
    let mut g = common::rng(5);
    for _ in 0..20 {
        let x = common::gaussian(&mut g, 5, 5);
        let a = (&x + x.transpose()) * 0.5;
        let eig = sym_eig(&a).unwrap();
        let mut roots: Vec<f64> = durand_kerner(&characteristic_polynomial(&a))
            .iter()
            .map(|r| {
                assert!(r.im.abs() < 1e-6, "symmetric matrix has complex root {r}");
                r.re
            })
            .collect();
        roots.sort_by(|p, q| q.total_cmp(p));
        let scale = eig.eigenvalues.amax().max(1.0);
        for (l, r) in eig.eigenvalues.iter().zip(&roots) {
            assert!((l - r).abs() <= 1e-8 * scale, "eigenvalue {l} vs root {r}");
        }
    }
}

#[test]
fn eigendecomposition_invariants() {
    let mut g = common::rng(6);
    for n in [1, 3, 8, 20] {
        let a = common::psd(&mut g, n, n);
        let eig = sym_eig(&a).unwrap();
        assert!((eig.reconstruct() - &a).norm() / a.norm() <= 1e-10);
        let v = &eig.eigenvectors;
        assert!((v.transpose() * v - DMatrix::identity(n, n)).norm() <= 1e-10);
        assert!(eig.eigenvalues.as_slice().windows(2).all(|w| w[0] >= w[1]));
    }
}

#[test]
fn asymmetric_input_is_rejected() {
    let mut a = DMatrix::identity(3, 3);
    a[(0, 1)] = 1e-3;
    assert!(matches!(sym_eig(&a), Err(Error::InvalidInput(_))));
    assert!(CovarianceMatrix::new(a).is_err());
}

#[test]
fn covariance_rejects_negative_eigenvalue() {
    let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1e-3]));
    assert!(CovarianceMatrix::new(a).is_err());
    let tiny = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1e-12]));
    assert!(CovarianceMatrix::new(tiny).is_ok());
}

#[test]
fn loewner_examples() {
    let i = DMatrix::<f64>::identity(3, 3);
    assert!(loewner_leq(&i, &(&i * 2.0), 0.0).unwrap());
    assert!(!loewner_leq(&(&i * 2.0), &i, 0.0).unwrap());
    let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
    let b = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 1.0]));
    assert!(!loewner_leq(&a, &b, 0.0).unwrap());
    assert!(!loewner_leq(&b, &a, 0.0).unwrap());
    assert_eq!(loewner_margin(&a, &b).unwrap(), -1.0);
}

#[test]
fn loewner_dimension_mismatch_is_an_error() {
    let a = DMatrix::<f64>::identity(2, 2);
    let b = DMatrix::<f64>::identity(3, 3);
    assert!(loewner_leq(&a, &b, 0.0).is_err());
}

#[test]
fn relative_margin_scales_out() {
    let a = DMatrix::<f64>::identity(2, 2) * 1e6;
    let b = DMatrix::<f64>::identity(2, 2) * 2e6;
    assert_eq!(relative_loewner_margin(&a, &b).unwrap(), 0.5);
    let z = DMatrix::<f64>::zeros(2, 2);
    assert_eq!(relative_loewner_margin(&z, &z).unwrap(), 0.0);
}

#[test]
fn numerical_rank_examples() {
    assert_eq!(numerical_rank(&DMatrix::identity(5, 5), 1e-10).unwrap(), 5);
    let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-12, 0.0]));
    assert_eq!(numerical_rank(&d, 1e-10).unwrap(), 1);
    let u = DVector::from_vec(vec![1.0, 2.0, -2.0]) / 3.0;
    assert_eq!(numerical_rank(&(&u * u.transpose()), 1e-10).unwrap(), 1);
    assert!(numerical_rank(&d, 0.0).is_err());
}

#[test]
fn random_spd_scalar_is_square_of_draw() {
    use kfcollapse::cone::standard_normal;
    use kfcollapse::rng::{seeded, Stream};
    let seed = 17;
    let p = random_spd(1, 1, seed).unwrap();
    let b = standard_normal(&mut seeded(seed, Stream::Matrix), 1, 1)[(0, 0)];
    let q = random_spd_with(&mut seeded(seed, Stream::Matrix), 1, 1).unwrap();
    assert_eq!(p.matrix()[(0, 0)], q.matrix()[(0, 0)]);
    assert!((q.matrix()[(0, 0)] - b * b).abs() <= 1e-15 * b * b);
}

#[test]
fn random_spd_rank_and_contract() {
    for seed in 0..10 {
        let p = random_spd(6, 3, seed).unwrap();
        assert_eq!(numerical_rank(p.matrix(), 1e-10).unwrap(), 3);
        assert!(CovarianceMatrix::new(p.matrix().clone()).is_ok());
    }
    assert!(random_spd(4, 0, 0).is_err());
    assert!(random_spd(4, 5, 0).is_err());
}

#[test]
fn psd_factor_reproduces_matrix() {
    let mut g = common::rng(7);
    let p = common::psd(&mut g, 8, 3);
    let x = psd_factor(&p, FACTOR_TRUNCATION);
    assert_eq!(x.ncols(), 3);
    assert!((&x * x.transpose() - &p).norm() <= 1e-12 * p.norm());
}

#[test]
fn graded_singular_values_resolve_tiny_scales() {
    let mut g = common::rng(8);
    let q = common::subspace(&mut g, 6, 6);
    let sigma = [1.0, 1e-3, 1e-20, 1e-50, 1e-90, 1e-140];
    let a = DMatrix::from_diagonal(&DVector::from_row_slice(&sigma)) * &q;
    let s = graded_singular_values(&a);
    for (got, want) in s.iter().zip(sigma) {
        assert!((got - want).abs() <= 1e-12 * want, "{got:e} vs {want:e}");
    }
}

#[test]
fn shift_identity_examples() {
    let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 0.0, -1.0, 0.5, 3.0]);
    let b = DMatrix::from_row_slice(3, 2, &[0.2, 0.0, 1.0, -0.3, 0.5, 0.1]);
    assert!(shift_lemma_residual(&a, &b).unwrap() <= 1e-12 * a.norm());
    assert!(shift_lemma_residual(&a, &a).is_err());
}

#[test]
fn randomized_cone_properties() {
    common::trials(11, 200, common::cone_point1).unwrap();
    common::trials(12, 200, common::cone_point3).unwrap();
    common::trials(13, 200, common::cone_point5).unwrap();
    common::trials(14, 200, common::cone_point6).unwrap();
    common::trials(15, 200, common::shift_lemma).unwrap();
}
