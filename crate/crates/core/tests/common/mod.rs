//! Shared generators and property checks for the integration tests.

#![allow(dead_code)]

use kfcollapse::cone::{loewner_leq, loewner_margin, shift_lemma_residual, standard_normal, sym_eig};
use kfcollapse::symplectic::{autonomous_theta, stein_solve, theta_by_recursion, ThetaBranch};
use kfcollapse::cone::CovarianceMatrix;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

pub fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    standard_normal(rng, rows, cols)
}

/// `X X^T + shift I` with `X` square standard normal.
pub fn spd(rng: &mut ChaCha12Rng, n: usize, shift: f64) -> DMatrix<f64> {
    let x = gaussian(rng, n, n);
    &x * x.transpose() + DMatrix::identity(n, n) * shift
}

/// Random PSD matrix of the given rank.
pub fn psd(rng: &mut ChaCha12Rng, n: usize, rank: usize) -> DMatrix<f64> {
    let x = gaussian(rng, n, rank);
    &x * x.transpose()
}

/// Orthonormal `n x s` basis of a random subspace.
pub fn subspace(rng: &mut ChaCha12Rng, n: usize, s: usize) -> DMatrix<f64> {
    gaussian(rng, n, s).qr().q()
}

pub fn scale(a: &DMatrix<f64>) -> f64 {
    a.norm().max(1.0)
}

/// Order by quadratic forms: `loewner_leq` agrees with sampled `x^T A x <= x^T B x`, and a
/// failed comparison has a witness vector.
pub fn cone_point1(rng: &mut ChaCha12Rng) -> Result<(), String> {
    let n = rng.random_range(2..7);
    let a = psd(rng, n, n);
    let r = rng.random_range(1..=n);
    let gap = psd(rng, n, r);
    let b = &a + &gap;
    let tol = 1e-10 * scale(&b);
    if !loewner_leq(&a, &b, tol).unwrap() {
        return Err(format!("A <= A + D rejected for n={n}"));
    }
    for _ in 0..20 {
        let x = gaussian(rng, n, 1);
        let qa = (x.transpose() * &a * &x)[(0, 0)];
        let qb = (x.transpose() * &b * &x)[(0, 0)];
        if qa > qb + tol * x.norm_squared() {
            return Err(format!("quadratic form {qa} exceeds {qb}"));
        }
    }
    let v = subspace(rng, n, 1);
    let c = &b - &v * v.transpose() * (b.norm() + 1.0);
    let margin = loewner_margin(&a, &c).unwrap();
    if margin >= 0.0 || loewner_leq(&a, &c, 0.0).unwrap() {
        return Err("A <= C accepted although C - A has a negative direction".into());
    }
    let eig = sym_eig(&kfcollapse::cone::symmetrize(&(&c - &a))).unwrap();
    let w = eig.eigenvectors.column(n - 1).into_owned();
    let qa = (w.transpose() * &a * &w)[(0, 0)];
    let qc = (w.transpose() * &c * &w)[(0, 0)];
    if qa <= qc {
        return Err("witness vector does not violate the order".into());
    }
    Ok(())
}

/// `A <= B` implies `B^{-1} <= A^{-1}` for positive definite matrices.
pub fn cone_point3(rng: &mut ChaCha12Rng) -> Result<(), String> {
    let n = rng.random_range(2..7);
    let a = spd(rng, n, 0.5);
    let r = rng.random_range(1..=n);
    let b = &a + psd(rng, n, r);
    let ainv = a.clone().try_inverse().unwrap();
    let binv = b.clone().try_inverse().unwrap();
    if !loewner_leq(&a, &b, 1e-10 * scale(&b)).unwrap() {
        return Err("constructed pair is not ordered".into());
    }
    if !loewner_leq(&binv, &ainv, 1e-10 * scale(&ainv)).unwrap() {
        return Err(format!("inverse order fails: margin {}", loewner_margin(&binv, &ainv).unwrap()));
    }
    Ok(())
}

/// `sigma_min I <= A <= sigma_max I`.
pub fn cone_point5(rng: &mut ChaCha12Rng) -> Result<(), String> {
    let n = rng.random_range(1..8);
    let r = rng.random_range(1..=n);
    let a = psd(rng, n, r);
    let eig = sym_eig(&a).unwrap();
    let hi = eig.eigenvalues[0];
    let lo = eig.eigenvalues[n - 1];
    let id = DMatrix::<f64>::identity(n, n);
    let tol = 1e-10 * hi.max(1.0);
    if !loewner_leq(&(&id * lo), &a, tol).unwrap() || !loewner_leq(&a, &(&id * hi), tol).unwrap() {
        return Err(format!("spectral sandwich fails for eigenvalues [{lo}, {hi}]"));
    }
    Ok(())
}

/// A quadratic form bounded by `alpha` on an `s`-dimensional subspace leaves at least `s`
/// eigenvalues at or below `alpha`.
pub fn cone_point6(rng: &mut ChaCha12Rng) -> Result<(), String> {
    let n = rng.random_range(2..8);
    let s = rng.random_range(1..=n);
    let r = rng.random_range(1..=n);
    let a = psd(rng, n, r);
    let w = subspace(rng, n, s);
    let restricted = kfcollapse::cone::symmetrize(&(w.transpose() * &a * &w));
    let alpha = sym_eig(&restricted).unwrap().eigenvalues[0];
    let eig = sym_eig(&a).unwrap();
    let below = eig.eigenvalues.iter().filter(|&&l| l <= alpha + 1e-10 * scale(&a)).count();
    if below < s {
        return Err(format!("only {below} eigenvalues below alpha = {alpha}, subspace dimension {s}"));
    }
    Ok(())
}

/// `A (I + B A)^{-1} = (I + A B)^{-1} A` for random rectangular `A`, `B`.
pub fn shift_lemma(rng: &mut ChaCha12Rng) -> Result<(), String> {
    loop {
        let n = rng.random_range(1..8);
        let m = rng.random_range(1..8);
        let a = gaussian(rng, n, m);
        let b = gaussian(rng, m, n);
        let small = DMatrix::<f64>::identity(m, m) + &b * &a;
        let large = DMatrix::<f64>::identity(n, n) + &a * &b;
        // Both inverses must exist numerically; draws near the singular set are redrawn.
        let cond = kfcollapse::cone::condition_number(&small).max(kfcollapse::cone::condition_number(&large));
        if cond > 1e6 {
            continue;
        }
        // Each side is computed to about eps * cond * ||A|| (1 + ||A|| ||B||).
        let tol = 1e-14 * cond * a.norm() * (1.0 + a.norm() * b.norm());
        let res = shift_lemma_residual(&a, &b).map_err(|e| e.to_string())?;
        if res > tol {
            return Err(format!("shift identity residual {res:e} exceeds {tol:e} for {n}x{m}"));
        }
        return Ok(());
    }
}

/// Random contractive `M` (spectral radius below 1) and random `Omega`.
pub fn contractive_system(rng: &mut ChaCha12Rng, n: usize) -> (DMatrix<f64>, CovarianceMatrix) {
    let g = gaussian(rng, n, n);
    let radius = g.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max);
    let target = rng.random_range(0.3..0.95);
    let m = g * (target / radius);
    let d = rng.random_range(1..=n);
    let omega = CovarianceMatrix::from_computed(psd(rng, n, d));
    (m, omega)
}

/// Stein residual within `1e-8` and `Psi - (M^k)^T Psi M^k` equal to the direct sum.
pub fn stein_contractive(rng: &mut ChaCha12Rng) -> Result<(), String> {
    let n = rng.random_range(1..7);
    let (m, omega) = contractive_system(rng, n);
    let sol = stein_solve(&m, &omega).map_err(|e| e.to_string())?;
    if sol.regularized || sol.residual > 1e-8 {
        return Err(format!("Stein residual {:e} (regularized: {})", sol.residual, sol.regularized));
    }
    for k in [1usize, 2, 5, 13, 30] {
        let (theta, branch) = autonomous_theta(&m, &omega, k).map_err(|e| e.to_string())?;
        let direct = direct_theta(&m, omega.matrix(), k);
        if branch != ThetaBranch::Stein {
            return Err("contractive system fell back to the recursion".into());
        }
        let dev = (&theta - &direct).norm() / direct.norm().max(1.0);
        if dev > 1e-8 {
            return Err(format!("Theta_{k} deviates from the direct sum by {dev:e}"));
        }
        let rec = theta_by_recursion(&m, &omega, k).map_err(|e| e.to_string())?;
        if (&rec - &direct).norm() / direct.norm().max(1.0) > 1e-10 {
            return Err(format!("recursion disagrees with direct sum at k={k}"));
        }
    }
    Ok(())
}

/// `sum_{l<k} (M^l)^T Omega M^l` term by term.
pub fn direct_theta(m: &DMatrix<f64>, omega: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let n = m.nrows();
    let mut sum = DMatrix::zeros(n, n);
    let mut ml = DMatrix::identity(n, n);
    for _ in 0..k {
        sum += ml.transpose() * omega * &ml;
        ml = m * ml;
    }
    sum
}

/// Run `check` over `trials` seeded draws; returns the first failure.
pub fn trials(seed: u64, count: usize, check: fn(&mut ChaCha12Rng) -> Result<(), String>) -> Result<(), String> {
    let mut r = rng(seed);
    for t in 0..count {
        check(&mut r).map_err(|e| format!("trial {t}: {e}"))?;
    }
    Ok(())
}
