//! Small dense linear-algebra helpers shared by the filter and simulator.
//!
//! Everything here operates on `nalgebra` dense types; entity blocks are
//! small (a handful of coordinates), so no sparse or structured storage is
//! warranted. The covariance-facing helpers are deliberately conservative:
//! solves escalate jitter instead of failing on marginal inputs, and
//! [`psd_repair`] only rewrites a matrix when it is measurably indefinite.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{DekfError, Result};

/// Minimum-eigenvalue threshold below which [`psd_repair`] rewrites a matrix.
pub const PSD_TOLERANCE: f64 = 1e-9;

/// Floor applied to eigenvalues when a repair does trigger.
pub const PSD_FLOOR: f64 = 1e-12;

/// Returns the symmetric part `(s + s')/2`.
///
/// For an already-symmetric matrix this is a bitwise no-op, which keeps
/// repeated symmetrization idempotent.
pub fn symmetrize(s: &DMatrix<f64>) -> DMatrix<f64> {
    debug_assert_eq!(s.nrows(), s.ncols());
    0.5 * (s + s.transpose())
}

/// Solves `A X = B` for symmetric positive-definite `A` by Cholesky.
///
/// If the factorization fails (marginally indefinite input from accumulated
/// roundoff), a diagonal jitter of `1e-12 * mean(diag)` is added and escalated
/// by 10x per retry, up to three retries, before giving up with
/// [`DekfError::NonPositiveDefinite`].
pub fn solve_spd(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() != a.ncols() || a.nrows() != b.nrows() {
        return Err(DekfError::DimensionMismatch(format!(
            "solve_spd: A is {}x{}, B is {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    if let Some(chol) = Cholesky::new(a.clone()) {
        return Ok(chol.solve(b));
    }
    let dim = a.nrows() as f64;
    let scale = a.trace() / dim;
    let base = 1e-12 * if scale > 0.0 { scale } else { 1.0 };
    let mut jitter = base;
    for _ in 0..3 {
        let jittered = a + DMatrix::identity(a.nrows(), a.ncols()) * jitter;
        if let Some(chol) = Cholesky::new(jittered) {
            return Ok(chol.solve(b));
        }
        jitter *= 10.0;
    }
    Err(DekfError::NonPositiveDefinite(format!(
        "{}x{} system unsolvable with jitter up to {:e}",
        a.nrows(),
        a.ncols(),
        jitter / 10.0
    )))
}

/// Convenience wrapper around [`solve_spd`] for a single right-hand side.
pub fn solve_spd_vec(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let cols = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
    let x = solve_spd(a, &cols)?;
    Ok(DVector::from_column_slice(x.as_slice()))
}

/// Symmetrizes `s` and, only if its minimum eigenvalue is below
/// `-PSD_TOLERANCE`, clamps all eigenvalues up to `PSD_FLOOR`.
///
/// Matrices that are already PSD (or indefinite within tolerance) come back
/// as the plain symmetrized input, so the operation is idempotent bitwise.
pub fn psd_repair(s: &DMatrix<f64>) -> DMatrix<f64> {
    psd_repair_report(s).0
}

/// [`psd_repair`] plus a flag reporting whether clamping actually fired,
/// for callers that keep repair statistics.
pub fn psd_repair_report(s: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let sym = symmetrize(s);
    // Fast path: S + tol*I admitting a Cholesky factor certifies
    // min_eig(S) > -tol without an eigendecomposition.
    let shifted = &sym + DMatrix::identity(sym.nrows(), sym.ncols()) * PSD_TOLERANCE;
    if Cholesky::new(shifted).is_some() {
        return (sym, false);
    }
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.min() < -PSD_TOLERANCE {
        let clamped = eig.eigenvalues.map(|l| l.max(PSD_FLOOR));
        let q = &eig.eigenvectors;
        (
            symmetrize(&(q * DMatrix::from_diagonal(&clamped) * q.transpose())),
            true,
        )
    } else {
        (sym, false)
    }
}

/// Minimum eigenvalue of a symmetric matrix (diagnostic helper).
pub fn min_eigenvalue(s: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(s)).eigenvalues.min()
}

/// Draws one sample from N(mean, cov).
///
/// `cov` must be PSD (run it through [`psd_repair`] first if in doubt). The
/// standard-normal vector is drawn before any factorization, so the RNG
/// stream advances identically regardless of which square-root path is taken;
/// a zero covariance returns the mean exactly.
pub fn sample_gaussian<R: Rng + ?Sized>(
    rng: &mut R,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let dim = mean.len();
    if cov.nrows() != dim || cov.ncols() != dim {
        return Err(DekfError::DimensionMismatch(format!(
            "sample_gaussian: mean has {} entries, cov is {}x{}",
            dim,
            cov.nrows(),
            cov.ncols()
        )));
    }
    let z = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let l = match Cholesky::new(cov.clone()) {
        Some(chol) => chol.l(),
        None => {
            // PSD but singular (or marginally indefinite): eigenvalue square
            // root with negatives treated as zero.
            let eig = SymmetricEigen::new(symmetrize(cov));
            let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
            &eig.eigenvectors * DMatrix::from_diagonal(&sqrt)
        }
    };
    Ok(mean + l * z)
}

/// Random positive-definite matrix with strictly positive entries, rescaled
/// to the requested trace: `G` has |N(0,1)| entries and the result is
/// `G G' * (trace / tr(G G'))`.
pub fn random_pd_positive<R: Rng + ?Sized>(rng: &mut R, dim: usize, trace: f64) -> Result<DMatrix<f64>> {
    if dim == 0 || !(trace > 0.0) {
        return Err(DekfError::ConfigError(format!(
            "random_pd_positive needs dim >= 1 and trace > 0, got dim={dim}, trace={trace}"
        )));
    }
    let g = DMatrix::from_fn(dim, dim, |_, _| {
        rng.sample::<f64, _>(StandardNormal).abs()
    });
    let s = &g * g.transpose();
    let t = s.trace();
    Ok(s * (trace / t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).abs().max()
    }

    #[test]
    fn solve_spd_identity_returns_rhs_exactly() {
        let a = DMatrix::<f64>::identity(4, 4);
        let b = DMatrix::from_fn(4, 2, |i, j| (i * 2 + j) as f64 - 3.5);
        let x = solve_spd(&a, &b).unwrap();
        assert_eq!(x, b);
    }

    #[test]
    fn solve_spd_rank_deficient_recovers_via_jitter() {
        // vv' is rank one; the bare Cholesky must fail and the jittered
        // retries must produce a finite solution.
        let v = DVector::from_column_slice(&[1.0, 1.0]);
        let a = &v * v.transpose();
        let b = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        let x = solve_spd(&a, &b).unwrap();
        assert!(x.iter().all(|e| e.is_finite()));
    }

    #[test]
    fn solve_spd_negative_definite_errors() {
        let a = -DMatrix::<f64>::identity(3, 3);
        let b = DMatrix::zeros(3, 1);
        match solve_spd(&a, &b) {
            Err(DekfError::NonPositiveDefinite(_)) => {}
            other => panic!("expected NonPositiveDefinite, got {other:?}"),
        }
    }

    #[test]
    fn psd_repair_clamps_small_negative_eigenvalue() {
        let s = DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, -1e-6]));
        let repaired = psd_repair(&s);
        let expected = DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, PSD_FLOOR]));
        assert!(max_abs_diff(&repaired, &expected) <= 1e-15);
    }

    #[test]
    fn psd_repair_leaves_identity_untouched() {
        let s = DMatrix::<f64>::identity(3, 3);
        assert_eq!(psd_repair(&s), s);
    }

    #[test]
    fn psd_repair_preserves_eigenbasis() {
        // Build S = Q diag(2, -1e-4, 1) Q' from a hand-rolled orthonormal Q;
        // the repair must reproduce Q diag(2, 1e-12, 1) Q' entrywise.
        let angle: f64 = 0.7;
        let (c, s) = (angle.cos(), angle.sin());
        // Rotation in the (0,1) plane composed with one in the (1,2) plane.
        let q1 = DMatrix::from_row_slice(3, 3, &[c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]);
        let q2 = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c]);
        let q = q1 * q2;
        let lam = DVector::from_column_slice(&[2.0, -1e-4, 1.0]);
        let made = &q * DMatrix::from_diagonal(&lam) * q.transpose();
        let lam_fixed = DVector::from_column_slice(&[2.0, PSD_FLOOR, 1.0]);
        let expected = &q * DMatrix::from_diagonal(&lam_fixed) * q.transpose();
        let repaired = psd_repair(&made);
        assert!(
            max_abs_diff(&repaired, &expected) <= 1e-12,
            "repair strayed from the original eigenbasis by {}",
            max_abs_diff(&repaired, &expected)
        );
    }

    #[test]
    fn sample_gaussian_zero_cov_returns_mean_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mean = DVector::from_column_slice(&[1.5, -2.0, 0.25]);
        let cov = DMatrix::zeros(3, 3);
        let x = sample_gaussian(&mut rng, &mean, &cov).unwrap();
        assert_eq!(x, mean);
    }

    #[test]
    fn sample_gaussian_is_deterministic_per_seed() {
        let mean = DVector::from_column_slice(&[0.0, 1.0]);
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let mut a = ChaCha8Rng::seed_from_u64(99);
        let mut b = ChaCha8Rng::seed_from_u64(99);
        let xa = sample_gaussian(&mut a, &mean, &cov).unwrap();
        let xb = sample_gaussian(&mut b, &mean, &cov).unwrap();
        assert_eq!(xa, xb);
    }

    #[test]
    fn sample_gaussian_matches_moments() {
        let mean = DVector::from_column_slice(&[1.0, -2.0]);
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let mut sum = DVector::zeros(2);
        let mut outer = DMatrix::zeros(2, 2);
        for _ in 0..n {
            let x = sample_gaussian(&mut rng, &mean, &cov).unwrap();
            sum += &x;
            outer += &x * x.transpose();
        }
        let m_hat = sum / n as f64;
        let c_hat = outer / n as f64 - &m_hat * m_hat.transpose();
        for i in 0..2 {
            let rel = (m_hat[i] - mean[i]).abs() / mean[i].abs();
            assert!(rel < 0.05, "mean[{i}] off by {rel}");
            for j in 0..2 {
                let rel = (c_hat[(i, j)] - cov[(i, j)]).abs() / cov[(i, j)].abs();
                assert!(rel < 0.05, "cov[({i},{j})] off by {rel}");
            }
        }
    }

    #[test]
    fn random_pd_positive_hits_trace_and_stays_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for dim in [1usize, 3, 5, 10] {
            let target = 0.5 * dim as f64;
            let s = random_pd_positive(&mut rng, dim, target).unwrap();
            assert!((s.trace() - target).abs() <= 1e-12 * target.max(1.0));
            assert!(s.iter().all(|&e| e > 0.0), "dim {dim} produced a non-positive entry");
            assert!(Cholesky::new(s).is_some(), "dim {dim} result not PD");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn solve_spd_reconstructs_solution(dim in 1usize..=16, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let a = &g * g.transpose() + DMatrix::identity(dim, dim) * 0.5;
            let x0 = DMatrix::from_fn(dim, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
            let b = &a * &x0;
            let x = solve_spd(&a, &b).unwrap();
            let rel = max_abs_diff(&x, &x0) / x0.abs().max().max(1.0);
            prop_assert!(rel <= 1e-10, "relative error {rel}");
        }

        #[test]
        fn psd_repair_is_idempotent(dim in 1usize..=8, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let sym = symmetrize(&raw);
            let once = psd_repair(&sym);
            let twice = psd_repair(&once);
            prop_assert_eq!(once, twice);
        }
    }
}
