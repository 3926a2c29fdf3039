//! Exponential-family observation models and link functions.
//!
//! Densities are parameterized as `l(y) = eta' phi^-1 y - b(eta, phi)` (the
//! y-only base measure is dropped throughout; only likelihood differences
//! matter to the filter). Under this scaling the mean response is
//! `h(eta) = phi * db/deta` and the observation covariance is
//! `phi * d2b/deta2 * phi`, so for the Gaussian family the natural parameter
//! coincides with the mean and the canonical link is the identity.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{DekfError, Result};

/// Smallest Bernoulli success probability the model will report. Natural
/// parameters beyond |eta| ~ 30 saturate here instead of overflowing, which
/// keeps the observation variance strictly positive.
pub const P_MIN: f64 = 1e-13;
/// Largest natural parameter accepted by the Poisson family.
pub const POISSON_ETA_MAX: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FamilyKind {
    Bernoulli,
    Poisson,
    Gaussian,
}

impl FamilyKind {
    fn name(&self) -> &'static str {
        match self {
            FamilyKind::Bernoulli => "bernoulli",
            FamilyKind::Poisson => "poisson",
            FamilyKind::Gaussian => "gaussian",
        }
    }
}

/// Signal-to-natural-parameter maps. `Canonical` resolves to the family's
/// own canonical link (logit, log, identity for Bernoulli, Poisson,
/// Gaussian); the named links are accepted only where the implied mean stays
/// inside the family's mean range for every real signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Canonical,
    Identity,
    Log,
    Logit,
}

impl Link {
    fn name(&self) -> &'static str {
        match self {
            Link::Canonical => "canonical",
            Link::Identity => "identity",
            Link::Log => "log",
            Link::Logit => "logit",
        }
    }
}

/// An observation family together with its (fixed, known) dispersion.
#[derive(Debug, Clone)]
pub struct Family {
    kind: FamilyKind,
    dim: usize,
    phi: DMatrix<f64>,
    phi_inv: DMatrix<f64>,
}

impl Family {
    pub fn bernoulli() -> Family {
        Family {
            kind: FamilyKind::Bernoulli,
            dim: 1,
            phi: DMatrix::identity(1, 1),
            phi_inv: DMatrix::identity(1, 1),
        }
    }

    pub fn poisson() -> Family {
        Family {
            kind: FamilyKind::Poisson,
            dim: 1,
            phi: DMatrix::identity(1, 1),
            phi_inv: DMatrix::identity(1, 1),
        }
    }

    /// Gaussian with known observation covariance `phi` (validated SPD).
    pub fn gaussian(phi: DMatrix<f64>) -> Result<Family> {
        if phi.nrows() != phi.ncols() || phi.nrows() == 0 {
            return Err(DekfError::DimensionMismatch(format!(
                "gaussian dispersion must be square and non-empty, got {}x{}",
                phi.nrows(),
                phi.ncols()
            )));
        }
        let chol = Cholesky::new(phi.clone()).ok_or_else(|| {
            DekfError::NonPositiveDefinite("gaussian dispersion matrix".into())
        })?;
        let dim = phi.nrows();
        let phi_inv = chol.inverse();
        Ok(Family {
            kind: FamilyKind::Gaussian,
            dim,
            phi,
            phi_inv,
        })
    }

    pub fn kind(&self) -> FamilyKind {
        self.kind
    }

    /// Response dimension d.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn phi_inv(&self) -> &DMatrix<f64> {
        &self.phi_inv
    }

    /// Rejects observations outside the family's support.
    pub fn validate_obs(&self, y: &DVector<f64>) -> Result<()> {
        if y.len() != self.dim {
            return Err(DekfError::DimensionMismatch(format!(
                "observation has {} entries, family dimension is {}",
                y.len(),
                self.dim
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(DekfError::InvalidObservation("non-finite entry".into()));
        }
        match self.kind {
            FamilyKind::Bernoulli if y[0] != 0.0 && y[0] != 1.0 => Err(
                DekfError::InvalidObservation(format!("bernoulli y must be 0 or 1, got {}", y[0])),
            ),
            FamilyKind::Poisson if y[0] < 0.0 || y[0].fract() != 0.0 => {
                Err(DekfError::InvalidObservation(format!(
                    "poisson y must be a non-negative integer, got {}",
                    y[0]
                )))
            }
            _ => Ok(()),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflow at either tail.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn clamped_p(eta: f64) -> f64 {
    sigmoid(eta).clamp(P_MIN, 1.0 - P_MIN)
}

/// Mean response `h(eta)`.
pub fn response(family: &Family, eta: &DVector<f64>) -> Result<DVector<f64>> {
    check_eta(family, eta)?;
    match family.kind {
        FamilyKind::Bernoulli => Ok(DVector::from_element(1, clamped_p(eta[0]))),
        FamilyKind::Poisson => Ok(DVector::from_element(1, eta[0].exp())),
        FamilyKind::Gaussian => Ok(eta.clone()),
    }
}

/// Observation covariance `Sigma_y(eta)` (d x d).
pub fn obs_covariance(family: &Family, eta: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_eta(family, eta)?;
    match family.kind {
        FamilyKind::Bernoulli => {
            let p = clamped_p(eta[0]);
            Ok(DMatrix::from_element(1, 1, p * (1.0 - p)))
        }
        FamilyKind::Poisson => Ok(DMatrix::from_element(1, 1, eta[0].exp())),
        FamilyKind::Gaussian => Ok(family.phi.clone()),
    }
}

/// Log-likelihood up to the y-only base measure.
pub fn log_likelihood(family: &Family, y: &DVector<f64>, eta: &DVector<f64>) -> Result<f64> {
    family.validate_obs(y)?;
    check_eta(family, eta)?;
    match family.kind {
        FamilyKind::Bernoulli => Ok(y[0] * eta[0] - softplus(eta[0])),
        FamilyKind::Poisson => Ok(y[0] * eta[0] - eta[0].exp()),
        FamilyKind::Gaussian => {
            let piy = &family.phi_inv * y;
            let pie = &family.phi_inv * eta;
            Ok(eta.dot(&piy) - 0.5 * eta.dot(&pie))
        }
    }
}

fn check_eta(family: &Family, eta: &DVector<f64>) -> Result<()> {
    if eta.len() != family.dim {
        return Err(DekfError::DimensionMismatch(format!(
            "natural parameter has {} entries, family dimension is {}",
            eta.len(),
            family.dim
        )));
    }
    if eta.iter().any(|v| !v.is_finite()) {
        return Err(DekfError::Overflow("non-finite natural parameter".into()));
    }
    if family.kind == FamilyKind::Poisson && eta[0] > POISSON_ETA_MAX {
        return Err(DekfError::Overflow(format!(
            "poisson natural parameter {} exceeds {POISSON_ETA_MAX}; the implied rate is not \
             representable in the filter's update",
            eta[0]
        )));
    }
    Ok(())
}

/// Resolves `Canonical` to the family's own link and rejects pairs whose
/// implied mean can leave the family's mean range.
pub fn resolve_link(family: &Family, link: Link) -> Result<Link> {
    let resolved = match (family.kind, link) {
        (FamilyKind::Bernoulli, Link::Canonical) => Link::Logit,
        (FamilyKind::Poisson, Link::Canonical) => Link::Log,
        (FamilyKind::Gaussian, Link::Canonical) => Link::Identity,
        (_, l) => l,
    };
    let ok = match family.kind {
        // Mean range (0,1): only the logit keeps every real signal inside.
        FamilyKind::Bernoulli => resolved == Link::Logit,
        // Mean range (0,inf): log is canonical, logit lands in (0,1).
        FamilyKind::Poisson => matches!(resolved, Link::Log | Link::Logit),
        // Unrestricted mean range.
        FamilyKind::Gaussian => true,
    };
    if ok {
        Ok(resolved)
    } else {
        Err(DekfError::IncompatibleLink {
            family: family.kind.name().into(),
            link: resolved.name().into(),
        })
    }
}

/// Natural parameter `eta(lambda)` for a signal `lambda` (elementwise).
pub fn natural_param(family: &Family, link: Link, lambda: &DVector<f64>) -> Result<DVector<f64>> {
    let resolved = resolve_link(family, link)?;
    if lambda.len() != family.dim {
        return Err(DekfError::DimensionMismatch(format!(
            "signal has {} entries, family dimension is {}",
            lambda.len(),
            family.dim
        )));
    }
    let eta = match (family.kind, resolved) {
        (FamilyKind::Bernoulli, Link::Logit) => lambda.clone(),
        (FamilyKind::Poisson, Link::Log) => lambda.clone(),
        // eta = log sigmoid(lambda) = -softplus(-lambda), stable at both tails.
        (FamilyKind::Poisson, Link::Logit) => lambda.map(|l| -softplus(-l)),
        (FamilyKind::Gaussian, Link::Identity) => lambda.clone(),
        (FamilyKind::Gaussian, Link::Log) => lambda.map(f64::exp),
        (FamilyKind::Gaussian, Link::Logit) => lambda.map(sigmoid),
        _ => unreachable!("resolve_link admitted an unsupported pair"),
    };
    if eta.iter().any(|v| !v.is_finite()) {
        return Err(DekfError::Overflow(format!(
            "link {} overflowed mapping the signal to a natural parameter",
            resolved.name()
        )));
    }
    Ok(eta)
}

/// Jacobian `d eta / d lambda` (d x d, diagonal for every supported link).
pub fn deta_dlambda(family: &Family, link: Link, lambda: &DVector<f64>) -> Result<DMatrix<f64>> {
    let resolved = resolve_link(family, link)?;
    if lambda.len() != family.dim {
        return Err(DekfError::DimensionMismatch(format!(
            "signal has {} entries, family dimension is {}",
            lambda.len(),
            family.dim
        )));
    }
    let diag = match (family.kind, resolved) {
        (FamilyKind::Bernoulli, Link::Logit)
        | (FamilyKind::Poisson, Link::Log)
        | (FamilyKind::Gaussian, Link::Identity) => DVector::from_element(family.dim, 1.0),
        (FamilyKind::Poisson, Link::Logit) => lambda.map(|l| 1.0 - sigmoid(l)),
        (FamilyKind::Gaussian, Link::Log) => lambda.map(f64::exp),
        (FamilyKind::Gaussian, Link::Logit) => lambda.map(|l| {
            let s = sigmoid(l);
            s * (1.0 - s)
        }),
        _ => unreachable!("resolve_link admitted an unsupported pair"),
    };
    if diag.iter().any(|v| !v.is_finite()) {
        return Err(DekfError::Overflow(format!(
            "link {} overflowed differentiating the natural parameter",
            resolved.name()
        )));
    }
    Ok(DMatrix::from_diagonal(&diag))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn bernoulli_mean_matches_logistic_values() {
        let fam = Family::bernoulli();
        let p = response(&fam, &vec1(0.0)).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15);
        // log(1.5) maps to 0.6 under the logistic mean.
        let p = response(&fam, &vec1(0.405465)).unwrap();
        assert!((p[0] - 0.6).abs() < 1e-6);
    }

    #[test]
    fn bernoulli_saturates_instead_of_overflowing() {
        let fam = Family::bernoulli();
        for eta in [-40.0, 40.0, -400.0, 400.0] {
            let p = response(&fam, &vec1(eta)).unwrap()[0];
            assert!((P_MIN..=1.0 - P_MIN).contains(&p), "eta={eta} gave p={p}");
            let v = obs_covariance(&fam, &vec1(eta)).unwrap()[(0, 0)];
            assert!(v > 0.0 && v.is_finite());
            let ll = log_likelihood(&fam, &vec1(1.0), &vec1(eta)).unwrap();
            assert!(ll.is_finite());
        }
    }

    #[test]
    fn bernoulli_log_likelihood_matches_closed_form() {
        let fam = Family::bernoulli();
        for eta in [-2.0, -0.3, 0.0, 1.7] {
            let p = response(&fam, &vec1(eta)).unwrap()[0];
            let l1 = log_likelihood(&fam, &vec1(1.0), &vec1(eta)).unwrap();
            let l0 = log_likelihood(&fam, &vec1(0.0), &vec1(eta)).unwrap();
            assert!((l1 - p.ln()).abs() < 1e-12);
            assert!((l0 - (1.0 - p).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn poisson_rejects_large_natural_parameter() {
        let fam = Family::poisson();
        assert!(response(&fam, &vec1(30.0)).is_ok());
        match response(&fam, &vec1(31.0)) {
            Err(DekfError::Overflow(_)) => {}
            other => panic!("expected Overflow, got {other:?}"),
        }
    }

    #[test]
    fn gaussian_response_is_identity_for_any_dispersion() {
        let phi = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let fam = Family::gaussian(phi).unwrap();
        let eta = DVector::from_column_slice(&[1.3, -0.4]);
        assert_eq!(response(&fam, &eta).unwrap(), eta);
    }

    #[test]
    fn gaussian_log_likelihood_differences_match_quadratic_form() {
        let phi = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let fam = Family::gaussian(phi.clone()).unwrap();
        let y = DVector::from_column_slice(&[0.7, -1.2]);
        let e1 = DVector::from_column_slice(&[0.2, 0.1]);
        let e2 = DVector::from_column_slice(&[-0.5, 0.9]);
        let got = log_likelihood(&fam, &y, &e1).unwrap() - log_likelihood(&fam, &y, &e2).unwrap();
        let phi_inv = Cholesky::new(phi).unwrap().inverse();
        let q = |e: &DVector<f64>| -0.5 * (&y - e).dot(&(&phi_inv * (&y - e)));
        assert!((got - (q(&e1) - q(&e2))).abs() < 1e-10);
    }

    #[test]
    fn support_validation_rejects_out_of_family_values() {
        assert!(matches!(
            Family::bernoulli().validate_obs(&vec1(0.5)),
            Err(DekfError::InvalidObservation(_))
        ));
        assert!(matches!(
            Family::poisson().validate_obs(&vec1(-1.0)),
            Err(DekfError::InvalidObservation(_))
        ));
        assert!(matches!(
            Family::poisson().validate_obs(&vec1(2.5)),
            Err(DekfError::InvalidObservation(_))
        ));
        assert!(Family::poisson().validate_obs(&vec1(3.0)).is_ok());
    }

    #[test]
    fn incompatible_links_are_rejected() {
        let cases = [
            (Family::bernoulli(), Link::Identity),
            (Family::bernoulli(), Link::Log),
            (Family::poisson(), Link::Identity),
        ];
        for (fam, link) in cases {
            match resolve_link(&fam, link) {
                Err(DekfError::IncompatibleLink { .. }) => {}
                other => panic!("expected IncompatibleLink, got {other:?}"),
            }
        }
    }

    /// Central-difference gradient of the log-likelihood in eta must equal
    /// phi^-1 (y - h(eta)) for every family.
    #[test]
    fn likelihood_gradient_matches_residual_form() {
        let phi = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let cases: Vec<(Family, DVector<f64>, DVector<f64>)> = vec![
            (Family::bernoulli(), vec1(1.0), vec1(0.3)),
            (Family::bernoulli(), vec1(0.0), vec1(-1.1)),
            (Family::poisson(), vec1(3.0), vec1(0.8)),
            (
                Family::gaussian(phi).unwrap(),
                DVector::from_column_slice(&[0.7, -1.2]),
                DVector::from_column_slice(&[0.2, 0.4]),
            ),
        ];
        let h = 1e-6;
        for (fam, y, eta) in cases {
            let analytic = fam.phi_inv() * (&y - response(&fam, &eta).unwrap());
            for i in 0..eta.len() {
                let mut up = eta.clone();
                let mut dn = eta.clone();
                up[i] += h;
                dn[i] -= h;
                let fd = (log_likelihood(&fam, &y, &up).unwrap()
                    - log_likelihood(&fam, &y, &dn).unwrap())
                    / (2.0 * h);
                assert!(
                    (fd - analytic[i]).abs() <= 1e-5 * analytic[i].abs().max(1.0),
                    "{:?} coord {i}: fd={fd}, analytic={}",
                    fam.kind(),
                    analytic[i]
                );
            }
        }
    }

    /// The negated second difference of the log-likelihood in eta must equal
    /// phi^-1 Sigma_y phi^-1.
    #[test]
    fn likelihood_curvature_matches_obs_covariance() {
        let phi = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let cases: Vec<(Family, DVector<f64>, DVector<f64>)> = vec![
            (Family::bernoulli(), vec1(1.0), vec1(0.3)),
            (Family::poisson(), vec1(2.0), vec1(0.5)),
            (
                Family::gaussian(phi).unwrap(),
                DVector::from_column_slice(&[0.7, -1.2]),
                DVector::from_column_slice(&[0.2, 0.4]),
            ),
        ];
        let h = 1e-3;
        for (fam, y, eta) in cases {
            let analytic = fam.phi_inv() * obs_covariance(&fam, &eta).unwrap() * fam.phi_inv();
            let d = eta.len();
            let ll = |e: &DVector<f64>| log_likelihood(&fam, &y, e).unwrap();
            for i in 0..d {
                for j in 0..d {
                    let mut pp = eta.clone();
                    let mut pm = eta.clone();
                    let mut mp = eta.clone();
                    let mut mm = eta.clone();
                    pp[i] += h;
                    pp[j] += h;
                    pm[i] += h;
                    pm[j] -= h;
                    mp[i] -= h;
                    mp[j] += h;
                    mm[i] -= h;
                    mm[j] -= h;
                    let fd = -(ll(&pp) - ll(&pm) - ll(&mp) + ll(&mm)) / (4.0 * h * h);
                    assert!(
                        (fd - analytic[(i, j)]).abs() <= 1e-4 * analytic[(i, j)].abs().max(1.0),
                        "{:?} ({i},{j}): fd={fd}, analytic={}",
                        fam.kind(),
                        analytic[(i, j)]
                    );
                }
            }
        }
    }

    /// deta_dlambda must agree with a finite difference of natural_param for
    /// every non-trivial link.
    #[test]
    fn link_jacobian_matches_finite_difference() {
        let phi2 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let cases: Vec<(Family, Link, DVector<f64>)> = vec![
            (
                Family::gaussian(phi2.clone()).unwrap(),
                Link::Log,
                DVector::from_column_slice(&[0.0, 0.4]),
            ),
            (
                Family::gaussian(phi2).unwrap(),
                Link::Logit,
                DVector::from_column_slice(&[-0.3, 1.1]),
            ),
            (Family::poisson(), Link::Logit, vec1(0.7)),
            (Family::bernoulli(), Link::Canonical, vec1(-2.0)),
        ];
        let h = 1e-6;
        for (fam, link, lambda) in cases {
            let jac = deta_dlambda(&fam, link, &lambda).unwrap();
            for i in 0..lambda.len() {
                let mut up = lambda.clone();
                let mut dn = lambda.clone();
                up[i] += h;
                dn[i] -= h;
                let fu = natural_param(&fam, link, &up).unwrap();
                let fd = natural_param(&fam, link, &dn).unwrap();
                for r in 0..lambda.len() {
                    let est = (fu[r] - fd[r]) / (2.0 * h);
                    assert!(
                        (est - jac[(r, i)]).abs() <= 1e-6 * jac[(r, i)].abs().max(1.0),
                        "{:?}/{:?} ({r},{i}): fd={est}, analytic={}",
                        fam.kind(),
                        link,
                        jac[(r, i)]
                    );
                }
            }
        }
    }

    #[test]
    fn gaussian_log_link_jacobian_at_zero_is_one() {
        let fam = Family::gaussian(DMatrix::identity(1, 1)).unwrap();
        let jac = deta_dlambda(&fam, Link::Log, &vec1(0.0)).unwrap();
        assert!((jac[(0, 0)] - 1.0).abs() < 1e-12);
    }
}
