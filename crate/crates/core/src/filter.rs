//! The decoupled extended Kalman filter.
//!
//! The posterior over all entity parameters is Gaussian with a block-diagonal
//! covariance: one block per entity, plus (for drifting entities) a reference
//! vector with its own covariance and a cross-covariance to the current
//! parameters. Observations touch only the entities they involve, and the
//! mean-reverting dynamics are applied lazily: an entity that sat out `dt`
//! steps is advanced with closed multi-step forms on first contact instead of
//! being stepped `dt` times.
//!
//! Two update flavors are provided: the plain linearized update (with a
//! scalar fast path for univariate responses that the general path must and
//! does reproduce), and an iterated update that re-linearizes to the MAP
//! point with a backtracking line search before forming the posterior
//! covariance at the second-to-last iterate.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{DekfError, Result};
use crate::expfam::{self, Family, Link};
use crate::numerics;
use crate::signal::{Context, EntityId, ParamLookup, SignalEval, SignalModel};

/// Converts a drift half-life in steps to the per-step mean-reversion factor.
pub fn half_life_to_alpha(half_life_steps: f64) -> Result<f64> {
    if !(half_life_steps > 0.0) {
        return Err(DekfError::ConfigError(format!(
            "half-life must be positive, got {half_life_steps}"
        )));
    }
    if half_life_steps.is_infinite() {
        return Ok(1.0);
    }
    Ok((0.5f64.ln() / half_life_steps).exp())
}

/// Per-entity dynamics and prior: parameters revert toward a reference vector
/// at rate `alpha` with innovation covariance `omega`, and the reference
/// itself is drawn from N(`prior_mean`, `prior_cov`).
#[derive(Debug, Clone)]
pub struct DynamicsSpec {
    /// Mean-reversion factor in [0, 1]; 1 is a pure random walk.
    pub alpha: f64,
    /// Innovation covariance added each step (k x k).
    pub omega: DMatrix<f64>,
    /// Reference prior mean (pi).
    pub prior_mean: DVector<f64>,
    /// Reference prior covariance (Pi); zero turns reference tracking into a
    /// fixed attraction toward `prior_mean`.
    pub prior_cov: DMatrix<f64>,
    /// Static entities skip the dynamics entirely (no drift, no reference
    /// tracking); they are created with the same total covariance a drifting
    /// entity would have at steady state, so static and dynamic runs share
    /// priors.
    pub static_entity: bool,
    /// Covariance of (parameters - reference) at creation. Required when
    /// `alpha == 1` with a nonzero `omega`, where no steady state exists.
    pub initial_drift_cov: Option<DMatrix<f64>>,
}

impl DynamicsSpec {
    pub fn drifting(
        alpha: f64,
        omega: DMatrix<f64>,
        prior_mean: DVector<f64>,
        prior_cov: DMatrix<f64>,
    ) -> DynamicsSpec {
        DynamicsSpec {
            alpha,
            omega,
            prior_mean,
            prior_cov,
            static_entity: false,
            initial_drift_cov: None,
        }
    }

    pub fn fixed(
        alpha: f64,
        omega: DMatrix<f64>,
        prior_mean: DVector<f64>,
        prior_cov: DMatrix<f64>,
    ) -> DynamicsSpec {
        DynamicsSpec {
            alpha,
            omega,
            prior_mean,
            prior_cov,
            static_entity: true,
            initial_drift_cov: None,
        }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(DekfError::ConfigError(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        let square = |name: &str, m: &DMatrix<f64>| -> Result<()> {
            if m.nrows() != k || m.ncols() != k {
                return Err(DekfError::DimensionMismatch(format!(
                    "{name} is {}x{}, expected {k}x{k}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(DekfError::ConfigError(format!("{name} has non-finite entries")));
            }
            Ok(())
        };
        square("omega", &self.omega)?;
        square("prior covariance", &self.prior_cov)?;
        if let Some(init) = &self.initial_drift_cov {
            square("initial drift covariance", init)?;
        }
        if self.prior_mean.len() != k {
            return Err(DekfError::DimensionMismatch(format!(
                "prior mean has {} entries, expected {k}",
                self.prior_mean.len()
            )));
        }
        if self.prior_mean.iter().any(|v| !v.is_finite()) {
            return Err(DekfError::ConfigError("prior mean has non-finite entries".into()));
        }
        // A random walk accumulates variance without bound, so creation needs
        // an explicit covariance unless omega is identically zero.
        if self.alpha == 1.0
            && self.initial_drift_cov.is_none()
            && self.omega.iter().any(|&v| v != 0.0)
        {
            return Err(DekfError::ConfigError(
                "alpha = 1 has no steady state; set an explicit initial drift covariance".into(),
            ));
        }
        Ok(())
    }

    /// Covariance of (parameters - reference) at creation: the stationary
    /// value omega / (1 - alpha^2), or the explicit override at alpha = 1.
    pub fn creation_drift_cov(&self) -> DMatrix<f64> {
        if self.alpha < 1.0 {
            &self.omega / (1.0 - self.alpha * self.alpha)
        } else {
            match &self.initial_drift_cov {
                Some(c) => c.clone(),
                None => DMatrix::zeros(self.omega.nrows(), self.omega.ncols()),
            }
        }
    }
}

/// Gaussian posterior for one entity.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityPosterior {
    /// Mean of the current parameters.
    pub mean: DVector<f64>,
    /// Covariance of the current parameters.
    pub cov: DMatrix<f64>,
    /// Mean of the reference vector (zeros for static entities).
    pub ref_mean: DVector<f64>,
    /// Cross-covariance Cov(reference, current) (k x k, not symmetric).
    pub ref_cross: DMatrix<f64>,
    /// Covariance of the reference vector.
    pub ref_cov: DMatrix<f64>,
    /// Time the entity was last advanced to.
    pub last_t: u64,
}

impl EntityPosterior {
    /// Joint covariance of (current, reference), a 2k x 2k matrix. Exact
    /// algebra keeps this PSD; tests watch it for roundoff dips.
    pub fn joint_covariance(&self) -> DMatrix<f64> {
        let k = self.mean.len();
        let mut joint = DMatrix::zeros(2 * k, 2 * k);
        joint.view_mut((0, 0), (k, k)).copy_from(&self.cov);
        joint
            .view_mut((0, k), (k, k))
            .copy_from(&self.ref_cross.transpose());
        joint.view_mut((k, 0), (k, k)).copy_from(&self.ref_cross);
        joint.view_mut((k, k), (k, k)).copy_from(&self.ref_cov);
        joint
    }
}

/// Running instrumentation: each predict/update of a single entity block
/// counts one block operation, so total work must scale linearly with
/// observations times entities-per-observation.
#[derive(Debug, Clone, Default)]
pub struct OpCounters {
    pub observations: u64,
    pub entity_creations: u64,
    pub block_predicts: u64,
    pub block_updates: u64,
    /// Times a covariance block actually needed eigenvalue clamping.
    pub psd_clamps: u64,
}

/// How an observation is folded into the posterior.
#[derive(Debug, Clone, Copy)]
pub enum UpdateMode {
    /// Single linearization at the predicted mean; univariate responses take
    /// the scalar fast path.
    Dekf,
    /// As `Dekf`, but forcing the d-dimensional kernel even when d = 1.
    /// Exists so the two kernels can be held against each other.
    DekfGeneralPath,
    /// Iterated relinearization to the MAP point.
    Iekf(IekfOptions),
}

#[derive(Debug, Clone, Copy)]
pub struct IekfOptions {
    /// Cap on accepted relinearization steps.
    pub max_iters: usize,
    /// Convergence threshold on the infinity norm of the proposed step.
    pub step_tol: f64,
}

impl Default for IekfOptions {
    fn default() -> Self {
        IekfOptions {
            max_iters: 50,
            step_tol: 1e-8,
        }
    }
}

/// What one update did.
#[derive(Debug, Clone)]
pub struct UpdateReport {
    /// Mean response h(eta) at the predicted (pre-update) means.
    pub predicted_response: DVector<f64>,
    /// y minus the predicted response.
    pub residual: DVector<f64>,
    /// Entities whose posterior changed, in evaluation order.
    pub updated: Vec<EntityId>,
    /// Accepted relinearization steps (0 for the plain update).
    pub iekf_iterations: usize,
    /// MAP objective at the start and after each accepted step (iterated
    /// updates only).
    pub objective_trace: Vec<f64>,
}

struct MeanView<'a>(&'a HashMap<EntityId, DVector<f64>>);

impl ParamLookup for MeanView<'_> {
    fn param(&self, id: &EntityId) -> Option<&DVector<f64>> {
        self.0.get(id)
    }
}

/// The filter: signal model, observation family, per-namespace dynamics, and
/// the entity posteriors themselves.
#[derive(Debug, Clone)]
pub struct DecoupledFilter {
    model: SignalModel,
    family: Family,
    link: Link,
    namespace_defaults: HashMap<String, DynamicsSpec>,
    entity_overrides: HashMap<EntityId, DynamicsSpec>,
    entities: HashMap<EntityId, EntityPosterior>,
    counters: OpCounters,
}

impl DecoupledFilter {
    pub fn new(
        model: SignalModel,
        family: Family,
        link: Link,
        namespace_defaults: HashMap<String, DynamicsSpec>,
    ) -> Result<DecoupledFilter> {
        expfam::resolve_link(&family, link)?;
        if model.is_univariate() && family.dim() != 1 {
            return Err(DekfError::DimensionMismatch(format!(
                "model produces a scalar signal but the family has dimension {}",
                family.dim()
            )));
        }
        Ok(DecoupledFilter {
            model,
            family,
            link,
            namespace_defaults,
            entity_overrides: HashMap::new(),
            entities: HashMap::new(),
            counters: OpCounters::default(),
        })
    }

    pub fn model(&self) -> &SignalModel {
        &self.model
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn link(&self) -> Link {
        self.link
    }

    pub fn counters(&self) -> &OpCounters {
        &self.counters
    }

    /// Pins a per-entity dynamics spec, taking precedence over the
    /// namespace default. Must happen before the entity is first seen.
    pub fn set_entity_dynamics(&mut self, id: EntityId, spec: DynamicsSpec) -> Result<()> {
        if self.entities.contains_key(&id) {
            return Err(DekfError::ConfigError(format!(
                "entity {id} already exists; dynamics must be set before first contact"
            )));
        }
        let k = self
            .model
            .entity_dim(&id)
            .ok_or_else(|| DekfError::ConfigError(format!("entity {id} not part of the model")))?;
        spec.validate(k)?;
        self.entity_overrides.insert(id, spec);
        Ok(())
    }

    pub fn posterior(&self, id: &EntityId) -> Option<&EntityPosterior> {
        self.entities.get(id)
    }

    pub fn entity_ids(&self) -> impl Iterator<Item = &EntityId> {
        self.entities.keys()
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    /// Inserts a posterior directly (snapshot import).
    pub(crate) fn insert_posterior(&mut self, id: EntityId, post: EntityPosterior) -> Result<()> {
        let k = self
            .model
            .entity_dim(&id)
            .ok_or_else(|| DekfError::ConfigError(format!("entity {id} not part of the model")))?;
        if post.mean.len() != k {
            return Err(DekfError::DimensionMismatch(format!(
                "posterior for {id} has {} coordinates, model expects {k}",
                post.mean.len()
            )));
        }
        self.entities.insert(id, post);
        Ok(())
    }

    fn dynamics_for(&self, id: &EntityId) -> Result<&DynamicsSpec> {
        self.entity_overrides
            .get(id)
            .or_else(|| self.namespace_defaults.get(&id.namespace))
            .ok_or_else(|| {
                DekfError::ConfigError(format!(
                    "no dynamics configured for namespace {}",
                    id.namespace
                ))
            })
    }

    /// Creates the entity at time `t` from its prior if absent, then applies
    /// the closed-form multi-step predict up to `t`.
    pub fn predict(&mut self, id: &EntityId, t: u64) -> Result<()> {
        if !self.entities.contains_key(id) {
            let k = self.model.entity_dim(id).ok_or_else(|| {
                DekfError::ConfigError(format!("entity {id} not part of the model"))
            })?;
            let spec = self.dynamics_for(id)?;
            spec.validate(k)?;
            let drift = spec.creation_drift_cov();
            let post = if spec.static_entity {
                EntityPosterior {
                    mean: spec.prior_mean.clone(),
                    cov: &spec.prior_cov + &drift,
                    ref_mean: DVector::zeros(k),
                    ref_cross: DMatrix::zeros(k, k),
                    ref_cov: DMatrix::zeros(k, k),
                    last_t: t,
                }
            } else {
                // At creation the reference and the current parameters share
                // the prior mean; the current parameters add the stationary
                // drift spread on top of the reference uncertainty.
                EntityPosterior {
                    mean: spec.prior_mean.clone(),
                    cov: &spec.prior_cov + &drift,
                    ref_mean: spec.prior_mean.clone(),
                    ref_cross: spec.prior_cov.clone(),
                    ref_cov: spec.prior_cov.clone(),
                    last_t: t,
                }
            };
            self.entities.insert(id.clone(), post);
            self.counters.entity_creations += 1;
            return Ok(());
        }

        let spec = self.dynamics_for(id)?.clone();
        let post = self.entities.get_mut(id).expect("checked above");
        if t < post.last_t {
            return Err(DekfError::TimeTravel {
                entity: id.to_string(),
                last_t: post.last_t,
                t,
            });
        }
        let dt = t - post.last_t;
        if dt == 0 || spec.static_entity {
            post.last_t = t;
            return Ok(());
        }

        let alpha = spec.alpha;
        if alpha == 1.0 {
            // Random-walk limit: the mean and reference are untouched and the
            // covariance grows linearly.
            post.cov += &spec.omega * dt as f64;
        } else {
            let a = alpha.powi(dt as i32);
            let a2 = a * a;
            let noise_gain = (1.0 - a2) / (1.0 - alpha * alpha);
            post.mean = (&post.mean - &post.ref_mean) * a + &post.ref_mean;
            let cross_sym = &post.ref_cross + post.ref_cross.transpose();
            post.cov = &spec.omega * noise_gain
                + &post.cov * a2
                + &post.ref_cov * (a2 - 2.0 * a + 1.0)
                + cross_sym * (a - a2);
            post.ref_cross = &post.ref_cross * a + &post.ref_cov * (1.0 - a);
        }
        post.last_t = t;
        self.counters.block_predicts += 1;
        Ok(())
    }

    /// Folds one observation in at time `t`: predicts every involved entity,
    /// linearizes (once or iteratively), and applies the block updates.
    pub fn update(
        &mut self,
        t: u64,
        ctx: &Context,
        y: &DVector<f64>,
        mode: UpdateMode,
    ) -> Result<UpdateReport> {
        self.family.validate_obs(y)?;
        let involved = self.model.involved(ctx)?;
        for id in &involved {
            self.predict(id, t)?;
        }
        let means: HashMap<EntityId, DVector<f64>> = involved
            .iter()
            .map(|id| (id.clone(), self.entities[id].mean.clone()))
            .collect();
        let eval = self.model.eval(ctx, &MeanView(&means))?;

        let report = match mode {
            UpdateMode::Dekf | UpdateMode::DekfGeneralPath => {
                let force_general = matches!(mode, UpdateMode::DekfGeneralPath);
                self.linearized_update(&eval, y, force_general)?
            }
            UpdateMode::Iekf(opts) => self.iterated_update(ctx, &eval, y, opts)?,
        };
        self.counters.observations += 1;
        Ok(report)
    }

    /// Jacobians of the natural parameter w.r.t. each involved entity:
    /// J_i = (d eta / d lambda) (d lambda / d xi_i), each d x k_i.
    fn eta_jacobians(&self, eval: &SignalEval) -> Result<Vec<DMatrix<f64>>> {
        let dlink = expfam::deta_dlambda(&self.family, self.link, &eval.lambda)?;
        Ok(eval.grads.iter().map(|g| &dlink * g).collect())
    }

    fn linearized_update(
        &mut self,
        eval: &SignalEval,
        y: &DVector<f64>,
        force_general: bool,
    ) -> Result<UpdateReport> {
        let eta = expfam::natural_param(&self.family, self.link, &eval.lambda)?;
        let h = expfam::response(&self.family, &eta)?;
        let residual = y - &h;
        let jacobians = self.eta_jacobians(eval)?;

        if self.family.dim() == 1 && !force_general {
            self.univariate_kernel(eval, &eta, &residual, &jacobians)?;
        } else {
            self.general_kernel(eval, &eta, &residual, &jacobians)?;
        }

        Ok(UpdateReport {
            predicted_response: h,
            residual,
            updated: eval.involved.clone(),
            iekf_iterations: 0,
            objective_trace: Vec::new(),
        })
    }

    /// Scalar-response fast path: with s = sum_i J_i Sigma_i J_i', the gain
    /// scalars are f = phi (y - h) / (phi^2 + var_y s) for the mean and
    /// c = var_y / (phi^2 + var_y s) for the covariance downdate.
    fn univariate_kernel(
        &mut self,
        eval: &SignalEval,
        eta: &DVector<f64>,
        residual: &DVector<f64>,
        jacobians: &[DMatrix<f64>],
    ) -> Result<()> {
        let phi = self.family.phi()[(0, 0)];
        let var_y = expfam::obs_covariance(&self.family, eta)?[(0, 0)];

        let mut gains: Vec<(DVector<f64>, DVector<f64>)> = Vec::with_capacity(eval.involved.len());
        let mut s = 0.0;
        for (id, jac) in eval.involved.iter().zip(jacobians) {
            let j: DVector<f64> = jac.row(0).transpose();
            let post = &self.entities[id];
            let q = &post.cov * &j;
            let q0 = &post.ref_cross * &j;
            s += j.dot(&q);
            gains.push((q, q0));
        }
        let denom = phi * phi + var_y * s;
        if !denom.is_finite() || denom <= 0.0 {
            return Err(DekfError::SingularInnovation);
        }
        let f = phi * residual[0] / denom;
        let c = var_y / denom;

        for (id, (q, q0)) in eval.involved.iter().zip(gains) {
            let post = self.entities.get_mut(id).expect("involved entity exists");
            post.mean += &q * f;
            post.ref_mean += &q0 * f;
            // Outer products of a vector with itself are exactly symmetric,
            // so no resymmetrization is needed on this path.
            post.cov -= (&q * q.transpose()) * c;
            post.ref_cross -= (&q0 * q.transpose()) * c;
            post.ref_cov -= (&q0 * q0.transpose()) * c;
            self.counters.block_updates += 1;
        }
        self.repair_blocks(&eval.involved);
        Ok(())
    }

    /// General d-dimensional kernel.
    fn general_kernel(
        &mut self,
        eval: &SignalEval,
        eta: &DVector<f64>,
        residual: &DVector<f64>,
        jacobians: &[DMatrix<f64>],
    ) -> Result<()> {
        let d = self.family.dim();
        let phi_inv = self.family.phi_inv();
        let sigma_y = expfam::obs_covariance(&self.family, eta)?;
        let a = phi_inv * &sigma_y * phi_inv;

        // q_i = Sigma_i J_i' and D = sum_i J_i q_i.
        let mut qs: Vec<(DMatrix<f64>, DMatrix<f64>)> = Vec::with_capacity(eval.involved.len());
        let mut dmat = DMatrix::zeros(d, d);
        for (id, jac) in eval.involved.iter().zip(jacobians) {
            let post = &self.entities[id];
            let q = &post.cov * jac.transpose();
            let q0 = &post.ref_cross * jac.transpose();
            dmat += jac * &q;
            qs.push((q, q0));
        }

        let m = DMatrix::identity(d, d) + &a * &dmat;
        let (c, fvec) = solve_innovation(&m, &a, &(phi_inv * residual))?;

        for (id, (q, q0)) in eval.involved.iter().zip(qs) {
            let post = self.entities.get_mut(id).expect("involved entity exists");
            let g = &c * q.transpose();
            post.mean += &q * &fvec;
            post.ref_mean += &q0 * &fvec;
            post.cov = numerics::symmetrize(&(&post.cov - &q * &g));
            post.ref_cross -= &q0 * &g;
            post.ref_cov = numerics::symmetrize(&(&post.ref_cov - &q0 * &c * q0.transpose()));
            self.counters.block_updates += 1;
        }
        self.repair_blocks(&eval.involved);
        Ok(())
    }

    /// Iterated update: relinearize at successive MAP estimates of the
    /// involved parameters, with a halving line search on the penalized
    /// log-likelihood, then form the covariance at the last linearization
    /// point that produced an accepted step.
    fn iterated_update(
        &mut self,
        ctx: &Context,
        eval_at_mean: &SignalEval,
        y: &DVector<f64>,
        opts: IekfOptions,
    ) -> Result<UpdateReport> {
        let involved = eval_at_mean.involved.clone();
        let n = involved.len();
        let d = self.family.dim();
        let phi_inv = self.family.phi_inv().clone();

        let eta0 = expfam::natural_param(&self.family, self.link, &eval_at_mean.lambda)?;
        let h0 = expfam::response(&self.family, &eta0)?;

        // Prior (post-predict) blocks are the anchor of the MAP objective.
        let prior_mean: Vec<DVector<f64>> =
            involved.iter().map(|id| self.entities[id].mean.clone()).collect();
        let prior_cov: Vec<DMatrix<f64>> =
            involved.iter().map(|id| self.entities[id].cov.clone()).collect();

        // Penalty term: 1/2 sum_i (xi_i - mu_i)' Sigma_i^-1 (xi_i - mu_i).
        let penalty = |theta: &[DVector<f64>]| -> Result<f64> {
            let mut acc = 0.0;
            for i in 0..n {
                let dm = &theta[i] - &prior_mean[i];
                let solved = numerics::solve_spd_vec(&prior_cov[i], &dm)?;
                acc += 0.5 * dm.dot(&solved);
            }
            Ok(acc)
        };
        // Objective value, with natural-parameter overflow treated as
        // -infinity so the line search backs away from it.
        let objective = |theta: &[DVector<f64>]| -> Result<Option<f64>> {
            let map: HashMap<EntityId, DVector<f64>> = involved
                .iter()
                .cloned()
                .zip(theta.iter().cloned())
                .collect();
            let ev = match self.model.eval(ctx, &MeanView(&map)) {
                Ok(ev) => ev,
                Err(DekfError::Overflow(_)) => return Ok(None),
                Err(e) => return Err(e),
            };
            let eta = match expfam::natural_param(&self.family, self.link, &ev.lambda) {
                Ok(eta) => eta,
                Err(DekfError::Overflow(_)) => return Ok(None),
                Err(e) => return Err(e),
            };
            let ll = match expfam::log_likelihood(&self.family, y, &eta) {
                Ok(ll) => ll,
                Err(DekfError::Overflow(_)) => return Ok(None),
                Err(e) => return Err(e),
            };
            if !ll.is_finite() {
                return Ok(None);
            }
            Ok(Some(ll - penalty(theta)?))
        };

        let mut theta = prior_mean.clone();
        let mut obj = objective(&theta)?.ok_or_else(|| {
            DekfError::Overflow("MAP objective not finite at the prior mean".into())
        })?;
        let mut trace = vec![obj];
        let mut iterations = 0usize;

        // Terms frozen at a linearization point, sufficient for the final
        // covariance and reference updates.
        struct LinTerms {
            jacobians: Vec<DMatrix<f64>>,
            c: DMatrix<f64>,
            u: DVector<f64>,
        }
        let mut last_accepted: Option<LinTerms> = None;
        let final_terms: Option<LinTerms>;

        loop {
            let map: HashMap<EntityId, DVector<f64>> = involved
                .iter()
                .cloned()
                .zip(theta.iter().cloned())
                .collect();
            let ev = self.model.eval(ctx, &MeanView(&map))?;
            let eta = expfam::natural_param(&self.family, self.link, &ev.lambda)?;
            let h = expfam::response(&self.family, &eta)?;
            let sigma_y = expfam::obs_covariance(&self.family, &eta)?;
            let jacobians = self.eta_jacobians(&ev)?;

            let mut dmat = DMatrix::zeros(d, d);
            let mut qs: Vec<DMatrix<f64>> = Vec::with_capacity(n);
            let mut drift = DVector::zeros(d);
            for i in 0..n {
                let q = &prior_cov[i] * jacobians[i].transpose();
                dmat += &jacobians[i] * &q;
                drift += &jacobians[i] * (&theta[i] - &prior_mean[i]);
                qs.push(q);
            }
            let a = &phi_inv * &sigma_y * &phi_inv;
            let m = DMatrix::identity(d, d) + &a * &dmat;
            let rhs = &phi_inv * (y - &h + &sigma_y * (&phi_inv * &drift));
            let (c, u) = solve_innovation(&m, &a, &rhs)?;

            let deltas: Vec<DVector<f64>> = (0..n)
                .map(|i| (&prior_mean[i] - &theta[i]) + &qs[i] * &u)
                .collect();
            let step_norm = deltas
                .iter()
                .map(|dl| dl.amax())
                .fold(0.0f64, f64::max);

            let terms = LinTerms { jacobians, c, u };
            if step_norm < opts.step_tol {
                // Converged without taking this step: the covariance comes
                // from the previous linearization point (or this one when no
                // step was ever taken).
                final_terms = Some(last_accepted.take().unwrap_or(terms));
                break;
            }
            if iterations >= opts.max_iters {
                final_terms = Some(last_accepted.take().unwrap_or(terms));
                break;
            }

            // Backtracking halving line search requiring a strict objective
            // increase.
            let mut accepted: Option<(Vec<DVector<f64>>, f64)> = None;
            let mut best_seen = f64::NEG_INFINITY;
            let mut step = 1.0f64;
            for _ in 0..=20 {
                let trial: Vec<DVector<f64>> = (0..n)
                    .map(|i| &theta[i] + &deltas[i] * step)
                    .collect();
                if let Some(val) = objective(&trial)? {
                    best_seen = best_seen.max(val);
                    if val > obj {
                        accepted = Some((trial, val));
                        break;
                    }
                }
                step *= 0.5;
            }
            let Some((next, val)) = accepted else {
                // The proposed direction always ascends the exact objective,
                // so a ladder with no strict increase but no real decrease
                // either means the objective is flat at floating-point
                // resolution: we are at the optimum, not in pathological
                // curvature.
                if best_seen >= obj - 1e-12 * (1.0 + obj.abs()) {
                    final_terms = Some(last_accepted.take().unwrap_or(terms));
                    break;
                }
                return Err(DekfError::LineSearchFailed);
            };
            theta = next;
            obj = val;
            trace.push(obj);
            iterations += 1;
            last_accepted = Some(terms);
        }

        let terms = final_terms.expect("loop always sets final terms");

        // Mean moves to the converged point; covariance and reference blocks
        // get the standard downdate evaluated at the linearization point.
        for i in 0..n {
            let id = &involved[i];
            let jac = &terms.jacobians[i];
            let post = self.entities.get_mut(id).expect("involved entity exists");
            let q = &prior_cov[i] * jac.transpose();
            let q0 = &post.ref_cross * jac.transpose();
            let g = &terms.c * q.transpose();
            post.mean = theta[i].clone();
            post.ref_mean += &q0 * &terms.u;
            post.cov = numerics::symmetrize(&(&prior_cov[i] - &q * &g));
            post.ref_cross -= &q0 * &g;
            post.ref_cov = numerics::symmetrize(&(&post.ref_cov - &q0 * &terms.c * q0.transpose()));
            self.counters.block_updates += 1;
        }
        self.repair_blocks(&involved);

        Ok(UpdateReport {
            predicted_response: h0.clone(),
            residual: y - &h0,
            updated: involved,
            iekf_iterations: iterations,
            objective_trace: trace,
        })
    }

    fn repair_blocks(&mut self, involved: &[EntityId]) {
        for id in involved {
            let post = self.entities.get_mut(id).expect("involved entity exists");
            let (cov, clamped) = numerics::psd_repair_report(&post.cov);
            post.cov = cov;
            if clamped {
                self.counters.psd_clamps += 1;
            }
            let (ref_cov, clamped) = numerics::psd_repair_report(&post.ref_cov);
            post.ref_cov = ref_cov;
            if clamped {
                self.counters.psd_clamps += 1;
            }
        }
    }
}

/// Solves the innovation system: returns (C, F) with C = (I + AD)^-1 A
/// symmetrized and F = (I + AD)^-1 rhs. Singularity is retried with
/// escalating diagonal jitter before giving up.
fn solve_innovation(
    m: &DMatrix<f64>,
    a: &DMatrix<f64>,
    rhs: &DVector<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let d = m.nrows();
    let mut stacked = DMatrix::zeros(d, d + 1);
    stacked.view_mut((0, 0), (d, d)).copy_from(a);
    stacked.view_mut((0, d), (d, 1)).copy_from(rhs);

    let mut attempt = m.clone();
    let mut jitter = 1e-12 * (m.trace().abs() / d as f64).max(1.0);
    for round in 0..4 {
        if let Some(solved) = attempt.clone().lu().solve(&stacked) {
            if solved.iter().all(|v| v.is_finite()) {
                let c = numerics::symmetrize(&solved.view((0, 0), (d, d)).into_owned());
                let f = DVector::from_column_slice(solved.column(d).as_slice());
                return Ok((c, f));
            }
        }
        if round < 3 {
            attempt = m + DMatrix::identity(d, d) * jitter;
            jitter *= 10.0;
        }
    }
    Err(DekfError::SingularInnovation)
}

/// Which algebraic route [`full_ekf_update`] takes to the same posterior.
pub enum FullEkfForm {
    /// Information-matrix form: posterior precision = prior precision plus
    /// the Fisher information at the linearization point.
    Information,
    /// Covariance (Woodbury) form, the shape the decoupled update uses.
    Woodbury,
}

/// Dense extended Kalman update over the stacked parameter vector: the
/// reference the decoupled update is tested against. `layout` fixes the
/// stacking order and per-entity block sizes; `mean`/`cov` are the joint
/// prior in that order (the covariance need not be block-diagonal).
pub fn full_ekf_update(
    layout: &[(EntityId, usize)],
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    family: &Family,
    link: Link,
    model: &SignalModel,
    ctx: &Context,
    y: &DVector<f64>,
    form: FullEkfForm,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let total: usize = layout.iter().map(|(_, k)| k).sum();
    if mean.len() != total || cov.nrows() != total || cov.ncols() != total {
        return Err(DekfError::DimensionMismatch(format!(
            "layout covers {total} coordinates, mean has {}, cov is {}x{}",
            mean.len(),
            cov.nrows(),
            cov.ncols()
        )));
    }
    family.validate_obs(y)?;

    let mut params: HashMap<EntityId, DVector<f64>> = HashMap::new();
    let mut offsets: HashMap<EntityId, usize> = HashMap::new();
    let mut off = 0;
    for (id, k) in layout {
        params.insert(id.clone(), mean.rows(off, *k).into_owned());
        offsets.insert(id.clone(), off);
        off += k;
    }

    let eval = model.eval(ctx, &MeanView(&params))?;
    let eta = expfam::natural_param(family, link, &eval.lambda)?;
    let h = expfam::response(family, &eta)?;
    let sigma_y = expfam::obs_covariance(family, &eta)?;
    let d = family.dim();
    let dlink = expfam::deta_dlambda(family, link, &eval.lambda)?;

    // Stacked Jacobian of eta w.r.t. the full parameter vector.
    let mut jac = DMatrix::zeros(d, total);
    for (id, g) in eval.involved.iter().zip(&eval.grads) {
        let off = offsets[id];
        let block = &dlink * g;
        jac.view_mut((0, off), (d, block.ncols())).copy_from(&block);
    }

    let phi_inv = family.phi_inv();
    let a = phi_inv * &sigma_y * phi_inv;
    let residual = phi_inv * (y - &h);

    match form {
        FullEkfForm::Information => {
            let prior_precision = numerics::solve_spd(cov, &DMatrix::identity(total, total))?;
            let fisher = jac.transpose() * &a * &jac;
            let post_precision = numerics::symmetrize(&(prior_precision + fisher));
            let post_cov =
                numerics::symmetrize(&numerics::solve_spd(&post_precision, &DMatrix::identity(total, total))?);
            let delta = &post_cov * (jac.transpose() * &residual);
            Ok((mean + delta, post_cov))
        }
        FullEkfForm::Woodbury => {
            let q = cov * jac.transpose();
            let dmat = &jac * &q;
            let m = DMatrix::identity(d, d) + &a * &dmat;
            let (c, f) = solve_innovation(&m, &a, &residual)?;
            let post_mean = mean + &q * f;
            let post_cov = numerics::symmetrize(&(cov - &q * &c * q.transpose()));
            Ok((post_mean, post_cov))
        }
    }
}

/// Per-entity diagonal blocks of the Fisher information at `params`:
/// F_i = J_i' phi^-1 Sigma_y phi^-1 J_i.
pub fn fisher_blocks(
    family: &Family,
    link: Link,
    model: &SignalModel,
    ctx: &Context,
    params: &HashMap<EntityId, DVector<f64>>,
) -> Result<Vec<(EntityId, DMatrix<f64>)>> {
    let eval = model.eval(ctx, &MeanView(params))?;
    let eta = expfam::natural_param(family, link, &eval.lambda)?;
    let sigma_y = expfam::obs_covariance(family, &eta)?;
    let dlink = expfam::deta_dlambda(family, link, &eval.lambda)?;
    let phi_inv = family.phi_inv();
    let a = phi_inv * &sigma_y * phi_inv;
    Ok(eval
        .involved
        .iter()
        .zip(&eval.grads)
        .map(|(id, g)| {
            let j = &dlink * g;
            (id.clone(), numerics::symmetrize(&(j.transpose() * &a * &j)))
        })
        .collect())
}
