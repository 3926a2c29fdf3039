//! Signal models: how per-entity parameter vectors combine into the signal
//! that feeds the link function.
//!
//! Four classes are supported: linear regression (`Glm`), matrix
//! factorization (`Mf`), CP tensor factorization (`Tf`), and factorization
//! machines of arbitrary interaction order (`Fm`). Evaluation reports the
//! signal, the involved entities, and the gradient of the signal with
//! respect to each involved entity's parameters — exactly what the filter
//! update needs. Only involved entities appear; everything else has gradient
//! zero by construction.

use std::collections::{HashMap, HashSet};
use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{DekfError, Result};

/// Largest factorization-machine interaction order accepted. The
/// elementary-symmetric recursions stay well conditioned only for modest
/// orders, and nothing in the intended applications goes beyond this.
pub const MAX_FM_ORDER: usize = 8;

/// A parameter vector owner: namespace (e.g. "user") plus index within it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityId {
    pub namespace: String,
    pub index: u64,
}

impl EntityId {
    pub fn new(namespace: impl Into<String>, index: u64) -> EntityId {
        EntityId {
            namespace: namespace.into(),
            index,
        }
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.namespace, self.index)
    }
}

/// Per-observation payload identifying the involved entities and any
/// exogenous covariates.
#[derive(Debug, Clone)]
pub enum Context {
    /// Predictor matrix with one row per parameter coordinate and one column
    /// per response dimension (a plain column vector when the response is
    /// univariate). Rows are laid out in the model's declared block order.
    Glm { x: DMatrix<f64> },
    /// One user and one item.
    Mf { user: EntityId, item: EntityId },
    /// One entity per tensor mode, in mode order.
    Tf { ids: Vec<EntityId> },
    /// Sparse feature list; entities with zero weight may simply be omitted.
    Fm { features: Vec<(EntityId, f64)> },
}

/// Source of parameter vectors for signal evaluation. Implemented by plain
/// maps (simulators, tests) and by the filter's posterior means.
pub trait ParamLookup {
    fn param(&self, id: &EntityId) -> Option<&DVector<f64>>;
}

impl ParamLookup for HashMap<EntityId, DVector<f64>> {
    fn param(&self, id: &EntityId) -> Option<&DVector<f64>> {
        self.get(id)
    }
}

/// Result of evaluating a signal model at one context.
#[derive(Debug, Clone)]
pub struct SignalEval {
    /// Signal value (dimension d; scalar models use length 1).
    pub lambda: DVector<f64>,
    /// Involved entities in a stable, model-defined order.
    pub involved: Vec<EntityId>,
    /// Gradient of lambda w.r.t. each involved entity's parameters
    /// (d x k_i), parallel to `involved`.
    pub grads: Vec<DMatrix<f64>>,
}

impl SignalEval {
    pub fn grad_for(&self, id: &EntityId) -> Option<&DMatrix<f64>> {
        self.involved
            .iter()
            .position(|e| e == id)
            .map(|i| &self.grads[i])
    }
}

/// A model class together with its dimensions.
#[derive(Debug, Clone)]
pub enum SignalModel {
    /// Linear signal over an ordered entity partition of the predictor rows.
    Glm { partition: Vec<(EntityId, usize)> },
    /// Inner product of a user and an item factor vector.
    Mf {
        user_ns: String,
        item_ns: String,
        rank: usize,
    },
    /// CP decomposition: sum over rank of the product across modes.
    Tf { mode_ns: Vec<String>, rank: usize },
    /// Factorization machine with interaction orders 1..=q; `factor_dims[l-1]`
    /// is the factor dimension of order l (order 1 is the linear weight and
    /// must have dimension 1).
    Fm {
        bias: EntityId,
        factor_dims: Vec<usize>,
    },
}

impl SignalModel {
    pub fn glm(partition: Vec<(EntityId, usize)>) -> Result<SignalModel> {
        if partition.is_empty() || partition.iter().any(|(_, k)| *k == 0) {
            return Err(DekfError::ConfigError(
                "glm partition must be non-empty with positive block sizes".into(),
            ));
        }
        let mut seen = HashSet::new();
        for (id, _) in &partition {
            if !seen.insert(id.clone()) {
                return Err(DekfError::ConfigError(format!(
                    "glm partition repeats entity {id}"
                )));
            }
        }
        Ok(SignalModel::Glm { partition })
    }

    pub fn mf(user_ns: impl Into<String>, item_ns: impl Into<String>, rank: usize) -> Result<SignalModel> {
        let (user_ns, item_ns) = (user_ns.into(), item_ns.into());
        if rank == 0 {
            return Err(DekfError::ConfigError("mf rank must be positive".into()));
        }
        if user_ns == item_ns {
            return Err(DekfError::ConfigError(
                "mf user and item namespaces must differ".into(),
            ));
        }
        Ok(SignalModel::Mf {
            user_ns,
            item_ns,
            rank,
        })
    }

    pub fn tf(mode_ns: Vec<String>, rank: usize) -> Result<SignalModel> {
        if mode_ns.len() < 2 {
            return Err(DekfError::ConfigError(
                "tf needs at least two modes".into(),
            ));
        }
        if rank == 0 {
            return Err(DekfError::ConfigError("tf rank must be positive".into()));
        }
        let mut seen = HashSet::new();
        for ns in &mode_ns {
            if !seen.insert(ns.clone()) {
                return Err(DekfError::DuplicateMode(ns.clone()));
            }
        }
        Ok(SignalModel::Tf { mode_ns, rank })
    }

    pub fn fm(bias: EntityId, factor_dims: Vec<usize>) -> Result<SignalModel> {
        let q = factor_dims.len();
        if q == 0 || q > MAX_FM_ORDER {
            return Err(DekfError::OrderUnsupported(q));
        }
        if factor_dims[0] != 1 {
            return Err(DekfError::ConfigError(
                "fm order-1 factor dimension must be 1 (the linear weight)".into(),
            ));
        }
        if factor_dims.iter().any(|&a| a == 0) {
            return Err(DekfError::ConfigError(
                "fm factor dimensions must be positive".into(),
            ));
        }
        Ok(SignalModel::Fm { bias, factor_dims })
    }

    /// Response dimension implied by the model class; `Glm` takes it from
    /// the context's predictor columns, everything else is univariate.
    pub fn is_univariate(&self) -> bool {
        !matches!(self, SignalModel::Glm { .. })
    }

    /// Expected parameter-vector length for an entity of the given
    /// namespace, if the namespace belongs to this model.
    pub fn entity_dim(&self, id: &EntityId) -> Option<usize> {
        match self {
            SignalModel::Glm { partition } => partition
                .iter()
                .find(|(e, _)| e == id)
                .map(|(_, k)| *k),
            SignalModel::Mf {
                user_ns,
                item_ns,
                rank,
            } => (id.namespace == *user_ns || id.namespace == *item_ns).then_some(*rank),
            SignalModel::Tf { mode_ns, rank } => {
                mode_ns.contains(&id.namespace).then_some(*rank)
            }
            SignalModel::Fm { bias, factor_dims } => {
                if id == bias {
                    Some(1)
                } else {
                    Some(factor_dims.iter().sum())
                }
            }
        }
    }

    /// Entities the context involves, in the order `eval` will report them.
    pub fn involved(&self, ctx: &Context) -> Result<Vec<EntityId>> {
        match (self, ctx) {
            (SignalModel::Glm { partition }, Context::Glm { x }) => {
                let total: usize = partition.iter().map(|(_, k)| k).sum();
                if x.nrows() != total || x.ncols() == 0 {
                    return Err(DekfError::DimensionMismatch(format!(
                        "glm predictor has {} rows, partition covers {total}",
                        x.nrows()
                    )));
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(DekfError::InvalidObservation(
                        "non-finite predictor entry".into(),
                    ));
                }
                let mut out = Vec::new();
                let mut row = 0;
                for (id, k) in partition {
                    let block = x.rows(row, *k);
                    if block.iter().any(|&v| v != 0.0) {
                        out.push(id.clone());
                    }
                    row += k;
                }
                Ok(out)
            }
            (
                SignalModel::Mf {
                    user_ns, item_ns, ..
                },
                Context::Mf { user, item },
            ) => {
                if user.namespace != *user_ns || item.namespace != *item_ns {
                    return Err(DekfError::DimensionMismatch(format!(
                        "mf context namespaces ({}, {}) do not match model ({user_ns}, {item_ns})",
                        user.namespace, item.namespace
                    )));
                }
                Ok(vec![user.clone(), item.clone()])
            }
            (SignalModel::Tf { mode_ns, .. }, Context::Tf { ids }) => {
                if ids.len() != mode_ns.len() {
                    return Err(DekfError::DimensionMismatch(format!(
                        "tf context has {} ids for {} modes",
                        ids.len(),
                        mode_ns.len()
                    )));
                }
                let mut seen = HashSet::new();
                for id in ids {
                    if !seen.insert(id.namespace.clone()) {
                        return Err(DekfError::DuplicateMode(id.namespace.clone()));
                    }
                }
                for (id, ns) in ids.iter().zip(mode_ns) {
                    if id.namespace != *ns {
                        return Err(DekfError::DimensionMismatch(format!(
                            "tf context id {id} out of mode order (expected namespace {ns})"
                        )));
                    }
                }
                Ok(ids.clone())
            }
            (SignalModel::Fm { bias, .. }, Context::Fm { features }) => {
                let mut seen = HashSet::new();
                for (id, x) in features {
                    if !x.is_finite() {
                        return Err(DekfError::InvalidObservation(format!(
                            "non-finite feature weight for {id}"
                        )));
                    }
                    if id == bias {
                        return Err(DekfError::InvalidObservation(
                            "fm context lists the bias entity as a feature".into(),
                        ));
                    }
                    if !seen.insert(id.clone()) {
                        return Err(DekfError::InvalidObservation(format!(
                            "fm context repeats feature {id}"
                        )));
                    }
                }
                let mut out = vec![bias.clone()];
                out.extend(
                    features
                        .iter()
                        .filter(|(_, x)| *x != 0.0)
                        .map(|(id, _)| id.clone()),
                );
                Ok(out)
            }
            _ => Err(DekfError::DimensionMismatch(
                "context class does not match signal model".into(),
            )),
        }
    }

    /// Evaluates the signal and its per-entity gradients at `params`.
    pub fn eval(&self, ctx: &Context, params: &dyn ParamLookup) -> Result<SignalEval> {
        let involved = self.involved(ctx)?;
        let mut vecs = Vec::with_capacity(involved.len());
        for id in &involved {
            let v = params.param(id).ok_or_else(|| {
                DekfError::MissingGroundTruth(format!("no parameters for entity {id}"))
            })?;
            let want = self.entity_dim(id).expect("involved id belongs to model");
            if v.len() != want {
                return Err(DekfError::DimensionMismatch(format!(
                    "entity {id} has {} parameters, model expects {want}",
                    v.len()
                )));
            }
            if v.iter().any(|e| !e.is_finite()) {
                return Err(DekfError::Overflow(format!(
                    "non-finite parameter for entity {id}"
                )));
            }
            vecs.push(v.clone());
        }
        match (self, ctx) {
            (SignalModel::Glm { partition }, Context::Glm { x }) => {
                eval_glm(partition, x, &involved, &vecs)
            }
            (SignalModel::Mf { .. }, Context::Mf { .. }) => Ok(eval_bilinear(involved, vecs)),
            (SignalModel::Tf { .. }, Context::Tf { .. }) => Ok(eval_cp(involved, vecs)),
            (SignalModel::Fm { factor_dims, .. }, Context::Fm { features }) => {
                eval_fm(factor_dims, features, involved, vecs)
            }
            _ => unreachable!("involved() already rejected the mismatch"),
        }
    }
}

fn eval_glm(
    partition: &[(EntityId, usize)],
    x: &DMatrix<f64>,
    involved: &[EntityId],
    vecs: &[DVector<f64>],
) -> Result<SignalEval> {
    let d = x.ncols();
    let mut lambda = DVector::zeros(d);
    let mut grads = Vec::with_capacity(involved.len());
    let mut row = 0;
    let mut slot = 0;
    for (id, k) in partition {
        let block = x.rows(row, *k);
        row += k;
        if slot < involved.len() && involved[slot] == *id {
            // lambda += X_i' xi_i; the gradient w.r.t. xi_i is X_i'.
            let gt = block.transpose();
            lambda += &gt * &vecs[slot];
            grads.push(gt);
            slot += 1;
        }
    }
    Ok(SignalEval {
        lambda,
        involved: involved.to_vec(),
        grads,
    })
}

fn row(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(1, v.len(), v.as_slice())
}

fn eval_bilinear(involved: Vec<EntityId>, vecs: Vec<DVector<f64>>) -> SignalEval {
    let (u, v) = (&vecs[0], &vecs[1]);
    let lambda = DVector::from_element(1, u.dot(v));
    let grads = vec![row(v), row(u)];
    SignalEval {
        lambda,
        involved,
        grads,
    }
}

fn eval_cp(involved: Vec<EntityId>, vecs: Vec<DVector<f64>>) -> SignalEval {
    let m = vecs.len();
    let rank = vecs[0].len();
    // Prefix/suffix products per rank coordinate keep the leave-one-out
    // products exact even when some factor is zero.
    let mut prefix = vec![DVector::from_element(rank, 1.0); m + 1];
    for i in 0..m {
        prefix[i + 1] = prefix[i].component_mul(&vecs[i]);
    }
    let mut suffix = vec![DVector::from_element(rank, 1.0); m + 1];
    for i in (0..m).rev() {
        suffix[i] = suffix[i + 1].component_mul(&vecs[i]);
    }
    let lambda = DVector::from_element(1, prefix[m].sum());
    let grads = (0..m)
        .map(|i| row(&prefix[i].component_mul(&suffix[i + 1])))
        .collect();
    SignalEval {
        lambda,
        involved,
        grads,
    }
}

/// Elementary symmetric polynomials e_0..e_q of `z` via Newton's identities
/// on power sums: l*e_l = sum_{k=1..l} (-1)^(k-1) e_{l-k} p_k.
fn elementary_sym(z: &[f64], q: usize) -> Vec<f64> {
    let mut p = vec![0.0; q + 1];
    for k in 1..=q {
        p[k] = z.iter().map(|&zi| zi.powi(k as i32)).sum();
    }
    let mut e = vec![0.0; q + 1];
    e[0] = 1.0;
    for l in 1..=q {
        let mut acc = 0.0;
        let mut sign = 1.0;
        for k in 1..=l {
            acc += sign * e[l - k] * p[k];
            sign = -sign;
        }
        e[l] = acc / l as f64;
    }
    e
}

fn eval_fm(
    factor_dims: &[usize],
    features: &[(EntityId, f64)],
    involved: Vec<EntityId>,
    vecs: Vec<DVector<f64>>,
) -> Result<SignalEval> {
    let q = factor_dims.len();
    let feat_dim: usize = factor_dims.iter().sum();
    // involved[0] is the bias; the rest line up with the nonzero features.
    let n = involved.len() - 1;
    let xs: Vec<f64> = features
        .iter()
        .filter(|(_, x)| *x != 0.0)
        .map(|&(_, x)| x)
        .collect();
    debug_assert_eq!(xs.len(), n);

    let w_o = vecs[0][0];
    let mut lambda = w_o;
    let mut grads: Vec<DMatrix<f64>> = Vec::with_capacity(involved.len());
    grads.push(DMatrix::from_element(1, 1, 1.0));
    for _ in 0..n {
        grads.push(DMatrix::zeros(1, feat_dim));
    }

    // Linear term: order 1 occupies coordinate 0 of every feature entity.
    for i in 0..n {
        lambda += xs[i] * vecs[i + 1][0];
        grads[i + 1][(0, 0)] = xs[i];
    }

    // Interaction orders l = 2..=q, one factor coordinate f at a time. For
    // z_i = x_i v_i the distinct-index sum of products is the elementary
    // symmetric polynomial e_l(z), and d e_l / d z_i = e_{l-1}(z without i),
    // obtained by deflating e with z_i.
    let mut offset = 1;
    for l in 2..=q {
        let a_l = factor_dims[l - 1];
        for f in 0..a_l {
            let z: Vec<f64> = (0..n).map(|i| xs[i] * vecs[i + 1][offset + f]).collect();
            let e = elementary_sym(&z, l);
            lambda += e[l];
            for i in 0..n {
                let mut deflated = vec![0.0; l];
                deflated[0] = 1.0;
                for k in 1..l {
                    deflated[k] = e[k] - z[i] * deflated[k - 1];
                }
                grads[i + 1][(0, offset + f)] = xs[i] * deflated[l - 1];
            }
        }
        offset += a_l;
    }

    if !lambda.is_finite() {
        return Err(DekfError::Overflow("fm signal overflowed".into()));
    }
    Ok(SignalEval {
        lambda: DVector::from_element(1, lambda),
        involved,
        grads,
    })
}
