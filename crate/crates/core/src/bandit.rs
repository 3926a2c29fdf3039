//! Recommendation policies over candidate contexts, plus regret accounting.
//!
//! A decision at time `t` goes: advance every entity any candidate touches to
//! `t` (the lazy dynamics make this cheap), score each candidate, pick the
//! argmax with ties broken toward the lowest index. Thompson sampling draws
//! one joint sample per entity — shared across every candidate that
//! references the entity, so candidates are compared under a single coherent
//! posterior draw — while the greedy policy scores at the posterior means.
//!
//! Regret is tracked against the simulator's ground-truth probabilities, with
//! a paired uniform-random baseline accumulated on the same candidate sets so
//! the normalized ratio is well defined per run.

use std::collections::HashMap;

use nalgebra::DVector;
use rand::Rng;

use crate::error::{DekfError, Result};
use crate::expfam;
use crate::filter::DecoupledFilter;
use crate::numerics;
use crate::signal::{Context, EntityId};

/// How a recommendation is chosen from the candidate set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    /// One posterior sample per entity, score candidates under that draw.
    Thompson,
    /// Score candidates at the posterior means.
    GreedyMean,
    /// Uniform choice, ignoring the posterior.
    Random,
}

impl Policy {
    pub fn parse(name: &str) -> Result<Policy> {
        match name {
            "thompson" => Ok(Policy::Thompson),
            "greedy" => Ok(Policy::GreedyMean),
            "random" => Ok(Policy::Random),
            other => Err(DekfError::ConfigError(format!(
                "unknown policy {other:?}: expected thompson, greedy, or random"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Policy::Thompson => "thompson",
            Policy::GreedyMean => "greedy",
            Policy::Random => "random",
        }
    }
}

/// The contexts offered at one decision point. `true_probs` is simulator-side
/// ground truth, present only when regret can be measured.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub contexts: Vec<Context>,
    pub true_probs: Option<Vec<f64>>,
}

impl CandidateSet {
    pub fn new(contexts: Vec<Context>) -> Result<CandidateSet> {
        if contexts.is_empty() {
            return Err(DekfError::ConfigError(
                "candidate set must contain at least one context".into(),
            ));
        }
        Ok(CandidateSet {
            contexts,
            true_probs: None,
        })
    }

    pub fn with_true_probs(mut self, probs: Vec<f64>) -> Result<CandidateSet> {
        if probs.len() != self.contexts.len() {
            return Err(DekfError::DimensionMismatch(format!(
                "{} true probabilities for {} candidates",
                probs.len(),
                self.contexts.len()
            )));
        }
        self.true_probs = Some(probs);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }
}

/// Picks a candidate index under the given policy, advancing every entity the
/// candidate set references to time `t` first.
pub fn recommend(
    filter: &mut DecoupledFilter,
    policy: Policy,
    candidates: &CandidateSet,
    t: u64,
    rng: &mut impl Rng,
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(DekfError::ConfigError("empty candidate set".into()));
    }

    // Union of referenced entities, in sorted order so the sampling draws
    // are reproducible regardless of candidate ordering quirks.
    let mut entities: Vec<EntityId> = Vec::new();
    for ctx in &candidates.contexts {
        for id in filter.model().involved(ctx)? {
            if !entities.contains(&id) {
                entities.push(id);
            }
        }
    }
    entities.sort();
    for id in &entities {
        filter.predict(id, t)?;
    }

    if policy == Policy::Random {
        return Ok(rng.gen_range(0..candidates.len()));
    }

    // Parameter values the candidates are scored under: posterior means, or
    // one joint Gaussian draw per entity.
    let mut params: HashMap<EntityId, DVector<f64>> = HashMap::with_capacity(entities.len());
    for id in &entities {
        let post = filter.posterior(id).expect("predicted above");
        let value = match policy {
            Policy::GreedyMean => post.mean.clone(),
            Policy::Thompson => numerics::sample_gaussian(rng, &post.mean, &post.cov)?,
            Policy::Random => unreachable!("handled above"),
        };
        params.insert(id.clone(), value);
    }

    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for (idx, ctx) in candidates.contexts.iter().enumerate() {
        let ev = filter.model().eval(ctx, &params)?;
        let eta = expfam::natural_param(filter.family(), filter.link(), &ev.lambda)?;
        let h = expfam::response(filter.family(), &eta)?;
        let score = h[0];
        if score > best_score {
            best = idx;
            best_score = score;
        }
    }
    Ok(best)
}

/// One scored decision, for per-step output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegretStep {
    pub t: u64,
    pub p_best: f64,
    pub p_chosen: f64,
}

/// Running regret totals plus the paired random baseline.
#[derive(Debug, Clone, Default)]
pub struct RegretLedger {
    pub cumulative_regret: f64,
    pub cumulative_random_regret: f64,
    pub steps: Vec<RegretStep>,
}

impl RegretLedger {
    pub fn new() -> RegretLedger {
        RegretLedger::default()
    }

    /// Adds the regret of `chosen` against the best candidate, and of a fresh
    /// uniform draw on the same set for the paired baseline.
    pub fn record(
        &mut self,
        t: u64,
        candidates: &CandidateSet,
        chosen: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let probs = candidates.true_probs.as_ref().ok_or_else(|| {
            DekfError::MissingGroundTruth("regret needs candidate true probabilities".into())
        })?;
        if chosen >= probs.len() {
            return Err(DekfError::DimensionMismatch(format!(
                "chosen index {chosen} out of range for {} candidates",
                probs.len()
            )));
        }
        let p_best = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let p_chosen = probs[chosen];
        self.cumulative_regret += p_best - p_chosen;
        let random_pick = probs[rng.gen_range(0..probs.len())];
        self.cumulative_random_regret += p_best - random_pick;
        self.steps.push(RegretStep { t, p_best, p_chosen });
        Ok(())
    }

    /// Cumulative regret divided by the paired random baseline's, when the
    /// baseline has accumulated any.
    pub fn normalized(&self) -> Option<f64> {
        (self.cumulative_random_regret > 0.0)
            .then(|| self.cumulative_regret / self.cumulative_random_regret)
    }
}
