//! Cross-fitted doubly robust policy learning against the worst case.
//!
//! The learner alternates two moves on a parametric softmax policy:
//!
//! 1. an exact dual step α̂ ← argmax_α −α·ln Ŵ^DR(π, α) − αδ, and
//! 2. a handful of first-order steps on the policy parameters that
//!    decrease Ŵ^DR(·, α̂) at the frozen α̂ (decreasing the moment is
//!    exactly ascending the dual value there).
//!
//! The objective is the cross-fitted doubly robust moment
//!
//! ```text
//! Ŵ^DR(π, α) = (1/N) Σ_k Σ_{i ∈ fold k} [
//!     ρ_i(π)·(e^{−r_i/α} − f̂0^{(k)}(s_i, a_i; α))
//!     + Σ_a π(a|s_i)·f̂0^{(k)}(s_i, a; α) ],
//! ```
//!
//! with a *continuum* outcome model f̂0^{(k)}(s, a; α) = Σ_j ω_j(s, a)·
//! e^{−r_j/α}: one weighted-neighbor fit reused at every α, so the dual
//! step can re-evaluate Ŵ^DR along its whole search path cheaply. All the
//! α-dependence lives in the tilts e^{−r/α} of the *training* rewards,
//! which is why it collapses to per-sample aggregated coefficients:
//! evaluating the objective at a new α is O(N) once the policy is fixed.
//!
//! Since the objective is non-convex in the policy weights, the whole
//! alternation restarts from several perturbed initializations and keeps
//! the best final dual value.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::math;
use crate::nuisance::{
    fit_continuum_weights, fit_propensity, ContinuumWeights, PropensityKind, PropensityModel,
    WeightKind,
};
use crate::opt::Adam;
use crate::rng::{self, label};
use crate::types::{crossfit_split, Dataset, FoldAssignment, Policy, EPS_ALPHA};

/// Parametric policy class the learner optimizes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    /// Linear logits with bias.
    LinearSoftmax,
    /// One tanh hidden layer.
    MlpSoftmax {
        /// Hidden width.
        hidden: usize,
    },
}

/// Where the learner's outcome model comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum ContinuumPlan {
    /// No outcome model: the objective degenerates to pure importance
    /// weighting (useful as an ablation and in reduction tests).
    Zero,
    /// Fit weighted-neighbor models per fold.
    Fit(WeightKind),
}

/// Where the learner's behavior propensities come from.
#[derive(Debug, Clone, PartialEq)]
pub enum LearnPropensity {
    /// Use the propensities recorded in the dataset.
    Logged,
    /// Fit per fold on the fold's complement.
    Fit(PropensityKind),
}

/// Configuration of the policy learner.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnConfig {
    /// Divergence-ball radius δ > 0.
    pub delta: f64,
    /// Cross-fitting folds K ≥ 2.
    pub folds: usize,
    /// Policy class.
    pub policy_kind: PolicyKind,
    /// Number of perturbed restarts ≥ 1.
    pub restarts: usize,
    /// First-order step size > 0.
    pub learning_rate: f64,
    /// Gradient steps per α refresh.
    pub inner_steps: usize,
    /// Outer alternation budget.
    pub max_outer_iters: usize,
    /// Stop a restart when the sup-norm parameter change over a full
    /// outer iteration drops below this.
    pub convergence_tol: f64,
    /// Propensity source.
    pub propensity: LearnPropensity,
    /// Outcome-model source.
    pub outcome: ContinuumPlan,
    /// Clip floor for fitted propensities.
    pub clip_floor: f64,
    /// Seed for folds, nuisance fits, and restart perturbations.
    pub seed: u64,
}

impl LearnConfig {
    /// Defaults: 5 folds, linear softmax, 10 restarts, learning rate 0.01,
    /// 10 inner steps, 40 outer iterations, tolerance 1e-5, logged
    /// propensities, 50-neighbor continuum outcome model.
    pub fn new(delta: f64, seed: u64) -> LearnConfig {
        LearnConfig {
            delta,
            folds: 5,
            policy_kind: PolicyKind::LinearSoftmax,
            restarts: 10,
            learning_rate: 0.01,
            inner_steps: 10,
            max_outer_iters: 40,
            convergence_tol: 1e-5,
            propensity: LearnPropensity::Logged,
            outcome: ContinuumPlan::Fit(WeightKind::Knn { k: 50 }),
            clip_floor: 0.01,
            seed,
        }
    }

    /// Search interval of the dual variable, [ε_α, 1/δ].
    pub fn alpha_bounds(&self) -> (f64, f64) {
        (EPS_ALPHA, 1.0 / self.delta)
    }

    fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) {
            return Err(Error::Domain { what: "LearnConfig (delta must be > 0)" });
        }
        if self.restarts < 1 {
            return Err(Error::InvalidConfiguration {
                reason: String::from("restarts must be at least 1"),
            });
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Domain { what: "LearnConfig (learning_rate must be > 0)" });
        }
        if self.folds < 2 {
            return Err(Error::InvalidConfiguration {
                reason: String::from("the learner needs at least 2 folds"),
            });
        }
        if self.inner_steps == 0 || self.max_outer_iters == 0 {
            return Err(Error::InvalidConfiguration {
                reason: String::from("inner_steps and max_outer_iters must be at least 1"),
            });
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::Domain { what: "LearnConfig (convergence_tol must be > 0)" });
        }
        if !(self.clip_floor > 0.0 && self.clip_floor < 0.5) {
            return Err(Error::Domain { what: "LearnConfig (clip_floor must be in (0, 0.5))" });
        }
        Ok(())
    }
}

/// Per-fold nuisances for the learner, fitted once and shared read-only
/// by every restart.
pub struct LearnerNuisances {
    folds: FoldAssignment,
    /// One fitted model per fold, or `None` to read logged propensities.
    propensity: Vec<Option<PropensityModel>>,
    /// Per fold: the continuum weights plus the complement indices that
    /// map its local training positions back to dataset positions.
    /// `None` means the zero outcome model.
    f0: Vec<Option<(ContinuumWeights, Vec<usize>)>>,
}

impl LearnerNuisances {
    /// The fold assignment the nuisances were fitted under.
    pub fn folds(&self) -> &FoldAssignment {
        &self.folds
    }
}

/// Fit all per-fold nuisances for one learner run.
pub fn fit_learner_nuisances(
    data: &Dataset,
    folds: usize,
    propensity: &LearnPropensity,
    outcome: &ContinuumPlan,
    clip_floor: f64,
    seed: u64,
) -> Result<LearnerNuisances> {
    let assignment = crossfit_split(data.len(), folds, seed)?;
    let mut prop_models = Vec::with_capacity(folds);
    let mut f0_models = Vec::with_capacity(folds);
    for fold in 0..folds {
        let comp = assignment.complement_indices(fold);
        let fold_seed = rng::derive(seed, fold as u64);
        prop_models.push(match propensity {
            LearnPropensity::Logged => None,
            LearnPropensity::Fit(kind) => {
                Some(fit_propensity(data, &comp, kind, clip_floor, fold_seed)?)
            }
        });
        f0_models.push(match outcome {
            ContinuumPlan::Zero => None,
            ContinuumPlan::Fit(kind) => {
                Some((fit_continuum_weights(data, &comp, kind, fold_seed)?, comp))
            }
        });
    }
    Ok(LearnerNuisances { folds: assignment, propensity: prop_models, f0: f0_models })
}

/// The cross-fitted doubly robust objective, preassembled for fast
/// repeated evaluation.
///
/// Construction resolves everything that does not depend on the policy or
/// on α: inverse propensities at the logged actions and the sparse
/// neighbor weights of f̂0 at every (sample, action), remapped to global
/// sample positions. After that, fixing a policy reduces the objective to
/// per-sample coefficients ([`DrObjective::coefficients`]), and each
/// α-evaluation is a single O(N) pass.
pub struct DrObjective {
    rewards: Vec<f64>,
    inv_prop: Vec<f64>,
    logged_action: Vec<usize>,
    states: Vec<f64>,
    state_dim: usize,
    action_count: usize,
    /// pairs[i * action_count + a] = sparse (global index, ω) of
    /// f̂0^{(fold of i)}(s_i, a).
    pairs: Vec<Vec<(usize, f64)>>,
    /// Smallest reward, the reference point for shifted-exponent sums.
    r_min: f64,
}

/// A policy's footprint on the objective: the importance ratios and the
/// aggregated outcome-model coefficients.
///
/// `w(α)` is linear in both fields, which is what makes the objective
/// linear in the policy's action probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct DrCoefficients {
    /// ρ_i = π(a_i|s_i)/π̂0(a_i|s_i).
    pub rho: Vec<f64>,
    /// agg[g] multiplies e^{−r_g/α}: the net outcome-model weight on
    /// training sample g, already divided by N.
    pub agg: Vec<f64>,
}

impl DrObjective {
    /// Assemble from a dataset and fitted nuisances.
    pub fn new(data: &Dataset, nuisances: &LearnerNuisances) -> Result<DrObjective> {
        let n = data.len();
        if nuisances.folds.fold_of().len() != n {
            return Err(Error::InvalidConfiguration {
                reason: String::from("nuisances were fitted for a different dataset size"),
            });
        }
        let action_count = data.action_count();
        let state_dim = data.state_dim();
        let mut rewards = Vec::with_capacity(n);
        let mut inv_prop = Vec::with_capacity(n);
        let mut logged_action = Vec::with_capacity(n);
        let mut states = Vec::with_capacity(n * state_dim);
        let mut pairs = Vec::with_capacity(n * action_count);
        for (i, sample) in data.samples().iter().enumerate() {
            let fold = nuisances.folds.fold_of()[i];
            let p0 = match &nuisances.propensity[fold] {
                Some(model) => model.prob(&sample.state, sample.action)?,
                None => sample.propensity.ok_or_else(|| Error::InvalidData {
                    index: Some(i),
                    reason: String::from("logged propensity required but missing"),
                })?,
            };
            if !(p0 > 0.0) || !p0.is_finite() {
                return Err(Error::OverlapViolation { index: i });
            }
            rewards.push(sample.reward);
            inv_prop.push(1.0 / p0);
            logged_action.push(sample.action);
            states.extend_from_slice(&sample.state);
            for a in 0..action_count {
                pairs.push(match &nuisances.f0[fold] {
                    Some((cw, comp)) => cw
                        .weights(&sample.state, a)?
                        .into_iter()
                        .map(|(local, w)| (comp[local], w))
                        .collect(),
                    None => Vec::new(),
                });
            }
        }
        let r_min = rewards.iter().fold(f64::INFINITY, |m, r| m.min(*r));
        Ok(DrObjective {
            rewards,
            inv_prop,
            logged_action,
            states,
            state_dim,
            action_count,
            pairs,
            r_min,
        })
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    /// Whether the objective covers no samples (never true once built).
    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Number of actions.
    pub fn action_count(&self) -> usize {
        self.action_count
    }

    fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    /// Out-of-fold outcome model f̂0(s_i, a; α).
    pub fn f0(&self, i: usize, action: usize, alpha: f64) -> f64 {
        let mut acc = 0.0;
        for &(g, w) in &self.pairs[i * self.action_count + action] {
            acc += w * math::exp(-self.rewards[g] / alpha);
        }
        acc
    }

    /// Evaluate the target-policy probability matrix (row i = π(·|s_i)),
    /// flattened row-major.
    pub fn prob_matrix(&self, policy: &Policy) -> Result<Vec<f64>> {
        let mut probs = Vec::with_capacity(self.len() * self.action_count);
        for i in 0..self.len() {
            let row = policy.probs(self.state(i))?;
            if row.len() != self.action_count {
                return Err(Error::Shape { expected: self.action_count, got: row.len() });
            }
            probs.extend_from_slice(&row);
        }
        Ok(probs)
    }

    /// Collapse a policy (given as its probability matrix) into evaluation
    /// coefficients. O(N·A·sparsity); afterwards every `w`/`w_prime` call
    /// is O(N).
    pub fn coefficients(&self, probs: &[f64]) -> Result<DrCoefficients> {
        let n = self.len();
        if probs.len() != n * self.action_count {
            return Err(Error::Shape { expected: n * self.action_count, got: probs.len() });
        }
        let inv_n = 1.0 / n as f64;
        let mut rho = Vec::with_capacity(n);
        let mut agg = alloc::vec![0.0; n];
        for i in 0..n {
            let row = &probs[i * self.action_count..(i + 1) * self.action_count];
            let rho_i = row[self.logged_action[i]] * self.inv_prop[i];
            rho.push(rho_i);
            for (a, &pa) in row.iter().enumerate() {
                // plug-in mass, minus the residual subtraction at the
                // logged action
                let coef = if a == self.logged_action[i] { pa - rho_i } else { pa };
                if coef == 0.0 {
                    continue;
                }
                for &(g, w) in &self.pairs[i * self.action_count + a] {
                    agg[g] += coef * w * inv_n;
                }
            }
        }
        Ok(DrCoefficients { rho, agg })
    }

    /// Ŵ^DR(π, α) for the collapsed policy.
    pub fn w(&self, co: &DrCoefficients, alpha: f64) -> f64 {
        let n = self.len() as f64;
        let mut acc = 0.0;
        for i in 0..self.len() {
            let tilt = math::exp(-self.rewards[i] / alpha);
            acc += co.rho[i] * tilt / n + co.agg[i] * tilt;
        }
        acc
    }

    /// dŴ^DR/dα.
    pub fn w_prime(&self, co: &DrCoefficients, alpha: f64) -> f64 {
        let n = self.len() as f64;
        let mut acc = 0.0;
        for i in 0..self.len() {
            let r = self.rewards[i];
            let tilt = r * math::exp(-r / alpha);
            acc += co.rho[i] * tilt / n + co.agg[i] * tilt;
        }
        acc / (alpha * alpha)
    }

    /// d²Ŵ^DR/dα².
    pub fn w_second(&self, co: &DrCoefficients, alpha: f64) -> f64 {
        let n = self.len() as f64;
        let mut acc = 0.0;
        for i in 0..self.len() {
            let r = self.rewards[i];
            let tilt = math::exp(-r / alpha);
            let shape = r * r / (alpha * alpha * alpha * alpha) - 2.0 * r / (alpha * alpha * alpha);
            acc += (co.rho[i] / n + co.agg[i]) * tilt * shape;
        }
        acc
    }

    /// Moment sums with the dominant exponent e^{−r_min/α} factored out,
    /// so small α neither underflows nor drifts into subnormal noise:
    /// sums.j = Σᵢ cᵢ·rᵢʲ·e^{−(rᵢ−r_min)/α} with cᵢ = ρᵢ/N + aggᵢ, plus the
    /// absolute-coefficient sum that calibrates the cancellation floor.
    fn shifted_sums(&self, co: &DrCoefficients, alpha: f64) -> ShiftedSums {
        let n = self.len() as f64;
        let mut s = ShiftedSums { s0: 0.0, s1: 0.0, s2: 0.0, abs0: 0.0 };
        for i in 0..self.len() {
            let r = self.rewards[i];
            let tilt = math::exp(-(r - self.r_min) / alpha);
            let c = co.rho[i] / n + co.agg[i];
            s.s0 += c * tilt;
            s.s1 += c * r * tilt;
            s.s2 += c * r * r * tilt;
            s.abs0 += (co.rho[i] / n + math::abs(co.agg[i])) * tilt;
        }
        s
    }

    /// ln Ŵ^DR(π, α), or `None` when the moment is nonpositive (or within
    /// the cancellation noise floor of zero, where its sign is float
    /// debris).
    pub fn ln_w(&self, co: &DrCoefficients, alpha: f64) -> Option<f64> {
        let s = self.shifted_sums(co, alpha);
        if s.s0 > s.abs0 * 1e-13 {
            Some(-self.r_min / alpha + math::ln(s.s0))
        } else {
            None
        }
    }

    /// Exact parameter gradient of Ŵ^DR(π, α) at fixed α, accumulated into
    /// `out` (which must be zeroed by the caller and sized to the policy's
    /// parameter count).
    ///
    /// The objective is linear in the probabilities π(a|s_i); the
    /// coefficient of π(a|s_i) is the out-of-fold f̂0(s_i, a; α), plus the
    /// importance-weighted residual at the logged action. The chain rule
    /// through the softmax then reduces to one logit-gradient accumulation
    /// per sample.
    pub fn gradient(
        &self,
        policy: &Policy,
        probs: &[f64],
        alpha: f64,
        out: &mut [f64],
    ) -> Result<()> {
        let n = self.len();
        if probs.len() != n * self.action_count {
            return Err(Error::Shape { expected: n * self.action_count, got: probs.len() });
        }
        let inv_n = 1.0 / n as f64;
        let mut beta = alloc::vec![0.0; self.action_count];
        let mut logit_grad = alloc::vec![0.0; self.action_count];
        for i in 0..n {
            let row = &probs[i * self.action_count..(i + 1) * self.action_count];
            let ai = self.logged_action[i];
            let f0_logged = self.f0(i, ai, alpha);
            let residual = math::exp(-self.rewards[i] / alpha) - f0_logged;
            for a in 0..self.action_count {
                beta[a] = if a == ai { f0_logged + self.inv_prop[i] * residual } else { self.f0(i, a, alpha) };
            }
            let avg: f64 = row.iter().zip(&beta).map(|(p, b)| p * b).sum();
            for a in 0..self.action_count {
                logit_grad[a] = row[a] * (beta[a] - avg);
            }
            policy.accumulate_logit_grad(self.state(i), &logit_grad, inv_n, out)?;
        }
        Ok(())
    }
}

/// Shifted moment sums shared by the dual solver ([`DrObjective::shifted_sums`]).
struct ShiftedSums {
    s0: f64,
    s1: f64,
    s2: f64,
    abs0: f64,
}

/// Result of the dual step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrValueSolution {
    /// Maximizing α in [ε_α, 1/δ].
    pub alpha: f64,
    /// The dual value −α̂·ln Ŵ^DR(π, α̂) − α̂δ.
    pub value: f64,
    /// True when Ŵ^DR(π, α) ≤ 0 somewhere in the range, excluding part of
    /// the search domain.
    pub excluded_alpha: bool,
}

/// Maximize −α·ln Ŵ^DR(π, α) − αδ over [ε_α, 1/δ].
///
/// Doubly robust corrections can push Ŵ^DR below zero at some α; such
/// points are excluded from the search (clipping them to a positive floor
/// would silently move the argmax). When the whole range is excluded the
/// solve fails with the negative-moment error.
pub fn maximize_dr_dual(
    obj: &DrObjective,
    co: &DrCoefficients,
    delta: f64,
    warm_start: Option<f64>,
) -> Result<DrValueSolution> {
    if !(delta > 0.0) {
        return Err(Error::Domain { what: "maximize_dr_dual (delta must be > 0)" });
    }
    let lo = EPS_ALPHA;
    let hi = 1.0 / delta;
    let mut excluded = false;
    let mut phi = |a: f64| -> f64 {
        match obj.ln_w(co, a) {
            Some(lw) => -a * lw - a * delta,
            None => {
                excluded = true;
                f64::NEG_INFINITY
            }
        }
    };

    // locate the best region on a log grid (plus the warm start, so a
    // fixed-policy α refresh can never lose ground)
    let points = 129;
    let ratio = math::powf(hi / lo, 1.0 / (points - 1) as f64);
    let mut best = (f64::NEG_INFINITY, lo);
    let mut grid = Vec::with_capacity(points);
    let mut x = lo;
    for _ in 0..points {
        let a = x.min(hi);
        grid.push(a);
        let v = phi(a);
        if v > best.0 {
            best = (v, a);
        }
        x *= ratio;
    }
    if let Some(wa) = warm_start {
        let a = math::clip(wa, lo, hi);
        let v = phi(a);
        if v > best.0 {
            best = (v, a);
        }
    }
    if !best.0.is_finite() {
        return Err(Error::DrNegativeW);
    }

    // refine within the bracketing grid cells
    let below = grid.iter().rev().find(|g| **g < best.1).copied().unwrap_or(lo);
    let above = grid.iter().find(|g| **g > best.1).copied().unwrap_or(hi);
    let (mut alpha, mut value) = math::golden_max(&mut phi, below, above, 200);
    if value < best.0 {
        alpha = best.1;
        value = best.0;
    }

    // Newton polish on the stationarity condition, keeping only
    // improvements. φ′ and φ″ come from the shifted sums: with
    // q1 = W′/W = s1/(α²·s0) and q2 = W″/W = s2/(α⁴·s0) − 2·s1/(α³·s0),
    // φ′ = −ln W − α·q1 − δ and φ″ = −2·q1 − α·(q2 − q1²).
    let mut a = alpha;
    for _ in 0..20 {
        let s = obj.shifted_sums(co, a);
        if !(s.s0 > s.abs0 * 1e-13) {
            break;
        }
        let lw = -obj.r_min / a + math::ln(s.s0);
        let q1 = s.s1 / (a * a * s.s0);
        let q2 = s.s2 / (a * a * a * a * s.s0) - 2.0 * s.s1 / (a * a * a * s.s0);
        let d1 = -lw - a * q1 - delta;
        if math::abs(d1) < 1e-12 {
            break;
        }
        let d2 = -2.0 * q1 - a * (q2 - q1 * q1);
        if !d1.is_finite() || !(d2 < 0.0) {
            break;
        }
        a = math::clip(a - d1 / d2, lo, hi);
        let v = phi(a);
        if v >= value {
            alpha = a;
            value = v;
        }
    }
    Ok(DrValueSolution { alpha, value, excluded_alpha: excluded })
}

/// One-shot objective evaluation at a given α.
pub fn dr_objective(
    data: &Dataset,
    nuisances: &LearnerNuisances,
    policy: &Policy,
    alpha: f64,
) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::Domain { what: "dr_objective (alpha must be > 0)" });
    }
    let obj = DrObjective::new(data, nuisances)?;
    let probs = obj.prob_matrix(policy)?;
    let co = obj.coefficients(&probs)?;
    Ok(obj.w(&co, alpha))
}

/// One-shot worst-case value of a fixed policy under the learner's
/// objective.
pub fn dr_value(
    data: &Dataset,
    nuisances: &LearnerNuisances,
    policy: &Policy,
    delta: f64,
) -> Result<DrValueSolution> {
    let obj = DrObjective::new(data, nuisances)?;
    let probs = obj.prob_matrix(policy)?;
    let co = obj.coefficients(&probs)?;
    maximize_dr_dual(&obj, &co, delta, None)
}

/// Per-restart outcome trace.
#[derive(Debug, Clone, PartialEq)]
pub struct RestartReport {
    /// Restart index.
    pub restart: usize,
    /// Outer iterations actually run.
    pub outer_iters: usize,
    /// Whether the parameter-change tolerance was reached.
    pub converged: bool,
    /// α̂ at the final policy.
    pub final_alpha: f64,
    /// Final dual value (NaN when the restart diverged).
    pub final_objective: f64,
    /// Inner steps where 20 halvings never produced a non-increasing
    /// moment and the smallest step was accepted anyway.
    pub forced_steps: usize,
}

/// Diagnostics for a full learner run.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnDiagnostics {
    /// Index of the restart whose policy was returned.
    pub best_restart: usize,
    /// All restart traces.
    pub reports: Vec<RestartReport>,
    /// True when any α search had to exclude part of its domain because
    /// Ŵ^DR went nonpositive there.
    pub excluded_alpha: bool,
}

/// Run the full learner: fit nuisances once, then alternate dual steps and
/// policy updates from `restarts` perturbed initializations, returning the
/// restart with the best final dual value.
pub fn cdr2opl(data: &Dataset, config: &LearnConfig) -> Result<(Policy, LearnDiagnostics)> {
    config.validate()?;
    let nuisances = fit_learner_nuisances(
        data,
        config.folds,
        &config.propensity,
        &config.outcome,
        config.clip_floor,
        config.seed,
    )?;
    let obj = DrObjective::new(data, &nuisances)?;

    let template = match config.policy_kind {
        PolicyKind::LinearSoftmax => Policy::uniform(data.state_dim(), data.action_count()),
        PolicyKind::MlpSoftmax { hidden } => {
            Policy::mlp_softmax_zero(data.state_dim(), hidden, data.action_count())
        }
    };
    let dim = template.params()?.len();
    let restart_seed = rng::derive(config.seed, label::RESTART);

    let mut best: Option<(f64, Policy, usize)> = None;
    let mut reports = Vec::with_capacity(config.restarts);
    let mut excluded_any = false;
    for restart in 0..config.restarts {
        let mut policy = template.clone();
        let mut stream = rng::stream(restart_seed, restart as u64);
        let mut theta: Vec<f64> = (0..dim)
            .map(|_| 0.5 * stream.sample::<f64, _>(StandardNormal))
            .collect();
        policy.set_params(&theta)?;

        let mut adam = Adam::new(dim, config.learning_rate);
        let mut warm: Option<f64> = None;
        let mut forced_steps = 0usize;
        let mut converged = false;
        let mut outer_done = 0usize;
        let mut diverged = false;
        let mut grad = alloc::vec![0.0; dim];

        for outer in 0..config.max_outer_iters {
            outer_done = outer + 1;
            let theta_before: Vec<f64> = theta.clone();

            // (a) dual step at the current policy
            let probs = obj.prob_matrix(&policy)?;
            let co = obj.coefficients(&probs)?;
            let solution = match maximize_dr_dual(&obj, &co, config.delta, warm) {
                Ok(s) => s,
                Err(Error::DrNegativeW) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            excluded_any |= solution.excluded_alpha;
            let alpha = solution.alpha;
            warm = Some(alpha);

            // (b) descend the moment at the frozen α̂
            for _ in 0..config.inner_steps {
                let probs = obj.prob_matrix(&policy)?;
                let co = obj.coefficients(&probs)?;
                let w_before = obj.w(&co, alpha);
                for g in grad.iter_mut() {
                    *g = 0.0;
                }
                obj.gradient(&policy, &probs, alpha, &mut grad)?;
                let applied = adam.step(&mut theta, &grad);
                policy.set_params(&theta)?;

                // backtrack: halve the applied update until the moment
                // stops increasing, then accept (with a flag if even the
                // smallest step increased it)
                let mut fraction = 1.0;
                let mut accepted = false;
                for halving in 0..=20 {
                    let probs_new = obj.prob_matrix(&policy)?;
                    let co_new = obj.coefficients(&probs_new)?;
                    let w_after = obj.w(&co_new, alpha);
                    if w_after.is_finite() && w_after <= w_before {
                        accepted = true;
                        break;
                    }
                    if halving == 20 {
                        break;
                    }
                    // pull halfway back toward the pre-step parameters
                    fraction *= 0.5;
                    for (t, a) in theta.iter_mut().zip(&applied) {
                        *t -= a * fraction;
                    }
                    policy.set_params(&theta)?;
                }
                if !accepted {
                    forced_steps += 1;
                }
            }

            let moved = theta
                .iter()
                .zip(&theta_before)
                .fold(0.0f64, |m, (a, b)| m.max(math::abs(a - b)));
            if moved < config.convergence_tol {
                converged = true;
                break;
            }
        }

        // final objective of this restart
        let (final_alpha, final_objective) = if diverged {
            (f64::NAN, f64::NAN)
        } else {
            let probs = obj.prob_matrix(&policy)?;
            let co = obj.coefficients(&probs)?;
            match maximize_dr_dual(&obj, &co, config.delta, warm) {
                Ok(s) => {
                    excluded_any |= s.excluded_alpha;
                    (s.alpha, s.value)
                }
                Err(Error::DrNegativeW) => (f64::NAN, f64::NAN),
                Err(e) => return Err(e),
            }
        };
        reports.push(RestartReport {
            restart,
            outer_iters: outer_done,
            converged,
            final_alpha,
            final_objective,
            forced_steps,
        });
        if final_objective.is_finite()
            && best.as_ref().map_or(true, |(bv, _, _)| final_objective > *bv)
        {
            best = Some((final_objective, policy, restart));
        }
    }

    match best {
        Some((_, policy, idx)) => Ok((
            policy,
            LearnDiagnostics { best_restart: idx, reports, excluded_alpha: excluded_any },
        )),
        None => Err(Error::OptimizationFailure {
            restarts: reports.iter().map(|r| r.final_objective).collect(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::abs;
    use crate::simulator::{DiscreteEnv, Environment};
    use crate::types::LoggedSample;
    use crate::weighted::{weighted_dro_value, WeightedSample};

    fn discrete_setup(n: usize, seed: u64) -> (Environment, Dataset) {
        let env = Environment::Discrete(DiscreteEnv::two_state_default());
        let data = env.sample_dataset(n, seed, true).unwrap();
        (env, data)
    }

    /// Population moment W(π, α) straight from the environment tables.
    fn exact_w0(env: &DiscreteEnv, policy: &Policy, alpha: f64) -> f64 {
        let mut acc = 0.0;
        for s in 0..env.state_count() {
            let probs = policy.probs(&[s as f64]).unwrap();
            for a in 0..env.action_count() {
                let m = crate::dual::w_moment(env.reward_distribution(s, a), alpha, 0).unwrap();
                acc += env.state_probs()[s] * probs[a] * m;
            }
        }
        acc
    }

    fn knn_nuisances(data: &Dataset, k: usize, seed: u64) -> LearnerNuisances {
        fit_learner_nuisances(
            data,
            4,
            &LearnPropensity::Logged,
            &ContinuumPlan::Fit(WeightKind::Knn { k }),
            0.01,
            seed,
        )
        .unwrap()
    }

    /// Direct nested-loop evaluation of the objective, no coefficient
    /// aggregation: the independent recomputation the fast path must
    /// reproduce.
    fn w_from_scratch(obj: &DrObjective, probs: &[f64], alpha: f64) -> f64 {
        let n = obj.len();
        let mut acc = 0.0;
        for i in 0..n {
            let row = &probs[i * obj.action_count()..(i + 1) * obj.action_count()];
            let ai = obj.logged_action[i];
            let rho = row[ai] * obj.inv_prop[i];
            let mut term = rho * (math::exp(-obj.rewards[i] / alpha) - obj.f0(i, ai, alpha));
            for (a, &pa) in row.iter().enumerate() {
                term += pa * obj.f0(i, a, alpha);
            }
            acc += term;
        }
        acc / n as f64
    }

    #[test]
    fn aggregated_objective_matches_from_scratch_recomputation() {
        let (env, data) = discrete_setup(300, 5);
        let nuis = knn_nuisances(&data, 20, 7);
        let obj = DrObjective::new(&data, &nuis).unwrap();
        let policy = env.target_policy(1.0).unwrap();
        let probs = obj.prob_matrix(&policy).unwrap();
        let co = obj.coefficients(&probs).unwrap();
        for &alpha in &[0.05, 0.3, 1.0, 4.0] {
            let fast = obj.w(&co, alpha);
            let slow = w_from_scratch(&obj, &probs, alpha);
            assert!(abs(fast - slow) < 1e-12, "alpha {alpha}: {fast} vs {slow}");
        }
    }

    #[test]
    fn objective_is_linear_in_the_probability_matrix() {
        let (env, data) = discrete_setup(200, 9);
        let nuis = knn_nuisances(&data, 15, 11);
        let obj = DrObjective::new(&data, &nuis).unwrap();
        let p1 = obj.prob_matrix(&env.target_policy(1.0).unwrap()).unwrap();
        let p2 = obj.prob_matrix(&env.behavior_policy()).unwrap();
        let t = 0.37;
        let mixed: Vec<f64> = p1.iter().zip(&p2).map(|(a, b)| t * a + (1.0 - t) * b).collect();
        let co1 = obj.coefficients(&p1).unwrap();
        let co2 = obj.coefficients(&p2).unwrap();
        let com = obj.coefficients(&mixed).unwrap();
        for &alpha in &[0.1, 0.7, 3.0] {
            let lhs = obj.w(&com, alpha);
            let rhs = t * obj.w(&co1, alpha) + (1.0 - t) * obj.w(&co2, alpha);
            assert!(abs(lhs - rhs) < 1e-12, "alpha {alpha}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn zero_outcome_model_reduces_to_importance_weighting() {
        let (env, data) = discrete_setup(250, 13);
        let nuis = fit_learner_nuisances(
            &data,
            4,
            &LearnPropensity::Logged,
            &ContinuumPlan::Zero,
            0.01,
            3,
        )
        .unwrap();
        let obj = DrObjective::new(&data, &nuis).unwrap();
        let policy = env.target_policy(1.0).unwrap();
        let probs = obj.prob_matrix(&policy).unwrap();
        let co = obj.coefficients(&probs).unwrap();
        for &alpha in &[0.2, 1.0, 5.0] {
            let mut ips = 0.0;
            for s in data.samples() {
                let pi = policy.probs(&s.state).unwrap()[s.action];
                ips += pi / s.propensity.unwrap() * math::exp(-s.reward / alpha);
            }
            ips /= data.len() as f64;
            assert!(abs(obj.w(&co, alpha) - ips) < 1e-14);
        }
    }

    #[test]
    fn dr_value_with_zero_outcomes_matches_the_weighted_path() {
        // behavior policy on its own logs: ratios are identically one, so
        // both paths maximize the same self-normalized empirical dual
        let (env, data) = discrete_setup(400, 17);
        let nuis = fit_learner_nuisances(
            &data,
            4,
            &LearnPropensity::Logged,
            &ContinuumPlan::Zero,
            0.01,
            3,
        )
        .unwrap();
        let policy = env.behavior_policy();
        let delta = 0.3;
        let solution = dr_value(&data, &nuis, &policy, delta).unwrap();
        let ws = WeightedSample::new(
            alloc::vec![1.0; data.len()],
            data.samples().iter().map(|s| s.reward).collect(),
        )
        .unwrap();
        let direct = weighted_dro_value(&ws, delta).unwrap();
        assert!(abs(solution.value - direct.value) < 1e-8);
        assert!(abs(solution.alpha - direct.alpha) < 1e-6);
        assert!(!solution.excluded_alpha);
    }

    #[test]
    fn dr_value_matches_a_dense_grid() {
        let (env, data) = discrete_setup(300, 23);
        let nuis = knn_nuisances(&data, 25, 5);
        let obj = DrObjective::new(&data, &nuis).unwrap();
        let policy = env.target_policy(1.0).unwrap();
        let probs = obj.prob_matrix(&policy).unwrap();
        let co = obj.coefficients(&probs).unwrap();
        let delta = 0.2;
        let solution = maximize_dr_dual(&obj, &co, delta, None).unwrap();

        let phi = |a: f64| {
            let w = obj.w(&co, a);
            if w > 0.0 {
                -a * math::ln(w) - a * delta
            } else {
                f64::NEG_INFINITY
            }
        };
        let mut best = f64::NEG_INFINITY;
        let points = 300_000;
        for t in 0..=points {
            let a = EPS_ALPHA + (1.0 / delta - EPS_ALPHA) * t as f64 / points as f64;
            best = best.max(phi(a));
        }
        assert!(solution.value >= best - 1e-6, "{} vs grid {}", solution.value, best);
    }

    #[test]
    fn constant_reward_data_values_at_the_constant() {
        let samples = (0..120)
            .map(|i| LoggedSample {
                state: alloc::vec![(i % 5) as f64 / 5.0],
                action: i % 2,
                reward: 0.45,
                propensity: Some(0.5),
            })
            .collect();
        let data = Dataset::new(samples, 2, 1).unwrap();
        let nuis = knn_nuisances(&data, 10, 3);
        let policy = Policy::uniform(1, 2);
        let solution = dr_value(&data, &nuis, &policy, 0.5).unwrap();
        assert!(abs(solution.value - 0.45) < 1e-6, "{}", solution.value);
    }

    #[test]
    fn whole_domain_negative_w_is_an_error_and_partial_exclusion_a_flag() {
        let (env, data) = discrete_setup(100, 29);
        let nuis = fit_learner_nuisances(
            &data,
            4,
            &LearnPropensity::Logged,
            &ContinuumPlan::Zero,
            0.01,
            3,
        )
        .unwrap();
        let obj = DrObjective::new(&data, &nuis).unwrap();
        let probs = obj.prob_matrix(&env.behavior_policy()).unwrap();
        let co = obj.coefficients(&probs).unwrap();

        // force a negative moment over the whole range
        let all_neg = DrCoefficients {
            rho: alloc::vec![0.0; obj.len()],
            agg: alloc::vec![-1.0 / obj.len() as f64; obj.len()],
        };
        match maximize_dr_dual(&obj, &all_neg, 0.3, None) {
            Err(Error::DrNegativeW) => {}
            other => panic!("expected the negative-moment error, got {other:?}"),
        }

        // a mixed-sign aggregate keeps a usable region but must be flagged:
        // the negative mass dominates only at large α, where every tilt
        // approaches one
        let mut mixed = co.clone();
        let drag = -2.0 * (co.rho.iter().sum::<f64>() / obj.len() as f64
            + co.agg.iter().sum::<f64>())
            / obj.len() as f64;
        for (g, r) in mixed.agg.iter_mut().zip(&obj.rewards) {
            if *r < 0.2 {
                *g += drag;
            }
        }
        let solution = maximize_dr_dual(&obj, &mixed, 0.3, None);
        if let Ok(s) = solution {
            assert!(s.excluded_alpha, "partial exclusion must surface in the flag");
        }
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let (_env, data) = discrete_setup(80, 31);
        let nuis = knn_nuisances(&data, 10, 13);
        let obj = DrObjective::new(&data, &nuis).unwrap();
        let mut stream = rng::stream(41, label::NUISANCE);
        for case in 0..20 {
            let mut policy = if case % 2 == 0 {
                Policy::uniform(data.state_dim(), data.action_count())
            } else {
                Policy::mlp_softmax_zero(data.state_dim(), 8, data.action_count())
            };
            let dim = policy.params().unwrap().len();
            let theta: Vec<f64> =
                (0..dim).map(|_| 0.7 * stream.sample::<f64, _>(StandardNormal)).collect();
            policy.set_params(&theta).unwrap();
            let alpha = 0.3 + 0.4 * stream.gen::<f64>();

            let probs = obj.prob_matrix(&policy).unwrap();
            let mut grad = alloc::vec![0.0; dim];
            obj.gradient(&policy, &probs, alpha, &mut grad).unwrap();

            let h = 1e-5;
            let mut fd = alloc::vec![0.0; dim];
            let mut pol = policy.clone();
            for d in 0..dim {
                let mut up = theta.clone();
                up[d] += h;
                pol.set_params(&up).unwrap();
                let pu = obj.prob_matrix(&pol).unwrap();
                let wu = obj.w(&obj.coefficients(&pu).unwrap(), alpha);
                let mut dn = theta.clone();
                dn[d] -= h;
                pol.set_params(&dn).unwrap();
                let pd = obj.prob_matrix(&pol).unwrap();
                let wd = obj.w(&obj.coefficients(&pd).unwrap(), alpha);
                fd[d] = (wu - wd) / (2.0 * h);
            }
            let scale = fd.iter().fold(0.0f64, |m, g| m.max(abs(*g))).max(1e-12);
            for d in 0..dim {
                assert!(
                    abs(grad[d] - fd[d]) / scale < 1e-5,
                    "case {case} coord {d}: analytic {} vs fd {}",
                    grad[d],
                    fd[d]
                );
            }
        }
    }

    #[test]
    fn constant_rewards_give_an_exactly_flat_policy_gradient() {
        // constant rewards make f̂0 constant across actions and kill the
        // residual, so every probability coefficient is equal and the
        // softmax chain rule cancels to zero
        let samples = (0..100)
            .map(|i| LoggedSample {
                state: alloc::vec![(i as f64) / 100.0],
                action: i % 3,
                reward: 0.7,
                propensity: Some(1.0 / 3.0),
            })
            .collect();
        let data = Dataset::new(samples, 3, 1).unwrap();
        let nuis = knn_nuisances(&data, 12, 19);
        let obj = DrObjective::new(&data, &nuis).unwrap();
        let policy = Policy::uniform(1, 3);
        let probs = obj.prob_matrix(&policy).unwrap();
        let dim = policy.params().unwrap().len();
        let mut grad = alloc::vec![0.0; dim];
        obj.gradient(&policy, &probs, 0.8, &mut grad).unwrap();
        for g in &grad {
            assert!(abs(*g) < 1e-13, "gradient leak: {g}");
        }
    }

    #[test]
    fn symmetric_actions_leave_no_average_learning_signal() {
        // identical reward laws and a uniform behavior policy: at the
        // uniform target the population gradient is zero by symmetry, so
        // the empirical one must vanish within Monte Carlo noise
        let mut stream = rng::stream(47, label::NUISANCE);
        let n = 2000;
        let samples: Vec<LoggedSample> = (0..n)
            .map(|_| {
                let action = (stream.gen::<f64>() * 3.0) as usize;
                LoggedSample {
                    state: alloc::vec![stream.gen::<f64>() * 2.0 - 1.0],
                    action: action.min(2),
                    reward: f64::from(stream.gen::<f64>() < 0.5),
                    propensity: Some(1.0 / 3.0),
                }
            })
            .collect();
        let data = Dataset::new(samples, 3, 1).unwrap();
        let nuis = knn_nuisances(&data, 40, 23);
        let obj = DrObjective::new(&data, &nuis).unwrap();
        let policy = Policy::uniform(1, 3);
        let probs = obj.prob_matrix(&policy).unwrap();
        let alpha = 0.8;
        let dim = policy.params().unwrap().len();

        // per-sample gradient contributions, for a standard-error yardstick
        let mut mean = alloc::vec![0.0; dim];
        let mut sq = alloc::vec![0.0; dim];
        let mut one = alloc::vec![0.0; dim];
        for i in 0..obj.len() {
            for v in one.iter_mut() {
                *v = 0.0;
            }
            let row = &probs[i * 3..(i + 1) * 3];
            let ai = obj.logged_action[i];
            let f0l = obj.f0(i, ai, alpha);
            let residual = math::exp(-obj.rewards[i] / alpha) - f0l;
            let beta: Vec<f64> = (0..3)
                .map(|a| {
                    if a == ai {
                        f0l + obj.inv_prop[i] * residual
                    } else {
                        obj.f0(i, a, alpha)
                    }
                })
                .collect();
            let avg: f64 = row.iter().zip(&beta).map(|(p, b)| p * b).sum();
            let lg: Vec<f64> = (0..3).map(|a| row[a] * (beta[a] - avg)).collect();
            policy.accumulate_logit_grad(obj.state(i), &lg, 1.0, &mut one).unwrap();
            for d in 0..dim {
                mean[d] += one[d] / n as f64;
                sq[d] += one[d] * one[d] / n as f64;
            }
        }
        for d in 0..dim {
            let var = (sq[d] - mean[d] * mean[d]).max(0.0);
            let se = math::sqrt(var / n as f64);
            assert!(
                abs(mean[d]) < 3.0 * se + 1e-12,
                "coord {d}: {} exceeds 3·SE {}",
                mean[d],
                3.0 * se
            );
        }
    }

    #[test]
    fn dr_estimate_tracks_the_exact_moment_on_the_finite_env() {
        let (env, data) = discrete_setup(2000, 37);
        let Environment::Discrete(denv) = &env else { unreachable!() };
        let nuis = knn_nuisances(&data, 60, 29);
        let policy = env.behavior_policy();
        let alpha = 1.0;
        let estimate = dr_objective(&data, &nuis, &policy, alpha).unwrap();
        let truth = exact_w0(denv, &policy, alpha);
        // Monte Carlo noise of the plain average at N=2000 is below 0.01;
        // allow 3× that for the estimator
        assert!(abs(estimate - truth) < 0.03, "{estimate} vs {truth}");
    }

    #[test]
    fn outcome_model_reduces_variance_against_pure_ips() {
        let mut dr_err = Vec::new();
        let mut ips_err = Vec::new();
        let alpha = 1.0;
        let env = Environment::Discrete(DiscreteEnv::two_state_default());
        let Environment::Discrete(denv) = &env else { unreachable!() };
        let target = env.target_policy(1.0).unwrap();
        let truth = exact_w0(denv, &target, alpha);
        for seed in 0..30 {
            let data = env.sample_dataset(400, 1000 + seed, true).unwrap();
            let dr_nuis = knn_nuisances(&data, 30, 3);
            let ips_nuis = fit_learner_nuisances(
                &data,
                4,
                &LearnPropensity::Logged,
                &ContinuumPlan::Zero,
                0.01,
                3,
            )
            .unwrap();
            let dr = dr_objective(&data, &dr_nuis, &target, alpha).unwrap();
            let ips = dr_objective(&data, &ips_nuis, &target, alpha).unwrap();
            dr_err.push((dr - truth) * (dr - truth));
            ips_err.push((ips - truth) * (ips - truth));
        }
        let dr_mse: f64 = dr_err.iter().sum::<f64>() / 30.0;
        let ips_mse: f64 = ips_err.iter().sum::<f64>() / 30.0;
        assert!(dr_mse < ips_mse, "DR {dr_mse} should beat IPS {ips_mse}");
    }

    /// Single-state environment with two equal-mean actions, one of them
    /// risk-free. Any δ > 0 should push the learned policy toward the
    /// certain action.
    fn risky_pair_data(n: usize, seed: u64) -> Dataset {
        let mut stream = rng::stream(seed, label::NUISANCE);
        let samples: Vec<LoggedSample> = (0..n)
            .map(|_| {
                let action = usize::from(stream.gen::<f64>() < 0.5);
                let reward = if action == 0 {
                    0.5
                } else {
                    f64::from(stream.gen::<f64>() < 0.5)
                };
                LoggedSample {
                    state: alloc::vec![0.0],
                    action,
                    reward,
                    propensity: Some(0.5),
                }
            })
            .collect();
        Dataset::new(samples, 2, 1).unwrap()
    }

    #[test]
    fn learner_prefers_the_certain_action_under_ambiguity() {
        let data = risky_pair_data(800, 51);
        let mut config = LearnConfig::new(1.0, 9);
        config.restarts = 3;
        config.max_outer_iters = 15;
        config.outcome = ContinuumPlan::Fit(WeightKind::Knn { k: 30 });
        let (policy, diag) = cdr2opl(&data, &config).unwrap();
        let probs = policy.probs(&[0.0]).unwrap();
        assert!(
            probs[0] > 0.6,
            "certain action got {} (diagnostics: {:?})",
            probs[0],
            diag.reports
        );
        assert_eq!(diag.reports.len(), 3);
    }

    #[test]
    fn learner_is_reproducible_and_respects_restart_count() {
        let data = risky_pair_data(300, 53);
        let mut config = LearnConfig::new(0.5, 21);
        config.restarts = 2;
        config.max_outer_iters = 6;
        let (p1, d1) = cdr2opl(&data, &config).unwrap();
        let (p2, d2) = cdr2opl(&data, &config).unwrap();
        assert_eq!(p1.params().unwrap(), p2.params().unwrap());
        assert_eq!(d1.reports.len(), 2);
        for (a, b) in d1.reports.iter().zip(&d2.reports) {
            assert!(a.final_objective.to_bits() == b.final_objective.to_bits());
        }
        assert_eq!(d1.best_restart, d2.best_restart);
    }

    #[test]
    fn invalid_configurations_are_rejected() {
        let data = risky_pair_data(100, 55);
        let mut config = LearnConfig::new(0.5, 1);
        config.restarts = 0;
        assert!(cdr2opl(&data, &config).is_err());
        let mut config = LearnConfig::new(0.5, 1);
        config.learning_rate = 0.0;
        assert!(cdr2opl(&data, &config).is_err());
        let config = LearnConfig::new(-1.0, 1);
        assert!(cdr2opl(&data, &config).is_err());
    }
}
