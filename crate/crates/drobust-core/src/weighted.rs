//! Importance-weighted estimation of the worst-case value, and the
//! classifier for its degenerate regimes.
//!
//! Given logged data from a behavior policy, reweighting each sample by
//! w_i = π(a_i|s_i)/π0(a_i|s_i) turns nominal-environment averages into
//! target-policy averages. Applied to the dual objective this gives
//!
//! ```text
//! φ̂(α) = −α·ln( (1/N) Σ w_i·e^{−r_i/α} ) − α·δ,     V̂_δ = sup_{α>0} φ̂(α).
//! ```
//!
//! Unlike the population dual, the empirical sup can degenerate: when the
//! weight mean S_w falls below 1 and δ < −ln S_w, φ̂ increases without
//! bound (α̂ → ∞); when the weight mean over minimum-reward samples S_w^m
//! is below 1 and δ > −ln S_w^m, the sup collapses onto the boundary α = 0
//! with value equal to the minimum observed reward. Self-normalizing the
//! weights (S_w = 1) provably rules the first case out, which is why SNIPS
//! is the default initializer everywhere downstream. Both regimes are
//! reported as explicit statuses — never as silently propagated infinities.

use alloc::vec::Vec;

use crate::dual::{maximize_kl_dual_over, KlDualSolution, TiltedMoments};
use crate::error::{Error, Result};
use crate::math;
use crate::types::{Dataset, Policy, EPS_ALPHA};

/// Importance-weighted rewards: parallel arrays of nonnegative weights and
/// rewards in [0, 1], at least one weight positive.
///
/// Samples with zero weight carry no information about the target policy
/// (they contribute nothing to any moment), so the effective reward support
/// — and with it the degeneracy classification — is computed over the
/// positively weighted samples only.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    weights: Vec<f64>,
    rewards: Vec<f64>,
    /// (min, max) reward over positively weighted samples.
    bounds: (f64, f64),
}

impl WeightedSample {
    /// Validate and wrap parallel weight/reward arrays.
    pub fn new(weights: Vec<f64>, rewards: Vec<f64>) -> Result<Self> {
        if weights.len() != rewards.len() {
            return Err(Error::Shape { expected: weights.len(), got: rewards.len() });
        }
        if weights.is_empty() {
            return Err(Error::DegenerateWeights);
        }
        let mut any_positive = false;
        let mut bounds = (f64::INFINITY, f64::NEG_INFINITY);
        for (&w, &r) in weights.iter().zip(&rewards) {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Domain { what: "WeightedSample (weights must be ≥ 0, finite)" });
            }
            if !(0.0..=1.0).contains(&r) || !r.is_finite() {
                return Err(Error::Domain { what: "WeightedSample (rewards must lie in [0, 1])" });
            }
            if w > 0.0 {
                any_positive = true;
                bounds.0 = bounds.0.min(r);
                bounds.1 = bounds.1.max(r);
            }
        }
        if !any_positive {
            return Err(Error::DegenerateWeights);
        }
        Ok(WeightedSample { weights, rewards, bounds })
    }

    /// Number of samples (including zero-weight ones; they count toward
    /// the 1/N normalization).
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    /// Whether the sample is empty (never true once constructed).
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// The weights.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// The rewards.
    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }
}

impl TiltedMoments for WeightedSample {
    fn ln_w(&self, alpha: f64, j: u8) -> f64 {
        let mut terms = Vec::with_capacity(self.weights.len());
        for (&w, &r) in self.weights.iter().zip(&self.rewards) {
            if w == 0.0 {
                continue;
            }
            let mut t = math::ln(w) - r / alpha;
            if j > 0 {
                if r == 0.0 {
                    continue;
                }
                t += f64::from(j) * math::ln(r);
            }
            terms.push(t);
        }
        math::log_sum_exp(&terms) - math::ln(self.weights.len() as f64)
    }

    fn reward_bounds(&self) -> (f64, f64) {
        self.bounds
    }
}

/// Where the behavior propensities come from.
#[derive(Debug, Clone, Copy)]
pub enum BehaviorSource<'a> {
    /// Evaluate an explicit behavior policy at each (state, action).
    Policy(&'a Policy),
    /// Use the propensity recorded on each logged sample.
    Logged,
}

/// Per-sample importance ratios w_i = π(a_i|s_i) / π0(a_i|s_i).
pub fn propensity_ratios(
    data: &Dataset,
    target: &Policy,
    behavior: BehaviorSource<'_>,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.len());
    for (i, s) in data.samples().iter().enumerate() {
        let target_prob = target.probs(&s.state)?[s.action];
        let behavior_prob = match behavior {
            BehaviorSource::Policy(pi0) => pi0.probs(&s.state)?[s.action],
            BehaviorSource::Logged => s.propensity.ok_or(Error::InvalidData {
                index: Some(i),
                reason: alloc::string::String::from("sample has no logged propensity"),
            })?,
        };
        if !(behavior_prob > 0.0) {
            return Err(Error::OverlapViolation { index: i });
        }
        out.push(target_prob / behavior_prob);
    }
    Ok(out)
}

/// Rescale weights to mean exactly 1 (the self-normalization that makes
/// IPS into SNIPS and rules out the α̂ → ∞ regime).
pub fn snips_normalize(weights: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = {
        let mut acc = 0.0;
        for &w in weights {
            acc += w;
        }
        acc
    };
    if !(total > 0.0) {
        return Err(Error::DegenerateWeights);
    }
    let scale = weights.len() as f64 / total;
    Ok(weights.iter().map(|&w| w * scale).collect())
}

/// The importance-weighted moment Ŵ(α) = (1/N) Σ w_i·e^{−r_i/α} in linear
/// scale.
///
/// Errors with [`Error::DegenerateWeights`] if the sum evaluates to zero —
/// in exact arithmetic that cannot happen for a valid [`WeightedSample`],
/// but extreme α can underflow every term; the maximizers work in log
/// space and never hit this.
pub fn weighted_w(ws: &WeightedSample, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::Domain { what: "weighted_w (alpha must be > 0)" });
    }
    let v = math::exp(ws.ln_w(alpha, 0));
    if v == 0.0 {
        return Err(Error::DegenerateWeights);
    }
    Ok(v)
}

/// The three regimes of the empirical dual sup.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum DegeneracyStatus {
    /// sup attained at an interior (or finite-boundary) α̂.
    Finite,
    /// φ̂ increases without bound; the estimate is +∞.
    AlphaInfinite,
    /// sup sits on the α → 0 boundary; the estimate is the minimum reward.
    AlphaZero,
}

/// The statistics the degeneracy classification is a function of.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DegeneracyStats {
    /// S_w: mean of all weights.
    pub s_w: f64,
    /// S_w^m: mean of weights over minimum-reward samples.
    pub s_w_min: f64,
    /// Minimum reward among positively weighted samples.
    pub min_reward: f64,
}

impl DegeneracyStats {
    /// Whether δ sits exactly on one of the regime thresholds (−ln S_w or
    /// −ln S_w^m). Ties classify as Finite; callers that want to warn on
    /// the knife edge check this.
    pub fn is_boundary_tie(&self, delta: f64) -> bool {
        (self.s_w < 1.0 && delta == -math::ln(self.s_w))
            || (self.s_w_min < 1.0 && delta == -math::ln(self.s_w_min))
    }
}

/// Classify which regime the empirical dual sup falls in:
///
/// - S_w < 1 and δ < −ln S_w  ⇒  `AlphaInfinite`
/// - S_w^m < 1 and δ > −ln S_w^m  ⇒  `AlphaZero`
/// - otherwise (including exact threshold ties)  ⇒  `Finite`
pub fn degeneracy_classify(
    ws: &WeightedSample,
    delta: f64,
) -> Result<(DegeneracyStats, DegeneracyStatus)> {
    if !(delta > 0.0) {
        return Err(Error::Domain { what: "degeneracy_classify (delta must be > 0)" });
    }
    let n = ws.len() as f64;
    let mut sum_w = 0.0;
    let mut sum_w_min = 0.0;
    let min_reward = ws.bounds.0;
    for (&w, &r) in ws.weights.iter().zip(&ws.rewards) {
        sum_w += w;
        if w > 0.0 && r == min_reward {
            sum_w_min += w;
        }
    }
    let stats = DegeneracyStats { s_w: sum_w / n, s_w_min: sum_w_min / n, min_reward };
    let status = if stats.s_w < 1.0 && delta < -math::ln(stats.s_w) {
        DegeneracyStatus::AlphaInfinite
    } else if stats.s_w_min < 1.0 && delta > -math::ln(stats.s_w_min) {
        DegeneracyStatus::AlphaZero
    } else {
        DegeneracyStatus::Finite
    };
    Ok((stats, status))
}

/// Outcome of maximizing the importance-weighted dual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedDroResult {
    /// Maximizing α̂. Infinity or 0 in the corresponding degenerate regimes.
    pub alpha: f64,
    /// The value estimate. `f64::INFINITY` under `AlphaInfinite` (the
    /// status is the authoritative signal; the sentinel is for display).
    pub value: f64,
    /// Which regime the sup fell in.
    pub status: DegeneracyStatus,
    /// The classifier inputs, for reporting.
    pub stats: DegeneracyStats,
}

/// Maximize the importance-weighted dual φ̂(α) = −α·ln Ŵ(α) − αδ.
///
/// Degenerate regimes are detected up front by [`degeneracy_classify`] and
/// reported as statuses rather than errors. In the finite regime the
/// search bracket extends past 1/δ when S_w < 1 — the stationary point is
/// only guaranteed below 1/(δ + ln S_w) there — capped at 1e12 next to
/// threshold ties where that bound blows up.
pub fn weighted_dro_value(ws: &WeightedSample, delta: f64) -> Result<WeightedDroResult> {
    let (stats, status) = degeneracy_classify(ws, delta)?;
    match status {
        DegeneracyStatus::AlphaInfinite => Ok(WeightedDroResult {
            alpha: f64::INFINITY,
            value: f64::INFINITY,
            status,
            stats,
        }),
        DegeneracyStatus::AlphaZero => Ok(WeightedDroResult {
            alpha: 0.0,
            value: stats.min_reward,
            status,
            stats,
        }),
        DegeneracyStatus::Finite => {
            let hi = if stats.s_w < 1.0 {
                math::clip(1.0 / (delta + math::ln(stats.s_w)), EPS_ALPHA * 2.0, 1e12)
            } else {
                1.0 / delta
            };
            let KlDualSolution { alpha, value, .. } = maximize_kl_dual_over(ws, delta, hi)?;
            Ok(WeightedDroResult { alpha, value, status, stats })
        }
    }
}
