//! Cross-fitted doubly robust estimation of the worst-case policy value.
//!
//! The estimator runs in three phases per fold:
//!
//! 1. fit the behavior propensity on the fold's complement (or take logged
//!    / oracle values),
//! 2. split the complement in half, compute a self-normalized IPS pilot of
//!    the dual variable on the first half, and fit the two localized
//!    outcome regressions f̂_j(s, a) = Ê[R^j·e^{−R/α̂_init} | s, a] on the
//!    second half at that pilot tilt,
//! 3. assemble doubly robust moment functions and solve the stationarity
//!    condition of the dual in α by Newton's method.
//!
//! The doubly robust moments
//!
//! ```text
//! Ŵ_j(α) = mean_i [ Σ_a π(a|s_i)·f̂_j(s_i,a)
//!                   + ρ_i·(r_i^j·e^{−r_i/α} − f̂_j(s_i,a_i)) ],
//! ρ_i = π(a_i|s_i)/π̂0(a_i|s_i),
//! ```
//!
//! are first-order insensitive to errors in either nuisance, which is what
//! buys the fast bias decay under slowly converging fits. Only the
//! importance-weighted residual depends on α, so dŴ_j/dα has the clean
//! closed form mean_i[ρ_i·r_i^{j+1}·e^{−r_i/α}]/α² used by both Newton
//! solvers.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::nuisance::{
    fit_outcome_localized, fit_propensity, NuisanceOracle, OutcomeKind, OutcomeModel,
    PropensityKind, PropensityModel,
};
use crate::rng;
use crate::types::{
    crossfit_split, split_half, Dataset, EvalTheta, FoldAssignment, Policy, EPS_ALPHA,
};
use crate::weighted::{weighted_dro_value, DegeneracyStatus, WeightedSample};

/// Which root finder solves the dual stationarity condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NewtonMethod {
    /// One-dimensional Newton on M(α) with derivative M′(α).
    Scalar,
    /// Joint Newton on (α, W0, W1, value) with the full 4×4 Jacobian.
    Multidim,
}

/// Configuration of the cross-fitted evaluator.
#[derive(Debug, Clone, PartialEq)]
pub struct LdropeConfig {
    /// Divergence-ball radius δ > 0.
    pub delta: f64,
    /// Number of cross-fitting folds K ≥ 2.
    pub folds: usize,
    /// Number of localization re-runs after the first pass (0 = single
    /// pass): each re-run refits the outcome regressions at the previous
    /// α̂ on fresh half-splits.
    pub recursions: usize,
    /// Root-finder flavor.
    pub newton: NewtonMethod,
    /// Newton step-size convergence tolerance.
    pub newton_tol: f64,
    /// Newton iteration budget before the bisection fallback.
    pub newton_max_iter: usize,
    /// Divide the propensity ratios by their global empirical mean before
    /// building moments. On by default: it removes the scale noise of the
    /// ratios at small N without touching the estimand.
    pub self_normalize_dr: bool,
    /// Seed for fold assignment and half-splits.
    pub seed: u64,
}

impl LdropeConfig {
    /// Defaults: 5 folds, single pass, scalar Newton (tol 1e-10, 100
    /// iterations), self-normalization on.
    pub fn new(delta: f64, seed: u64) -> LdropeConfig {
        LdropeConfig {
            delta,
            folds: 5,
            recursions: 0,
            newton: NewtonMethod::Scalar,
            newton_tol: 1e-10,
            newton_max_iter: 100,
            self_normalize_dr: true,
            seed,
        }
    }
}

/// Where per-fold behavior propensities come from.
#[derive(Debug, Clone, PartialEq)]
pub enum PropensityPlan {
    /// Use the propensities recorded in the dataset.
    Logged,
    /// Fit a model per fold on the fold's complement.
    Fit(PropensityKind),
}

/// Nuisance sourcing for one evaluator run.
pub enum NuisanceSpec<'a> {
    /// The real pipeline: fit everything from data.
    Fitted {
        /// Propensity source.
        propensity: PropensityPlan,
        /// Outcome regression family.
        outcome: OutcomeKind,
        /// Clip floor applied to fitted propensities.
        clip_floor: f64,
    },
    /// Externally supplied (true or deliberately perturbed) nuisances;
    /// no fitting happens, but the cross-fitting layout is preserved.
    External(&'a dyn NuisanceOracle),
}

/// Everything the evaluator needs to know about how samples are split:
/// the fold assignment plus one (J1, J2) half-split of each fold's
/// complement per localization round. Building it separately keeps runs
/// reproducible and lets tests pin the layout exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossfitPlan {
    folds: FoldAssignment,
    /// halves[round][fold] = (J1, J2).
    halves: Vec<Vec<(Vec<usize>, Vec<usize>)>>,
}

impl CrossfitPlan {
    /// Derive a plan for `n` samples, `k` folds, and `rounds` localization
    /// rounds from a seed.
    pub fn from_seed(n: usize, k: usize, rounds: usize, seed: u64) -> Result<CrossfitPlan> {
        let folds = crossfit_split(n, k, seed)?;
        let mut halves = Vec::with_capacity(rounds);
        for round in 0..rounds {
            let mut per_fold = Vec::with_capacity(k);
            for fold in 0..k {
                let comp = folds.complement_indices(fold);
                let half_seed = rng::derive(seed, (round * k + fold + 1) as u64);
                per_fold.push(split_half(&comp, half_seed)?);
            }
            halves.push(per_fold);
        }
        Ok(CrossfitPlan { folds, halves })
    }

    /// The fold assignment.
    pub fn folds(&self) -> &FoldAssignment {
        &self.folds
    }

    /// Number of localization rounds the plan covers.
    pub fn rounds(&self) -> usize {
        self.halves.len()
    }

    /// Relabel the plan for a reordered dataset: `new_index_of[i]` is the
    /// position sample `i` moved to. Running the evaluator on the permuted
    /// data with the relabeled plan reproduces the original estimate
    /// exactly (up to summation order).
    pub fn permuted(&self, new_index_of: &[usize]) -> CrossfitPlan {
        let old_fold = self.folds.fold_of();
        let mut fold_of = alloc::vec![0usize; old_fold.len()];
        for (i, &f) in old_fold.iter().enumerate() {
            fold_of[new_index_of[i]] = f;
        }
        let folds = FoldAssignment::from_fold_of(fold_of, self.folds.k())
            .expect("relabeling preserves fold validity");
        let halves = self
            .halves
            .iter()
            .map(|per_fold| {
                per_fold
                    .iter()
                    .map(|(j1, j2)| {
                        (
                            j1.iter().map(|&i| new_index_of[i]).collect(),
                            j2.iter().map(|&i| new_index_of[i]).collect(),
                        )
                    })
                    .collect()
            })
            .collect();
        CrossfitPlan { folds, halves }
    }
}

/// A behavior-propensity evaluator for ratio construction.
#[derive(Clone, Copy)]
pub enum PropensityEval<'a> {
    /// Read the recorded propensity off each sample.
    Logged,
    /// Evaluate a fitted model.
    Model(&'a PropensityModel),
    /// Evaluate an external oracle.
    Oracle(&'a dyn NuisanceOracle),
}

impl PropensityEval<'_> {
    fn prob(&self, data: &Dataset, i: usize) -> Result<f64> {
        let sample = data.sample(i);
        let p = match self {
            PropensityEval::Logged => sample.propensity.ok_or_else(|| Error::InvalidData {
                index: Some(i),
                reason: String::from("logged propensity required but missing"),
            })?,
            PropensityEval::Model(model) => model.prob(&sample.state, sample.action)?,
            PropensityEval::Oracle(oracle) => oracle.propensity(&sample.state, sample.action)?,
        };
        if !(p > 0.0) || !p.is_finite() {
            return Err(Error::OverlapViolation { index: i });
        }
        Ok(p)
    }
}

/// Pilot estimate of the dual variable from one data slice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialEstimate {
    /// Pilot α, projected into (ε_α, 1/δ].
    pub alpha: f64,
    /// True when the slice's weighted dual was degenerate (constant
    /// rewards, or an α → 0 / α → ∞ regime) and `alpha` is a projected
    /// boundary rather than an interior stationary point.
    pub degenerate: bool,
}

/// Self-normalized IPS pilot: solve the weighted dual on the slice and
/// project degenerate regimes onto the feasible boundary.
pub fn initial_estimate(
    data: &Dataset,
    indices: &[usize],
    policy: &Policy,
    delta: f64,
    propensities: PropensityEval<'_>,
) -> Result<InitialEstimate> {
    if indices.is_empty() {
        return Err(Error::InvalidData {
            index: None,
            reason: String::from("initial_estimate needs a nonempty slice"),
        });
    }
    if !(delta > 0.0) {
        return Err(Error::Domain { what: "initial_estimate (delta must be > 0)" });
    }
    let mut weights = Vec::with_capacity(indices.len());
    let mut rewards = Vec::with_capacity(indices.len());
    for &i in indices {
        let sample = data.sample(i);
        let target = policy.probs(&sample.state)?[sample.action];
        weights.push(target / propensities.prob(data, i)?);
        rewards.push(sample.reward);
    }
    let mean: f64 = weights.iter().sum::<f64>() / weights.len() as f64;
    if !(mean > 0.0) {
        return Err(Error::DegenerateWeights);
    }
    for w in &mut weights {
        *w /= mean;
    }
    let sample = WeightedSample::new(weights, rewards)?;
    let result = weighted_dro_value(&sample, delta)?;
    let (alpha, degenerate) = match result.status {
        DegeneracyStatus::AlphaInfinite => (1.0 / delta, true),
        DegeneracyStatus::AlphaZero => (EPS_ALPHA, true),
        // the finite branch can still sit on the left boundary when every
        // reward is identical (tilting a constant is a no-op)
        DegeneracyStatus::Finite => {
            let boundary = result.alpha <= EPS_ALPHA * 1.5;
            (math::clip(result.alpha, EPS_ALPHA, 1.0 / delta), boundary)
        }
    };
    Ok(InitialEstimate { alpha, degenerate })
}

/// The assembled doubly robust moment functions Ŵ_j(α) and their
/// α-derivatives, over all samples (each using its own fold's nuisances).
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSystem {
    rho: Vec<f64>,
    rewards: Vec<f64>,
    /// plug[j][i] = Σ_a π(a|s_i)·f̂_j(s_i, a).
    plug: [Vec<f64>; 2],
    /// resid[j][i] = f̂_j(s_i, a_i).
    resid: [Vec<f64>; 2],
    /// Cancellation noise floor of the Ŵ0 sum: Ŵ0 values at or below a
    /// few hundred ulps of the summed term magnitudes are float debris
    /// (the outcome-model and residual terms cancel to roundoff), and
    /// −ln Ŵ0 evaluated there produces spurious sign changes of the
    /// stationarity residual. Pure importance weighting has no
    /// cancellation, so its floor is zero and arbitrarily small genuine
    /// moments stay usable.
    w_floor: f64,
}

impl MomentSystem {
    /// Assemble from per-sample pieces; `self_normalize` divides the ratios
    /// by their global mean.
    pub fn new(
        rho: Vec<f64>,
        rewards: Vec<f64>,
        plug: [Vec<f64>; 2],
        resid: [Vec<f64>; 2],
        self_normalize: bool,
    ) -> Result<MomentSystem> {
        let n = rho.len();
        if n == 0 {
            return Err(Error::InvalidData {
                index: None,
                reason: String::from("moment system needs at least one sample"),
            });
        }
        for v in [&rewards, &plug[0], &plug[1], &resid[0], &resid[1]] {
            if v.len() != n {
                return Err(Error::Shape { expected: n, got: v.len() });
            }
        }
        if rho.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidData {
                index: None,
                reason: String::from("propensity ratios must be finite and nonnegative"),
            });
        }
        let mut rho = rho;
        if self_normalize {
            let mean: f64 = rho.iter().sum::<f64>() / n as f64;
            if !(mean > 0.0) {
                return Err(Error::DegenerateWeights);
            }
            for w in &mut rho {
                *w /= mean;
            }
        }
        let mut magnitude = 0.0;
        for i in 0..n {
            magnitude += math::abs(plug[0][i]) + rho[i] * math::abs(resid[0][i]);
        }
        let w_floor = magnitude / n as f64 * 1e-13;
        Ok(MomentSystem { rho, rewards, plug, resid, w_floor })
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.rho.len()
    }

    /// Whether the system is empty (never true once constructed).
    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    /// Doubly robust moment Ŵ_j(α).
    pub fn w(&self, alpha: f64, j: u8) -> f64 {
        let (plug, resid) = (&self.plug[usize::from(j)], &self.resid[usize::from(j)]);
        let mut acc = 0.0;
        for i in 0..self.rho.len() {
            let r = self.rewards[i];
            let tilt = math::exp(-r / alpha);
            let obs = if j == 0 { tilt } else { r * tilt };
            acc += plug[i] + self.rho[i] * (obs - resid[i]);
        }
        acc / self.rho.len() as f64
    }

    /// dŴ_j/dα: only the importance-weighted residual depends on α.
    pub fn w_prime(&self, alpha: f64, j: u8) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.rho.len() {
            let r = self.rewards[i];
            let mut term = self.rho[i] * r * math::exp(-r / alpha);
            if j == 1 {
                term *= r;
            }
            acc += term;
        }
        acc / (self.rho.len() as f64 * alpha * alpha)
    }

    /// Stationarity residual M(α) = −ln Ŵ0 − Ŵ1/(α·Ŵ0) − δ; NaN when
    /// Ŵ0(α) sits at or below the cancellation noise floor (callers treat
    /// non-finite values as out of domain).
    pub fn moment(&self, alpha: f64, delta: f64) -> f64 {
        let w0 = self.w(alpha, 0);
        if !(w0 > self.w_floor) {
            return f64::NAN;
        }
        -math::ln(w0) - self.w(alpha, 1) / (alpha * w0) - delta
    }

    /// dM/dα.
    pub fn moment_prime(&self, alpha: f64) -> f64 {
        let w0 = self.w(alpha, 0);
        if !(w0 > self.w_floor) {
            return f64::NAN;
        }
        let w1 = self.w(alpha, 1);
        let w0p = self.w_prime(alpha, 0);
        let w1p = self.w_prime(alpha, 1);
        -w0p / w0 - w1p / (alpha * w0) + w1 * (w0 + alpha * w0p) / (alpha * alpha * w0 * w0)
    }
}

/// How a root solve ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SolveReport {
    /// Newton iterations actually taken.
    pub iterations: usize,
    /// Newton failed to converge and bisection on a sign-change bracket
    /// produced the root instead.
    pub bisection_fallback: bool,
    /// M had no sign change over the feasible range; the returned α is the
    /// boundary the residual points toward, not a root.
    pub no_root: bool,
}

/// Scalar Newton on M(α) with projection into [ε_α, 1/δ], bisection
/// fallback on non-convergence, and a flagged boundary answer when M has
/// no root in range.
pub fn newton_scalar(
    ms: &MomentSystem,
    delta: f64,
    alpha_start: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(f64, SolveReport)> {
    if !(delta > 0.0) {
        return Err(Error::Domain { what: "newton_scalar (delta must be > 0)" });
    }
    let bar = 1.0 / delta;
    let mut alpha = math::clip(alpha_start, EPS_ALPHA, bar);
    let mut report = SolveReport::default();
    for it in 0..max_iter {
        let m = ms.moment(alpha, delta);
        let mp = ms.moment_prime(alpha);
        if !m.is_finite() || !mp.is_finite() || mp == 0.0 {
            break;
        }
        if m == 0.0 {
            report.iterations = it + 1;
            return Ok((alpha, report));
        }
        let mut next = math::clip(alpha - m / mp, EPS_ALPHA, bar);
        // walk back toward the current iterate if the step landed where
        // Ŵ0 ≤ 0 (the residual is NaN there)
        let mut tries = 0;
        while !ms.moment(next, delta).is_finite() && tries < 60 {
            next = 0.5 * (next + alpha);
            tries += 1;
        }
        if !ms.moment(next, delta).is_finite() {
            break;
        }
        let step = math::abs(next - alpha);
        if step == 0.0 {
            // pinned at a boundary with a nonzero residual: projected
            // Newton has stalled, not converged
            break;
        }
        alpha = next;
        if step < tol {
            // Newton is attracted to any root of M; accept only roots
            // where M is decreasing (maximizers of the implied dual
            // objective), not the spurious minima the doubly robust
            // correction can create at small α
            if ms.moment_prime(alpha) > 0.0 {
                break;
            }
            report.iterations = it + 1;
            return Ok((alpha, report));
        }
    }
    // bisection fallback on a log-spaced scan of the feasible range
    report.bisection_fallback = true;
    let points = 129;
    let ratio = math::powf(bar / EPS_ALPHA, 1.0 / (points - 1) as f64);
    let mut grid = Vec::with_capacity(points);
    let mut x = EPS_ALPHA;
    for _ in 0..points {
        grid.push((x.min(bar), ms.moment(x.min(bar), delta)));
        x *= ratio;
    }
    let mut bracket = None;
    for w in grid.windows(2) {
        let ((a, ma), (b, mb)) = (w[0], w[1]);
        if ma.is_finite() && mb.is_finite() && ma > 0.0 && mb <= 0.0 {
            bracket = Some((a, ma, b));
            break;
        }
    }
    if bracket.is_none() {
        // accept any sign change, not just the decreasing kind
        for w in grid.windows(2) {
            let ((a, ma), (b, mb)) = (w[0], w[1]);
            if ma.is_finite() && mb.is_finite() && (ma > 0.0) != (mb > 0.0) {
                bracket = Some((a, ma, b));
                break;
            }
        }
    }
    match bracket {
        Some((mut lo, m_lo, mut hi)) => {
            for _ in 0..200 {
                if hi - lo < tol {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                let mm = ms.moment(mid, delta);
                if mm.is_finite() && (mm > 0.0) == (m_lo > 0.0) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            Ok((0.5 * (lo + hi), report))
        }
        None => {
            report.no_root = true;
            // no root: the residual's sign at the last finite point says
            // which boundary the dual value improves toward
            let last = grid.iter().rev().find(|(_, m)| m.is_finite());
            let alpha = match last {
                Some(&(_, m)) if m > 0.0 => bar,
                _ => EPS_ALPHA,
            };
            Ok((alpha, report))
        }
    }
}

/// Joint Newton on θ = (α, W0, W1, value). Returns the solution and the
/// iteration count, or `None` when the Jacobian goes singular or the
/// budget runs out (callers fall back to the scalar path).
pub fn newton_multidim(
    ms: &MomentSystem,
    delta: f64,
    theta_start: EvalTheta,
    tol: f64,
    max_iter: usize,
) -> Option<(EvalTheta, usize)> {
    let bar = 1.0 / delta;
    let project = |th: EvalTheta| EvalTheta {
        alpha: math::clip(th.alpha, EPS_ALPHA, bar),
        w0: math::clip(th.w0, 1e-12, 1.0),
        w1: th.w1,
        value: th.value,
    };
    let residual = |th: &EvalTheta| -> [f64; 4] {
        let ln_w0 = math::ln(th.w0);
        [
            ms.w(th.alpha, 0) - th.w0,
            ms.w(th.alpha, 1) - th.w1,
            -ln_w0 - th.w1 / (th.alpha * th.w0) - delta,
            -th.alpha * ln_w0 - th.alpha * delta - th.value,
        ]
    };
    let sup = |r: &[f64]| r.iter().fold(0.0f64, |m, s| m.max(math::abs(*s)));

    let mut theta = project(theta_start);
    let mut res = residual(&theta);
    for it in 0..max_iter {
        let (alpha, w0, w1) = (theta.alpha, theta.w0, theta.w1);
        let cap_w0p = ms.w_prime(alpha, 0);
        let cap_w1p = ms.w_prime(alpha, 1);
        let ln_w0 = math::ln(w0);
        #[rustfmt::skip]
        let mut jac = [
            cap_w0p,                   -1.0,                                0.0,                 0.0,
            cap_w1p,                    0.0,                               -1.0,                 0.0,
            w1 / (alpha * alpha * w0), -1.0 / w0 + w1 / (alpha * w0 * w0), -1.0 / (alpha * w0),  0.0,
            -ln_w0 - delta,            -alpha / w0,                         0.0,                -1.0,
        ];
        let mut rhs = [-res[0], -res[1], -res[2], -res[3]];
        let step = math::solve_linear(&mut jac, &mut rhs)?;
        if step.iter().any(|s| !s.is_finite()) {
            return None;
        }
        if sup(&step) < tol {
            // the full step is already below tolerance; take it and stop
            theta = project(EvalTheta {
                alpha: alpha + step[0],
                w0: w0 + step[1],
                w1: w1 + step[2],
                value: theta.value + step[3],
            });
            if ms.moment_prime(theta.alpha) > 0.0 {
                return None;
            }
            return Some((theta, it + 1));
        }
        // damp by halving until the residual norm actually drops
        let res_norm = sup(&res);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let cand = project(EvalTheta {
                alpha: alpha + t * step[0],
                w0: w0 + t * step[1],
                w1: w1 + t * step[2],
                value: theta.value + t * step[3],
            });
            let cand_res = residual(&cand);
            if cand_res.iter().all(|r| r.is_finite()) && sup(&cand_res) < res_norm {
                accepted = Some((cand, cand_res));
                break;
            }
            t *= 0.5;
        }
        let (cand, cand_res) = accepted?;
        let moved = [
            cand.alpha - theta.alpha,
            cand.w0 - theta.w0,
            cand.w1 - theta.w1,
            cand.value - theta.value,
        ];
        theta = cand;
        res = cand_res;
        if sup(&moved) < tol {
            // same maximizer test as the scalar path: a converged joint
            // solve at a spurious minimum of the dual is rejected
            if ms.moment_prime(theta.alpha) > 0.0 {
                return None;
            }
            return Some((theta, it + 1));
        }
    }
    None
}

/// Flags surfaced alongside the estimate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LdropeFlag {
    /// Every reward in the dataset is identical; the value is that
    /// constant and no moment solving happened.
    ConstantReward,
    /// A fold's pilot estimate was degenerate and was replaced by the
    /// midpoint 1/(2δ) before localization.
    InitReplacedByMidpoint {
        /// Localization round.
        round: usize,
        /// Fold index.
        fold: usize,
    },
    /// Scalar Newton fell back to bisection.
    BisectionFallback,
    /// The moment residual had no root in (ε_α, 1/δ]; the reported α is a
    /// boundary.
    BoundaryNoRoot,
    /// The multidimensional solve hit a singular Jacobian or its iteration
    /// budget and the scalar path produced the answer.
    MultidimFellBackToScalar,
}

impl LdropeFlag {
    /// Stable label for serialization.
    pub fn label(&self) -> &'static str {
        match self {
            LdropeFlag::ConstantReward => "constant-reward",
            LdropeFlag::InitReplacedByMidpoint { .. } => "init-replaced-by-midpoint",
            LdropeFlag::BisectionFallback => "bisection-fallback",
            LdropeFlag::BoundaryNoRoot => "boundary-no-root",
            LdropeFlag::MultidimFellBackToScalar => "multidim-fell-back-to-scalar",
        }
    }
}

/// Per-fold, per-round trace of the nuisance stage.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldReport {
    /// Localization round (0 = first pass).
    pub round: usize,
    /// Fold index.
    pub fold: usize,
    /// Pilot α the outcome regressions were localized at.
    pub alpha_init: f64,
    /// Whether the pilot was degenerate before projection/replacement.
    pub init_degenerate: bool,
    /// Propensity source label.
    pub propensity_kind: String,
    /// Outcome source label.
    pub outcome_kind: String,
}

/// Diagnostics for one evaluator run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LdropeDiagnostics {
    /// Anything unusual that happened.
    pub flags: Vec<LdropeFlag>,
    /// Per-fold nuisance trace, all rounds.
    pub per_fold: Vec<FoldReport>,
}

/// Run the full cross-fitted doubly robust evaluator with a seed-derived
/// split plan.
pub fn ldr2ope(
    data: &Dataset,
    policy: &Policy,
    config: &LdropeConfig,
    nuisance: &NuisanceSpec<'_>,
) -> Result<(EvalTheta, LdropeDiagnostics)> {
    let plan =
        CrossfitPlan::from_seed(data.len(), config.folds, config.recursions + 1, config.seed)?;
    ldr2ope_with_plan(data, policy, config, nuisance, &plan)
}

/// Run the evaluator with an explicit split plan (reproducibility and
/// permutation tests pin the layout through this entry point).
pub fn ldr2ope_with_plan(
    data: &Dataset,
    policy: &Policy,
    config: &LdropeConfig,
    nuisance: &NuisanceSpec<'_>,
    plan: &CrossfitPlan,
) -> Result<(EvalTheta, LdropeDiagnostics)> {
    if !(config.delta > 0.0) {
        return Err(Error::Domain { what: "ldr2ope (delta must be > 0)" });
    }
    if config.folds < 2 {
        return Err(Error::InvalidConfiguration {
            reason: String::from("ldr2ope needs at least 2 folds"),
        });
    }
    if !(config.newton_tol > 0.0) || config.newton_max_iter == 0 {
        return Err(Error::InvalidConfiguration {
            reason: String::from("newton_tol must be > 0 and newton_max_iter ≥ 1"),
        });
    }
    if let NuisanceSpec::Fitted { clip_floor, .. } = nuisance {
        if !(*clip_floor > 0.0 && *clip_floor < 0.5) {
            return Err(Error::Domain { what: "ldr2ope (clip_floor must be in (0, 0.5))" });
        }
    }
    if plan.folds.fold_of().len() != data.len() || plan.folds.k() != config.folds {
        return Err(Error::InvalidConfiguration {
            reason: String::from("crossfit plan does not match the dataset/config"),
        });
    }
    if plan.rounds() < config.recursions + 1 {
        return Err(Error::InvalidConfiguration {
            reason: String::from("crossfit plan covers fewer rounds than configured"),
        });
    }

    let mut diagnostics = LdropeDiagnostics::default();
    let n = data.len();
    let delta = config.delta;

    // constant rewards: every tilt is a no-op and the worst case equals the
    // constant itself; the moment residual is identically −δ, so report the
    // boundary directly instead of pretending to solve anything
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in data.samples() {
        lo = lo.min(s.reward);
        hi = hi.max(s.reward);
    }
    if hi - lo < 1e-15 {
        diagnostics.flags.push(LdropeFlag::ConstantReward);
        let tilt = math::exp(-lo / EPS_ALPHA);
        let theta =
            EvalTheta { alpha: EPS_ALPHA, w0: tilt, w1: lo * tilt, value: lo - EPS_ALPHA * delta };
        return Ok((theta, diagnostics));
    }

    // target-policy probabilities, shared by ratios and plug-in terms
    let mut target_probs = Vec::with_capacity(n);
    for s in data.samples() {
        target_probs.push(policy.probs(&s.state)?);
    }

    let mut alpha_hat = f64::NAN;
    let mut theta = EvalTheta { alpha: f64::NAN, w0: f64::NAN, w1: f64::NAN, value: f64::NAN };
    for round in 0..=config.recursions {
        let mut rho = alloc::vec![0.0; n];
        let mut plug = [alloc::vec![0.0; n], alloc::vec![0.0; n]];
        let mut resid = [alloc::vec![0.0; n], alloc::vec![0.0; n]];
        let mut alpha_inits = Vec::with_capacity(config.folds);

        for fold in 0..config.folds {
            let comp = plan.folds.complement_indices(fold);
            let fold_seed = rng::derive(config.seed, (round * config.folds + fold) as u64);

            // propensity source for this fold
            let fitted_prop: Option<PropensityModel> = match nuisance {
                NuisanceSpec::Fitted { propensity: PropensityPlan::Fit(kind), clip_floor, .. } => {
                    Some(fit_propensity(data, &comp, kind, *clip_floor, fold_seed)?)
                }
                _ => None,
            };
            let prop_eval = match (nuisance, &fitted_prop) {
                (NuisanceSpec::External(oracle), _) => PropensityEval::Oracle(*oracle),
                (_, Some(model)) => PropensityEval::Model(model),
                _ => PropensityEval::Logged,
            };

            // pilot α: SNIPS on J1 in round 0, thereafter the previous α̂
            let (j1, j2) = &plan.halves[round][fold];
            let (mut alpha_init, degenerate) = if round == 0 {
                let pilot = initial_estimate(data, j1, policy, delta, prop_eval)?;
                (pilot.alpha, pilot.degenerate)
            } else {
                (alpha_hat, false)
            };
            if degenerate {
                alpha_init = 0.5 / delta;
                diagnostics.flags.push(LdropeFlag::InitReplacedByMidpoint { round, fold });
            }
            alpha_inits.push(alpha_init);

            // localized outcome fits on J2 at the pilot tilt
            let fitted_outcome: Option<(OutcomeModel, OutcomeModel)> = match nuisance {
                NuisanceSpec::Fitted { outcome, .. } => Some((
                    fit_outcome_localized(data, j2, alpha_init, 0, outcome, fold_seed)?,
                    fit_outcome_localized(data, j2, alpha_init, 1, outcome, fold_seed)?,
                )),
                NuisanceSpec::External(_) => None,
            };
            let outcome_at = |state: &[f64], action: usize, j: u8| -> Result<f64> {
                match (&fitted_outcome, nuisance) {
                    (Some((f0, f1)), _) => {
                        if j == 0 {
                            f0.predict(state, action)
                        } else {
                            f1.predict(state, action)
                        }
                    }
                    (None, NuisanceSpec::External(oracle)) => {
                        oracle.outcome(state, action, alpha_init, j)
                    }
                    (None, _) => unreachable!("fitted spec always builds outcome models"),
                }
            };

            diagnostics.per_fold.push(FoldReport {
                round,
                fold,
                alpha_init,
                init_degenerate: degenerate,
                propensity_kind: String::from(match (&prop_eval, &fitted_prop) {
                    (PropensityEval::Oracle(_), _) => "external",
                    (_, Some(model)) => model.kind_name(),
                    _ => "logged",
                }),
                outcome_kind: String::from(match (&fitted_outcome, nuisance) {
                    (Some((f0, _)), _) => f0.kind_name(),
                    _ => "external",
                }),
            });

            for i in plan.folds.fold_indices(fold) {
                let sample = data.sample(i);
                rho[i] = target_probs[i][sample.action] / prop_eval.prob(data, i)?;
                for j in 0..2u8 {
                    let mut g = 0.0;
                    for (a, &pa) in target_probs[i].iter().enumerate() {
                        if pa > 0.0 {
                            g += pa * outcome_at(&sample.state, a, j)?;
                        }
                    }
                    plug[usize::from(j)][i] = g;
                    resid[usize::from(j)][i] = outcome_at(&sample.state, sample.action, j)?;
                }
            }
        }

        let ms = MomentSystem::new(
            rho,
            data.samples().iter().map(|s| s.reward).collect(),
            plug,
            resid,
            config.self_normalize_dr,
        )?;
        let alpha0: f64 = alpha_inits.iter().sum::<f64>() / alpha_inits.len() as f64;

        let solved = match config.newton {
            NewtonMethod::Scalar => {
                let (a, report) =
                    newton_scalar(&ms, delta, alpha0, config.newton_tol, config.newton_max_iter)?;
                if report.bisection_fallback {
                    diagnostics.flags.push(LdropeFlag::BisectionFallback);
                }
                if report.no_root {
                    diagnostics.flags.push(LdropeFlag::BoundaryNoRoot);
                }
                a
            }
            NewtonMethod::Multidim => {
                let w0_start = math::clip(ms.w(alpha0, 0), 1e-12, 1.0);
                let start = EvalTheta {
                    alpha: alpha0,
                    w0: w0_start,
                    w1: ms.w(alpha0, 1),
                    value: -alpha0 * math::ln(w0_start) - alpha0 * delta,
                };
                match newton_multidim(&ms, delta, start, config.newton_tol, config.newton_max_iter)
                {
                    Some((th, _)) => th.alpha,
                    None => {
                        diagnostics.flags.push(LdropeFlag::MultidimFellBackToScalar);
                        let (a, report) = newton_scalar(
                            &ms,
                            delta,
                            alpha0,
                            config.newton_tol,
                            config.newton_max_iter,
                        )?;
                        if report.no_root {
                            diagnostics.flags.push(LdropeFlag::BoundaryNoRoot);
                        }
                        a
                    }
                }
            }
        };

        let w0 = ms.w(solved, 0);
        if !(w0 > 0.0) {
            return Err(Error::DrNegativeW);
        }
        alpha_hat = solved;
        theta = EvalTheta {
            alpha: solved,
            w0,
            w1: ms.w(solved, 1),
            value: -solved * math::ln(w0) - solved * delta,
        };
    }
    Ok((theta, diagnostics))
}
