//! Worst-case value objectives in dual form.
//!
//! For a reward R ∈ [0, 1] and an uncertainty set of all reward
//! distributions within KL radius δ of the nominal one, the worst-case
//! mean admits a one-dimensional concave dual:
//!
//! ```text
//! V_δ = max_{α > 0}  φ(α),     φ(α) = −α·ln W0(α) − α·δ,
//! W_j(α) = E[ R^j · e^{−R/α} ]
//! ```
//!
//! with a unique maximizer α⋆ ∈ (0, 1/δ]. This module houses the moment
//! evaluations, the dual objective and its α-derivative, the bracketed
//! maximizer, primal (tilted-distribution) recovery for exact
//! finite-support checks, and the two-variable dual for general
//! f-divergence balls with KL and Cressie-Read supplied built-in.
//!
//! Every routine that needs ln W evaluates it in log space via
//! log-sum-exp. This is not a nicety: when the minimum reward is positive,
//! W0 underflows linear f64 already at moderate α (min reward 0.2 at
//! α = 1e-8 puts W0 near e^{−2·10⁷}), and a naive −α·ln(0) turns the dual
//! objective into a spurious +∞ at the boundary.

use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::types::{DivergenceFamily, EPS_ALPHA};

/// A finite-support reward distribution: atoms of (reward, probability),
/// sorted by reward, probabilities positive and summing to 1 within 1e-12.
///
/// This is the exact test bed for the dual machinery: on finite support
/// every quantity (moments, tilted worst case, KL between tilts) has a
/// closed form, so estimator code can be checked against it to floating
/// point accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteRewardDist {
    atoms: Vec<(f64, f64)>,
}

impl DiscreteRewardDist {
    /// Validate and wrap (reward, probability) atoms; atoms are sorted by
    /// reward on construction.
    pub fn new(mut atoms: Vec<(f64, f64)>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidData {
                index: None,
                reason: "reward distribution needs at least one atom".to_string(),
            });
        }
        let mut total = 0.0;
        for &(r, p) in &atoms {
            if !r.is_finite() || !(0.0..=1.0).contains(&r) {
                return Err(Error::Domain { what: "DiscreteRewardDist (reward outside [0, 1])" });
            }
            if !(p > 0.0) || !p.is_finite() {
                return Err(Error::Domain { what: "DiscreteRewardDist (probability must be > 0)" });
            }
            total += p;
        }
        if math::abs(total - 1.0) > 1e-12 {
            return Err(Error::Domain { what: "DiscreteRewardDist (probabilities must sum to 1)" });
        }
        atoms.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("rewards validated finite"));
        Ok(DiscreteRewardDist { atoms })
    }

    /// Distribution concentrated on a single reward.
    pub fn point_mass(reward: f64) -> Result<Self> {
        DiscreteRewardDist::new(alloc::vec![(reward, 1.0)])
    }

    /// The (reward, probability) atoms in increasing reward order.
    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    /// Nominal mean Σ pᵢ·rᵢ.
    pub fn mean(&self) -> f64 {
        let mut acc = 0.0;
        for &(r, p) in &self.atoms {
            acc += p * r;
        }
        acc
    }
}

/// A point (α, λ) of the two-variable f-divergence dual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FDualPoint {
    /// Scale dual variable, ≥ 0 (0 is the boundary, excluded by evaluators).
    pub alpha: f64,
    /// Shift dual variable.
    pub lambda: f64,
}

/// Source of tilted reward moments W_j(α) = E[R^j·e^{−R/α}] in log space.
///
/// Both exact finite-support distributions and weighted logged samples
/// implement this, so one maximizer serves oracles and estimators alike.
pub trait TiltedMoments {
    /// ln W_j(α). May be −∞ when the moment is exactly zero (j ≥ 1 with
    /// all reward mass at zero).
    fn ln_w(&self, alpha: f64, j: u8) -> f64;

    /// (min, max) of the effective reward support. Equal bounds signal a
    /// constant reward, for which the dual degenerates.
    fn reward_bounds(&self) -> (f64, f64);
}

impl TiltedMoments for DiscreteRewardDist {
    fn ln_w(&self, alpha: f64, j: u8) -> f64 {
        let mut terms = Vec::with_capacity(self.atoms.len());
        for &(r, p) in &self.atoms {
            let mut t = math::ln(p) - r / alpha;
            if j > 0 {
                if r == 0.0 {
                    continue; // r^j = 0 contributes nothing and ln r is undefined
                }
                t += f64::from(j) * math::ln(r);
            }
            terms.push(t);
        }
        math::log_sum_exp(&terms)
    }

    fn reward_bounds(&self) -> (f64, f64) {
        (self.atoms[0].0, self.atoms[self.atoms.len() - 1].0)
    }
}

/// Tilted moment W_j(α) = E[R^j·e^{−R/α}] in linear scale.
///
/// In exact arithmetic the value lies in (0, 1] with W2 ≤ W1 ≤ W0; at
/// extreme α it may underflow to 0, which is the correct limit — callers
/// that need the boundary behavior use [`TiltedMoments::ln_w`] instead.
pub fn w_moment(dist: &DiscreteRewardDist, alpha: f64, j: u8) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::Domain { what: "w_moment (alpha must be > 0)" });
    }
    if j > 2 {
        return Err(Error::Domain { what: "w_moment (moment order must be 0, 1, or 2)" });
    }
    Ok(math::exp(dist.ln_w(alpha, j)))
}

/// KL dual objective φ(α) = −α·ln(w0) − α·δ for a given moment value.
pub fn phi_kl(alpha: f64, w0: f64, delta: f64) -> Result<f64> {
    if !(alpha > 0.0) || !(w0 > 0.0) || !(delta > 0.0) {
        return Err(Error::Domain { what: "phi_kl (alpha, w0, delta must be > 0)" });
    }
    Ok(-alpha * math::ln(w0) - alpha * delta)
}

/// The λ that reduces the two-variable f-dual to the one-variable KL dual:
/// λ⋆(α) = α·ln(w0) − α.
pub fn kl_lambda_star(alpha: f64, w0: f64) -> Result<f64> {
    if !(alpha > 0.0) || !(w0 > 0.0) {
        return Err(Error::Domain { what: "kl_lambda_star (alpha, w0 must be > 0)" });
    }
    Ok(alpha * math::ln(w0) - alpha)
}

fn phi_at(source: &impl TiltedMoments, alpha: f64, delta: f64) -> f64 {
    -alpha * source.ln_w(alpha, 0) - alpha * delta
}

/// ∂φ/∂α = −ln W0 − W1/(α·W0) − δ, evaluated in log space.
pub fn phi_kl_derivative(source: &impl TiltedMoments, alpha: f64, delta: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::Domain { what: "phi_kl_derivative (alpha must be > 0)" });
    }
    if !(delta > 0.0) {
        return Err(Error::Domain { what: "phi_kl_derivative (delta must be > 0)" });
    }
    let ln_w0 = source.ln_w(alpha, 0);
    let ratio = math::exp(source.ln_w(alpha, 1) - ln_w0); // W1/W0 = tilted mean
    Ok(-ln_w0 - ratio / alpha - delta)
}

/// ∂²φ/∂α² = (W1²/W0 − W2)/(α³·W0) — minus the tilted reward variance over
/// α³, hence ≤ 0 (strictly, unless the reward is constant).
fn phi_kl_second_derivative(source: &impl TiltedMoments, alpha: f64) -> f64 {
    let ln_w0 = source.ln_w(alpha, 0);
    let m1 = math::exp(source.ln_w(alpha, 1) - ln_w0);
    let m2 = math::exp(source.ln_w(alpha, 2) - ln_w0);
    (m1 * m1 - m2) / (alpha * alpha * alpha)
}

/// Result of maximizing the KL dual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlDualSolution {
    /// Maximizing α, projected into [1e-8, 1/δ].
    pub alpha: f64,
    /// φ(α) at the maximizer: the worst-case value.
    pub value: f64,
    /// Set when the reward is constant, making φ(α) = r − αδ for every α;
    /// the reported α sits at the lower cutoff and the value at the reward.
    pub degenerate_constant: bool,
}

/// Maximize the KL dual φ(α) = −α·ln W0(α) − αδ over α ∈ [1e-8, 1/δ].
///
/// Strategy: 200 golden-section reductions over the full bracket (φ is
/// concave, hence unimodal), then up to 20 Newton steps on φ′ with
/// projection back into the bracket; the golden-section result stands
/// whenever Newton fails to improve on it. φ′ can be extremely flat near
/// the boundaries, which is why golden-section runs first and Newton is
/// only a polish.
pub fn maximize_kl_dual(source: &impl TiltedMoments, delta: f64) -> Result<KlDualSolution> {
    maximize_kl_dual_over(source, delta, 1.0 / delta)
}

/// As [`maximize_kl_dual`], but with an explicit upper search bound.
///
/// The 1/δ bound is only valid when the moments carry total mass 1 (true
/// distributions, self-normalized weights). Raw importance weights with
/// mean S_w < 1 push the maximizer out to 1/(δ + ln S_w), so the weighted
/// estimators supply their own bracket.
pub(crate) fn maximize_kl_dual_over(
    source: &impl TiltedMoments,
    delta: f64,
    alpha_hi: f64,
) -> Result<KlDualSolution> {
    if !(delta > 0.0) {
        return Err(Error::Domain { what: "maximize_kl_dual (delta must be > 0)" });
    }
    if !(alpha_hi > EPS_ALPHA) {
        return Err(Error::Domain { what: "maximize_kl_dual (alpha_hi must exceed the cutoff)" });
    }
    let (r_min, r_max) = source.reward_bounds();
    let lo = EPS_ALPHA;
    let hi = alpha_hi;
    if r_max - r_min <= 0.0 {
        return Ok(KlDualSolution {
            alpha: lo,
            value: phi_at(source, lo, delta),
            degenerate_constant: true,
        });
    }

    let (mut alpha, mut value) = math::golden_max(|a| phi_at(source, a, delta), lo, hi, 200);

    let mut a = alpha;
    for _ in 0..20 {
        let d1 = phi_kl_derivative(source, a, delta)?;
        if math::abs(d1) < 1e-12 {
            break;
        }
        let d2 = phi_kl_second_derivative(source, a);
        if !d1.is_finite() || !(d2 < 0.0) {
            break;
        }
        a = math::clip(a - d1 / d2, lo, hi);
        let v = phi_at(source, a, delta);
        if v >= value {
            alpha = a;
            value = v;
        }
    }

    Ok(KlDualSolution { alpha, value, degenerate_constant: false })
}

/// Exponential tilt of a finite-support distribution: qᵢ ∝ pᵢ·e^{−rᵢ/α}.
///
/// At the dual maximizer this is the worst-case distribution itself: for an
/// interior α⋆, KL(q ∥ p) = δ and E_q[R] equals the dual value. Atoms whose
/// tilted probability underflows to zero (far-from-minimal rewards at tiny
/// α) are dropped, since the constructed distribution carries no mass there.
pub fn tilted_worst_case(dist: &DiscreteRewardDist, alpha_star: f64) -> Result<DiscreteRewardDist> {
    if !(alpha_star > 0.0) {
        return Err(Error::Domain { what: "tilted_worst_case (alpha must be > 0)" });
    }
    let ln_norm = dist.ln_w(alpha_star, 0);
    let mut atoms = Vec::with_capacity(dist.atoms.len());
    let mut total = 0.0;
    for &(r, p) in &dist.atoms {
        let q = math::exp(math::ln(p) - r / alpha_star - ln_norm);
        if q > 0.0 {
            atoms.push((r, q));
            total += q;
        }
    }
    // renormalize away the (tiny) log-sum-exp rounding so the constructor's
    // sum-to-1 invariant holds exactly
    for atom in &mut atoms {
        atom.1 /= total;
    }
    DiscreteRewardDist::new(atoms)
}

/// An f-divergence family supplied as callables: the generator f, its
/// convex conjugate f*, and the conjugate's derivative.
///
/// The generator must be convex with f(1) = 0; the dual machinery only
/// evaluates the conjugate side, but `f` is kept alongside it so divergence
/// values themselves can be computed in tests and oracles.
pub trait FDivergence {
    /// Generator f(t) for t ≥ 0.
    fn f(&self, t: f64) -> f64;
    /// Convex conjugate f*(z) = sup_{t ≥ 0} (z·t − f(t)).
    fn conjugate(&self, z: f64) -> f64;
    /// Derivative of the conjugate (the maximizing t).
    fn conjugate_prime(&self, z: f64) -> f64;
}

/// KL divergence: f(t) = t·ln t, f*(z) = e^{z−1}.
#[derive(Debug, Clone, Copy, Default)]
pub struct KlDivergence;

impl FDivergence for KlDivergence {
    fn f(&self, t: f64) -> f64 {
        if t == 0.0 {
            0.0
        } else {
            t * math::ln(t)
        }
    }

    fn conjugate(&self, z: f64) -> f64 {
        math::exp(z - 1.0)
    }

    fn conjugate_prime(&self, z: f64) -> f64 {
        math::exp(z - 1.0)
    }
}

/// Cressie-Read family of order k > 1:
///
/// ```text
/// f_k(t)  = (t^k − k·t + k − 1) / (k(k−1))
/// f_k*(z) = ( ((k−1)·z + 1)₊^{k/(k−1)} − 1 ) / k
/// ```
///
/// k = 2 gives a χ²-type ball.
#[derive(Debug, Clone, Copy)]
pub struct CressieReadDivergence {
    k: f64,
}

impl CressieReadDivergence {
    /// Family of order `k > 1`.
    pub fn new(k: f64) -> Result<Self> {
        if !(k > 1.0) || !k.is_finite() {
            return Err(Error::Domain { what: "CressieReadDivergence (k must be > 1)" });
        }
        Ok(CressieReadDivergence { k })
    }

    /// Family order.
    pub fn k(&self) -> f64 {
        self.k
    }

    /// Conjugate exponent k* = k/(k−1).
    pub fn conjugate_order(&self) -> f64 {
        self.k / (self.k - 1.0)
    }
}

impl FDivergence for CressieReadDivergence {
    fn f(&self, t: f64) -> f64 {
        let k = self.k;
        (math::powf(t, k) - k * t + k - 1.0) / (k * (k - 1.0))
    }

    fn conjugate(&self, z: f64) -> f64 {
        let k = self.k;
        let base = (k - 1.0) * z + 1.0;
        if base <= 0.0 {
            -1.0 / k
        } else {
            (math::powf(base, self.conjugate_order()) - 1.0) / k
        }
    }

    fn conjugate_prime(&self, z: f64) -> f64 {
        let base = (self.k - 1.0) * z + 1.0;
        if base <= 0.0 {
            0.0
        } else {
            math::powf(base, 1.0 / (self.k - 1.0))
        }
    }
}

impl FDivergence for DivergenceFamily {
    fn f(&self, t: f64) -> f64 {
        match self {
            DivergenceFamily::Kl => KlDivergence.f(t),
            DivergenceFamily::CressieRead { k } => CressieReadDivergence { k: *k }.f(t),
        }
    }

    fn conjugate(&self, z: f64) -> f64 {
        match self {
            DivergenceFamily::Kl => KlDivergence.conjugate(z),
            DivergenceFamily::CressieRead { k } => CressieReadDivergence { k: *k }.conjugate(z),
        }
    }

    fn conjugate_prime(&self, z: f64) -> f64 {
        match self {
            DivergenceFamily::Kl => KlDivergence.conjugate_prime(z),
            DivergenceFamily::CressieRead { k } => {
                CressieReadDivergence { k: *k }.conjugate_prime(z)
            }
        }
    }
}

/// Two-variable f-divergence dual objective
///
/// ```text
/// φ^f(α, λ) = −α·E[ f*( (−R − λ)/α ) ] − α·δ − λ,
/// ```
///
/// whose supremum over α > 0, λ ∈ ℝ is the worst-case mean under an
/// f-divergence ball of radius δ. With the KL family and λ fixed at
/// [`kl_lambda_star`], this collapses to [`phi_kl`] exactly.
pub fn phi_f(
    dist: &DiscreteRewardDist,
    point: &FDualPoint,
    delta: f64,
    family: &impl FDivergence,
) -> Result<f64> {
    if !(point.alpha > 0.0) {
        return Err(Error::Domain { what: "phi_f (alpha must be > 0; the boundary is a limit)" });
    }
    if !(delta > 0.0) {
        return Err(Error::Domain { what: "phi_f (delta must be > 0)" });
    }
    let mut expectation = 0.0;
    for &(r, p) in dist.atoms() {
        let z = (-r - point.lambda) / point.alpha;
        let v = family.conjugate(z);
        if !v.is_finite() {
            return Err(Error::Domain { what: "phi_f (conjugate overflowed at dual point)" });
        }
        expectation += p * v;
    }
    Ok(-point.alpha * expectation - point.alpha * delta - point.lambda)
}

/// Cressie-Read dual profile in λ alone (α maximized out in closed form):
///
/// ```text
/// φ^k(λ) = −c_k(δ) · E[ (−R − λ)₊^{k*} ]^{1/k*} − λ,
/// c_k(δ) = (1 + k(k−1)δ)^{1/k},   k* = k/(k−1).
/// ```
///
/// The constant c_k(δ) is pinned by consistency with the two-variable dual:
/// sup over (α, λ) of [`phi_f`] with the Cressie-Read conjugate matches the
/// supremum of this profile (the tests check both routes agree).
pub fn phi_cressie_read(
    dist: &DiscreteRewardDist,
    lambda: f64,
    k: f64,
    delta: f64,
) -> Result<f64> {
    let family = CressieReadDivergence::new(k)?;
    if !(delta > 0.0) {
        return Err(Error::Domain { what: "phi_cressie_read (delta must be > 0)" });
    }
    let k_star = family.conjugate_order();
    let c_k = math::powf(1.0 + k * (k - 1.0) * delta, 1.0 / k);
    let mut expectation = 0.0;
    for &(r, p) in dist.atoms() {
        let plus = (-r - lambda).max(0.0);
        expectation += p * math::powf(plus, k_star);
    }
    Ok(-c_k * math::powf(expectation, 1.0 / k_star) - lambda)
}

/// Maximize the Cressie-Read profile over λ.
///
/// φ^k is concave in λ, but its maximizer runs off to −∞ as δ → 0 (the
/// profile flattens toward the plain mean), so the search bracket's lower
/// edge doubles until the argmax is interior before golden-section refines.
pub fn maximize_cressie_read(
    dist: &DiscreteRewardDist,
    k: f64,
    delta: f64,
) -> Result<(f64, f64)> {
    let phi = |lambda: f64| {
        phi_cressie_read(dist, lambda, k, delta).expect("k, delta validated before search")
    };
    // validate once up front so the closure can't fail mid-search
    phi_cressie_read(dist, 0.0, k, delta)?;

    let hi = 1.0;
    let mut lo = -2.0;
    let (blo, bhi) = loop {
        let (_, _, blo, bhi) = math::scan_max(phi, lo, hi, 129);
        if blo > lo || lo <= -1e12 {
            break (blo, bhi);
        }
        lo *= 2.0;
    };
    Ok(math::golden_max(phi, blo, bhi, 200))
}
