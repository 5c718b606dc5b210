//! Data-generating environments and ground-truth value/regret oracles.
//!
//! Two environments are provided:
//!
//! - [`Softmax5Env`]: two-dimensional uniform states, five actions whose
//!   score vectors are the fifth roots of unity, a softmax behavior policy,
//!   and Gaussian conditional rewards with per-action standard deviations
//!   [0.1, 0.2, 0.3, 0.4, 0.5].
//! - [`DiscreteEnv`]: a small finite-support test bed where every quantity
//!   of interest is computable exactly.
//!
//! The raw Gaussian conditional means live in [−√2, √2], which violates the
//! rewards-in-[0, 1] assumption every estimator in this crate relies on.
//! Emitted rewards are therefore passed through the order-preserving affine
//! clip r = clip((raw + 2)/4, 0, 1). This preserves the cross-action
//! variance ordering (the property the learning experiments probe) while
//! delivering bounded rewards; the conditional moment oracle below accounts
//! for the two boundary point masses the clip introduces.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::dual::{maximize_kl_dual, DiscreteRewardDist, TiltedMoments};
use crate::error::{Error, Result};
use crate::math;
use crate::opt::Adam;
use crate::rng::{self, label};
use crate::types::{Dataset, LoggedSample, Policy};

/// Map a raw Gaussian reward into [0, 1]: r = clip((raw + 2)/4, 0, 1).
pub fn transform_reward(raw: f64) -> f64 {
    math::clip((raw + 2.0) / 4.0, 0.0, 1.0)
}

/// ln E[r^j·e^{−r/α}] for r = clip((raw + 2)/4, 0, 1), raw ~ N(μ, σ²).
///
/// This is the exact conditional moment of the transformed reward: the
/// interior piece is a tilted truncated normal (completing the square turns
/// e^{−r/α}·N(r; m, v²) into e^{−m/α + v²/(2α²)}·N(r; m − v²/α, v²)), plus
/// the two clip point masses at r = 0 and r = 1. When the tilt exponent
/// v²/(2α²) would overflow the closed form, the interior integral falls
/// back to Gauss–Legendre quadrature over the few tilt lengthscales that
/// carry mass.
///
/// Valid for |μ| ≤ √2 and σ ≤ 0.5 (the environment's ranges), where every
/// intermediate stays inside f64 range.
pub fn clipped_gaussian_ln_w(mu_raw: f64, sigma_raw: f64, alpha: f64, j: u8) -> f64 {
    let m = (mu_raw + 2.0) / 4.0;
    let v = sigma_raw / 4.0;
    let mut terms = Vec::with_capacity(3);
    if j == 0 {
        let p0 = math::normal_cdf(-m / v);
        if p0 > 0.0 {
            terms.push(math::ln(p0));
        }
    }
    let p1 = math::normal_sf((1.0 - m) / v);
    if p1 > 0.0 {
        terms.push(math::ln(p1) - 1.0 / alpha);
    }
    terms.push(ln_interior_moment(m, v, alpha, j));
    math::log_sum_exp(&terms)
}

/// E[r^j·e^{−r/α}] in linear scale; see [`clipped_gaussian_ln_w`].
pub fn clipped_gaussian_w(mu_raw: f64, sigma_raw: f64, alpha: f64, j: u8) -> f64 {
    math::exp(clipped_gaussian_ln_w(mu_raw, sigma_raw, alpha, j))
}

/// ln ∫₀¹ r^j·e^{−r/α}·N(r; m, v²) dr.
fn ln_interior_moment(m: f64, v: f64, alpha: f64, j: u8) -> f64 {
    let tilt = v * v / (2.0 * alpha * alpha);
    if tilt < 600.0 {
        // closed form: the tilted integrand is a scaled normal with mean
        // shifted to m − v²/α, so the integral is that normal's truncated
        // j-th moment times e^{−m/α + v²/(2α²)}
        let mt = m - v * v / alpha;
        let a = (0.0 - mt) / v;
        let b = (1.0 - mt) / v;
        let m0 = if a > 0.0 {
            math::normal_sf(a) - math::normal_sf(b)
        } else {
            math::normal_cdf(b) - math::normal_cdf(a)
        };
        let pa = math::normal_pdf(a);
        let pb = math::normal_pdf(b);
        let mj = match j {
            0 => m0,
            1 => mt * m0 + v * (pa - pb),
            _ => (mt * mt + v * v) * m0 + v * (mt * pa - (1.0 + mt) * pb),
        };
        if mj <= 0.0 {
            return f64::NEG_INFINITY;
        }
        -m / alpha + tilt + math::ln(mj)
    } else {
        // α is tiny: e^{−r/α} annihilates everything past a few multiples
        // of α, so integrate just that region (the normal factor cannot
        // underflow there for this environment's m/v range)
        let hi = (alpha * (40.0 + 8.0 * f64::from(j))).min(1.0);
        let (nodes, weights) = math::gauss_legendre(64);
        let mut acc = 0.0;
        for (&x, &w) in nodes.iter().zip(&weights) {
            let r = 0.5 * hi * (x + 1.0);
            let mut val = math::exp(-r / alpha) * math::normal_pdf((r - m) / v) / v;
            for _ in 0..j {
                val *= r;
            }
            acc += w * val;
        }
        acc *= 0.5 * hi;
        if acc <= 0.0 {
            f64::NEG_INFINITY
        } else {
            math::ln(acc)
        }
    }
}

/// Five-action softmax environment over uniform states in [−1, 1]².
///
/// Action a scores states by β_a = (cos(2πa/5), sin(2πa/5)); the behavior
/// policy is a softmax at temperature 2 over sᵀβ_a, raw rewards are
/// N(mean_scale·sᵀβ_a, σ_a²) with σ = [0.1, 0.2, 0.3, 0.4, 0.5], and
/// emitted rewards are [`transform_reward`]ed into [0, 1].
///
/// `mean_scale = 0` gives the action-symmetric variant where every action
/// has the same conditional mean and only the variances differ — the
/// setting where a robust learner should favor the lowest-variance action.
#[derive(Debug, Clone, PartialEq)]
pub struct Softmax5Env {
    mean_scale: f64,
    betas: [[f64; 2]; 5],
    sigmas: [f64; 5],
}

/// Number of actions in [`Softmax5Env`].
pub const SOFTMAX5_ACTIONS: usize = 5;

/// Behavior softmax temperature of [`Softmax5Env`].
pub const SOFTMAX5_BEHAVIOR_TEMPERATURE: f64 = 2.0;

impl Softmax5Env {
    /// The standard environment (mean_scale 1).
    pub fn standard() -> Self {
        Softmax5Env::with_mean_scale(1.0).expect("1.0 is in range")
    }

    /// The action-symmetric variant: conditional means are all zero, so
    /// actions differ only through their reward variances.
    pub fn action_symmetric() -> Self {
        Softmax5Env::with_mean_scale(0.0).expect("0.0 is in range")
    }

    /// Environment with a custom reward mean scale in [−1, 1] (the moment
    /// oracle's accuracy domain).
    pub fn with_mean_scale(mean_scale: f64) -> Result<Self> {
        if !(math::abs(mean_scale) <= 1.0) {
            return Err(Error::InvalidConfiguration {
                reason: alloc::string::String::from("mean_scale must lie in [-1, 1]"),
            });
        }
        let mut betas = [[0.0; 2]; 5];
        for (a, beta) in betas.iter_mut().enumerate() {
            let angle = 2.0 * core::f64::consts::PI * a as f64 / 5.0;
            *beta = [libm::cos(angle), libm::sin(angle)];
        }
        Ok(Softmax5Env { mean_scale, betas, sigmas: [0.1, 0.2, 0.3, 0.4, 0.5] })
    }

    /// Per-action score vectors (fifth roots of unity).
    pub fn betas(&self) -> &[[f64; 2]; 5] {
        &self.betas
    }

    /// Per-action raw reward standard deviations.
    pub fn sigmas(&self) -> &[f64; 5] {
        &self.sigmas
    }

    /// Reward mean scale (0 for the action-symmetric variant).
    pub fn mean_scale(&self) -> f64 {
        self.mean_scale
    }

    /// Raw (untransformed) conditional reward mean for (state, action).
    pub fn raw_mean(&self, state: &[f64], action: usize) -> f64 {
        self.mean_scale * (state[0] * self.betas[action][0] + state[1] * self.betas[action][1])
    }

    /// Softmax policy over sᵀβ_a at the given temperature.
    pub fn target_policy(&self, temperature: f64) -> Result<Policy> {
        if !(temperature > 0.0) {
            return Err(Error::Domain { what: "target_policy (temperature must be > 0)" });
        }
        let weights: Vec<Vec<f64>> = self
            .betas
            .iter()
            .map(|b| alloc::vec![temperature * b[0], temperature * b[1]])
            .collect();
        Policy::linear_softmax(&weights, &[0.0; 5])
    }

    /// The logging policy (temperature-2 softmax).
    pub fn behavior_policy(&self) -> Policy {
        self.target_policy(SOFTMAX5_BEHAVIOR_TEMPERATURE).expect("temperature 2 is valid")
    }

    /// A positive lower bound on the transformed reward's interior density,
    /// uniform over states, actions, and r ∈ (0, 1). Astronomically small
    /// (the tight σ = 0.1 action pins it), but strictly positive, which is
    /// what the moment lower-bound arguments need.
    pub fn density_floor(&self) -> f64 {
        let reach = 2.0 + core::f64::consts::SQRT_2 * math::abs(self.mean_scale);
        let mut floor = f64::INFINITY;
        for &sigma in &self.sigmas {
            floor = floor.min(4.0 / sigma * math::normal_pdf(reach / sigma));
        }
        floor
    }
}

/// Finite environment: states with known probabilities, per-(state, action)
/// finite reward distributions, and tabular behavior/target policies. Every
/// oracle quantity on it is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteEnv {
    state_probs: Vec<f64>,
    rewards: Vec<Vec<DiscreteRewardDist>>,
    behavior: Vec<Vec<f64>>,
    target: Vec<Vec<f64>>,
}

impl DiscreteEnv {
    /// Validate and assemble a finite environment. `rewards[s][a]` is the
    /// reward distribution of action a in state s; `behavior` and `target`
    /// are per-state probability rows over actions.
    pub fn new(
        state_probs: Vec<f64>,
        rewards: Vec<Vec<DiscreteRewardDist>>,
        behavior: Vec<Vec<f64>>,
        target: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let ns = state_probs.len();
        if ns == 0 || rewards.len() != ns || behavior.len() != ns || target.len() != ns {
            return Err(Error::InvalidConfiguration {
                reason: alloc::string::String::from(
                    "state_probs, rewards, behavior, target must share the state count",
                ),
            });
        }
        check_prob_row(&state_probs)?;
        let na = rewards[0].len();
        if na == 0 {
            return Err(Error::InvalidConfiguration {
                reason: alloc::string::String::from("at least one action required"),
            });
        }
        for s in 0..ns {
            if rewards[s].len() != na || behavior[s].len() != na || target[s].len() != na {
                return Err(Error::Shape { expected: na, got: rewards[s].len() });
            }
            check_prob_row(&behavior[s])?;
            check_prob_row(&target[s])?;
        }
        Ok(DiscreteEnv { state_probs, rewards, behavior, target })
    }

    /// The default two-state, two-action test instance: reward support
    /// {0, 0.5, 1}, non-uniform tables, strictly positive behavior overlap.
    pub fn two_state_default() -> Self {
        let d = |atoms: &[(f64, f64)]| DiscreteRewardDist::new(atoms.to_vec()).expect("valid");
        DiscreteEnv::new(
            alloc::vec![0.5, 0.5],
            alloc::vec![
                alloc::vec![
                    d(&[(0.0, 0.2), (0.5, 0.6), (1.0, 0.2)]),
                    d(&[(0.0, 0.5), (1.0, 0.5)]),
                ],
                alloc::vec![
                    d(&[(0.0, 0.1), (0.5, 0.8), (1.0, 0.1)]),
                    d(&[(0.0, 0.3), (0.5, 0.2), (1.0, 0.5)]),
                ],
            ],
            alloc::vec![alloc::vec![0.7, 0.3], alloc::vec![0.4, 0.6]],
            alloc::vec![alloc::vec![0.2, 0.8], alloc::vec![0.5, 0.5]],
        )
        .expect("default instance is valid")
    }

    /// Number of states.
    pub fn state_count(&self) -> usize {
        self.state_probs.len()
    }

    /// State marginal probabilities.
    pub fn state_probs(&self) -> &[f64] {
        &self.state_probs
    }

    /// Number of actions.
    pub fn action_count(&self) -> usize {
        self.behavior[0].len()
    }

    /// The logging policy as a tabular policy.
    pub fn behavior_policy(&self) -> Policy {
        Policy::Tabular { rows: self.behavior.clone() }
    }

    /// Exact reward distribution of action `action` in state `state`
    /// (conditional-moment source for oracle-nuisance evaluation).
    pub fn reward_distribution(&self, state: usize, action: usize) -> &DiscreteRewardDist {
        &self.rewards[state][action]
    }

    /// The stored target table, power-tempered: π(a|s) ∝ target[s][a]^t.
    /// Temperature 1 returns the table as-is.
    pub fn target_policy(&self, temperature: f64) -> Result<Policy> {
        if !(temperature > 0.0) {
            return Err(Error::Domain { what: "target_policy (temperature must be > 0)" });
        }
        let rows = self
            .target
            .iter()
            .map(|row| {
                let powered: Vec<f64> =
                    row.iter().map(|&p| math::powf(p, temperature)).collect();
                let total: f64 = powered.iter().sum();
                powered.into_iter().map(|p| p / total).collect()
            })
            .collect();
        Ok(Policy::Tabular { rows })
    }
}

fn check_prob_row(row: &[f64]) -> Result<()> {
    let mut total = 0.0;
    for &p in row {
        if !(p >= 0.0) || !p.is_finite() {
            return Err(Error::Domain { what: "probability table (entries must be ≥ 0)" });
        }
        total += p;
    }
    if math::abs(total - 1.0) > 1e-12 {
        return Err(Error::Domain { what: "probability table (rows must sum to 1)" });
    }
    Ok(())
}

/// Either environment, behind one sampling/oracle interface.
#[derive(Debug, Clone, PartialEq)]
pub enum Environment {
    /// The five-action softmax environment.
    Softmax5(Softmax5Env),
    /// The exact finite test bed.
    Discrete(DiscreteEnv),
}

impl Environment {
    /// Dimension of emitted states.
    pub fn state_dim(&self) -> usize {
        match self {
            Environment::Softmax5(_) => 2,
            Environment::Discrete(_) => 1,
        }
    }

    /// Number of actions.
    pub fn action_count(&self) -> usize {
        match self {
            Environment::Softmax5(_) => SOFTMAX5_ACTIONS,
            Environment::Discrete(env) => env.action_count(),
        }
    }

    /// The logging policy.
    pub fn behavior_policy(&self) -> Policy {
        match self {
            Environment::Softmax5(env) => env.behavior_policy(),
            Environment::Discrete(env) => env.behavior_policy(),
        }
    }

    /// The evaluation policy at a temperature (softmax temperature for the
    /// continuous environment, power-tempering for the discrete one).
    pub fn target_policy(&self, temperature: f64) -> Result<Policy> {
        match self {
            Environment::Softmax5(env) => env.target_policy(temperature),
            Environment::Discrete(env) => env.target_policy(temperature),
        }
    }

    /// Draw `n` i.i.d. logged interactions under the behavior policy.
    ///
    /// Deterministic in `seed`; states, action draws, and reward noise each
    /// consume an independent stream, so the same seed reproduces the same
    /// dataset bit for bit. With `log_propensity`, each row records the true
    /// behavior probability of its action.
    pub fn sample_dataset(&self, n: usize, seed: u64, log_propensity: bool) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::InvalidConfiguration {
                reason: alloc::string::String::from("sample_dataset needs n ≥ 1"),
            });
        }
        let mut state_rng = rng::stream(seed, label::ENV_STATE);
        let mut action_rng = rng::stream(seed, label::ENV_ACTION);
        let mut reward_rng = rng::stream(seed, label::ENV_REWARD);
        let behavior = self.behavior_policy();
        let mut samples = Vec::with_capacity(n);
        match self {
            Environment::Softmax5(env) => {
                for _ in 0..n {
                    let state = alloc::vec![
                        state_rng.gen::<f64>() * 2.0 - 1.0,
                        state_rng.gen::<f64>() * 2.0 - 1.0,
                    ];
                    let probs = behavior.probs(&state)?;
                    let action = draw_categorical(&probs, action_rng.gen::<f64>());
                    let z: f64 = reward_rng.sample(StandardNormal);
                    let raw = env.raw_mean(&state, action) + env.sigmas[action] * z;
                    samples.push(LoggedSample {
                        state,
                        action,
                        reward: transform_reward(raw),
                        propensity: log_propensity.then_some(probs[action]),
                    });
                }
            }
            Environment::Discrete(env) => {
                for _ in 0..n {
                    let s = draw_categorical(&env.state_probs, state_rng.gen::<f64>());
                    let probs = &env.behavior[s];
                    let action = draw_categorical(probs, action_rng.gen::<f64>());
                    let atoms = env.rewards[s][action].atoms();
                    let u: f64 = reward_rng.gen();
                    let mut reward = atoms[atoms.len() - 1].0;
                    let mut acc = 0.0;
                    for &(r, p) in atoms {
                        acc += p;
                        if u < acc {
                            reward = r;
                            break;
                        }
                    }
                    samples.push(LoggedSample {
                        state: alloc::vec![s as f64],
                        action,
                        reward,
                        propensity: log_propensity.then_some(probs[action]),
                    });
                }
            }
        }
        Dataset::new(samples, self.action_count(), self.state_dim())
    }

    /// Ground-truth worst-case value of a policy at radius δ, with its
    /// standard error.
    ///
    /// For the discrete environment this is exact (zero SE). For the
    /// softmax environment, W(π, α) is averaged over `mc_samples` states
    /// (common random numbers across every α and every policy given the
    /// same seed) with the conditional moments in closed form; the SE comes
    /// from re-solving the dual on 10 state batches.
    pub fn oracle_value(
        &self,
        policy: &Policy,
        delta: f64,
        mc_samples: usize,
        seed: u64,
    ) -> Result<(f64, f64)> {
        match self {
            Environment::Discrete(env) => {
                let table = PolicyMomentTable::exact(env, policy)?;
                Ok((maximize_kl_dual(&table, delta)?.value, 0.0))
            }
            Environment::Softmax5(env) => {
                if mc_samples < 10_000 {
                    return Err(Error::InvalidConfiguration {
                        reason: alloc::string::String::from(
                            "oracle_value needs mc_samples ≥ 10000",
                        ),
                    });
                }
                let states = draw_oracle_states(mc_samples, seed);
                let table = PolicyMomentTable::monte_carlo(env, policy, &states)?;
                let value = maximize_kl_dual(&table, delta)?.value;
                // 10-way batch means: each batch is an independent estimate
                // of the same functional, so sd(batches)/√10 estimates the
                // SE of the full-sample value
                let batches = 10;
                let mut batch_values = Vec::with_capacity(batches);
                let chunk = mc_samples / batches;
                for b in 0..batches {
                    let slice = &states[b * chunk..(b + 1) * chunk];
                    let sub = PolicyMomentTable::monte_carlo(env, policy, slice)?;
                    batch_values.push(maximize_kl_dual(&sub, delta)?.value);
                }
                let mean = math::mean(&batch_values);
                let mut var = 0.0;
                for &v in &batch_values {
                    var += (v - mean) * (v - mean);
                }
                var /= (batches - 1) as f64;
                Ok((value, math::sqrt(var / batches as f64)))
            }
        }
    }

    /// Ground-truth robust regret of `policy` against a reference (usually
    /// the output of [`Environment::oracle_best_policy`]). Both values use
    /// the same state draw, so the difference is paired.
    pub fn oracle_regret(
        &self,
        policy: &Policy,
        reference: &Policy,
        delta: f64,
        mc_samples: usize,
        seed: u64,
    ) -> Result<f64> {
        let (v_ref, _) = self.oracle_value(reference, delta, mc_samples, seed)?;
        let (v_pol, _) = self.oracle_value(policy, delta, mc_samples, seed)?;
        Ok(v_ref - v_pol)
    }

    /// Best-in-class policy by direct oracle optimization: multi-start
    /// alternation of dual α-maximization and Adam descent on W(π, α̂),
    /// using the environment's exact conditional moments (no estimation).
    ///
    /// `template` supplies the policy class and dimensions; its parameter
    /// values are ignored. Expensive — callers cache the result per
    /// (environment, δ, class).
    pub fn oracle_best_policy(
        &self,
        delta: f64,
        template: &Policy,
        restarts: usize,
        mc_samples: usize,
        seed: u64,
    ) -> Result<Policy> {
        if !template.is_parametric() {
            return Err(Error::InvalidConfiguration {
                reason: alloc::string::String::from(
                    "oracle_best_policy needs a parametric policy template",
                ),
            });
        }
        if restarts == 0 {
            return Err(Error::InvalidConfiguration {
                reason: alloc::string::String::from("oracle_best_policy needs restarts ≥ 1"),
            });
        }
        let dim = template.params()?.len();
        let mut best: Option<(f64, Policy)> = None;
        for r in 0..restarts {
            let mut init_rng = rng::stream(rng::derive(seed, label::RESTART), r as u64);
            let mut policy = template.clone();
            let init: Vec<f64> = (0..dim)
                .map(|_| {
                    let z: f64 = init_rng.sample(StandardNormal);
                    0.5 * z
                })
                .collect();
            policy.set_params(&init)?;

            let mut adam = Adam::new(dim, 0.01);
            for _ in 0..40 {
                // α-step: re-maximize the dual at the current policy
                let table = self.policy_table(&policy, mc_samples, seed)?;
                let alpha =
                    maximize_kl_dual(&table, delta)?.alpha.max(crate::types::EPS_ALPHA);
                // θ-steps: descend W(·, α̂); by the envelope argument this
                // ascends the dual value itself
                let coeffs = table.moment_coefficients(alpha);
                for _ in 0..10 {
                    let grad = table.w_gradient(&policy, &coeffs)?;
                    let mut theta = policy.params()?.to_vec();
                    adam.step(&mut theta, &grad);
                    policy.set_params(&theta)?;
                }
            }
            let table = self.policy_table(&policy, mc_samples, seed)?;
            let value = maximize_kl_dual(&table, delta)?.value;
            if best.as_ref().map_or(true, |(bv, _)| value > *bv) {
                best = Some((value, policy));
            }
        }
        Ok(best.expect("restarts ≥ 1").1)
    }

    fn policy_table(
        &self,
        policy: &Policy,
        mc_samples: usize,
        seed: u64,
    ) -> Result<PolicyMomentTable> {
        match self {
            Environment::Discrete(env) => PolicyMomentTable::exact(env, policy),
            Environment::Softmax5(env) => {
                let states = draw_oracle_states(mc_samples.max(1), seed);
                PolicyMomentTable::monte_carlo(env, policy, &states)
            }
        }
    }
}

fn draw_categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn draw_oracle_states(n: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = rng::stream(seed, label::ORACLE);
    (0..n)
        .map(|_| [rng.gen::<f64>() * 2.0 - 1.0, rng.gen::<f64>() * 2.0 - 1.0])
        .collect()
}

/// Policy-weighted conditional moments over a set of evaluation points:
/// W_j(α) = Σᵢ weightᵢ Σ_a π(a|sᵢ)·E[R^j·e^{−R/α} | sᵢ, a].
///
/// For the discrete environment the points are the states themselves with
/// their exact probabilities; for the softmax environment they are Monte
/// Carlo state draws with uniform weight and closed-form conditional
/// moments. Implements [`TiltedMoments`], so the generic dual maximizer
/// runs on it directly.
struct PolicyMomentTable {
    /// ln(weightᵢ·π(a|sᵢ)) per point-action pair, −∞ entries skipped.
    ln_pi: Vec<f64>,
    /// Conditional moment source per point-action pair.
    kind: TableKind,
    /// Evaluation points (needed again for gradient backpropagation).
    states: Vec<Vec<f64>>,
    /// Point weights.
    weights: Vec<f64>,
    actions: usize,
    bounds: (f64, f64),
}

enum TableKind {
    /// (μ_raw, σ_raw) per point-action pair.
    Gaussian(Vec<(f64, f64)>),
    /// Exact finite reward distribution per point-action pair.
    Finite(Vec<DiscreteRewardDist>),
}

impl PolicyMomentTable {
    fn exact(env: &DiscreteEnv, policy: &Policy) -> Result<Self> {
        let na = env.action_count();
        let mut ln_pi = Vec::with_capacity(env.state_count() * na);
        let mut dists = Vec::with_capacity(env.state_count() * na);
        let mut states = Vec::with_capacity(env.state_count());
        let mut bounds = (f64::INFINITY, f64::NEG_INFINITY);
        for s in 0..env.state_count() {
            let state = alloc::vec![s as f64];
            let probs = policy.probs(&state)?;
            if probs.len() != na {
                return Err(Error::Shape { expected: na, got: probs.len() });
            }
            for a in 0..na {
                ln_pi.push(math::ln(env.state_probs[s] * probs[a]));
                let dist = &env.rewards[s][a];
                if env.state_probs[s] * probs[a] > 0.0 {
                    let (lo, hi) = dist.reward_bounds();
                    bounds.0 = bounds.0.min(lo);
                    bounds.1 = bounds.1.max(hi);
                }
                dists.push(dist.clone());
            }
            states.push(state);
        }
        Ok(PolicyMomentTable {
            ln_pi,
            kind: TableKind::Finite(dists),
            states,
            weights: env.state_probs.clone(),
            actions: na,
            bounds,
        })
    }

    fn monte_carlo(env: &Softmax5Env, policy: &Policy, states: &[[f64; 2]]) -> Result<Self> {
        let n = states.len();
        let w = 1.0 / n as f64;
        let mut ln_pi = Vec::with_capacity(n * SOFTMAX5_ACTIONS);
        let mut gauss = Vec::with_capacity(n * SOFTMAX5_ACTIONS);
        let mut state_vecs = Vec::with_capacity(n);
        for s in states {
            let state = alloc::vec![s[0], s[1]];
            let probs = policy.probs(&state)?;
            if probs.len() != SOFTMAX5_ACTIONS {
                return Err(Error::Shape { expected: SOFTMAX5_ACTIONS, got: probs.len() });
            }
            for (a, &pa) in probs.iter().enumerate() {
                ln_pi.push(math::ln(w * pa));
                gauss.push((env.raw_mean(&state, a), env.sigmas[a]));
            }
            state_vecs.push(state);
        }
        Ok(PolicyMomentTable {
            ln_pi,
            kind: TableKind::Gaussian(gauss),
            states: state_vecs,
            weights: alloc::vec![w; n],
            actions: SOFTMAX5_ACTIONS,
            // the clip point masses put (vanishing but positive) probability
            // on both endpoints
            bounds: (0.0, 1.0),
        })
    }

    fn ln_conditional(&self, idx: usize, alpha: f64, j: u8) -> f64 {
        match &self.kind {
            TableKind::Gaussian(rows) => {
                let (mu, sigma) = rows[idx];
                clipped_gaussian_ln_w(mu, sigma, alpha, j)
            }
            TableKind::Finite(dists) => dists[idx].ln_w(alpha, j),
        }
    }

    /// e^{−R/α}-moment of every point-action pair at a fixed α — the
    /// coefficients of the policy probabilities inside W(π, α).
    fn moment_coefficients(&self, alpha: f64) -> Vec<f64> {
        (0..self.ln_pi.len()).map(|i| math::exp(self.ln_conditional(i, alpha, 0))).collect()
    }

    /// ∇_θ W(π_θ, α) given the per-pair coefficients at that α.
    fn w_gradient(&self, policy: &Policy, coeffs: &[f64]) -> Result<Vec<f64>> {
        let dim = policy.params()?.len();
        let mut grad = alloc::vec![0.0; dim];
        let mut logit_grad = alloc::vec![0.0; self.actions];
        for (i, state) in self.states.iter().enumerate() {
            let probs = policy.probs(state)?;
            let row = &coeffs[i * self.actions..(i + 1) * self.actions];
            // d/d logit_b of Σ_a π_a·c_a = π_b (c_b − Σ_a c_a π_a)
            let mut avg = 0.0;
            for (a, &pa) in probs.iter().enumerate() {
                avg += pa * row[a];
            }
            for (b, g) in logit_grad.iter_mut().enumerate() {
                *g = probs[b] * (row[b] - avg);
            }
            policy.accumulate_logit_grad(state, &logit_grad, self.weights[i], &mut grad)?;
        }
        Ok(grad)
    }
}

impl TiltedMoments for PolicyMomentTable {
    fn ln_w(&self, alpha: f64, j: u8) -> f64 {
        let mut terms = Vec::with_capacity(self.ln_pi.len());
        for (i, &lp) in self.ln_pi.iter().enumerate() {
            if lp == f64::NEG_INFINITY {
                continue;
            }
            let lc = self.ln_conditional(i, alpha, j);
            if lc == f64::NEG_INFINITY {
                continue;
            }
            terms.push(lp + lc);
        }
        math::log_sum_exp(&terms)
    }

    fn reward_bounds(&self) -> (f64, f64) {
        self.bounds
    }
}
