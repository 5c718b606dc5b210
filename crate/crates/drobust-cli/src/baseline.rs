//! Baseline learner: maximize the self-normalized importance-weighted
//! robust value over the same softmax policy classes the doubly robust
//! learner uses.
//!
//! The objective per policy is the weighted dual value at its maximizing
//! α, so learning alternates the same two moves: re-solve the scalar dual
//! at the current policy, then take a few first-order steps that decrease
//! the self-normalized moment Ŵ(π, α̂) = Σᵢ wᵢ·e^{−rᵢ/α̂} / Σᵢ wᵢ at the
//! frozen α̂. Self-normalization keeps the α̂ → ∞ blow-up off the table,
//! which is exactly why this is the reference baseline.

use drobust_core::cdrople::PolicyKind;
use drobust_core::opt::Adam;
use drobust_core::rng::{self, label};
use drobust_core::types::{Dataset, Policy, EPS_ALPHA};
use drobust_core::weighted::{
    snips_normalize, weighted_dro_value, DegeneracyStatus, WeightedDroResult, WeightedSample,
};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::CliError;

/// Settings for the baseline learner (mirrors the doubly robust learner's
/// knobs so paired comparisons differ only in the objective).
#[derive(Debug, Clone, PartialEq)]
pub struct SnipsMaxConfig {
    pub delta: f64,
    pub policy_kind: PolicyKind,
    pub restarts: usize,
    pub learning_rate: f64,
    pub inner_steps: usize,
    pub max_outer_iters: usize,
    pub convergence_tol: f64,
    pub seed: u64,
}

impl SnipsMaxConfig {
    pub fn new(delta: f64, seed: u64) -> SnipsMaxConfig {
        SnipsMaxConfig {
            delta,
            policy_kind: PolicyKind::LinearSoftmax,
            restarts: 10,
            learning_rate: 0.01,
            inner_steps: 10,
            max_outer_iters: 40,
            convergence_tol: 1e-5,
            seed,
        }
    }
}

/// Per-restart trace.
#[derive(Debug, Clone, PartialEq)]
pub struct SnipsRestartReport {
    pub restart: usize,
    pub outer_iters: usize,
    pub converged: bool,
    pub final_alpha: f64,
    pub final_value: f64,
    pub forced_steps: usize,
}

/// The self-normalized robust value of a fixed policy.
pub fn snips_dual_value(
    data: &Dataset,
    inv_prop: &[f64],
    policy: &Policy,
    delta: f64,
) -> Result<WeightedDroResult, CliError> {
    let ratios = ratios(data, inv_prop, policy)?;
    let ws = WeightedSample::new(
        snips_normalize(&ratios)?,
        data.samples().iter().map(|s| s.reward).collect(),
    )?;
    weighted_dro_value(&ws, delta).map_err(CliError::from)
}

fn ratios(data: &Dataset, inv_prop: &[f64], policy: &Policy) -> Result<Vec<f64>, CliError> {
    let mut out = Vec::with_capacity(data.len());
    for (s, &ip) in data.samples().iter().zip(inv_prop) {
        out.push(policy.probs(&s.state)?[s.action] * ip);
    }
    Ok(out)
}

/// Ŵ(π, α) in self-normalized form, with its exact parameter gradient
/// accumulated into `grad` (zeroed first). The gradient threads the
/// softmax chain rule through both the numerator and the normalizer.
fn w_and_grad(
    data: &Dataset,
    inv_prop: &[f64],
    policy: &Policy,
    alpha: f64,
    grad: &mut [f64],
) -> Result<f64, CliError> {
    for g in grad.iter_mut() {
        *g = 0.0;
    }
    let n = data.len();
    let mut probs = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut tilts = Vec::with_capacity(n);
    let mut sum_w = 0.0;
    let mut sum_wt = 0.0;
    for (s, &ip) in data.samples().iter().zip(inv_prop) {
        let row = policy.probs(&s.state)?;
        let w = row[s.action] * ip;
        let t = (-s.reward / alpha).exp();
        sum_w += w;
        sum_wt += w * t;
        probs.push(row);
        weights.push(w);
        tilts.push(t);
    }
    if !(sum_w > 0.0) {
        return Err(CliError::from(drobust_core::Error::DegenerateWeights));
    }
    let what = sum_wt / sum_w;
    let mut logit_grad = vec![0.0; data.action_count()];
    for (i, s) in data.samples().iter().enumerate() {
        // ∂Ŵ/∂wᵢ = (tᵢ − Ŵ)/Σw, and ∂wᵢ/∂logit_b = wᵢ(1{b=aᵢ} − π(b|sᵢ))
        let scale = weights[i] * (tilts[i] - what) / sum_w;
        for (b, lg) in logit_grad.iter_mut().enumerate() {
            let indicator = f64::from(b == s.action);
            *lg = scale * (indicator - probs[i][b]);
        }
        policy.accumulate_logit_grad(&s.state, &logit_grad, 1.0, grad)?;
    }
    Ok(what)
}

/// Maximize the self-normalized robust value by alternating dual solves
/// and first-order policy steps over perturbed restarts.
pub fn snips_max(
    data: &Dataset,
    inv_prop: &[f64],
    config: &SnipsMaxConfig,
) -> Result<(Policy, Vec<SnipsRestartReport>, usize), CliError> {
    if config.restarts == 0 {
        return Err(CliError::config("snips-max needs restarts ≥ 1".to_string()));
    }
    if !(config.delta > 0.0) || !(config.learning_rate > 0.0) {
        return Err(CliError::config("snips-max needs delta > 0 and learning_rate > 0".to_string()));
    }
    if inv_prop.len() != data.len() {
        return Err(CliError::config(format!(
            "snips-max: {} inverse propensities for {} samples",
            inv_prop.len(),
            data.len()
        )));
    }
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
    for restart in 0..config.restarts {
        let mut stream = rng::stream(restart_seed, restart as u64);
        let mut theta: Vec<f64> =
            (0..dim).map(|_| 0.5 * stream.sample::<f64, _>(StandardNormal)).collect();
        let mut policy = template.clone();
        policy.set_params(&theta)?;

        let mut adam = Adam::new(dim, config.learning_rate);
        let mut grad = vec![0.0; dim];
        let mut converged = false;
        let mut outer_done = 0usize;
        let mut forced_steps = 0usize;

        for outer in 0..config.max_outer_iters {
            outer_done = outer + 1;
            let theta_before = theta.clone();

            let solution = snips_dual_value(data, inv_prop, &policy, config.delta)?;
            let alpha = match solution.status {
                DegeneracyStatus::Finite => solution.alpha,
                // α̂ = 0 boundary: descend the moment at the cutoff, which
                // pushes probability off the minimum-reward samples
                DegeneracyStatus::AlphaZero => EPS_ALPHA,
                DegeneracyStatus::AlphaInfinite => {
                    return Err(CliError::Optimization(
                        "self-normalized weights classified alpha-infinite; \
                         this should be impossible"
                            .to_string(),
                    ))
                }
            };

            for _ in 0..config.inner_steps {
                let w_before = w_and_grad(data, inv_prop, &policy, alpha, &mut grad)?;
                let applied = adam.step(&mut theta, &grad);
                policy.set_params(&theta)?;
                let mut fraction = 1.0;
                let mut accepted = false;
                for halving in 0..=20 {
                    let mut probe = vec![0.0; dim];
                    let w_after = w_and_grad(data, inv_prop, &policy, alpha, &mut probe)?;
                    if w_after.is_finite() && w_after <= w_before {
                        accepted = true;
                        break;
                    }
                    if halving == 20 {
                        break;
                    }
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
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            if moved < config.convergence_tol {
                converged = true;
                break;
            }
        }

        let final_solution = snips_dual_value(data, inv_prop, &policy, config.delta)?;
        reports.push(SnipsRestartReport {
            restart,
            outer_iters: outer_done,
            converged,
            final_alpha: final_solution.alpha,
            final_value: final_solution.value,
            forced_steps,
        });
        if final_solution.value.is_finite()
            && best.as_ref().map_or(true, |(bv, _, _)| final_solution.value > *bv)
        {
            best = Some((final_solution.value, policy, restart));
        }
    }
    match best {
        Some((_, policy, idx)) => Ok((policy, reports, idx)),
        None => Err(CliError::Optimization(format!(
            "all {} baseline restarts produced non-finite values",
            config.restarts
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use drobust_core::types::LoggedSample;

    /// 1-state, 2-action log: action 0 pays 0.8 certain, action 1 is a
    /// fair coin; uniform logging.
    fn lopsided_data(n: usize, seed: u64) -> (Dataset, Vec<f64>) {
        let mut stream = rng::stream(seed, label::ENV_REWARD);
        let samples: Vec<LoggedSample> = (0..n)
            .map(|_| {
                let action = usize::from(stream.gen::<f64>() < 0.5);
                let reward = if action == 0 {
                    0.8
                } else {
                    f64::from(stream.gen::<f64>() < 0.5)
                };
                LoggedSample { state: vec![0.0], action, reward, propensity: Some(0.5) }
            })
            .collect();
        let data = Dataset::new(samples, 2, 1).unwrap();
        let inv_prop = vec![2.0; n];
        (data, inv_prop)
    }

    #[test]
    fn gradient_matches_central_differences() {
        let (data, inv_prop) = lopsided_data(60, 3);
        for kind in [PolicyKind::LinearSoftmax, PolicyKind::MlpSoftmax { hidden: 6 }] {
            let mut policy = match kind {
                PolicyKind::LinearSoftmax => Policy::uniform(1, 2),
                PolicyKind::MlpSoftmax { hidden } => Policy::mlp_softmax_zero(1, hidden, 2),
            };
            let dim = policy.params().unwrap().len();
            let mut stream = rng::stream(11, label::RESTART);
            let theta: Vec<f64> =
                (0..dim).map(|_| 0.6 * stream.sample::<f64, _>(StandardNormal)).collect();
            policy.set_params(&theta).unwrap();
            let alpha = 0.7;

            let mut grad = vec![0.0; dim];
            w_and_grad(&data, &inv_prop, &policy, alpha, &mut grad).unwrap();

            let h = 1e-6;
            let mut pol = policy.clone();
            let mut scratch = vec![0.0; dim];
            for d in 0..dim {
                let mut up = theta.clone();
                up[d] += h;
                pol.set_params(&up).unwrap();
                let wu = w_and_grad(&data, &inv_prop, &pol, alpha, &mut scratch).unwrap();
                let mut dn = theta.clone();
                dn[d] -= h;
                pol.set_params(&dn).unwrap();
                let wd = w_and_grad(&data, &inv_prop, &pol, alpha, &mut scratch).unwrap();
                let fd = (wu - wd) / (2.0 * h);
                assert!(
                    (grad[d] - fd).abs() < 1e-6 * (1.0 + fd.abs()),
                    "{kind:?} coord {d}: analytic {} vs fd {fd}",
                    grad[d]
                );
            }
        }
    }

    #[test]
    fn baseline_prefers_the_certain_high_payer_at_small_delta() {
        let (data, inv_prop) = lopsided_data(600, 7);
        let mut config = SnipsMaxConfig::new(0.05, 5);
        config.restarts = 3;
        config.max_outer_iters = 15;
        let (policy, reports, best) = snips_max(&data, &inv_prop, &config).unwrap();
        assert_eq!(reports.len(), 3);
        assert!(best < 3);
        let probs = policy.probs(&[0.0]).unwrap();
        assert!(probs[0] > 0.6, "certain 0.8-payer got {}", probs[0]);
    }

    #[test]
    fn same_seed_reproduces_the_learned_policy() {
        let (data, inv_prop) = lopsided_data(200, 9);
        let mut config = SnipsMaxConfig::new(0.2, 13);
        config.restarts = 2;
        config.max_outer_iters = 5;
        let (p1, r1, _) = snips_max(&data, &inv_prop, &config).unwrap();
        let (p2, r2, _) = snips_max(&data, &inv_prop, &config).unwrap();
        assert_eq!(p1.params().unwrap(), p2.params().unwrap());
        assert_eq!(r1, r2);
    }
}
