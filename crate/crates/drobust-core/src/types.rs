//! Shared domain model: logged samples, datasets, policies, divergence
//! specifications, fold assignments, and the joint estimand.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::math;
use crate::rng;

/// Lower cutoff representing the α → 0⁺ boundary of the dual search domain.
/// At this boundary the worst case degenerates to the minimum reward.
pub const EPS_ALPHA: f64 = 1e-8;

/// One logged interaction: the behavior policy saw `state`, chose `action`,
/// observed `reward`, and (optionally) recorded the probability it assigned
/// to that action.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LoggedSample {
    /// Observed context, dimension `state_dim`.
    pub state: Vec<f64>,
    /// Index of the logged action, in `[0, action_count)`.
    pub action: usize,
    /// Observed reward; must lie in [0, 1].
    pub reward: f64,
    /// Behavior propensity π0(action | state) when logged; must be in (0, 1].
    pub propensity: Option<f64>,
}

/// An immutable batch of logged samples with consistent dimensions.
///
/// Rewards outside [0, 1] are rejected at construction, not clipped: the
/// estimators' guarantees assume bounded rewards, and silently clipping here
/// would mask bugs in whatever produced the data.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Dataset {
    samples: Vec<LoggedSample>,
    action_count: usize,
    state_dim: usize,
}

impl Dataset {
    /// Validate and wrap a batch of samples.
    pub fn new(samples: Vec<LoggedSample>, action_count: usize, state_dim: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidData {
                index: None,
                reason: "dataset is empty".to_string(),
            });
        }
        if action_count == 0 {
            return Err(Error::InvalidData {
                index: None,
                reason: "action_count must be positive".to_string(),
            });
        }
        for (i, s) in samples.iter().enumerate() {
            if s.state.len() != state_dim {
                return Err(Error::InvalidData {
                    index: Some(i),
                    reason: format!("state has dimension {}, expected {state_dim}", s.state.len()),
                });
            }
            if s.action >= action_count {
                return Err(Error::InvalidData {
                    index: Some(i),
                    reason: format!("action {} out of range (action_count {action_count})", s.action),
                });
            }
            if !(0.0..=1.0).contains(&s.reward) || !s.reward.is_finite() {
                return Err(Error::InvalidData {
                    index: Some(i),
                    reason: format!("reward {} outside [0, 1]", s.reward),
                });
            }
            if let Some(p) = s.propensity {
                if !(p > 0.0 && p <= 1.0) {
                    return Err(Error::InvalidData {
                        index: Some(i),
                        reason: format!("logged propensity {p} outside (0, 1]"),
                    });
                }
            }
        }
        Ok(Dataset { samples, action_count, state_dim })
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    /// Whether the dataset is empty (never true for a constructed `Dataset`).
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Number of available actions.
    pub fn action_count(&self) -> usize {
        self.action_count
    }

    /// Context dimension.
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// All samples, in logged order.
    pub fn samples(&self) -> &[LoggedSample] {
        &self.samples
    }

    /// The i-th sample.
    pub fn sample(&self, i: usize) -> &LoggedSample {
        &self.samples[i]
    }
}

/// A stochastic decision rule mapping states to distributions over actions.
///
/// `Tabular` rows are indexed by `state[0]` rounded to an integer (the
/// discrete-state convention used by the exact-oracle environments). The
/// parametric kinds operate on real-valued states and expose a flat
/// parameter vector plus exact gradients for policy optimization.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Policy {
    /// Explicit probability table over integer-coded states.
    Tabular {
        /// `rows[s][a]` = π(a | s); each row must be a probability vector.
        rows: Vec<Vec<f64>>,
    },
    /// Softmax over per-action affine scores: logits\[a\] = w_a·s + b_a.
    LinearSoftmax {
        /// Flat parameters, action-major: [w_0 (d entries), b_0, w_1, b_1, ...].
        params: Vec<f64>,
        /// State dimension d.
        state_dim: usize,
        /// Number of actions.
        action_count: usize,
    },
    /// Softmax over a one-hidden-layer network with tanh activation.
    MlpSoftmax {
        /// Flat parameters: [W1 (h×d, row-major), b1 (h), W2 (a×h, row-major), b2 (a)].
        params: Vec<f64>,
        /// State dimension d.
        state_dim: usize,
        /// Hidden width h.
        hidden: usize,
        /// Number of actions.
        action_count: usize,
    },
}

impl Policy {
    /// Uniform policy over `action_count` actions for `state_dim`-dimensional
    /// states (a zero-parameter linear softmax).
    pub fn uniform(state_dim: usize, action_count: usize) -> Policy {
        Policy::LinearSoftmax {
            params: alloc::vec![0.0; action_count * (state_dim + 1)],
            state_dim,
            action_count,
        }
    }

    /// Linear softmax from per-action weight vectors and biases.
    pub fn linear_softmax(weights: &[Vec<f64>], biases: &[f64]) -> Result<Policy> {
        let action_count = weights.len();
        if action_count == 0 || biases.len() != action_count {
            return Err(Error::InvalidConfiguration {
                reason: "linear softmax needs one weight vector and bias per action".to_string(),
            });
        }
        let state_dim = weights[0].len();
        let mut params = Vec::with_capacity(action_count * (state_dim + 1));
        for (w, &b) in weights.iter().zip(biases) {
            if w.len() != state_dim {
                return Err(Error::Shape { expected: state_dim, got: w.len() });
            }
            params.extend_from_slice(w);
            params.push(b);
        }
        Ok(Policy::LinearSoftmax { params, state_dim, action_count })
    }

    /// A fresh MLP softmax policy with all parameters zero (uniform output).
    pub fn mlp_softmax_zero(state_dim: usize, hidden: usize, action_count: usize) -> Policy {
        let n = hidden * state_dim + hidden + action_count * hidden + action_count;
        Policy::MlpSoftmax { params: alloc::vec![0.0; n], state_dim, hidden, action_count }
    }

    /// Number of actions this policy distributes over.
    pub fn action_count(&self) -> usize {
        match self {
            Policy::Tabular { rows } => rows.first().map_or(0, Vec::len),
            Policy::LinearSoftmax { action_count, .. } => *action_count,
            Policy::MlpSoftmax { action_count, .. } => *action_count,
        }
    }

    /// Expected state dimension (0 for tabular policies, which index by
    /// integer-coded 1-dimensional states).
    pub fn state_dim(&self) -> usize {
        match self {
            Policy::Tabular { .. } => 1,
            Policy::LinearSoftmax { state_dim, .. } => *state_dim,
            Policy::MlpSoftmax { state_dim, .. } => *state_dim,
        }
    }

    /// Action probabilities at `state`; nonnegative and summing to 1 within
    /// 1e-12.
    pub fn probs(&self, state: &[f64]) -> Result<Vec<f64>> {
        match self {
            Policy::Tabular { rows } => {
                if state.len() != 1 {
                    return Err(Error::Shape { expected: 1, got: state.len() });
                }
                let idx = state[0] as usize;
                if state[0] < 0.0 || idx >= rows.len() {
                    return Err(Error::InvalidData {
                        index: None,
                        reason: format!("tabular state index {} out of range", state[0]),
                    });
                }
                Ok(rows[idx].clone())
            }
            _ => {
                let mut logits = self.logits(state)?;
                softmax_in_place(&mut logits);
                Ok(logits)
            }
        }
    }

    /// Raw action scores before the softmax (parametric kinds only).
    pub fn logits(&self, state: &[f64]) -> Result<Vec<f64>> {
        match self {
            Policy::Tabular { .. } => Err(Error::InvalidConfiguration {
                reason: "tabular policies have no logits".to_string(),
            }),
            Policy::LinearSoftmax { params, state_dim, action_count } => {
                if state.len() != *state_dim {
                    return Err(Error::Shape { expected: *state_dim, got: state.len() });
                }
                let mut logits = Vec::with_capacity(*action_count);
                for a in 0..*action_count {
                    let base = a * (state_dim + 1);
                    let mut z = params[base + state_dim];
                    for (d, &s) in state.iter().enumerate() {
                        z += params[base + d] * s;
                    }
                    logits.push(z);
                }
                Ok(logits)
            }
            Policy::MlpSoftmax { params, state_dim, hidden, action_count } => {
                if state.len() != *state_dim {
                    return Err(Error::Shape { expected: *state_dim, got: state.len() });
                }
                let (h, d, a) = (*hidden, *state_dim, *action_count);
                let w2_off = h * d + h;
                let b2_off = w2_off + a * h;
                let mut logits = Vec::with_capacity(a);
                let mut act = Vec::with_capacity(h);
                for j in 0..h {
                    let mut z = params[h * d + j];
                    for (k, &s) in state.iter().enumerate() {
                        z += params[j * d + k] * s;
                    }
                    act.push(math::tanh(z));
                }
                for i in 0..a {
                    let mut z = params[b2_off + i];
                    for (j, &u) in act.iter().enumerate() {
                        z += params[w2_off + i * h + j] * u;
                    }
                    logits.push(z);
                }
                Ok(logits)
            }
        }
    }

    /// Whether the policy exposes a parameter vector and gradients.
    pub fn is_parametric(&self) -> bool {
        !matches!(self, Policy::Tabular { .. })
    }

    /// Flat parameter vector of a parametric policy.
    pub fn params(&self) -> Result<&[f64]> {
        match self {
            Policy::Tabular { .. } => Err(Error::InvalidConfiguration {
                reason: "tabular policies have no parameters".to_string(),
            }),
            Policy::LinearSoftmax { params, .. } => Ok(params),
            Policy::MlpSoftmax { params, .. } => Ok(params),
        }
    }

    /// Replace the parameter vector of a parametric policy.
    pub fn set_params(&mut self, new: &[f64]) -> Result<()> {
        match self {
            Policy::Tabular { .. } => Err(Error::InvalidConfiguration {
                reason: "tabular policies have no parameters".to_string(),
            }),
            Policy::LinearSoftmax { params, .. } | Policy::MlpSoftmax { params, .. } => {
                if params.len() != new.len() {
                    return Err(Error::Shape { expected: params.len(), got: new.len() });
                }
                params.copy_from_slice(new);
                Ok(())
            }
        }
    }

    /// ∇_θ log π(action | state) for a parametric policy.
    pub fn grad_log_prob(&self, state: &[f64], action: usize) -> Result<Vec<f64>> {
        let probs = self.probs(state)?;
        let mut logit_grad = alloc::vec![0.0; probs.len()];
        // d log π(a)/d z_b = 1[a=b] − π(b)
        for (b, g) in logit_grad.iter_mut().enumerate() {
            *g = if b == action { 1.0 - probs[b] } else { -probs[b] };
        }
        let mut out = alloc::vec![0.0; self.params()?.len()];
        self.accumulate_logit_grad(state, &logit_grad, 1.0, &mut out)?;
        Ok(out)
    }

    /// Accumulate `scale · Jᵀ·logit_grad` into `out`, where J = ∂logits/∂θ.
    ///
    /// This is the only backward primitive the optimizers need: any objective
    /// that is a function of the action probabilities at a state reduces to a
    /// gradient with respect to the logits, which this routine pushes through
    /// the policy parameters.
    pub fn accumulate_logit_grad(
        &self,
        state: &[f64],
        logit_grad: &[f64],
        scale: f64,
        out: &mut [f64],
    ) -> Result<()> {
        match self {
            Policy::Tabular { .. } => Err(Error::InvalidConfiguration {
                reason: "tabular policies have no parameters".to_string(),
            }),
            Policy::LinearSoftmax { params: _, state_dim, action_count } => {
                if logit_grad.len() != *action_count {
                    return Err(Error::Shape { expected: *action_count, got: logit_grad.len() });
                }
                for (a, &g) in logit_grad.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let base = a * (state_dim + 1);
                    for (d, &s) in state.iter().enumerate() {
                        out[base + d] += scale * g * s;
                    }
                    out[base + state_dim] += scale * g;
                }
                Ok(())
            }
            Policy::MlpSoftmax { params, state_dim, hidden, action_count } => {
                if logit_grad.len() != *action_count {
                    return Err(Error::Shape { expected: *action_count, got: logit_grad.len() });
                }
                let (h, d, a) = (*hidden, *state_dim, *action_count);
                let w2_off = h * d + h;
                let b2_off = w2_off + a * h;
                // forward pass to recover activations
                let mut act = Vec::with_capacity(h);
                for j in 0..h {
                    let mut z = params[h * d + j];
                    for (k, &s) in state.iter().enumerate() {
                        z += params[j * d + k] * s;
                    }
                    act.push(math::tanh(z));
                }
                // output layer gradients + backprop into hidden activations
                let mut dact = alloc::vec![0.0; h];
                for (i, &g) in logit_grad.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    for j in 0..h {
                        out[w2_off + i * h + j] += scale * g * act[j];
                        dact[j] += g * params[w2_off + i * h + j];
                    }
                    out[b2_off + i] += scale * g;
                }
                // hidden layer: d tanh(z)/dz = 1 − tanh²(z)
                for j in 0..h {
                    let dz = dact[j] * (1.0 - act[j] * act[j]);
                    if dz == 0.0 {
                        continue;
                    }
                    for (k, &s) in state.iter().enumerate() {
                        out[j * d + k] += scale * dz * s;
                    }
                    out[h * d + j] += scale * dz;
                }
                Ok(())
            }
        }
    }
}

/// Action probabilities of `policy` at `state`.
///
/// Free-function form of [`Policy::probs`] for call sites that read better
/// with the policy as an argument.
pub fn policy_probs(policy: &Policy, state: &[f64]) -> Result<Vec<f64>> {
    policy.probs(state)
}

fn softmax_in_place(logits: &mut [f64]) {
    let mut m = f64::NEG_INFINITY;
    for &z in logits.iter() {
        if z > m {
            m = z;
        }
    }
    let mut sum = 0.0;
    for z in logits.iter_mut() {
        *z = math::exp(*z - m);
        sum += *z;
    }
    for z in logits.iter_mut() {
        *z /= sum;
    }
}

/// The divergence ball defining the uncertainty set: all environments within
/// `delta` of the nominal one under the chosen divergence family.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DivergenceSpec {
    /// Ball radius δ > 0.
    pub delta: f64,
    /// Divergence family.
    pub family: DivergenceFamily,
}

/// Built-in divergence families. Custom f-divergences are supplied directly
/// to the f-dual routines as [`crate::dual::FDivergence`] implementations.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum DivergenceFamily {
    /// Kullback-Leibler divergence.
    Kl,
    /// Cressie-Read family of order k > 1 (k = 2 is χ²-like).
    CressieRead {
        /// Family order.
        k: f64,
    },
}

impl DivergenceSpec {
    /// KL ball of radius `delta`.
    pub fn kl(delta: f64) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(Error::Domain { what: "DivergenceSpec (delta must be > 0)" });
        }
        Ok(DivergenceSpec { delta, family: DivergenceFamily::Kl })
    }

    /// Cressie-Read ball of radius `delta` and order `k > 1`.
    pub fn cressie_read(delta: f64, k: f64) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(Error::Domain { what: "DivergenceSpec (delta must be > 0)" });
        }
        if !(k > 1.0) {
            return Err(Error::Domain { what: "DivergenceSpec (CressieRead k must be > 1)" });
        }
        Ok(DivergenceSpec { delta, family: DivergenceFamily::CressieRead { k } })
    }

    /// Upper bound ᾱ = 1/δ of the KL dual variable: for rewards in [0, 1]
    /// the maximizing α always lies in (0, 1/δ].
    pub fn alpha_bar(&self) -> f64 {
        1.0 / self.delta
    }
}

/// Assignment of samples to K cross-fitting folds.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FoldAssignment {
    fold_of: Vec<usize>,
    k: usize,
}

impl FoldAssignment {
    /// Build from an explicit per-sample fold vector. Every fold in
    /// `0..k` must be nonempty.
    pub fn from_fold_of(fold_of: Vec<usize>, k: usize) -> Result<FoldAssignment> {
        if k < 2 || k > fold_of.len() {
            return Err(Error::InvalidConfiguration {
                reason: format!("fold count must satisfy 2 <= k <= n, got k={k}"),
            });
        }
        let mut seen = alloc::vec![false; k];
        for &f in &fold_of {
            if f >= k {
                return Err(Error::InvalidConfiguration {
                    reason: format!("fold index {f} out of range for k={k}"),
                });
            }
            seen[f] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidConfiguration {
                reason: String::from("every fold must contain at least one sample"),
            });
        }
        Ok(FoldAssignment { fold_of, k })
    }

    /// Number of folds.
    pub fn k(&self) -> usize {
        self.k
    }

    /// Fold index of each sample.
    pub fn fold_of(&self) -> &[usize] {
        &self.fold_of
    }

    /// Sample indices belonging to fold `fold`.
    pub fn fold_indices(&self, fold: usize) -> Vec<usize> {
        self.fold_of
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| (f == fold).then_some(i))
            .collect()
    }

    /// Sample indices *not* in fold `fold` (the training set for that fold's
    /// nuisance models).
    pub fn complement_indices(&self, fold: usize) -> Vec<usize> {
        self.fold_of
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| (f != fold).then_some(i))
            .collect()
    }
}

/// Randomly partition `n` samples into `k` folds whose sizes differ by at
/// most one. Deterministic in `seed`.
pub fn crossfit_split(n: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 || k > n {
        return Err(Error::InvalidConfiguration {
            reason: format!("crossfit_split needs 2 <= k <= n, got k={k}, n={n}"),
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, rng::label::FOLDS));
    let mut fold_of = alloc::vec![0usize; n];
    // Deal the shuffled order into folds: the first n % k folds get one extra.
    let base = n / k;
    let extra = n % k;
    let mut pos = 0usize;
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        for &i in &order[pos..pos + size] {
            fold_of[i] = fold;
        }
        pos += size;
    }
    Ok(FoldAssignment { fold_of, k })
}

/// Randomly split an index set into two halves whose sizes differ by at most
/// one. Deterministic in `seed`.
pub fn split_half(indices: &[usize], seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if indices.len() < 2 {
        return Err(Error::InvalidConfiguration {
            reason: format!("split_half needs at least 2 indices, got {}", indices.len()),
        });
    }
    let mut order = indices.to_vec();
    order.shuffle(&mut rng::stream(seed, rng::label::HALF_SPLIT));
    let first_len = order.len().div_ceil(2);
    let second = order.split_off(first_len);
    Ok((order, second))
}

/// The joint estimand of the doubly robust moment system: the dual variable,
/// the first two tilted moments, and the robust value itself.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalTheta {
    /// Dual variable α̂ > 0.
    pub alpha: f64,
    /// Ŵ0 = estimate of E[e^{−R/α}], in (0, 1] when well-behaved.
    pub w0: f64,
    /// Ŵ1 = estimate of E[R·e^{−R/α}]; always ≤ W0 in population since R ∈ [0,1].
    pub w1: f64,
    /// Robust value estimate −α̂·log Ŵ0 − α̂·δ.
    pub value: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::abs;

    fn counts(assign: &FoldAssignment, k: usize) -> Vec<usize> {
        let mut c = alloc::vec![0usize; k];
        for &f in assign.fold_of() {
            c[f] += 1;
        }
        c
    }

    #[test]
    fn crossfit_even_division() {
        let a = crossfit_split(10, 5, 3).unwrap();
        assert_eq!(counts(&a, 5), alloc::vec![2, 2, 2, 2, 2]);
    }

    #[test]
    fn crossfit_remainder_spread() {
        let a = crossfit_split(11, 5, 3).unwrap();
        let mut c = counts(&a, 5);
        c.sort_unstable();
        assert_eq!(c, alloc::vec![2, 2, 2, 2, 3]);
    }

    #[test]
    fn crossfit_deterministic() {
        assert_eq!(crossfit_split(10, 5, 9).unwrap(), crossfit_split(10, 5, 9).unwrap());
    }

    #[test]
    fn crossfit_rejects_bad_k() {
        assert!(crossfit_split(5, 6, 0).is_err());
        assert!(crossfit_split(5, 1, 0).is_err());
    }

    #[test]
    fn split_half_sizes() {
        let (a, b) = split_half(&[0, 1, 2, 3], 1).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(b.len(), 2);
        let (a, b) = split_half(&[10, 11, 12, 13, 14], 1).unwrap();
        assert_eq!((a.len(), b.len()), (3, 2));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, alloc::vec![10, 11, 12, 13, 14]);
    }

    #[test]
    fn split_half_deterministic() {
        assert_eq!(split_half(&[1, 2, 3], 7).unwrap(), split_half(&[1, 2, 3], 7).unwrap());
    }

    #[test]
    fn zero_params_give_uniform() {
        let p = Policy::uniform(3, 4);
        let probs = p.probs(&[0.3, -0.7, 1.0]).unwrap();
        for &q in &probs {
            assert!(abs(q - 0.25) < 1e-15);
        }
    }

    #[test]
    fn tabular_returns_row_verbatim() {
        let p = Policy::Tabular { rows: alloc::vec![alloc::vec![0.2, 0.8], alloc::vec![0.5, 0.5]] };
        assert_eq!(p.probs(&[1.0]).unwrap(), alloc::vec![0.5, 0.5]);
        assert_eq!(p.probs(&[0.0]).unwrap(), alloc::vec![0.2, 0.8]);
    }

    #[test]
    fn equal_logits_give_uniform() {
        let weights = alloc::vec![alloc::vec![0.0; 2]; 5];
        let p = Policy::linear_softmax(&weights, &[1.0; 5]).unwrap();
        let probs = p.probs(&[0.4, 0.6]).unwrap();
        for &q in &probs {
            assert!(abs(q - 0.2) < 1e-15);
        }
    }

    #[test]
    fn probs_rejects_dimension_mismatch() {
        let p = Policy::uniform(2, 3);
        assert!(matches!(p.probs(&[1.0]), Err(Error::Shape { expected: 2, got: 1 })));
    }

    #[test]
    fn dataset_rejects_bad_rows() {
        let ok = LoggedSample { state: alloc::vec![0.0], action: 0, reward: 0.5, propensity: None };
        assert!(Dataset::new(alloc::vec![], 2, 1).is_err());
        let mut bad = ok.clone();
        bad.reward = 1.5;
        assert!(Dataset::new(alloc::vec![bad], 2, 1).is_err());
        let mut bad = ok.clone();
        bad.action = 2;
        assert!(Dataset::new(alloc::vec![bad], 2, 1).is_err());
        let mut bad = ok.clone();
        bad.propensity = Some(0.0);
        assert!(Dataset::new(alloc::vec![bad], 2, 1).is_err());
        assert!(Dataset::new(alloc::vec![ok], 2, 1).is_ok());
    }

    #[test]
    fn grad_log_prob_matches_finite_differences() {
        let mut p = Policy::MlpSoftmax {
            params: alloc::vec![0.0; 3 * 2 + 3 + 4 * 3 + 4],
            state_dim: 2,
            hidden: 3,
            action_count: 4,
        };
        // a fixed, non-symmetric parameter point
        let base: Vec<f64> = (0..p.params().unwrap().len())
            .map(|i| 0.3 * math::tanh(i as f64 * 0.37 - 1.1))
            .collect();
        p.set_params(&base).unwrap();
        let state = [0.43, -0.81];
        let action = 2;
        let grad = p.grad_log_prob(&state, action).unwrap();
        let eps = 1e-6;
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += eps;
            let mut minus = base.clone();
            minus[i] -= eps;
            let mut q = p.clone();
            q.set_params(&plus).unwrap();
            let lp_plus = math::ln(q.probs(&state).unwrap()[action]);
            q.set_params(&minus).unwrap();
            let lp_minus = math::ln(q.probs(&state).unwrap()[action]);
            let fd = (lp_plus - lp_minus) / (2.0 * eps);
            assert!(
                abs(fd - grad[i]) < 1e-6,
                "param {i}: analytic {} vs fd {fd}",
                grad[i]
            );
        }
    }
}
