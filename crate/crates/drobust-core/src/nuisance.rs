//! Fitted nuisances: behavior propensities, localized outcome regressions,
//! and continuum weight functions.
//!
//! The cross-fitted estimators consume three learned objects:
//!
//! - a propensity model π̂0(a|s) ([`fit_propensity`]),
//! - per-moment outcome regressions f̂_j(s, a) of the localized targets
//!   y = r^j·e^{−r/α₀} at a fixed tilt α₀ ([`fit_outcome_localized`]),
//! - a weighting function over training points whose induced
//!   f̂0(s, a; α) = Σᵢ ωᵢ(s, a)·e^{−rᵢ/α} is evaluable at *every* α at once
//!   ([`fit_continuum_weights`]) — the learner re-tilts the same weights as
//!   its α estimate moves instead of refitting a regression per α.
//!
//! All learners here are deliberately small and self-contained (k-NN,
//! Gaussian kernel, a randomized-tree ensemble): the estimators only need
//! their convergence rates, not a particular model family.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::rng::{self, label};
use crate::types::{Dataset, Policy};

/// Default clip floor for fitted propensities.
pub const DEFAULT_CLIP_FLOOR: f64 = 0.01;

/// Externally supplied nuisance evaluators: exact (or deliberately
/// perturbed) behavior propensities and localized conditional moments,
/// plugged into the cross-fitted estimators in place of fitted models.
/// This is how simulation studies probe sensitivity to nuisance error —
/// hand the estimator a known-truth oracle, or a controlled corruption of
/// one, without any fitting in the loop.
pub trait NuisanceOracle {
    /// Behavior propensity π0(a|s) (not clipped; the caller owns accuracy).
    fn propensity(&self, state: &[f64], action: usize) -> Result<f64>;

    /// Conditional moment f_j(s, a; α) = E[R^j·e^{−R/α} | s, a].
    fn outcome(&self, state: &[f64], action: usize, alpha: f64, j: u8) -> Result<f64>;
}

/// Distance scale of the action one-hot block in joint (state, action)
/// feature space: a mismatched action contributes `2·ACTION_FEATURE_SCALE²`
/// to the squared distance, which with scale 2 dominates the largest
/// possible state distance in the [−1, 1]² environments.
const ACTION_FEATURE_SCALE: f64 = 2.0;

/// Minimum per-action cell size for a dedicated regression; smaller cells
/// are served by a pooled regression with action one-hot features.
const MIN_CELL: usize = 30;

// ---------------------------------------------------------------------------
// propensity models
// ---------------------------------------------------------------------------

/// Which propensity learner to fit.
#[derive(Debug, Clone, PartialEq)]
pub enum PropensityKind {
    /// Softmax-linear model trained by full-batch gradient descent.
    MultinomialLogistic,
    /// k-nearest-neighbor action frequencies.
    Knn {
        /// Neighborhood size.
        k: usize,
    },
    /// The true behavior policy, evaluated exactly.
    Oracle(Policy),
}

/// A fitted behavior-propensity model.
///
/// Fitted kinds clip evaluated probabilities to `[clip_floor, 1]` — the
/// estimators divide by these values, and a fitted probability can
/// undershoot the true overlap floor. The oracle kind is *exempt* from
/// clipping: its values are exact by construction, and flooring them would
/// bias the very ratios the oracle kind exists to get right (the true
/// propensities in the simulated environments can be far below any
/// reasonable floor).
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityModel {
    inner: PropensityInner,
    clip_floor: f64,
}

#[derive(Debug, Clone, PartialEq)]
enum PropensityInner {
    Logistic { policy: Policy },
    Knn { k: usize, states: Vec<Vec<f64>>, actions: Vec<usize>, action_count: usize },
    Oracle(Policy),
}

impl PropensityModel {
    /// Clipped probability of one action.
    pub fn prob(&self, state: &[f64], action: usize) -> Result<f64> {
        Ok(self.probs(state)?[action])
    }

    /// Per-action probabilities, each entry clipped to `[clip_floor, 1]`
    /// for fitted kinds (so the vector may sum to slightly more than 1).
    pub fn probs(&self, state: &[f64]) -> Result<Vec<f64>> {
        match &self.inner {
            PropensityInner::Logistic { policy } => {
                let mut p = policy.probs(state)?;
                for v in &mut p {
                    *v = math::clip(*v, self.clip_floor, 1.0);
                }
                Ok(p)
            }
            PropensityInner::Knn { k, states, actions, action_count } => {
                let neighbors = nearest_indices(states, state, *k);
                let mut p = alloc::vec![0.0; *action_count];
                for &i in &neighbors {
                    p[actions[i]] += 1.0 / neighbors.len() as f64;
                }
                for v in &mut p {
                    *v = math::clip(*v, self.clip_floor, 1.0);
                }
                Ok(p)
            }
            PropensityInner::Oracle(policy) => policy.probs(state),
        }
    }

    /// The configured clip floor.
    pub fn clip_floor(&self) -> f64 {
        self.clip_floor
    }

    /// Stable name of the fitted kind (for serialization).
    pub fn kind_name(&self) -> &'static str {
        match &self.inner {
            PropensityInner::Logistic { .. } => "multinomial-logistic",
            PropensityInner::Knn { .. } => "knn",
            PropensityInner::Oracle(_) => "oracle",
        }
    }

    /// Flat parameter vector for serialization: logistic weights for the
    /// logistic kind, `[k]` for k-NN, empty for the oracle.
    pub fn parameters(&self) -> Vec<f64> {
        match &self.inner {
            PropensityInner::Logistic { policy } => {
                policy.params().map(|p| p.to_vec()).unwrap_or_default()
            }
            PropensityInner::Knn { k, .. } => alloc::vec![*k as f64],
            PropensityInner::Oracle(_) => Vec::new(),
        }
    }
}

/// Fit a behavior-propensity model on the given rows of `data`.
///
/// The logistic kind runs full-batch gradient descent on the softmax-linear
/// log-likelihood (step size from the curvature bound ½·mean‖x̃‖²) until the
/// gradient norm drops below 1e-6 or 5000 iterations elapse.
pub fn fit_propensity(
    data: &Dataset,
    indices: &[usize],
    kind: &PropensityKind,
    clip_floor: f64,
    _seed: u64,
) -> Result<PropensityModel> {
    check_indices(data, indices)?;
    if !(clip_floor > 0.0 && clip_floor < 0.5) {
        return Err(Error::Domain { what: "fit_propensity (clip_floor must be in (0, 0.5))" });
    }
    let mut seen = alloc::vec![false; data.action_count()];
    for &i in indices {
        seen[data.sample(i).action] = true;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::DegenerateFit {
            reason: String::from("propensity fit needs at least 2 distinct logged actions"),
        });
    }
    let inner = match kind {
        PropensityKind::Oracle(policy) => {
            if policy.action_count() != data.action_count() {
                return Err(Error::Shape {
                    expected: data.action_count(),
                    got: policy.action_count(),
                });
            }
            PropensityInner::Oracle(policy.clone())
        }
        PropensityKind::Knn { k } => {
            if *k == 0 {
                return Err(Error::Domain { what: "fit_propensity (knn k must be ≥ 1)" });
            }
            PropensityInner::Knn {
                k: *k,
                states: indices.iter().map(|&i| data.sample(i).state.clone()).collect(),
                actions: indices.iter().map(|&i| data.sample(i).action).collect(),
                action_count: data.action_count(),
            }
        }
        PropensityKind::MultinomialLogistic => {
            PropensityInner::Logistic { policy: fit_logistic(data, indices)? }
        }
    };
    Ok(PropensityModel { inner, clip_floor })
}

fn fit_logistic(data: &Dataset, indices: &[usize]) -> Result<Policy> {
    let n = indices.len() as f64;
    let na = data.action_count();
    let mut policy = Policy::uniform(data.state_dim(), na);
    // softmax cross-entropy curvature is bounded by ½·mean‖(s, 1)‖²
    let mut smoothness = 0.0;
    for &i in indices {
        let s = &data.sample(i).state;
        smoothness += (1.0 + s.iter().map(|x| x * x).sum::<f64>()) / n;
    }
    let lr = 2.0 / smoothness;
    let dim = policy.params()?.len();
    let mut grad = alloc::vec![0.0; dim];
    let mut logit_grad = alloc::vec![0.0; na];
    for _ in 0..5000 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for &i in indices {
            let sample = data.sample(i);
            let probs = policy.probs(&sample.state)?;
            for (a, g) in logit_grad.iter_mut().enumerate() {
                *g = probs[a] - if a == sample.action { 1.0 } else { 0.0 };
            }
            policy.accumulate_logit_grad(&sample.state, &logit_grad, 1.0 / n, &mut grad)?;
        }
        let norm = math::sqrt(grad.iter().map(|g| g * g).sum());
        if norm < 1e-6 {
            break;
        }
        let mut params = policy.params()?.to_vec();
        for (p, g) in params.iter_mut().zip(&grad) {
            *p -= lr * g;
        }
        policy.set_params(&params)?;
    }
    Ok(policy)
}

// ---------------------------------------------------------------------------
// localized outcome regressions
// ---------------------------------------------------------------------------

/// Which outcome-regression learner to fit.
#[derive(Debug, Clone, PartialEq)]
pub enum OutcomeKind {
    /// Mean of the k nearest training targets.
    Knn {
        /// Neighborhood size.
        k: usize,
    },
    /// Nadaraya–Watson regression with a Gaussian kernel.
    Kernel {
        /// Kernel bandwidth.
        bandwidth: f64,
    },
    /// The all-zeros ablation: predicts 0 everywhere. Turns the doubly
    /// robust moments into pure inverse-propensity ones, which is the
    /// configuration where the moment root coincides exactly with the
    /// weighted dual maximizer (useful for cross-checks and diagnostics).
    Zero,
}

/// A fitted regression of the localized target y = r^j·e^{−r/α₀} on (s, a).
///
/// Actions with at least [`MIN_CELL`] samples get their own regression on
/// state features alone; the rest share a pooled regression with the action
/// appended as scaled one-hot features. Predictions are clipped to [0, 1]
/// (the target is in [0, 1] by construction for rewards in [0, 1]).
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeModel {
    kind: OutcomeKind,
    localized_alpha: f64,
    moment_order: u8,
    per_action: Vec<Option<FitData>>,
    pooled: Option<FitData>,
    pooled_actions: Vec<usize>,
    action_count: usize,
}

/// Stored training features and targets for one memory-based regression.
#[derive(Debug, Clone, PartialEq)]
struct FitData {
    features: Vec<Vec<f64>>,
    targets: Vec<f64>,
}

impl OutcomeModel {
    /// Predicted f̂_j(s, a; α₀), clipped to [0, 1].
    pub fn predict(&self, state: &[f64], action: usize) -> Result<f64> {
        if action >= self.action_count {
            return Err(Error::Shape { expected: self.action_count, got: action });
        }
        let raw = match &self.kind {
            OutcomeKind::Zero => 0.0,
            _ => match &self.per_action[action] {
                Some(fit) => self.regress(fit, state),
                None => {
                    let pooled = self.pooled.as_ref().expect("pooled fit exists");
                    self.regress(pooled, &joint_features(state, action, self.action_count))
                }
            },
        };
        Ok(math::clip(raw, 0.0, 1.0))
    }

    fn regress(&self, fit: &FitData, query: &[f64]) -> f64 {
        match self.kind {
            OutcomeKind::Knn { k } => {
                let neighbors = nearest_indices(&fit.features, query, k);
                let mut acc = 0.0;
                for &i in &neighbors {
                    acc += fit.targets[i];
                }
                acc / neighbors.len() as f64
            }
            OutcomeKind::Kernel { bandwidth } => {
                kernel_regress(&fit.features, &fit.targets, query, bandwidth)
            }
            OutcomeKind::Zero => 0.0,
        }
    }

    /// The tilt α₀ the training targets were localized at.
    pub fn localized_alpha(&self) -> f64 {
        self.localized_alpha
    }

    /// Which moment (j ∈ {0, 1}) this model regresses.
    pub fn moment_order(&self) -> u8 {
        self.moment_order
    }

    /// Actions whose cells were too small for a dedicated regression and
    /// are served by the pooled fit.
    pub fn pooled_actions(&self) -> &[usize] {
        &self.pooled_actions
    }

    /// Stable name of the fitted kind (for serialization).
    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            OutcomeKind::Knn { .. } => "knn",
            OutcomeKind::Kernel { .. } => "kernel",
            OutcomeKind::Zero => "zero",
        }
    }
}

/// Fit f̂_j(·, ·; α₀) on the given rows: regress y_i = r_i^j·e^{−r_i/α₀}
/// on (s_i, a_i).
pub fn fit_outcome_localized(
    data: &Dataset,
    indices: &[usize],
    alpha_init: f64,
    j: u8,
    kind: &OutcomeKind,
    _seed: u64,
) -> Result<OutcomeModel> {
    check_indices(data, indices)?;
    if !(alpha_init > 0.0) {
        return Err(Error::Domain { what: "fit_outcome_localized (alpha_init must be > 0)" });
    }
    if j > 1 {
        return Err(Error::Domain { what: "fit_outcome_localized (moment order must be 0 or 1)" });
    }
    if let OutcomeKind::Knn { k: 0 } = kind {
        return Err(Error::Domain { what: "fit_outcome_localized (knn k must be ≥ 1)" });
    }
    if let OutcomeKind::Kernel { bandwidth } = kind {
        if !(*bandwidth > 0.0) {
            return Err(Error::Domain { what: "fit_outcome_localized (bandwidth must be > 0)" });
        }
    }
    let na = data.action_count();
    let target = |i: usize| {
        let r = data.sample(i).reward;
        let tilt = math::exp(-r / alpha_init);
        if j == 0 {
            tilt
        } else {
            r * tilt
        }
    };

    let mut cells: Vec<Vec<usize>> = alloc::vec![Vec::new(); na];
    for &i in indices {
        cells[data.sample(i).action].push(i);
    }
    let mut per_action: Vec<Option<FitData>> = alloc::vec![None; na];
    let mut pooled_actions = Vec::new();
    let mut pooled_rows = Vec::new();
    for (a, cell) in cells.iter().enumerate() {
        if cell.len() >= MIN_CELL {
            per_action[a] = Some(FitData {
                features: cell.iter().map(|&i| data.sample(i).state.clone()).collect(),
                targets: cell.iter().map(|&i| target(i)).collect(),
            });
        } else {
            pooled_actions.push(a);
            pooled_rows.extend(cell.iter().copied());
        }
    }
    // the pooled model regresses on joint features; it trains on *all* rows
    // (not just the small cells) so that a sparsely logged action can still
    // borrow strength from its neighbors in state space
    let pooled = if pooled_actions.is_empty() {
        None
    } else {
        Some(FitData {
            features: indices
                .iter()
                .map(|&i| joint_features(&data.sample(i).state, data.sample(i).action, na))
                .collect(),
            targets: indices.iter().map(|&i| target(i)).collect(),
        })
    };
    Ok(OutcomeModel {
        kind: kind.clone(),
        localized_alpha: alpha_init,
        moment_order: j,
        per_action,
        pooled,
        pooled_actions,
        action_count: na,
    })
}

// ---------------------------------------------------------------------------
// continuum weights
// ---------------------------------------------------------------------------

/// Which weighting function to learn for the continuum estimator.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightKind {
    /// Uniform weight on the k nearest training points.
    Knn {
        /// Neighborhood size.
        k: usize,
    },
    /// Gaussian-kernel weights, normalized per query.
    Kernel {
        /// Kernel bandwidth.
        bandwidth: f64,
    },
    /// Randomized-tree ensemble: weight ∝ fraction of trees in which the
    /// query and the training point land in the same leaf.
    TreeEnsemble {
        /// Number of trees.
        trees: usize,
    },
}

/// A learned weighting function ω(s, a) over its training points.
///
/// The induced outcome function f̂0(s, a; α) = Σᵢ ωᵢ(s, a)·e^{−rᵢ/α} is a
/// convex combination of decaying exponentials, so it is evaluable at every
/// α from one set of weights, lies in (0, 1], is nondecreasing in α, and is
/// Lipschitz in α with constant 1/α̲² on [α̲, ∞).
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuumWeights {
    kind: WeightKind,
    features: Vec<Vec<f64>>,
    rewards: Vec<f64>,
    trees: Vec<Tree>,
    action_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Tree {
    nodes: Vec<TreeNode>,
    /// Leaf id of each training point.
    leaf_of: Vec<u32>,
    leaf_count: u32,
}

#[derive(Debug, Clone, PartialEq)]
enum TreeNode {
    Split { feature: usize, threshold: f64, left: u32, right: u32 },
    Leaf { id: u32 },
}

impl ContinuumWeights {
    /// Normalized weights over training points at query (s, a), as sparse
    /// (index, weight) pairs. Weights are nonnegative and sum to 1 within
    /// 1e-10.
    pub fn weights(&self, state: &[f64], action: usize) -> Result<Vec<(usize, f64)>> {
        if action >= self.action_count {
            return Err(Error::Shape { expected: self.action_count, got: action });
        }
        let query = joint_features(state, action, self.action_count);
        match &self.kind {
            WeightKind::Knn { k } => {
                let neighbors = nearest_indices(&self.features, &query, *k);
                let w = 1.0 / neighbors.len() as f64;
                Ok(neighbors.into_iter().map(|i| (i, w)).collect())
            }
            WeightKind::Kernel { bandwidth } => {
                // normalize against the nearest point so at least one kernel
                // value is exactly 1 and the ratio never degenerates to 0/0
                let d2: Vec<f64> = self.features.iter().map(|f| sq_dist(f, &query)).collect();
                let min_d2 = d2.iter().cloned().fold(f64::INFINITY, f64::min);
                let mut raw: Vec<f64> = d2
                    .iter()
                    .map(|&d| math::exp(-(d - min_d2) / (2.0 * bandwidth * bandwidth)))
                    .collect();
                let total: f64 = raw.iter().sum();
                for w in &mut raw {
                    *w /= total;
                }
                Ok(raw.into_iter().enumerate().filter(|&(_, w)| w > 0.0).collect())
            }
            WeightKind::TreeEnsemble { .. } => {
                let mut counts = alloc::vec![0.0f64; self.rewards.len()];
                for tree in &self.trees {
                    let leaf = tree.route(&query);
                    for (i, &l) in tree.leaf_of.iter().enumerate() {
                        if l == leaf {
                            counts[i] += 1.0;
                        }
                    }
                }
                let total: f64 = counts.iter().sum();
                Ok(counts
                    .into_iter()
                    .enumerate()
                    .filter(|&(_, c)| c > 0.0)
                    .map(|(i, c)| (i, c / total))
                    .collect())
            }
        }
    }

    /// The continuum outcome value f̂0(s, a; α) = Σᵢ ωᵢ(s, a)·e^{−rᵢ/α}.
    pub fn f0(&self, state: &[f64], action: usize, alpha: f64) -> Result<f64> {
        if !(alpha > 0.0) {
            return Err(Error::Domain { what: "continuum f0 (alpha must be > 0)" });
        }
        let pairs = self.weights(state, action)?;
        Ok(f0_from_pairs(&pairs, &self.rewards, alpha))
    }

    /// Training rewards, indexed by the first element of weight pairs.
    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    /// Number of training points.
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    /// Whether the training slice was empty (never true for a fitted model).
    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Stable name of the fitted kind (for serialization).
    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            WeightKind::Knn { .. } => "knn",
            WeightKind::Kernel { .. } => "kernel",
            WeightKind::TreeEnsemble { .. } => "tree-ensemble",
        }
    }
}

/// Evaluate Σ wᵢ·e^{−r_{idxᵢ}/α} from sparse weight pairs. Shared with the
/// learner, which caches the pairs and re-tilts them as α moves.
pub fn f0_from_pairs(pairs: &[(usize, f64)], rewards: &[f64], alpha: f64) -> f64 {
    let mut acc = 0.0;
    for &(i, w) in pairs {
        acc += w * math::exp(-rewards[i] / alpha);
    }
    acc
}

/// Learn a weighting function over the given rows of `data`.
pub fn fit_continuum_weights(
    data: &Dataset,
    indices: &[usize],
    kind: &WeightKind,
    seed: u64,
) -> Result<ContinuumWeights> {
    check_indices(data, indices)?;
    match kind {
        WeightKind::Knn { k: 0 } => {
            return Err(Error::Domain { what: "fit_continuum_weights (knn k must be ≥ 1)" });
        }
        WeightKind::Kernel { bandwidth } if !(*bandwidth > 0.0) => {
            return Err(Error::Domain { what: "fit_continuum_weights (bandwidth must be > 0)" });
        }
        WeightKind::TreeEnsemble { trees: 0 } => {
            return Err(Error::Domain { what: "fit_continuum_weights (trees must be ≥ 1)" });
        }
        _ => {}
    }
    let na = data.action_count();
    let features: Vec<Vec<f64>> = indices
        .iter()
        .map(|&i| joint_features(&data.sample(i).state, data.sample(i).action, na))
        .collect();
    let rewards: Vec<f64> = indices.iter().map(|&i| data.sample(i).reward).collect();
    let trees = if let WeightKind::TreeEnsemble { trees } = kind {
        let mut rng = rng::stream(seed, label::NUISANCE);
        (0..*trees).map(|_| Tree::grow(&features, &rewards, &mut rng)).collect()
    } else {
        Vec::new()
    };
    Ok(ContinuumWeights { kind: kind.clone(), features, rewards, trees, action_count: na })
}

impl Tree {
    const LEAF_MIN: usize = 10;
    const MAX_DEPTH: usize = 12;
    const CANDIDATES: usize = 8;

    /// Grow one randomized regression tree: at each node, draw a few random
    /// (feature, threshold) candidates and keep the one with the lowest
    /// child reward variance.
    fn grow<R: Rng>(features: &[Vec<f64>], rewards: &[f64], rng: &mut R) -> Tree {
        let mut tree =
            Tree { nodes: Vec::new(), leaf_of: alloc::vec![0; rewards.len()], leaf_count: 0 };
        let all: Vec<usize> = (0..rewards.len()).collect();
        tree.grow_node(features, rewards, all, 0, rng);
        tree
    }

    fn grow_node<R: Rng>(
        &mut self,
        features: &[Vec<f64>],
        rewards: &[f64],
        rows: Vec<usize>,
        depth: usize,
        rng: &mut R,
    ) -> u32 {
        let node_id = self.nodes.len() as u32;
        let best = if rows.len() <= Tree::LEAF_MIN || depth >= Tree::MAX_DEPTH {
            None
        } else {
            self.best_split(features, rewards, &rows, rng)
        };
        match best {
            None => {
                let id = self.leaf_count;
                self.leaf_count += 1;
                for &i in &rows {
                    self.leaf_of[i] = id;
                }
                self.nodes.push(TreeNode::Leaf { id });
                node_id
            }
            Some((feature, threshold)) => {
                self.nodes.push(TreeNode::Split { feature, threshold, left: 0, right: 0 });
                let (lrows, rrows): (Vec<usize>, Vec<usize>) =
                    rows.into_iter().partition(|&i| features[i][feature] <= threshold);
                let left = self.grow_node(features, rewards, lrows, depth + 1, rng);
                let right = self.grow_node(features, rewards, rrows, depth + 1, rng);
                if let TreeNode::Split { left: l, right: r, .. } = &mut self.nodes[node_id as usize]
                {
                    *l = left;
                    *r = right;
                }
                node_id
            }
        }
    }

    fn best_split<R: Rng>(
        &self,
        features: &[Vec<f64>],
        rewards: &[f64],
        rows: &[usize],
        rng: &mut R,
    ) -> Option<(usize, f64)> {
        let dim = features[0].len();
        let mut best: Option<(f64, usize, f64)> = None;
        for _ in 0..Tree::CANDIDATES {
            let feature = rng.gen_range(0..dim);
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &i in rows {
                lo = lo.min(features[i][feature]);
                hi = hi.max(features[i][feature]);
            }
            if !(hi > lo) {
                continue;
            }
            let threshold = lo + rng.gen::<f64>() * (hi - lo);
            // score = total squared error of the two children
            let (mut ln, mut ls, mut lq) = (0.0, 0.0, 0.0);
            let (mut rn, mut rs, mut rq) = (0.0, 0.0, 0.0);
            for &i in rows {
                let r = rewards[i];
                if features[i][feature] <= threshold {
                    ln += 1.0;
                    ls += r;
                    lq += r * r;
                } else {
                    rn += 1.0;
                    rs += r;
                    rq += r * r;
                }
            }
            if ln == 0.0 || rn == 0.0 {
                continue;
            }
            let score = (lq - ls * ls / ln) + (rq - rs * rs / rn);
            if best.map_or(true, |(s, _, _)| score < s) {
                best = Some((score, feature, threshold));
            }
        }
        best.map(|(_, f, t)| (f, t))
    }

    fn route(&self, query: &[f64]) -> u32 {
        let mut node = 0usize;
        loop {
            match &self.nodes[node] {
                TreeNode::Leaf { id } => return *id,
                TreeNode::Split { feature, threshold, left, right } => {
                    node = if query[*feature] <= *threshold { *left } else { *right } as usize;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// shared helpers
// ---------------------------------------------------------------------------

fn check_indices(data: &Dataset, indices: &[usize]) -> Result<()> {
    if indices.is_empty() {
        return Err(Error::InvalidData {
            index: None,
            reason: String::from("empty training slice"),
        });
    }
    for &i in indices {
        if i >= data.len() {
            return Err(Error::InvalidData {
                index: Some(i),
                reason: String::from("training index out of range"),
            });
        }
    }
    Ok(())
}

fn joint_features(state: &[f64], action: usize, action_count: usize) -> Vec<f64> {
    let mut f = Vec::with_capacity(state.len() + action_count);
    f.extend_from_slice(state);
    for a in 0..action_count {
        f.push(if a == action { ACTION_FEATURE_SCALE } else { 0.0 });
    }
    f
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += (x - y) * (x - y);
    }
    acc
}

/// Indices of the k nearest training features (all of them when k ≥ n),
/// ties broken by index for determinism.
fn nearest_indices(features: &[Vec<f64>], query: &[f64], k: usize) -> Vec<usize> {
    let n = features.len();
    if k >= n {
        return (0..n).collect();
    }
    let mut order: Vec<(f64, usize)> =
        features.iter().enumerate().map(|(i, f)| (sq_dist(f, query), i)).collect();
    order.select_nth_unstable_by(k - 1, |a, b| {
        a.0.partial_cmp(&b.0).unwrap_or(core::cmp::Ordering::Equal).then(a.1.cmp(&b.1))
    });
    let mut picked: Vec<usize> = order[..k].iter().map(|&(_, i)| i).collect();
    picked.sort_unstable();
    picked
}

fn kernel_regress(features: &[Vec<f64>], targets: &[f64], query: &[f64], bandwidth: f64) -> f64 {
    // same nearest-point normalization as the kernel weights: the closest
    // point always contributes weight 1, so the ratio is never 0/0
    let d2: Vec<f64> = features.iter().map(|f| sq_dist(f, query)).collect();
    let min_d2 = d2.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut num = 0.0;
    let mut den = 0.0;
    for (d, y) in d2.iter().zip(targets) {
        let w = math::exp(-(d - min_d2) / (2.0 * bandwidth * bandwidth));
        num += w * y;
        den += w;
    }
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::abs;
    use crate::simulator::{clipped_gaussian_w, Environment, Softmax5Env};
    use crate::types::LoggedSample;
    use rand::Rng;

    fn uniform_logged_dataset(n: usize, actions: usize, seed: u64) -> Dataset {
        let mut rng = rng::stream(seed, label::NUISANCE);
        let samples = (0..n)
            .map(|_| {
                let state =
                    alloc::vec![rng.gen::<f64>() * 2.0 - 1.0, rng.gen::<f64>() * 2.0 - 1.0];
                let action = rng.gen_range(0..actions);
                LoggedSample { state, action, reward: rng.gen(), propensity: None }
            })
            .collect();
        Dataset::new(samples, actions, 2).unwrap()
    }

    fn all_indices(data: &Dataset) -> Vec<usize> {
        (0..data.len()).collect()
    }

    #[test]
    fn logistic_fit_recovers_uniform_logging() {
        let data = uniform_logged_dataset(4000, 5, 1);
        let model = fit_propensity(
            &data,
            &all_indices(&data),
            &PropensityKind::MultinomialLogistic,
            DEFAULT_CLIP_FLOOR,
            0,
        )
        .unwrap();
        let mut rng = rng::stream(99, label::NUISANCE);
        for _ in 0..20 {
            let state = alloc::vec![rng.gen::<f64>() * 2.0 - 1.0, rng.gen::<f64>() * 2.0 - 1.0];
            for p in model.probs(&state).unwrap() {
                assert!(abs(p - 0.2) < 0.05, "probability {p} too far from 0.2");
            }
        }
    }

    #[test]
    fn logistic_fit_recovers_softmax_logging() {
        let env = Environment::Softmax5(Softmax5Env::standard());
        let data = env.sample_dataset(6000, 17, true).unwrap();
        let model = fit_propensity(
            &data,
            &all_indices(&data),
            &PropensityKind::MultinomialLogistic,
            DEFAULT_CLIP_FLOOR,
            0,
        )
        .unwrap();
        // the logging policy is itself softmax-linear, so the fit should
        // land close to the truth (up to clipping) on fresh states
        let behavior = env.behavior_policy();
        let mut rng = rng::stream(7, label::NUISANCE);
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let state = alloc::vec![rng.gen::<f64>() * 2.0 - 1.0, rng.gen::<f64>() * 2.0 - 1.0];
            let truth = behavior.probs(&state).unwrap();
            let fitted = model.probs(&state).unwrap();
            for (t, f) in truth.iter().zip(&fitted) {
                worst = worst.max(abs(t.max(DEFAULT_CLIP_FLOOR) - f));
            }
        }
        assert!(worst < 0.05, "worst propensity error {worst}");
    }

    #[test]
    fn oracle_kind_is_exact_and_unclipped() {
        let env = Softmax5Env::standard();
        let data = Environment::Softmax5(env.clone()).sample_dataset(50, 3, false).unwrap();
        let model = fit_propensity(
            &data,
            &all_indices(&data),
            &PropensityKind::Oracle(env.behavior_policy()),
            DEFAULT_CLIP_FLOOR,
            0,
        )
        .unwrap();
        // the true propensity of the off-axis actions at s = (1, 0) is
        // below the clip floor and must come through untouched
        let p = model.prob(&[1.0, 0.0], 2).unwrap();
        assert!(abs(p - 0.017248167984608338) < 1e-12);
        assert!(p > DEFAULT_CLIP_FLOOR, "sanity: this case is above the floor");
        let env_probs = env.behavior_policy().probs(&[1.0, 0.0]).unwrap();
        assert_eq!(model.probs(&[1.0, 0.0]).unwrap(), env_probs);
    }

    #[test]
    fn knn_with_all_neighbors_returns_marginal_frequencies() {
        let data = uniform_logged_dataset(200, 3, 5);
        let model = fit_propensity(
            &data,
            &all_indices(&data),
            &PropensityKind::Knn { k: 200 },
            DEFAULT_CLIP_FLOOR,
            0,
        )
        .unwrap();
        let mut freq = [0.0f64; 3];
        for s in data.samples() {
            freq[s.action] += 1.0 / 200.0;
        }
        let probs = model.probs(&[0.3, -0.4]).unwrap();
        for (p, f) in probs.iter().zip(&freq) {
            assert!(abs(p - f) < 1e-12);
        }
    }

    #[test]
    fn single_action_data_is_a_degenerate_fit() {
        let samples = (0..40)
            .map(|i| LoggedSample {
                state: alloc::vec![i as f64 / 40.0],
                action: 0,
                reward: 0.5,
                propensity: None,
            })
            .collect();
        let data = Dataset::new(samples, 2, 1).unwrap();
        let err = fit_propensity(
            &data,
            &all_indices(&data),
            &PropensityKind::MultinomialLogistic,
            DEFAULT_CLIP_FLOOR,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::DegenerateFit { .. }));
    }

    #[test]
    fn constant_reward_outcome_fits_are_exact() {
        let mut rng = rng::stream(2, label::NUISANCE);
        let c = 0.7;
        let samples = (0..100)
            .map(|_| LoggedSample {
                state: alloc::vec![rng.gen::<f64>(), rng.gen::<f64>()],
                action: rng.gen_range(0..2),
                reward: c,
                propensity: None,
            })
            .collect();
        let data = Dataset::new(samples, 2, 2).unwrap();
        let idx = all_indices(&data);
        for alpha in [0.3, 1.0, 5.0] {
            for kind in [OutcomeKind::Knn { k: 7 }, OutcomeKind::Kernel { bandwidth: 0.4 }] {
                let f0 = fit_outcome_localized(&data, &idx, alpha, 0, &kind, 0).unwrap();
                let f1 = fit_outcome_localized(&data, &idx, alpha, 1, &kind, 0).unwrap();
                let q = alloc::vec![0.25, 0.75];
                assert!(abs(f0.predict(&q, 0).unwrap() - math::exp(-c / alpha)) < 1e-10);
                assert!(abs(f1.predict(&q, 1).unwrap() - c * math::exp(-c / alpha)) < 1e-10);
            }
        }
    }

    #[test]
    fn small_action_cells_fall_back_to_the_pooled_fit() {
        let mut rng = rng::stream(4, label::NUISANCE);
        let samples = (0..120)
            .map(|i| LoggedSample {
                state: alloc::vec![rng.gen::<f64>()],
                // action 1 gets only 5 samples
                action: usize::from(i % 24 == 0),
                reward: rng.gen(),
                propensity: None,
            })
            .collect();
        let data = Dataset::new(samples, 2, 1).unwrap();
        let model = fit_outcome_localized(
            &data,
            &all_indices(&data),
            1.0,
            0,
            &OutcomeKind::Knn { k: 5 },
            0,
        )
        .unwrap();
        assert_eq!(model.pooled_actions(), &[1]);
        let p = model.predict(&[0.5], 1).unwrap();
        assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn outcome_predictions_stay_in_unit_interval() {
        let data = uniform_logged_dataset(300, 3, 9);
        let idx = all_indices(&data);
        let mut rng = rng::stream(10, label::NUISANCE);
        for kind in [
            OutcomeKind::Knn { k: 3 },
            OutcomeKind::Kernel { bandwidth: 0.05 },
            OutcomeKind::Zero,
        ] {
            for &(alpha, j) in &[(0.01, 0), (0.01, 1), (100.0, 0), (100.0, 1)] {
                let model = fit_outcome_localized(&data, &idx, alpha, j, &kind, 0).unwrap();
                for _ in 0..25 {
                    let q =
                        alloc::vec![rng.gen::<f64>() * 2.0 - 1.0, rng.gen::<f64>() * 2.0 - 1.0];
                    let p = model.predict(&q, rng.gen_range(0..3)).unwrap();
                    assert!((0.0..=1.0).contains(&p), "prediction {p} out of range");
                }
            }
        }
    }

    #[test]
    fn knn_outcome_tracks_the_closed_form_conditional_moment() {
        let env = Environment::Softmax5(Softmax5Env::standard());
        let data = env.sample_dataset(4000, 23, false).unwrap();
        let n = data.len();
        let (train, held): (Vec<usize>, Vec<usize>) = (0..n).partition(|i| i % 8 != 0);
        let alpha = 1.0;
        let model =
            fit_outcome_localized(&data, &train, alpha, 0, &OutcomeKind::Knn { k: 64 }, 0)
                .unwrap();
        // tolerance from the model's own held-out error: per-point smearing
        // of the target noise, then 3 standard errors of slack on top
        let mut mse = 0.0;
        for &i in &held {
            let s = data.sample(i);
            let gap = model.predict(&s.state, s.action).unwrap()
                - math::exp(-s.reward / alpha);
            mse += gap * gap / held.len() as f64;
        }
        let budget = 3.0 * math::sqrt(mse);
        let raw = Softmax5Env::standard();
        let mut rng = rng::stream(31, label::NUISANCE);
        for _ in 0..20 {
            let q = alloc::vec![rng.gen::<f64>() * 2.0 - 1.0, rng.gen::<f64>() * 2.0 - 1.0];
            let a = rng.gen_range(0..5);
            let truth = clipped_gaussian_w(raw.raw_mean(&q, a), raw.sigmas()[a], alpha, 0);
            let pred = model.predict(&q, a).unwrap();
            assert!(
                abs(pred - truth) < budget,
                "prediction {pred} vs truth {truth} (budget {budget})"
            );
        }
    }

    #[test]
    fn continuum_weights_sum_to_one_everywhere() {
        let data = uniform_logged_dataset(400, 3, 12);
        let idx = all_indices(&data);
        let mut rng = rng::stream(13, label::NUISANCE);
        for kind in [
            WeightKind::Knn { k: 9 },
            WeightKind::Kernel { bandwidth: 0.3 },
            WeightKind::TreeEnsemble { trees: 11 },
        ] {
            let model = fit_continuum_weights(&data, &idx, &kind, 77).unwrap();
            for _ in 0..100 {
                let q = alloc::vec![rng.gen::<f64>() * 2.0 - 1.0, rng.gen::<f64>() * 2.0 - 1.0];
                let pairs = model.weights(&q, rng.gen_range(0..3)).unwrap();
                let total: f64 = pairs.iter().map(|&(_, w)| w).sum();
                assert!(abs(total - 1.0) < 1e-10, "weights sum to {total}");
                assert!(pairs.iter().all(|&(_, w)| w >= 0.0));
            }
        }
    }

    #[test]
    fn single_neighbor_weight_lands_on_the_nearest_point() {
        let data = uniform_logged_dataset(50, 2, 21);
        let idx = all_indices(&data);
        let model =
            fit_continuum_weights(&data, &idx, &WeightKind::Knn { k: 1 }, 0).unwrap();
        let target = data.sample(17);
        let pairs = model.weights(&target.state, target.action).unwrap();
        assert_eq!(pairs, alloc::vec![(17, 1.0)]);
        // and f0 is then exactly the single tilted reward
        let f = model.f0(&target.state, target.action, 0.8).unwrap();
        assert!(abs(f - math::exp(-target.reward / 0.8)) < 1e-15);
    }

    #[test]
    fn tiny_bandwidth_kernel_concentrates_on_an_exact_match() {
        let data = uniform_logged_dataset(60, 2, 25);
        let idx = all_indices(&data);
        let model =
            fit_continuum_weights(&data, &idx, &WeightKind::Kernel { bandwidth: 1e-3 }, 0)
                .unwrap();
        let target = data.sample(5);
        let pairs = model.weights(&target.state, target.action).unwrap();
        let w5: f64 = pairs.iter().filter(|&&(i, _)| i == 5).map(|&(_, w)| w).sum();
        assert!(w5 > 1.0 - 1e-12, "weight on the matching point is {w5}");
    }

    #[test]
    fn two_point_continuum_f0_matches_direct_arithmetic() {
        let samples = alloc::vec![
            LoggedSample { state: alloc::vec![0.0], action: 0, reward: 0.0, propensity: None },
            LoggedSample { state: alloc::vec![1.0], action: 0, reward: 1.0, propensity: None },
        ];
        let data = Dataset::new(samples, 1, 1).unwrap();
        let model =
            fit_continuum_weights(&data, &[0, 1], &WeightKind::Knn { k: 2 }, 0).unwrap();
        let f = model.f0(&[0.5], 0, 1.0).unwrap();
        assert!(abs(f - 0.6839397205857212) < 1e-12);
    }

    #[test]
    fn continuum_f0_is_monotone_in_alpha_and_bounded() {
        let data = uniform_logged_dataset(200, 3, 30);
        let idx = all_indices(&data);
        let mut rng = rng::stream(44, label::NUISANCE);
        for kind in [
            WeightKind::Knn { k: 5 },
            WeightKind::Kernel { bandwidth: 0.2 },
            WeightKind::TreeEnsemble { trees: 7 },
        ] {
            let model = fit_continuum_weights(&data, &idx, &kind, 5).unwrap();
            for _ in 0..50 {
                let q = alloc::vec![rng.gen::<f64>() * 2.0 - 1.0, rng.gen::<f64>() * 2.0 - 1.0];
                let a = rng.gen_range(0..3);
                let mut prev = 0.0;
                for &alpha in &[0.05, 0.1, 0.5, 1.0, 10.0, 1e6] {
                    let f = model.f0(&q, a, alpha).unwrap();
                    assert!(f > 0.0 && f <= 1.0);
                    assert!(f >= prev, "f0 decreased in alpha");
                    prev = f;
                }
                // α → ∞ limit is 1
                assert!(abs(model.f0(&q, a, 1e12).unwrap() - 1.0) < 1e-10);
            }
        }
    }

    #[test]
    fn continuum_f0_is_lipschitz_above_the_floor() {
        let data = uniform_logged_dataset(150, 2, 33);
        let idx = all_indices(&data);
        let model =
            fit_continuum_weights(&data, &idx, &WeightKind::TreeEnsemble { trees: 5 }, 3)
                .unwrap();
        let floor = 0.05;
        let mut rng = rng::stream(50, label::NUISANCE);
        for _ in 0..500 {
            let q = alloc::vec![rng.gen::<f64>() * 2.0 - 1.0, rng.gen::<f64>() * 2.0 - 1.0];
            let a = rng.gen_range(0..2);
            let x = floor + rng.gen::<f64>() * 5.0;
            let y = floor + rng.gen::<f64>() * 5.0;
            let fx = model.f0(&q, a, x).unwrap();
            let fy = model.f0(&q, a, y).unwrap();
            assert!(abs(fx - fy) <= abs(x - y) / (floor * floor) + 1e-15);
        }
    }

    #[test]
    fn tree_weights_are_reproducible_per_seed() {
        let data = uniform_logged_dataset(100, 2, 40);
        let idx = all_indices(&data);
        let kind = WeightKind::TreeEnsemble { trees: 9 };
        let a = fit_continuum_weights(&data, &idx, &kind, 8).unwrap();
        let b = fit_continuum_weights(&data, &idx, &kind, 8).unwrap();
        let c = fit_continuum_weights(&data, &idx, &kind, 9).unwrap();
        let q = alloc::vec![0.1, -0.6];
        assert_eq!(a.weights(&q, 1).unwrap(), b.weights(&q, 1).unwrap());
        assert_ne!(a.weights(&q, 1).unwrap(), c.weights(&q, 1).unwrap());
    }
}
