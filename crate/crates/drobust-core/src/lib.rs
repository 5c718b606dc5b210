//! Distributionally robust off-policy evaluation and learning from logged
//! bandit data.
//!
//! Logged data consists of (state, action, reward) triples collected under a
//! behavior policy. For a target policy π, the quantity of interest is its
//! worst-case expected reward over all environments within divergence radius
//! δ of the data-generating one:
//!
//! ```text
//! V_δ(π) = inf { E_Q[R(π(S))] : KL(Q ‖ P0) ≤ δ }
//!        = max_{α > 0}  −α·log W(π, α) − α·δ,      W(π, α) = E[exp(−R/α)]
//! ```
//!
//! The crate provides:
//!
//! - [`dual`]: exact duals on finite reward distributions (KL, general
//!   f-divergence, Cressie-Read), maximizers, and worst-case (tilted)
//!   distribution recovery.
//! - [`weighted`]: IPS / self-normalized IPS estimation of the dual and the
//!   classification of its degenerate regimes (α̂ = 0 or α̂ = ∞).
//! - [`nuisance`]: behavior-propensity models, localized outcome regressions
//!   f_j(s,a) = E[R^j e^{−R/α}|s,a], and continuum weight functions.
//! - [`ldrope`]: localized doubly robust evaluation — cross-fitted moment
//!   system solved by scalar or multidimensional Newton iteration.
//! - [`cdrople`]: continuum doubly robust policy learning — alternating
//!   α-maximization and softmax policy-gradient descent with restarts.
//! - [`simulator`]: data-generating environments plus Monte Carlo / exact
//!   ground-truth oracles for values and regret.
//!
//! The crate is `no_std`-compatible (requires `alloc`); the default `std`
//! feature only widens error-trait integration and RNG conveniences. All
//! randomized operations take explicit seeds and derive independent
//! counter-based streams from them, so every result is replayable. All
//! reductions are fixed-order, so results are independent of thread counts
//! in any embedding.

#![cfg_attr(not(feature = "std"), no_std)]
#![warn(missing_docs)]

extern crate alloc;

pub mod cdrople;
pub mod dual;
pub mod error;
pub mod ldrope;
pub(crate) mod math;
pub mod nuisance;
pub mod opt;
pub mod rng;
pub mod simulator;
pub mod types;
pub mod weighted;

pub use error::{Error, Result};
