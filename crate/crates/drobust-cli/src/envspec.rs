//! Named simulation environments and their JSON spec form.
//!
//! Commands that need ground truth take an environment by name; sweep
//! configs embed the same spec as JSON. The spec is tiny on purpose: the
//! environments themselves are fixed test instruments, and everything a
//! run needs to be replayed is the name, the optional mean scale, and the
//! seeds recorded elsewhere.

use drobust_core::simulator::{DiscreteEnv, Environment, Softmax5Env};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Serializable environment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    /// Environment name: `softmax5`, `softmax5-symmetric`, or
    /// `discrete-default`.
    pub name: String,
    /// Scale on the softmax environment's raw action means (1 = standard,
    /// 0 = action-symmetric). Ignored by the discrete environment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_scale: Option<f64>,
}

impl EnvSpec {
    /// Spec for a bare name.
    pub fn named(name: &str) -> EnvSpec {
        EnvSpec { name: name.to_string(), mean_scale: None }
    }

    /// Instantiate the environment.
    pub fn build(&self) -> Result<Environment, CliError> {
        let env = match (self.name.as_str(), self.mean_scale) {
            ("softmax5", None) => Environment::Softmax5(Softmax5Env::standard()),
            ("softmax5", Some(scale)) => Environment::Softmax5(
                Softmax5Env::with_mean_scale(scale)
                    .map_err(|e| CliError::config(format!("bad mean_scale: {e}")))?,
            ),
            ("softmax5-symmetric", None) => {
                Environment::Softmax5(Softmax5Env::action_symmetric())
            }
            ("softmax5-symmetric", Some(_)) => {
                return Err(CliError::config(
                    "softmax5-symmetric fixes mean_scale = 0; drop the override".to_string(),
                ))
            }
            ("discrete-default", _) => Environment::Discrete(DiscreteEnv::two_state_default()),
            (other, _) => {
                return Err(CliError::config(format!(
                    "unknown environment '{other}' (expected softmax5, softmax5-symmetric, \
                     or discrete-default)"
                )))
            }
        };
        Ok(env)
    }

    /// Canonical JSON form (also the content-hash input for oracle caching).
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("EnvSpec serializes")
    }
}
