//! Sidecar cache for Monte Carlo oracle results.
//!
//! Ground-truth values and best-in-class reference policies dominate sweep
//! runtime, but depend only on (environment, policy, δ, MC settings) — not
//! on the logged data. They are therefore computed once and stored in a
//! JSON sidecar next to the output file, keyed by a content hash of the
//! request, so reruns and neighboring sweep cells skip the recomputation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use drobust_core::types::Policy;
use serde::{Deserialize, Serialize};

use crate::io::PolicyDoc;
use crate::CliError;

/// FNV-1a 64-bit content hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Stable fingerprint of a policy (kind, dims, and exact parameter bits).
pub fn policy_fingerprint(policy: &Policy) -> u64 {
    let doc = PolicyDoc::from_policy(policy, None, None);
    let mut bytes = format!("{}|{:?}", doc.kind, doc.dims).into_bytes();
    for p in &doc.parameters {
        bytes.extend_from_slice(&p.to_bits().to_le_bytes());
    }
    fnv1a64(&bytes)
}

/// A cached oracle value with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueEntry {
    pub value: f64,
    pub se: f64,
}

/// A cached best-in-class reference policy and its oracle value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEntry {
    pub doc: PolicyDoc,
    pub value: f64,
}

/// The sidecar store. BTreeMaps keep the serialized form deterministic.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OracleCache {
    #[serde(default)]
    values: BTreeMap<String, ValueEntry>,
    #[serde(default)]
    policies: BTreeMap<String, PolicyEntry>,
}

impl OracleCache {
    /// Load a cache, treating a missing file as empty. A present but
    /// unparsable file is an error: silently dropping a cache would
    /// silently change runtimes and (for MC ties) reproducibility.
    pub fn load(path: &Path) -> Result<OracleCache, CliError> {
        match std::fs::read_to_string(path) {
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| CliError::data(format!("{}: corrupt cache: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(OracleCache::default()),
            Err(e) => Err(CliError::data(format!("{}: {e}", path.display()))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::data(format!("serializing cache: {e}")))?;
        std::fs::write(path, text + "\n").map_err(CliError::from)
    }

    /// Key for an oracle-value request.
    pub fn value_key(
        env_json: &str,
        policy: &Policy,
        delta: f64,
        mc_samples: usize,
        seed: u64,
    ) -> String {
        let text = format!(
            "value|{env_json}|{:016x}|{}|{mc_samples}|{seed}",
            policy_fingerprint(policy),
            delta.to_bits(),
        );
        format!("{:016x}", fnv1a64(text.as_bytes()))
    }

    /// Key for a best-in-class policy request (`class` describes the
    /// template, e.g. `linear-softmax` or `mlp-softmax:32`).
    pub fn policy_key(
        env_json: &str,
        class: &str,
        delta: f64,
        restarts: usize,
        mc_samples: usize,
        seed: u64,
    ) -> String {
        let text = format!(
            "best|{env_json}|{class}|{}|{restarts}|{mc_samples}|{seed}",
            delta.to_bits()
        );
        format!("{:016x}", fnv1a64(text.as_bytes()))
    }

    pub fn get_value(&self, key: &str) -> Option<ValueEntry> {
        self.values.get(key).copied()
    }

    pub fn put_value(&mut self, key: String, entry: ValueEntry) {
        self.values.insert(key, entry);
    }

    pub fn get_policy(&self, key: &str) -> Option<&PolicyEntry> {
        self.policies.get(key)
    }

    pub fn put_policy(&mut self, key: String, entry: PolicyEntry) {
        self.policies.insert(key, entry);
    }
}

/// Default sidecar path: `<out>.oracle.json`.
pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".oracle.json");
    out.with_file_name(name)
}
