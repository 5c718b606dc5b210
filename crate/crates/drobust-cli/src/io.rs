//! File formats the harness reads and writes.
//!
//! Everything here round-trips: each writer has a reader and the pair is
//! lossless (floats are printed in shortest-round-trip form). The formats:
//!
//! - dataset CSV with header `s0,...,s{d-1},action,reward[,propensity]`,
//! - long-format result CSVs (one row per run),
//! - evaluation records and policies as JSON documents.

use std::collections::BTreeMap;
use std::path::Path;

use drobust_core::types::{Dataset, EvalTheta, LoggedSample, Policy};
use drobust_core::ldrope::LdropeDiagnostics;
use drobust_core::weighted::{DegeneracyStatus, WeightedDroResult, WeightedSample};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Shortest-round-trip float text (`Display` guarantees re-parsing yields
/// the identical bits; infinities print as `inf`).
fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn parse_f64(text: &str, what: &str) -> Result<f64, CliError> {
    text.parse::<f64>().map_err(|_| CliError::data(format!("{what}: cannot parse '{text}'")))
}

// ---------------------------------------------------------------------------
// dataset CSV
// ---------------------------------------------------------------------------

/// Write a dataset in the core CSV format. The propensity column is
/// included exactly when every sample logs one.
pub fn write_dataset_csv(path: &Path, data: &Dataset) -> Result<(), CliError> {
    let with_prop = data.samples().iter().all(|s| s.propensity.is_some());
    if !with_prop && data.samples().iter().any(|s| s.propensity.is_some()) {
        return Err(CliError::data(
            "dataset mixes logged and missing propensities; cannot pick a column layout"
                .to_string(),
        ));
    }
    let mut w = csv::Writer::from_path(path)?;
    let d = data.state_dim();
    let mut header: Vec<String> = (0..d).map(|i| format!("s{i}")).collect();
    header.push("action".to_string());
    header.push("reward".to_string());
    if with_prop {
        header.push("propensity".to_string());
    }
    w.write_record(&header)?;
    for s in data.samples() {
        let mut row: Vec<String> = s.state.iter().map(|v| fmt_f64(*v)).collect();
        row.push(s.action.to_string());
        row.push(fmt_f64(s.reward));
        if with_prop {
            row.push(fmt_f64(s.propensity.expect("checked above")));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(CliError::from)?;
    Ok(())
}

/// Read a dataset CSV. The action count is inferred as max+1 over the
/// logged actions, raised to `min_actions` when the caller knows the true
/// arm count (actions the log never chose still exist).
pub fn read_dataset_csv(path: &Path, min_actions: Option<usize>) -> Result<Dataset, CliError> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| CliError::data(format!("cannot open {}: {e}", path.display())))?;
    let header = r.headers()?.clone();
    let cols: Vec<&str> = header.iter().collect();
    let d = cols.iter().take_while(|c| c.starts_with('s')).count();
    for (i, c) in cols.iter().enumerate().take(d) {
        if *c != format!("s{i}") {
            return Err(CliError::data(format!(
                "{}: state columns must be s0..s{{d-1}} in order, found '{c}'",
                path.display()
            )));
        }
    }
    let with_prop = match &cols[d..] {
        ["action", "reward"] => false,
        ["action", "reward", "propensity"] => true,
        other => {
            return Err(CliError::data(format!(
                "{}: expected action,reward[,propensity] after the state columns, found {:?}",
                path.display(),
                other
            )))
        }
    };
    if d == 0 {
        return Err(CliError::data(format!("{}: no state columns", path.display())));
    }

    let mut samples = Vec::new();
    let mut max_action = 0usize;
    for (line, record) in r.records().enumerate() {
        let record = record?;
        let at = |j: usize| -> &str { record.get(j).unwrap_or("") };
        let mut state = Vec::with_capacity(d);
        for j in 0..d {
            state.push(parse_f64(at(j), &format!("row {} s{j}", line + 1))?);
        }
        let action: usize = at(d)
            .parse()
            .map_err(|_| CliError::data(format!("row {} action: '{}'", line + 1, at(d))))?;
        max_action = max_action.max(action);
        let reward = parse_f64(at(d + 1), &format!("row {} reward", line + 1))?;
        let propensity = if with_prop {
            Some(parse_f64(at(d + 2), &format!("row {} propensity", line + 1))?)
        } else {
            None
        };
        samples.push(LoggedSample { state, action, reward, propensity });
    }
    if samples.is_empty() {
        return Err(CliError::data(format!("{}: no data rows", path.display())));
    }
    let actions = (max_action + 1).max(min_actions.unwrap_or(0));
    Dataset::new(samples, actions, d).map_err(CliError::from)
}

// ---------------------------------------------------------------------------
// result CSVs
// ---------------------------------------------------------------------------

/// One evaluation run in the long-format results CSV
/// (`method,delta,n,seed,estimate,truth,sq_err,status,wall_ms`).
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: String,
    pub delta: f64,
    pub n: usize,
    pub seed: u64,
    /// `None` prints as an empty field; infinity prints as `inf`.
    pub estimate: Option<f64>,
    pub truth: Option<f64>,
    pub sq_err: Option<f64>,
    pub status: String,
    pub wall_ms: u64,
}

/// One learning run (`method,delta,n,seed,value_hat,oracle_value,
/// oracle_regret,status,wall_ms`).
#[derive(Debug, Clone, PartialEq)]
pub struct LearnRow {
    pub method: String,
    pub delta: f64,
    pub n: usize,
    pub seed: u64,
    pub value_hat: Option<f64>,
    pub oracle_value: Option<f64>,
    pub oracle_regret: Option<f64>,
    pub status: String,
    pub wall_ms: u64,
}

fn opt_to_field(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn field_to_opt(text: &str, what: &str) -> Result<Option<f64>, CliError> {
    if text.is_empty() {
        Ok(None)
    } else {
        parse_f64(text, what).map(Some)
    }
}

/// Deterministic output order: (method, delta, n, seed).
pub fn canonical_sort(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(a.delta.total_cmp(&b.delta))
            .then(a.n.cmp(&b.n))
            .then(a.seed.cmp(&b.seed))
    });
}

pub fn write_result_rows(path: &Path, rows: &[ResultRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "delta", "n", "seed", "estimate", "truth", "sq_err", "status", "wall_ms"])?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            fmt_f64(r.delta),
            r.n.to_string(),
            r.seed.to_string(),
            opt_to_field(r.estimate),
            opt_to_field(r.truth),
            opt_to_field(r.sq_err),
            r.status.clone(),
            r.wall_ms.to_string(),
        ])?;
    }
    w.flush().map_err(CliError::from)?;
    Ok(())
}

pub fn read_result_rows(path: &Path) -> Result<Vec<ResultRow>, CliError> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| CliError::data(format!("cannot open {}: {e}", path.display())))?;
    let expected = ["method", "delta", "n", "seed", "estimate", "truth", "sq_err", "status", "wall_ms"];
    let header: Vec<&str> = r.headers()?.iter().collect();
    if header != expected {
        return Err(CliError::data(format!(
            "{}: unexpected results header {header:?}",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for record in r.records() {
        let rec = record?;
        let at = |j: usize| rec.get(j).unwrap_or("");
        rows.push(ResultRow {
            method: at(0).to_string(),
            delta: parse_f64(at(1), "delta")?,
            n: at(2).parse().map_err(|_| CliError::data(format!("n: '{}'", at(2))))?,
            seed: at(3).parse().map_err(|_| CliError::data(format!("seed: '{}'", at(3))))?,
            estimate: field_to_opt(at(4), "estimate")?,
            truth: field_to_opt(at(5), "truth")?,
            sq_err: field_to_opt(at(6), "sq_err")?,
            status: at(7).to_string(),
            wall_ms: at(8).parse().map_err(|_| CliError::data(format!("wall_ms: '{}'", at(8))))?,
        });
    }
    Ok(rows)
}

pub fn write_learn_rows(path: &Path, rows: &[LearnRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "method", "delta", "n", "seed", "value_hat", "oracle_value", "oracle_regret", "status",
        "wall_ms",
    ])?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            fmt_f64(r.delta),
            r.n.to_string(),
            r.seed.to_string(),
            opt_to_field(r.value_hat),
            opt_to_field(r.oracle_value),
            opt_to_field(r.oracle_regret),
            r.status.clone(),
            r.wall_ms.to_string(),
        ])?;
    }
    w.flush().map_err(CliError::from)?;
    Ok(())
}

pub fn read_learn_rows(path: &Path) -> Result<Vec<LearnRow>, CliError> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| CliError::data(format!("cannot open {}: {e}", path.display())))?;
    let expected = [
        "method", "delta", "n", "seed", "value_hat", "oracle_value", "oracle_regret", "status",
        "wall_ms",
    ];
    let header: Vec<&str> = r.headers()?.iter().collect();
    if header != expected {
        return Err(CliError::data(format!(
            "{}: unexpected learn-results header {header:?}",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for record in r.records() {
        let rec = record?;
        let at = |j: usize| rec.get(j).unwrap_or("");
        rows.push(LearnRow {
            method: at(0).to_string(),
            delta: parse_f64(at(1), "delta")?,
            n: at(2).parse().map_err(|_| CliError::data(format!("n: '{}'", at(2))))?,
            seed: at(3).parse().map_err(|_| CliError::data(format!("seed: '{}'", at(3))))?,
            value_hat: field_to_opt(at(4), "value_hat")?,
            oracle_value: field_to_opt(at(5), "oracle_value")?,
            oracle_regret: field_to_opt(at(6), "oracle_regret")?,
            status: at(7).to_string(),
            wall_ms: at(8).parse().map_err(|_| CliError::data(format!("wall_ms: '{}'", at(8))))?,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// evaluation record JSON
// ---------------------------------------------------------------------------

/// Human-readable label for a degeneracy regime.
pub fn status_label(status: DegeneracyStatus) -> &'static str {
    match status {
        DegeneracyStatus::Finite => "finite",
        DegeneracyStatus::AlphaInfinite => "alpha-infinite",
        DegeneracyStatus::AlphaZero => "alpha-zero",
    }
}

/// Per-fold trace inside an evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub alpha_init: f64,
    /// [propensity kind, outcome kind].
    pub nuisance_kinds: [String; 2],
}

/// One evaluation result as a JSON document. Degenerate estimates carry
/// `null` in place of the unusable numbers plus an explanatory flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub alpha: Option<f64>,
    pub w0: Option<f64>,
    pub w1: Option<f64>,
    pub value: Option<f64>,
    pub flags: Vec<String>,
    pub per_fold: Vec<FoldRecord>,
}

impl EvalRecord {
    /// Record for a cross-fitted doubly robust run.
    pub fn from_dr(theta: &EvalTheta, diagnostics: &LdropeDiagnostics) -> EvalRecord {
        EvalRecord {
            alpha: Some(theta.alpha),
            w0: Some(theta.w0),
            w1: Some(theta.w1),
            value: Some(theta.value),
            flags: diagnostics.flags.iter().map(|f| f.label().to_string()).collect(),
            per_fold: diagnostics
                .per_fold
                .iter()
                .map(|f| FoldRecord {
                    alpha_init: f.alpha_init,
                    nuisance_kinds: [f.propensity_kind.clone(), f.outcome_kind.clone()],
                })
                .collect(),
        }
    }

    /// Record for a weighted (IPS/SNIPS) run. The moments are recomputed
    /// at the reported α̂; in the degenerate regimes they are `null` and a
    /// flag names the regime.
    pub fn from_weighted(result: &WeightedDroResult, ws: &WeightedSample) -> EvalRecord {
        let mut flags = Vec::new();
        let finite = result.status == DegeneracyStatus::Finite;
        if !finite {
            flags.push(status_label(result.status).to_string());
        }
        let (w0, w1) = if finite {
            let n = ws.len() as f64;
            let mut m0 = 0.0;
            let mut m1 = 0.0;
            for (w, r) in ws.weights().iter().zip(ws.rewards()) {
                let t = (-r / result.alpha).exp();
                m0 += w * t / n;
                m1 += w * r * t / n;
            }
            (Some(m0), Some(m1))
        } else {
            (None, None)
        };
        EvalRecord {
            alpha: finite.then_some(result.alpha),
            w0,
            w1,
            value: (finite || result.status == DegeneracyStatus::AlphaZero)
                .then_some(result.value),
            flags,
            per_fold: Vec::new(),
        }
    }
}

/// Write evaluation records keyed by a short run label, sorted by key.
pub fn write_records(path: &Path, records: &BTreeMap<String, EvalRecord>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(records)
        .map_err(|e| CliError::data(format!("serializing records: {e}")))?;
    std::fs::write(path, text + "\n").map_err(CliError::from)
}

// ---------------------------------------------------------------------------
// policy JSON
// ---------------------------------------------------------------------------

/// Dimension block of a policy document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub state_dim: usize,
    pub action_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    /// Row count for tabular policies (states are integer-coded).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub states: Option<usize>,
}

/// A policy as a JSON document, with enough context to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDoc {
    /// `linear-softmax`, `mlp-softmax`, or `tabular`.
    pub kind: String,
    pub dims: PolicyDims,
    pub parameters: Vec<f64>,
    /// The training settings that produced it (`null` for handwritten or
    /// oracle policies).
    pub training_config: Option<serde_json::Value>,
    /// Final training objective (`null` when not learned).
    pub final_objective: Option<f64>,
}

impl PolicyDoc {
    pub fn from_policy(
        policy: &Policy,
        training_config: Option<serde_json::Value>,
        final_objective: Option<f64>,
    ) -> PolicyDoc {
        let (kind, dims, parameters) = match policy {
            Policy::Tabular { rows } => (
                "tabular",
                PolicyDims {
                    state_dim: 1,
                    action_count: rows.first().map_or(0, Vec::len),
                    hidden: None,
                    states: Some(rows.len()),
                },
                rows.iter().flatten().copied().collect(),
            ),
            Policy::LinearSoftmax { params, state_dim, action_count } => (
                "linear-softmax",
                PolicyDims {
                    state_dim: *state_dim,
                    action_count: *action_count,
                    hidden: None,
                    states: None,
                },
                params.clone(),
            ),
            Policy::MlpSoftmax { params, state_dim, hidden, action_count } => (
                "mlp-softmax",
                PolicyDims {
                    state_dim: *state_dim,
                    action_count: *action_count,
                    hidden: Some(*hidden),
                    states: None,
                },
                params.clone(),
            ),
        };
        PolicyDoc {
            kind: kind.to_string(),
            dims,
            parameters,
            training_config,
            final_objective,
        }
    }

    pub fn to_policy(&self) -> Result<Policy, CliError> {
        let p = self.parameters.clone();
        let d = &self.dims;
        match self.kind.as_str() {
            "tabular" => {
                let states = d.states.ok_or_else(|| {
                    CliError::data("tabular policy document needs dims.states".to_string())
                })?;
                if states * d.action_count != p.len() {
                    return Err(CliError::data(format!(
                        "tabular policy: {} parameters for {}x{} table",
                        p.len(),
                        states,
                        d.action_count
                    )));
                }
                let rows = p.chunks(d.action_count).map(<[f64]>::to_vec).collect();
                Ok(Policy::Tabular { rows })
            }
            "linear-softmax" => {
                let expect = d.action_count * (d.state_dim + 1);
                if p.len() != expect {
                    return Err(CliError::data(format!(
                        "linear-softmax policy: {} parameters, expected {expect}",
                        p.len()
                    )));
                }
                Ok(Policy::LinearSoftmax {
                    params: p,
                    state_dim: d.state_dim,
                    action_count: d.action_count,
                })
            }
            "mlp-softmax" => {
                let hidden = d.hidden.ok_or_else(|| {
                    CliError::data("mlp-softmax policy document needs dims.hidden".to_string())
                })?;
                let expect =
                    hidden * d.state_dim + hidden + d.action_count * hidden + d.action_count;
                if p.len() != expect {
                    return Err(CliError::data(format!(
                        "mlp-softmax policy: {} parameters, expected {expect}",
                        p.len()
                    )));
                }
                Ok(Policy::MlpSoftmax {
                    params: p,
                    state_dim: d.state_dim,
                    hidden,
                    action_count: d.action_count,
                })
            }
            other => Err(CliError::data(format!("unknown policy kind '{other}'"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::data(format!("serializing policy: {e}")))?;
        std::fs::write(path, text + "\n").map_err(CliError::from)
    }

    pub fn load(path: &Path) -> Result<PolicyDoc, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
    }
}
