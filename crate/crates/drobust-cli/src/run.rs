//! The command surface and each subcommand's implementation.
//!
//! Six commands: `simulate` (draw a dataset), `evaluate` (robust value of
//! a fixed policy), `learn` (train a policy), `degeneracy` (regime report
//! for a dataset/policy/δ triple), `oracle` (ground truth), and `sweep`
//! (a full experiment grid from a JSON config, parallel over cells).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use drobust_core::cdrople::{
    cdr2opl, ContinuumPlan, LearnConfig, LearnPropensity, PolicyKind,
};
use drobust_core::ldrope::{ldr2ope, LdropeConfig, NewtonMethod, NuisanceSpec, PropensityPlan};
use drobust_core::nuisance::{fit_propensity, OutcomeKind, PropensityKind, WeightKind};
use drobust_core::rng::{self, label};
use drobust_core::simulator::Environment;
use drobust_core::types::{Dataset, Policy};
use drobust_core::weighted::{
    degeneracy_classify, propensity_ratios, snips_normalize, weighted_dro_value, BehaviorSource,
    DegeneracyStats, DegeneracyStatus, WeightedSample,
};
use serde::{Deserialize, Serialize};

use crate::baseline::{snips_max, SnipsMaxConfig};
use crate::cache::{sidecar_path, OracleCache, PolicyEntry, ValueEntry};
use crate::envspec::EnvSpec;
use crate::io::{
    canonical_sort, read_dataset_csv, status_label, write_dataset_csv, write_learn_rows,
    write_records, write_result_rows, EvalRecord, LearnRow, PolicyDoc, ResultRow,
};
use crate::{job_count, CliError};

/// Distributionally robust off-policy evaluation and learning from logged
/// bandit data.
#[derive(Debug, Parser)]
#[command(name = "drobust", version, about)]
pub struct Cli {
    /// Worker threads for sweeps (default: DROBUST_JOBS, then all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a logged-bandit dataset from a named environment.
    Simulate(SimulateArgs),
    /// Estimate the robust value of a fixed target policy on a dataset.
    Evaluate(EvaluateArgs),
    /// Learn a policy from a dataset.
    Learn(LearnArgs),
    /// Report the degeneracy regime of a dataset/policy/delta triple.
    Degeneracy(DegeneracyArgs),
    /// Ground-truth robust value of a policy (exact or Monte Carlo).
    Oracle(OracleArgs),
    /// Run an experiment grid from a JSON config, parallel over cells.
    Sweep(SweepArgs),
}

/// Entry point behind `main`: dispatch one parsed command.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Evaluate(args) => cmd_evaluate(&args),
        Command::Learn(args) => cmd_learn(&args),
        Command::Degeneracy(args) => cmd_degeneracy(&args),
        Command::Oracle(args) => cmd_oracle(&args),
        Command::Sweep(args) => cmd_sweep(&args, cli.jobs),
    }
}

// ---------------------------------------------------------------------------
// flag parsing helpers
// ---------------------------------------------------------------------------

fn parse_policy_kind(text: &str) -> Result<PolicyKind, CliError> {
    match text.split_once(':') {
        None if text == "linear" => Ok(PolicyKind::LinearSoftmax),
        Some(("mlp", h)) => {
            let hidden: usize = h
                .parse()
                .map_err(|_| CliError::config(format!("mlp hidden width: '{h}'")))?;
            if hidden == 0 {
                return Err(CliError::config("mlp hidden width must be ≥ 1".to_string()));
            }
            Ok(PolicyKind::MlpSoftmax { hidden })
        }
        _ => Err(CliError::config(format!(
            "unknown policy kind '{text}' (expected linear or mlp:H)"
        ))),
    }
}

/// Cache-key label for a policy class.
fn policy_class_label(kind: &PolicyKind) -> String {
    match kind {
        PolicyKind::LinearSoftmax => "linear-softmax".to_string(),
        PolicyKind::MlpSoftmax { hidden } => format!("mlp-softmax:{hidden}"),
    }
}

fn parse_propensity(text: &str) -> Result<PropensityKind, CliError> {
    match text.split_once(':') {
        None if text == "logistic" => Ok(PropensityKind::MultinomialLogistic),
        Some(("knn", k)) => {
            let k: usize =
                k.parse().map_err(|_| CliError::config(format!("knn neighbor count: '{k}'")))?;
            Ok(PropensityKind::Knn { k })
        }
        _ => Err(CliError::config(format!(
            "unknown propensity kind '{text}' (expected logistic or knn:K)"
        ))),
    }
}

fn parse_outcome(text: &str) -> Result<OutcomeKind, CliError> {
    match text.split_once(':') {
        None if text == "zero" => Ok(OutcomeKind::Zero),
        Some(("knn", k)) => {
            let k: usize =
                k.parse().map_err(|_| CliError::config(format!("knn neighbor count: '{k}'")))?;
            Ok(OutcomeKind::Knn { k })
        }
        Some(("kernel", bw)) => {
            let bandwidth: f64 =
                bw.parse().map_err(|_| CliError::config(format!("kernel bandwidth: '{bw}'")))?;
            Ok(OutcomeKind::Kernel { bandwidth })
        }
        _ => Err(CliError::config(format!(
            "unknown outcome kind '{text}' (expected knn:K, kernel:BW, or zero)"
        ))),
    }
}

fn parse_continuum(text: &str) -> Result<ContinuumPlan, CliError> {
    match text.split_once(':') {
        None if text == "zero" => Ok(ContinuumPlan::Zero),
        Some(("knn", k)) => {
            let k: usize =
                k.parse().map_err(|_| CliError::config(format!("knn neighbor count: '{k}'")))?;
            Ok(ContinuumPlan::Fit(WeightKind::Knn { k }))
        }
        Some(("kernel", bw)) => {
            let bandwidth: f64 =
                bw.parse().map_err(|_| CliError::config(format!("kernel bandwidth: '{bw}'")))?;
            Ok(ContinuumPlan::Fit(WeightKind::Kernel { bandwidth }))
        }
        Some(("trees", t)) => {
            let trees: usize =
                t.parse().map_err(|_| CliError::config(format!("tree count: '{t}'")))?;
            Ok(ContinuumPlan::Fit(WeightKind::TreeEnsemble { trees }))
        }
        _ => Err(CliError::config(format!(
            "unknown outcome-weight kind '{text}' (expected knn:K, kernel:BW, trees:T, or zero)"
        ))),
    }
}

fn parse_newton(text: &str) -> Result<NewtonMethod, CliError> {
    match text {
        "scalar" => Ok(NewtonMethod::Scalar),
        "multidim" => Ok(NewtonMethod::Multidim),
        other => Err(CliError::config(format!(
            "unknown newton method '{other}' (expected scalar or multidim)"
        ))),
    }
}

/// Build the environment named by `--env` / `--mean-scale` flags.
fn build_env(name: &str, mean_scale: Option<f64>) -> Result<(EnvSpec, Environment), CliError> {
    let spec = EnvSpec { name: name.to_string(), mean_scale };
    let env = spec.build()?;
    Ok((spec, env))
}

/// Resolve the policy a command evaluates: an explicit document wins,
/// otherwise the environment's target policy at the given temperature.
fn resolve_policy(
    policy_path: Option<&Path>,
    env: Option<&Environment>,
    temperature: f64,
) -> Result<Policy, CliError> {
    match (policy_path, env) {
        (Some(path), _) => PolicyDoc::load(path)?.to_policy(),
        (None, Some(env)) => env.target_policy(temperature).map_err(CliError::from),
        (None, None) => Err(CliError::config(
            "no policy: pass --policy FILE or --env NAME (with --target-temperature)".to_string(),
        )),
    }
}

fn check_policy_matches(data: &Dataset, policy: &Policy) -> Result<(), CliError> {
    if policy.action_count() != data.action_count() {
        return Err(CliError::data(format!(
            "policy covers {} actions but the dataset has {}",
            policy.action_count(),
            data.action_count()
        )));
    }
    if let Some(dim) = policy_state_dim(policy) {
        if dim != data.state_dim() {
            return Err(CliError::data(format!(
                "policy expects {}-dimensional states but the dataset has {}",
                dim,
                data.state_dim()
            )));
        }
    }
    Ok(())
}

fn policy_state_dim(policy: &Policy) -> Option<usize> {
    policy.is_parametric().then(|| policy.state_dim())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Environment name: softmax5, softmax5-symmetric, or discrete-default.
    #[arg(long)]
    pub env: String,
    /// Scale on the softmax environment's action means.
    #[arg(long)]
    pub mean_scale: Option<f64>,
    /// Number of logged interactions.
    #[arg(long)]
    pub n: usize,
    /// RNG seed.
    #[arg(long)]
    pub seed: u64,
    /// Record the true behavior propensity of each logged action.
    #[arg(long)]
    pub log_propensity: bool,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let (spec, env) = build_env(&args.env, args.mean_scale)?;
    let data = env.sample_dataset(args.n, args.seed, args.log_propensity)?;
    write_dataset_csv(&args.out, &data)?;
    println!(
        "wrote {} rows to {} ({}: state_dim={}, actions={}, propensity column: {})",
        data.len(),
        args.out.display(),
        spec.name,
        env.state_dim(),
        env.action_count(),
        if args.log_propensity { "yes" } else { "no" },
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Dataset CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Environment name; enables oracle truth and the default target policy.
    #[arg(long)]
    pub env: Option<String>,
    /// Scale on the softmax environment's action means.
    #[arg(long)]
    pub mean_scale: Option<f64>,
    /// Target-policy temperature when the target comes from the environment.
    #[arg(long, default_value_t = 1.0)]
    pub target_temperature: f64,
    /// Explicit target policy document (overrides the environment target).
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// Estimators to run (comma-separated): ldr2ope, snips, ips.
    #[arg(long = "method", value_delimiter = ',', default_values_t = [String::from("ldr2ope"), String::from("snips")])]
    pub methods: Vec<String>,
    /// Divergence-ball radii (comma-separated).
    #[arg(long = "delta", value_delimiter = ',', required = true)]
    pub deltas: Vec<f64>,
    /// Use the logged propensity column instead of fitting a model.
    #[arg(long)]
    pub known_propensity: bool,
    /// Propensity model when fitting: logistic or knn:K.
    #[arg(long, default_value = "logistic")]
    pub propensity: String,
    /// Outcome-regression kind for ldr2ope: knn:K, kernel:BW, or zero.
    #[arg(long, default_value = "knn:50")]
    pub outcome: String,
    /// Cross-fitting folds for ldr2ope.
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Localization re-runs after the first pass for ldr2ope.
    #[arg(long, default_value_t = 0)]
    pub recursions: usize,
    /// Dual root finder for ldr2ope: scalar or multidim.
    #[arg(long, default_value = "scalar")]
    pub newton: String,
    /// Clip floor for fitted propensities.
    #[arg(long, default_value_t = 0.01)]
    pub clip_floor: f64,
    /// Seed for cross-fitting splits and nuisance fits (also the seed
    /// column of the output rows).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Monte Carlo states for the oracle truth.
    #[arg(long, default_value_t = 50_000)]
    pub mc_samples: usize,
    /// Seed for the oracle truth draw.
    #[arg(long, default_value_t = 7777)]
    pub oracle_seed: u64,
    /// Results CSV path.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional JSON file of full evaluation records.
    #[arg(long)]
    pub records: Option<PathBuf>,
}

/// Everything an evaluation run needs besides (data, policy, method, δ).
struct EvalOpts {
    known_propensity: bool,
    propensity: PropensityKind,
    outcome: OutcomeKind,
    newton: NewtonMethod,
    folds: usize,
    recursions: usize,
    clip_floor: f64,
}

/// Run one estimator on one dataset at one δ.
///
/// Returns the estimate (infinite under an IPS blow-up, absent when no
/// number is usable), a status label, and the full record.
fn run_eval_method(
    data: &Dataset,
    policy: &Policy,
    method: &str,
    delta: f64,
    opts: &EvalOpts,
    seed: u64,
) -> Result<(Option<f64>, String, EvalRecord), CliError> {
    match method {
        "ldr2ope" => {
            let config = LdropeConfig {
                delta,
                folds: opts.folds,
                recursions: opts.recursions,
                newton: opts.newton,
                seed,
                ..LdropeConfig::new(delta, seed)
            };
            let nuisance = NuisanceSpec::Fitted {
                propensity: if opts.known_propensity {
                    PropensityPlan::Logged
                } else {
                    PropensityPlan::Fit(opts.propensity.clone())
                },
                outcome: opts.outcome.clone(),
                clip_floor: opts.clip_floor,
            };
            let (theta, diagnostics) = ldr2ope(data, policy, &config, &nuisance)?;
            let record = EvalRecord::from_dr(&theta, &diagnostics);
            let status = if record.flags.is_empty() {
                "ok".to_string()
            } else {
                record.flags.join("+")
            };
            Ok((Some(theta.value), status, record))
        }
        "snips" | "ips" => {
            let ratios = importance_ratios(data, policy, opts, seed)?;
            let weights =
                if method == "snips" { snips_normalize(&ratios)? } else { ratios };
            let rewards = data.samples().iter().map(|s| s.reward).collect();
            let ws = WeightedSample::new(weights, rewards)?;
            let result = weighted_dro_value(&ws, delta)?;
            let record = EvalRecord::from_weighted(&result, &ws);
            let estimate = match result.status {
                DegeneracyStatus::Finite | DegeneracyStatus::AlphaZero => Some(result.value),
                DegeneracyStatus::AlphaInfinite => Some(f64::INFINITY),
            };
            Ok((estimate, status_label(result.status).to_string(), record))
        }
        other => Err(CliError::config(format!(
            "unknown evaluation method '{other}' (expected ldr2ope, snips, or ips)"
        ))),
    }
}

/// Importance ratios π(aᵢ|sᵢ)/π̂0(aᵢ|sᵢ): logged column when the caller
/// claims it, otherwise a single propensity fit on the whole dataset.
fn importance_ratios(
    data: &Dataset,
    policy: &Policy,
    opts: &EvalOpts,
    seed: u64,
) -> Result<Vec<f64>, CliError> {
    if opts.known_propensity {
        return propensity_ratios(data, policy, BehaviorSource::Logged).map_err(CliError::from);
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let model = fit_propensity(
        data,
        &indices,
        &opts.propensity,
        opts.clip_floor,
        rng::derive(seed, label::NUISANCE),
    )?;
    let mut out = Vec::with_capacity(data.len());
    for s in data.samples() {
        out.push(policy.probs(&s.state)?[s.action] / model.prob(&s.state, s.action)?);
    }
    Ok(out)
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let env = match &args.env {
        Some(name) => Some(build_env(name, args.mean_scale)?),
        None => None,
    };
    let policy =
        resolve_policy(args.policy.as_deref(), env.as_ref().map(|(_, e)| e), args.target_temperature)?;
    let min_actions = env.as_ref().map(|(_, e)| e.action_count());
    let data = read_dataset_csv(&args.data, min_actions)?;
    check_policy_matches(&data, &policy)?;
    let opts = EvalOpts {
        known_propensity: args.known_propensity,
        propensity: parse_propensity(&args.propensity)?,
        outcome: parse_outcome(&args.outcome)?,
        newton: parse_newton(&args.newton)?,
        folds: args.folds,
        recursions: args.recursions,
        clip_floor: args.clip_floor,
    };
    if args.deltas.is_empty() {
        return Err(CliError::config("at least one --delta is required".to_string()));
    }

    // oracle truths, one per δ, through the sidecar cache
    let mut truths: BTreeMap<u64, f64> = BTreeMap::new();
    if let Some((spec, env)) = &env {
        let sidecar = sidecar_path(&args.out);
        let mut cache = OracleCache::load(&sidecar)?;
        for &delta in &args.deltas {
            let key =
                OracleCache::value_key(&spec.to_json(), &policy, delta, args.mc_samples, args.oracle_seed);
            let entry = match cache.get_value(&key) {
                Some(entry) => entry,
                None => {
                    let (value, se) =
                        env.oracle_value(&policy, delta, args.mc_samples, args.oracle_seed)?;
                    let entry = ValueEntry { value, se };
                    cache.put_value(key, entry);
                    entry
                }
            };
            truths.insert(delta.to_bits(), entry.value);
        }
        cache.save(&sidecar)?;
    }

    let mut rows = Vec::new();
    let mut records = BTreeMap::new();
    for method in &args.methods {
        for &delta in &args.deltas {
            let start = Instant::now();
            let (estimate, status, record) =
                run_eval_method(&data, &policy, method, delta, &opts, args.seed)?;
            let wall_ms = start.elapsed().as_millis() as u64;
            let truth = truths.get(&delta.to_bits()).copied();
            let sq_err = match (estimate, truth) {
                (Some(e), Some(t)) => Some((e - t) * (e - t)),
                _ => None,
            };
            println!(
                "{method} delta={delta}: estimate {} status {status} ({wall_ms} ms)",
                estimate.map_or_else(|| "-".to_string(), |e| format!("{e:.6}")),
            );
            rows.push(ResultRow {
                method: method.clone(),
                delta,
                n: data.len(),
                seed: args.seed,
                estimate,
                truth,
                sq_err,
                status,
                wall_ms,
            });
            records.insert(format!("{method}@delta={delta}"), record);
        }
    }
    canonical_sort(&mut rows);
    write_result_rows(&args.out, &rows)?;
    if let Some(path) = &args.records {
        write_records(path, &records)?;
    }
    println!("wrote {} rows to {}", rows.len(), args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// learn
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct LearnArgs {
    /// Dataset CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Learner: cdr2opl or snips-max.
    #[arg(long)]
    pub method: String,
    /// Divergence-ball radius.
    #[arg(long)]
    pub delta: f64,
    /// Environment name; enables the oracle value/regret columns.
    #[arg(long)]
    pub env: Option<String>,
    /// Scale on the softmax environment's action means.
    #[arg(long)]
    pub mean_scale: Option<f64>,
    /// Policy class: linear or mlp:H.
    #[arg(long, default_value = "linear")]
    pub policy_kind: String,
    /// Perturbed restarts.
    #[arg(long, default_value_t = 10)]
    pub restarts: usize,
    /// First-order step size.
    #[arg(long, default_value_t = 0.01)]
    pub learning_rate: f64,
    /// Gradient steps per dual refresh.
    #[arg(long, default_value_t = 10)]
    pub inner_steps: usize,
    /// Outer alternation budget.
    #[arg(long, default_value_t = 40)]
    pub max_outer_iters: usize,
    /// Parameter-change convergence tolerance.
    #[arg(long, default_value_t = 1e-5)]
    pub convergence_tol: f64,
    /// Cross-fitting folds (cdr2opl).
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Use the logged propensity column instead of fitting a model.
    #[arg(long)]
    pub known_propensity: bool,
    /// Propensity model when fitting: logistic or knn:K.
    #[arg(long, default_value = "logistic")]
    pub propensity: String,
    /// Continuum outcome model (cdr2opl): knn:K, kernel:BW, trees:T, or zero.
    #[arg(long, default_value = "knn:50")]
    pub outcome: String,
    /// Clip floor for fitted propensities.
    #[arg(long, default_value_t = 0.01)]
    pub clip_floor: f64,
    /// Seed for folds, nuisance fits, and restarts.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Monte Carlo states for the oracle columns.
    #[arg(long, default_value_t = 50_000)]
    pub mc_samples: usize,
    /// Seed for the oracle draw.
    #[arg(long, default_value_t = 7777)]
    pub oracle_seed: u64,
    /// Also compute oracle regret against the cached best-in-class policy.
    #[arg(long)]
    pub regret: bool,
    /// Restarts for the best-in-class reference search.
    #[arg(long, default_value_t = 10)]
    pub oracle_restarts: usize,
    /// Learned policy JSON path.
    #[arg(long)]
    pub policy_out: PathBuf,
    /// Optional results CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// What one learner run produced.
struct LearnedPolicy {
    policy: Policy,
    value_hat: f64,
    status: String,
}

fn run_learn_method(
    data: &Dataset,
    method: &str,
    delta: f64,
    policy_kind: PolicyKind,
    restarts: usize,
    learning_rate: f64,
    inner_steps: usize,
    max_outer_iters: usize,
    convergence_tol: f64,
    folds: usize,
    known_propensity: bool,
    propensity: &PropensityKind,
    outcome: &ContinuumPlan,
    clip_floor: f64,
    seed: u64,
) -> Result<LearnedPolicy, CliError> {
    match method {
        "cdr2opl" => {
            let config = LearnConfig {
                delta,
                folds,
                policy_kind,
                restarts,
                learning_rate,
                inner_steps,
                max_outer_iters,
                convergence_tol,
                propensity: if known_propensity {
                    LearnPropensity::Logged
                } else {
                    LearnPropensity::Fit(propensity.clone())
                },
                outcome: outcome.clone(),
                clip_floor,
                seed,
            };
            let (policy, diagnostics) = cdr2opl(data, &config)?;
            let value_hat = diagnostics.reports[diagnostics.best_restart].final_objective;
            let status = if diagnostics.excluded_alpha {
                "excluded-alpha".to_string()
            } else {
                "ok".to_string()
            };
            Ok(LearnedPolicy { policy, value_hat, status })
        }
        "snips-max" => {
            let inv_prop = inverse_propensities(data, known_propensity, propensity, clip_floor, seed)?;
            let config = SnipsMaxConfig {
                delta,
                policy_kind,
                restarts,
                learning_rate,
                inner_steps,
                max_outer_iters,
                convergence_tol,
                seed,
            };
            let (policy, reports, best) = snips_max(data, &inv_prop, &config)?;
            Ok(LearnedPolicy {
                policy,
                value_hat: reports[best].final_value,
                status: "ok".to_string(),
            })
        }
        other => Err(CliError::config(format!(
            "unknown learning method '{other}' (expected cdr2opl or snips-max)"
        ))),
    }
}

/// 1/π̂0(aᵢ|sᵢ) for the baseline learner.
fn inverse_propensities(
    data: &Dataset,
    known: bool,
    kind: &PropensityKind,
    clip_floor: f64,
    seed: u64,
) -> Result<Vec<f64>, CliError> {
    if known {
        let mut out = Vec::with_capacity(data.len());
        for (i, s) in data.samples().iter().enumerate() {
            let p = s.propensity.ok_or_else(|| {
                CliError::data(format!("sample {i} has no logged propensity"))
            })?;
            if !(p > 0.0) {
                return Err(CliError::data(format!("sample {i} has propensity {p}")));
            }
            out.push(1.0 / p);
        }
        return Ok(out);
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let model =
        fit_propensity(data, &indices, kind, clip_floor, rng::derive(seed, label::NUISANCE))?;
    let mut out = Vec::with_capacity(data.len());
    for s in data.samples() {
        out.push(1.0 / model.prob(&s.state, s.action)?);
    }
    Ok(out)
}

fn cmd_learn(args: &LearnArgs) -> Result<(), CliError> {
    let env = match &args.env {
        Some(name) => Some(build_env(name, args.mean_scale)?),
        None => None,
    };
    let min_actions = env.as_ref().map(|(_, e)| e.action_count());
    let data = read_dataset_csv(&args.data, min_actions)?;
    let policy_kind = parse_policy_kind(&args.policy_kind)?;
    let propensity = parse_propensity(&args.propensity)?;
    let outcome = parse_continuum(&args.outcome)?;

    let training_config = serde_json::json!({
        "method": args.method,
        "delta": args.delta,
        "policy_kind": args.policy_kind,
        "restarts": args.restarts,
        "learning_rate": args.learning_rate,
        "inner_steps": args.inner_steps,
        "max_outer_iters": args.max_outer_iters,
        "convergence_tol": args.convergence_tol,
        "folds": args.folds,
        "known_propensity": args.known_propensity,
        "propensity": args.propensity,
        "outcome": args.outcome,
        "clip_floor": args.clip_floor,
        "seed": args.seed,
    });

    let start = Instant::now();
    let learned = run_learn_method(
        &data,
        &args.method,
        args.delta,
        policy_kind.clone(),
        args.restarts,
        args.learning_rate,
        args.inner_steps,
        args.max_outer_iters,
        args.convergence_tol,
        args.folds,
        args.known_propensity,
        &propensity,
        &outcome,
        args.clip_floor,
        args.seed,
    );
    let learned = match learned {
        Ok(l) => l,
        Err(e @ CliError::Optimization(_)) => {
            // leave a machine-readable trace next to where the policy
            // would have gone, then fail with the optimization exit code
            let trace_path = trace_path(&args.policy_out);
            let trace = serde_json::json!({
                "error": e.to_string(),
                "training_config": training_config,
            });
            std::fs::write(&trace_path, trace.to_string() + "\n")?;
            eprintln!("optimization trace written to {}", trace_path.display());
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    let wall_ms = start.elapsed().as_millis() as u64;

    // oracle columns through the sidecar cache
    let mut oracle_value = None;
    let mut oracle_regret = None;
    if let Some((spec, env)) = &env {
        let sidecar = sidecar_path(&args.policy_out);
        let mut cache = OracleCache::load(&sidecar)?;
        let (value, _se) =
            env.oracle_value(&learned.policy, args.delta, args.mc_samples, args.oracle_seed)?;
        oracle_value = Some(value);
        if args.regret {
            let reference = best_in_class(
                env,
                spec,
                &mut cache,
                &policy_kind,
                args.delta,
                args.oracle_restarts,
                args.mc_samples,
                args.oracle_seed,
            )?;
            oracle_regret = Some(reference.1 - value);
        }
        cache.save(&sidecar)?;
    }

    let doc = PolicyDoc::from_policy(
        &learned.policy,
        Some(training_config),
        Some(learned.value_hat),
    );
    doc.save(&args.policy_out)?;
    println!(
        "{} delta={}: value_hat {:.6}{}{} status {} ({wall_ms} ms)",
        args.method,
        args.delta,
        learned.value_hat,
        oracle_value.map_or_else(String::new, |v| format!(", oracle {v:.6}")),
        oracle_regret.map_or_else(String::new, |r| format!(", regret {r:.6}")),
        learned.status,
    );
    println!("policy written to {}", args.policy_out.display());

    if let Some(out) = &args.out {
        let rows = vec![LearnRow {
            method: args.method.clone(),
            delta: args.delta,
            n: data.len(),
            seed: args.seed,
            value_hat: Some(learned.value_hat),
            oracle_value,
            oracle_regret,
            status: learned.status,
            wall_ms,
        }];
        write_learn_rows(out, &rows)?;
        println!("wrote 1 row to {}", out.display());
    }
    Ok(())
}

fn trace_path(policy_out: &Path) -> PathBuf {
    let mut name = policy_out.file_name().unwrap_or_default().to_os_string();
    name.push(".trace.json");
    policy_out.with_file_name(name)
}

/// Best-in-class reference policy and its oracle value, cached per
/// (environment, class, δ, search settings).
#[allow(clippy::too_many_arguments)]
fn best_in_class(
    env: &Environment,
    spec: &EnvSpec,
    cache: &mut OracleCache,
    policy_kind: &PolicyKind,
    delta: f64,
    restarts: usize,
    mc_samples: usize,
    seed: u64,
) -> Result<(Policy, f64), CliError> {
    let class = policy_class_label(policy_kind);
    let key = OracleCache::policy_key(&spec.to_json(), &class, delta, restarts, mc_samples, seed);
    if let Some(entry) = cache.get_policy(&key) {
        return Ok((entry.doc.to_policy()?, entry.value));
    }
    let template = match policy_kind {
        PolicyKind::LinearSoftmax => Policy::uniform(env.state_dim(), env.action_count()),
        PolicyKind::MlpSoftmax { hidden } => {
            Policy::mlp_softmax_zero(env.state_dim(), *hidden, env.action_count())
        }
    };
    let best = env.oracle_best_policy(delta, &template, restarts, mc_samples, seed)?;
    let (value, _se) = env.oracle_value(&best, delta, mc_samples, seed)?;
    cache.put_policy(
        key,
        PolicyEntry { doc: PolicyDoc::from_policy(&best, None, None), value },
    );
    Ok((best, value))
}

// ---------------------------------------------------------------------------
// degeneracy
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct DegeneracyArgs {
    /// Dataset CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Environment name (for the default target policy).
    #[arg(long)]
    pub env: Option<String>,
    /// Scale on the softmax environment's action means.
    #[arg(long)]
    pub mean_scale: Option<f64>,
    /// Target-policy temperature when the target comes from the environment.
    #[arg(long, default_value_t = 1.0)]
    pub target_temperature: f64,
    /// Explicit target policy document.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// Divergence-ball radius to classify at.
    #[arg(long)]
    pub delta: f64,
    /// Use the logged propensity column instead of fitting a model.
    #[arg(long)]
    pub known_propensity: bool,
    /// Propensity model when fitting: logistic or knn:K.
    #[arg(long, default_value = "logistic")]
    pub propensity: String,
    /// Clip floor for fitted propensities.
    #[arg(long, default_value_t = 0.01)]
    pub clip_floor: f64,
    /// Seed for the propensity fit.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn print_regime(
    label: &str,
    stats: &DegeneracyStats,
    status: DegeneracyStatus,
    delta: f64,
) {
    println!("{label}: S_w = {}, S_w^m = {}", stats.s_w, stats.s_w_min);
    let mut thresholds = Vec::new();
    if stats.s_w < 1.0 {
        thresholds.push(format!("alpha-infinite for delta < {} (= -ln S_w)", -stats.s_w.ln()));
    } else {
        thresholds.push("no alpha-infinite regime (S_w >= 1)".to_string());
    }
    if stats.s_w_min < 1.0 {
        thresholds.push(format!("alpha-zero for delta > {} (= -ln S_w^m)", -stats.s_w_min.ln()));
    } else {
        thresholds.push("no alpha-zero regime (S_w^m >= 1)".to_string());
    }
    println!("  thresholds: {}", thresholds.join("; "));
    let tie = if stats.is_boundary_tie(delta) { " (boundary tie)" } else { "" };
    println!("  at delta = {delta}: {}{tie}", status_label(status));
}

fn cmd_degeneracy(args: &DegeneracyArgs) -> Result<(), CliError> {
    let env = match &args.env {
        Some(name) => Some(build_env(name, args.mean_scale)?.1),
        None => None,
    };
    let policy = resolve_policy(args.policy.as_deref(), env.as_ref(), args.target_temperature)?;
    let data = read_dataset_csv(&args.data, env.as_ref().map(Environment::action_count))?;
    check_policy_matches(&data, &policy)?;
    let opts = EvalOpts {
        known_propensity: args.known_propensity,
        propensity: parse_propensity(&args.propensity)?,
        outcome: OutcomeKind::Zero,
        newton: NewtonMethod::Scalar,
        folds: 2,
        recursions: 0,
        clip_floor: args.clip_floor,
    };
    let ratios = importance_ratios(&data, &policy, &opts, args.seed)?;
    let rewards: Vec<f64> = data.samples().iter().map(|s| s.reward).collect();

    let ips = WeightedSample::new(ratios.clone(), rewards.clone())?;
    let (ips_stats, ips_status) = degeneracy_classify(&ips, args.delta)?;
    let snips = WeightedSample::new(snips_normalize(&ratios)?, rewards)?;
    let (snips_stats, snips_status) = degeneracy_classify(&snips, args.delta)?;

    println!(
        "dataset: {} samples, {} actions, min positively-weighted reward = {}",
        data.len(),
        data.action_count(),
        ips_stats.min_reward,
    );
    print_regime("ips  ", &ips_stats, ips_status, args.delta);
    print_regime("snips", &snips_stats, snips_status, args.delta);
    Ok(())
}

// ---------------------------------------------------------------------------
// oracle
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Environment name.
    #[arg(long)]
    pub env: String,
    /// Scale on the softmax environment's action means.
    #[arg(long)]
    pub mean_scale: Option<f64>,
    /// Policy document to evaluate.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// Evaluate the environment's target policy at this temperature.
    #[arg(long)]
    pub target_temperature: Option<f64>,
    /// Evaluate the uniform policy.
    #[arg(long)]
    pub uniform: bool,
    /// Divergence-ball radius.
    #[arg(long)]
    pub delta: f64,
    /// Monte Carlo states.
    #[arg(long, default_value_t = 50_000)]
    pub mc_samples: usize,
    /// Seed for the state draw.
    #[arg(long, default_value_t = 7777)]
    pub seed: u64,
    /// Also report regret against the best-in-class reference.
    #[arg(long)]
    pub regret: bool,
    /// Reference policy class: linear or mlp:H.
    #[arg(long, default_value = "linear")]
    pub policy_kind: String,
    /// Restarts for the best-in-class search.
    #[arg(long, default_value_t = 10)]
    pub oracle_restarts: usize,
    /// Sidecar cache path for oracle results.
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

fn cmd_oracle(args: &OracleArgs) -> Result<(), CliError> {
    let (spec, env) = build_env(&args.env, args.mean_scale)?;
    let sources =
        usize::from(args.policy.is_some()) + usize::from(args.target_temperature.is_some()) + usize::from(args.uniform);
    if sources != 1 {
        return Err(CliError::config(
            "pass exactly one of --policy, --target-temperature, --uniform".to_string(),
        ));
    }
    let policy = if args.uniform {
        Policy::uniform(env.state_dim(), env.action_count())
    } else if let Some(t) = args.target_temperature {
        env.target_policy(t)?
    } else {
        PolicyDoc::load(args.policy.as_ref().expect("checked above"))?.to_policy()?
    };

    let mut cache = match &args.cache {
        Some(path) => Some((path.clone(), OracleCache::load(path)?)),
        None => None,
    };
    let key = OracleCache::value_key(&spec.to_json(), &policy, args.delta, args.mc_samples, args.seed);
    let entry = match cache.as_ref().and_then(|(_, c)| c.get_value(&key)) {
        Some(entry) => entry,
        None => {
            let (value, se) = env.oracle_value(&policy, args.delta, args.mc_samples, args.seed)?;
            let entry = ValueEntry { value, se };
            if let Some((_, c)) = cache.as_mut() {
                c.put_value(key, entry);
            }
            entry
        }
    };
    println!("value = {} (se {})", entry.value, entry.se);

    if args.regret {
        let policy_kind = parse_policy_kind(&args.policy_kind)?;
        let mut scratch = OracleCache::default();
        let store = cache.as_mut().map_or(&mut scratch, |(_, c)| c);
        let (_, best_value) = best_in_class(
            &env,
            &spec,
            store,
            &policy_kind,
            args.delta,
            args.oracle_restarts,
            args.mc_samples,
            args.seed,
        )?;
        println!(
            "best {} value = {}; regret = {}",
            policy_class_label(&policy_kind),
            best_value,
            best_value - entry.value,
        );
    }
    if let Some((path, c)) = &cache {
        c.save(path)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Experiment config JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Aggregated results CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

fn default_temperature() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_folds() -> usize {
    5
}
fn default_propensity() -> String {
    "logistic".to_string()
}
fn default_outcome() -> String {
    "knn:50".to_string()
}
fn default_newton() -> String {
    "scalar".to_string()
}
fn default_policy_kind() -> String {
    "linear".to_string()
}
fn default_restarts() -> usize {
    10
}
fn default_lr() -> f64 {
    0.01
}
fn default_inner() -> usize {
    10
}
fn default_outer() -> usize {
    40
}
fn default_tol() -> f64 {
    1e-5
}
fn default_clip() -> f64 {
    0.01
}
fn default_mc() -> usize {
    50_000
}
fn default_oracle_seed() -> u64 {
    7777
}

/// A full experiment grid: the cartesian product of methods × δ × N ×
/// seeds over one environment, evaluated or learned per cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub env: EnvSpec,
    /// `evaluate` or `learn`.
    pub task: String,
    pub methods: Vec<String>,
    pub deltas: Vec<f64>,
    /// Dataset sizes, ascending.
    pub n_grid: Vec<usize>,
    /// Per-cell dataset seeds, distinct.
    pub seeds: Vec<u64>,
    #[serde(default = "default_temperature")]
    pub target_temperature: f64,
    #[serde(default = "default_true")]
    pub known_propensity: bool,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_propensity")]
    pub propensity: String,
    #[serde(default = "default_outcome")]
    pub outcome: String,
    #[serde(default = "default_newton")]
    pub newton: String,
    #[serde(default)]
    pub recursions: usize,
    #[serde(default = "default_policy_kind")]
    pub policy_kind: String,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_inner")]
    pub inner_steps: usize,
    #[serde(default = "default_outer")]
    pub max_outer_iters: usize,
    #[serde(default = "default_tol")]
    pub convergence_tol: f64,
    #[serde(default = "default_clip")]
    pub clip_floor: f64,
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
    #[serde(default = "default_oracle_seed")]
    pub oracle_seed: u64,
    #[serde(default = "default_restarts")]
    pub oracle_restarts: usize,
    /// Learn task: also compute oracle regret per cell.
    #[serde(default)]
    pub regret: bool,
}

impl SweepConfig {
    /// Check the grid invariants and eagerly parse every enum-like field.
    pub fn validate(&self) -> Result<(), CliError> {
        match self.task.as_str() {
            "evaluate" | "learn" => {}
            other => {
                return Err(CliError::config(format!(
                    "unknown task '{other}' (expected evaluate or learn)"
                )))
            }
        }
        if self.methods.is_empty() {
            return Err(CliError::config("methods must be nonempty".to_string()));
        }
        for m in &self.methods {
            let known: &[&str] = if self.task == "evaluate" {
                &["ldr2ope", "snips", "ips"]
            } else {
                &["cdr2opl", "snips-max"]
            };
            if !known.contains(&m.as_str()) {
                return Err(CliError::config(format!(
                    "method '{m}' is not valid for task '{}' (expected one of {known:?})",
                    self.task
                )));
            }
        }
        if self.deltas.is_empty() || self.deltas.iter().any(|d| !(d > &0.0) || !d.is_finite()) {
            return Err(CliError::config("deltas must be nonempty and positive".to_string()));
        }
        if self.n_grid.is_empty() || self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CliError::config(
                "n_grid must be nonempty and strictly ascending".to_string(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(CliError::config("seeds must be nonempty".to_string()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::config("seeds must be distinct".to_string()));
        }
        self.env.build()?;
        parse_propensity(&self.propensity)?;
        parse_newton(&self.newton)?;
        parse_policy_kind(&self.policy_kind)?;
        if self.task == "evaluate" {
            parse_outcome(&self.outcome)?;
        } else {
            parse_continuum(&self.outcome)?;
        }
        Ok(())
    }
}

/// One grid cell.
type Cell = (String, f64, usize, u64);

fn sweep_cells(config: &SweepConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for method in &config.methods {
        for &delta in &config.deltas {
            for &n in &config.n_grid {
                for &seed in &config.seeds {
                    cells.push((method.clone(), delta, n, seed));
                }
            }
        }
    }
    cells
}

fn cmd_sweep(args: &SweepArgs, jobs_flag: Option<usize>) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", args.config.display())))?;
    let config: SweepConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("{}: {e}", args.config.display())))?;
    config.validate()?;
    let jobs = job_count(jobs_flag)?;
    let env = config.env.build()?;
    let env_json = config.env.to_json();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::config(format!("cannot build worker pool: {e}")))?;

    let cells = sweep_cells(&config);
    println!("sweep: {} cells over {} workers", cells.len(), jobs);
    let sidecar = sidecar_path(&args.out);
    let mut cache = OracleCache::load(&sidecar)?;

    if config.task == "evaluate" {
        let policy = env.target_policy(config.target_temperature)?;
        // ground truth depends only on δ: compute it once per δ up front
        let mut truths: BTreeMap<u64, f64> = BTreeMap::new();
        for &delta in &config.deltas {
            let key = OracleCache::value_key(
                &env_json,
                &policy,
                delta,
                config.mc_samples,
                config.oracle_seed,
            );
            let entry = match cache.get_value(&key) {
                Some(entry) => entry,
                None => {
                    let (value, se) =
                        env.oracle_value(&policy, delta, config.mc_samples, config.oracle_seed)?;
                    let entry = ValueEntry { value, se };
                    cache.put_value(key, entry);
                    entry
                }
            };
            truths.insert(delta.to_bits(), entry.value);
        }
        cache.save(&sidecar)?;

        let mut rows: Vec<ResultRow> = pool.install(|| {
            use rayon::prelude::*;
            cells
                .par_iter()
                .map(|cell| eval_cell(&env, &policy, &truths, &config, cell))
                .collect()
        });
        let failed = rows.iter().filter(|r| r.status.starts_with("error")).count();
        canonical_sort(&mut rows);
        write_result_rows(&args.out, &rows)?;
        println!("wrote {} rows to {} ({} failed)", rows.len(), args.out.display(), failed);
    } else {
        // best-in-class references, one per δ, before going parallel
        let policy_kind = parse_policy_kind(&config.policy_kind)?;
        let mut references: BTreeMap<u64, (Policy, f64)> = BTreeMap::new();
        if config.regret {
            for &delta in &config.deltas {
                let reference = best_in_class(
                    &env,
                    &config.env,
                    &mut cache,
                    &policy_kind,
                    delta,
                    config.oracle_restarts,
                    config.mc_samples,
                    config.oracle_seed,
                )?;
                references.insert(delta.to_bits(), reference);
            }
        }
        cache.save(&sidecar)?;

        let mut rows: Vec<LearnRow> = pool.install(|| {
            use rayon::prelude::*;
            cells
                .par_iter()
                .map(|cell| learn_cell(&env, &references, &config, cell))
                .collect()
        });
        let failed = rows.iter().filter(|r| r.status.starts_with("error")).count();
        rows.sort_by(|a, b| {
            a.method
                .cmp(&b.method)
                .then(a.delta.total_cmp(&b.delta))
                .then(a.n.cmp(&b.n))
                .then(a.seed.cmp(&b.seed))
        });
        write_learn_rows(&args.out, &rows)?;
        println!("wrote {} rows to {} ({} failed)", rows.len(), args.out.display(), failed);
    }
    Ok(())
}

fn eval_cell(
    env: &Environment,
    policy: &Policy,
    truths: &BTreeMap<u64, f64>,
    config: &SweepConfig,
    cell: &Cell,
) -> ResultRow {
    let (method, delta, n, seed) = cell;
    let start = Instant::now();
    let outcome = (|| -> Result<(Option<f64>, String), CliError> {
        let data = env.sample_dataset(*n, *seed, config.known_propensity)?;
        let opts = EvalOpts {
            known_propensity: config.known_propensity,
            propensity: parse_propensity(&config.propensity)?,
            outcome: parse_outcome(&config.outcome)?,
            newton: parse_newton(&config.newton)?,
            folds: config.folds,
            recursions: config.recursions,
            clip_floor: config.clip_floor,
        };
        let (estimate, status, _record) =
            run_eval_method(&data, policy, method, *delta, &opts, *seed)?;
        Ok((estimate, status))
    })();
    let truth = truths.get(&delta.to_bits()).copied();
    let (estimate, status) = match outcome {
        Ok(pair) => pair,
        Err(e) => (None, format!("error: {e}")),
    };
    let sq_err = match (estimate, truth) {
        (Some(e), Some(t)) => Some((e - t) * (e - t)),
        _ => None,
    };
    ResultRow {
        method: method.clone(),
        delta: *delta,
        n: *n,
        seed: *seed,
        estimate,
        truth,
        sq_err,
        status,
        wall_ms: start.elapsed().as_millis() as u64,
    }
}

fn learn_cell(
    env: &Environment,
    references: &BTreeMap<u64, (Policy, f64)>,
    config: &SweepConfig,
    cell: &Cell,
) -> LearnRow {
    let (method, delta, n, seed) = cell;
    let start = Instant::now();
    let outcome = (|| -> Result<(f64, Option<f64>, Option<f64>, String), CliError> {
        let data = env.sample_dataset(*n, *seed, config.known_propensity)?;
        let learned = run_learn_method(
            &data,
            method,
            *delta,
            parse_policy_kind(&config.policy_kind)?,
            config.restarts,
            config.learning_rate,
            config.inner_steps,
            config.max_outer_iters,
            config.convergence_tol,
            config.folds,
            config.known_propensity,
            &parse_propensity(&config.propensity)?,
            &parse_continuum(&config.outcome)?,
            config.clip_floor,
            *seed,
        )?;
        let (value, _se) = env.oracle_value(
            &learned.policy,
            *delta,
            config.mc_samples,
            config.oracle_seed,
        )?;
        let regret = references.get(&delta.to_bits()).map(|(_, best)| best - value);
        Ok((learned.value_hat, Some(value), regret, learned.status))
    })();
    let (value_hat, oracle_value, oracle_regret, status) = match outcome {
        Ok((vh, ov, or, st)) => (Some(vh), ov, or, st),
        Err(e) => (None, None, None, format!("error: {e}")),
    };
    LearnRow {
        method: method.clone(),
        delta: *delta,
        n: *n,
        seed: *seed,
        value_hat,
        oracle_value,
        oracle_regret,
        status,
        wall_ms: start.elapsed().as_millis() as u64,
    }
}
