//! Turns a config into runnable pieces (datasets, radio setup, policy),
//! executes simulate/sweep/solve/bounds workloads, and renders the output
//! artifacts. Every emitted file starts with a schema tag and the full
//! resolved config, so results are traceable to their inputs byte for byte.

use ndarray::Array2;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, SchemeSection};
use crate::engine::{
    run_training, EngineError, FederatedMlpTask, RoundMetrics, RoundPolicy, SeedSet,
    SimulationSetup,
};
use crate::metrics::{
    approx_max_interval, convergence_bound_from_intervals, convergence_bound_from_probabilities,
    MetricsError,
};
use crate::schemes::{
    calibrated_k_sel, AgeBasedPolicy, GreedyPolicy, ProposedPolicy, RandomPolicy,
};
use crate::solver::{
    solve_joint, OuterDiag, ProblemInstance, SolveResult, SolverError, SolverSettings,
};
use crate::task::{class_centroids, partition_non_iid, sample_from_centroids, MlpModel, TaskError};
use crate::wireless::{channel_gain, WirelessError};

pub const RESULTS_SCHEMA: &str = "v1";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Wireless(#[from] WirelessError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Invalid(String),
}

/// Config lowered to concrete runtime pieces for one (rho, seed) run.
pub struct PreparedRun {
    pub setup: SimulationSetup,
    pub task: FederatedMlpTask,
    pub initial_params: Vec<f64>,
    pub policy: Box<dyn RoundPolicy>,
    pub rounds: u64,
    /// k_sel actually used by deterministic benchmarks (after calibration).
    pub k_sel_used: Option<usize>,
}

/// Builds datasets, placement, model init, and the policy for one run.
/// `rho` and `seeds` override the config's values (sweeps vary them).
pub fn prepare_run(
    config: &ExperimentConfig,
    rho: f64,
    seeds: SeedSet,
) -> Result<PreparedRun, ExperimentError> {
    config.validate()?;
    let shape = config.task.shape();
    let cell = config.cell.resolve(&shape);
    let profiles = config.clients.resolve(seeds.data);
    let k_n = profiles.len();

    let t = &config.task;
    let centers = class_centroids(t.classes, t.feature_dim, t.separation, seeds.data);
    let train = sample_from_centroids(&centers, t.per_class_train, seeds.data, 0);
    let test = sample_from_centroids(&centers, t.per_class_test, seeds.data, 1);
    let plan = partition_non_iid(&train, k_n, t.shards_per_client, seeds.data)?;
    let client_indices = (0..k_n).map(|k| plan.client_indices(k)).collect();

    let task = FederatedMlpTask {
        shape,
        train,
        test,
        client_indices,
        local_steps: t.local_steps,
        batch: t.batch,
        lr: t.learning_rate,
    };

    let setup = SimulationSetup {
        cell: cell.clone(),
        profiles: profiles.clone(),
        fading: config.fading,
        seeds,
        force_cap: config.force_cap.map(|cap| vec![cap; k_n]),
        divide_by_participants: config.divide_by_participants,
        eval_every: config.eval_every,
    };

    let solver_settings = config.solver.resolve();
    let (policy, k_sel_used) = build_policy(
        config,
        rho,
        &setup,
        solver_settings,
    )?;
    let initial_params = MlpModel::init(shape, seeds.init).params;

    Ok(PreparedRun {
        setup,
        task,
        initial_params,
        policy,
        rounds: config.rounds,
        k_sel_used,
    })
}

/// Instantiates the configured scheme. Benchmarks without an explicit k_sel
/// calibrate against the solver-driven plan at round-0 gains.
fn build_policy(
    config: &ExperimentConfig,
    rho: f64,
    setup: &SimulationSetup,
    solver_settings: SolverSettings,
) -> Result<(Box<dyn RoundPolicy>, Option<usize>), ExperimentError> {
    let k_n = setup.profiles.len();
    let horizon = match &config.scheme {
        SchemeSection::Proposed { horizon_rounds } => {
            horizon_rounds.unwrap_or(config.rounds.max(1)) as usize
        }
        _ => config.rounds.max(1) as usize,
    };
    match &config.scheme {
        SchemeSection::Random { p } => Ok((Box::new(RandomPolicy::new(*p, k_n)?), None)),
        SchemeSection::Proposed { .. } => {
            let policy = ProposedPolicy::new(
                setup.cell.clone(),
                setup.profiles.clone(),
                rho,
                config.lambda_min,
                horizon,
                solver_settings,
            )?;
            Ok((Box::new(policy), None))
        }
        SchemeSection::Greedy { k_sel } | SchemeSection::AgeBased { k_sel } => {
            let k = match k_sel {
                Some(k) => *k,
                None => calibrate_against_proposed(config, rho, setup, &solver_settings, horizon)?,
            };
            let boxed: Box<dyn RoundPolicy> = match &config.scheme {
                SchemeSection::Greedy { .. } => Box::new(GreedyPolicy::new(k, k_n)?),
                _ => Box::new(AgeBasedPolicy::new(k, k_n)?),
            };
            Ok((boxed, Some(k)))
        }
    }
}

/// k_sel = round of the proposed plan's expected participant count at the
/// run's round-0 channel realization.
pub fn calibrate_against_proposed(
    config: &ExperimentConfig,
    rho: f64,
    setup: &SimulationSetup,
    solver_settings: &SolverSettings,
    horizon: usize,
) -> Result<usize, ExperimentError> {
    let mut gains = Vec::with_capacity(setup.profiles.len());
    for profile in &setup.profiles {
        gains.push(channel_gain(profile, 0, setup.fading, setup.seeds.fading)?);
    }
    let mut proposed = ProposedPolicy::new(
        setup.cell.clone(),
        setup.profiles.clone(),
        rho,
        config.lambda_min,
        horizon,
        solver_settings.clone(),
    )?;
    let plan = proposed.plan(0, &gains)?;
    Ok(calibrated_k_sel(&plan.p))
}

/// Scalar outcome of one run plus the per-round trace.
pub struct RunOutcome {
    pub trace: Vec<RoundMetrics>,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub scheme: String,
    pub rho: f64,
    pub seeds: SeedSet,
    pub rounds: u64,
    pub k_sel_used: Option<usize>,
    pub final_train_loss: f64,
    pub final_test_accuracy: f64,
    pub total_expected_energy_j: f64,
    pub total_realized_energy_j: f64,
    pub per_client_energy_j: Vec<f64>,
    pub total_participations: u64,
}

pub fn run_one(
    config: &ExperimentConfig,
    rho: f64,
    seeds: SeedSet,
) -> Result<RunOutcome, ExperimentError> {
    let mut prepared = prepare_run(config, rho, seeds)?;
    let (trace, state) = run_training(
        &prepared.task,
        prepared.policy.as_mut(),
        &prepared.setup,
        prepared.initial_params.clone(),
        prepared.rounds,
    )?;
    let last_eval = trace.iter().rev().find(|m| !m.train_loss.is_nan());
    let summary = RunSummary {
        scheme: config.scheme.name().to_string(),
        rho,
        seeds,
        rounds: prepared.rounds,
        k_sel_used: prepared.k_sel_used,
        final_train_loss: last_eval.map_or(f64::NAN, |m| m.train_loss),
        final_test_accuracy: last_eval.map_or(f64::NAN, |m| m.test_accuracy),
        total_expected_energy_j: trace.iter().map(|m| m.expected_energy_j).sum(),
        total_realized_energy_j: trace.iter().map(|m| m.realized_energy_j).sum(),
        per_client_energy_j: state.energy_spent_j,
        total_participations: trace.iter().map(|m| m.participants.len() as u64).sum(),
    };
    Ok(RunOutcome { trace, summary })
}

/// Identity of one run inside a results file.
#[derive(Debug, Clone)]
pub struct RunKey {
    pub run_id: usize,
    pub scheme: String,
    pub rho: f64,
    pub seed_label: u64,
}

/// Multi-(rho, seed) sweep. Base seeds come from `seed_bases` (each spread
/// into a full stream set); every combination is an independent run.
pub fn run_sweep(
    config: &ExperimentConfig,
    rhos: &[f64],
    seed_bases: &[u64],
) -> Result<Vec<(RunKey, RunOutcome)>, ExperimentError> {
    if rhos.is_empty() {
        return Err(ExperimentError::Invalid("empty rho list".into()));
    }
    if seed_bases.is_empty() {
        return Err(ExperimentError::Invalid("empty seed list".into()));
    }
    let mut out = Vec::with_capacity(rhos.len() * seed_bases.len());
    let mut run_id = 0;
    for &rho in rhos {
        for &base in seed_bases {
            let outcome = run_one(config, rho, SeedSet::from_base(base))?;
            out.push((
                RunKey {
                    run_id,
                    scheme: config.scheme.name().to_string(),
                    rho,
                    seed_label: base,
                },
                outcome,
            ));
            run_id += 1;
        }
    }
    Ok(out)
}

/// Per-(rho) aggregate over seeds, for trend tables.
#[derive(Debug, Clone, Serialize)]
pub struct SweepAggregate {
    pub rho: f64,
    pub runs: usize,
    pub mean_total_realized_energy_j: f64,
    pub mean_total_expected_energy_j: f64,
    pub mean_final_test_accuracy: f64,
    pub mean_final_train_loss: f64,
}

pub fn aggregate_sweep(results: &[(RunKey, RunOutcome)]) -> Vec<SweepAggregate> {
    let mut rhos: Vec<f64> = Vec::new();
    for (key, _) in results {
        if !rhos.iter().any(|&r| r == key.rho) {
            rhos.push(key.rho);
        }
    }
    rhos.iter()
        .map(|&rho| {
            let group: Vec<&RunOutcome> = results
                .iter()
                .filter(|(key, _)| key.rho == rho)
                .map(|(_, o)| o)
                .collect();
            let n = group.len() as f64;
            SweepAggregate {
                rho,
                runs: group.len(),
                mean_total_realized_energy_j: group
                    .iter()
                    .map(|o| o.summary.total_realized_energy_j)
                    .sum::<f64>()
                    / n,
                mean_total_expected_energy_j: group
                    .iter()
                    .map(|o| o.summary.total_expected_energy_j)
                    .sum::<f64>()
                    / n,
                mean_final_test_accuracy: group
                    .iter()
                    .map(|o| o.summary.final_test_accuracy)
                    .sum::<f64>()
                    / n,
                mean_final_train_loss: group
                    .iter()
                    .map(|o| o.summary.final_train_loss)
                    .sum::<f64>()
                    / n,
            }
        })
        .collect()
}

fn provenance_header(config: &ExperimentConfig) -> String {
    let config_json = serde_json::to_string(config).expect("config serializes");
    format!("# results-schema: {RESULTS_SCHEMA}\n# config: {config_json}\n")
}

/// Round-level CSV: one row per round per run, prefixed with provenance
/// comments. Cumulative energy restarts per run.
pub fn results_csv(config: &ExperimentConfig, results: &[(RunKey, RunOutcome)]) -> String {
    let mut out = provenance_header(config);
    out.push_str(
        "run_id,scheme,rho,seed,round,n_participants,expected_energy_j,realized_energy_j,cum_energy_j,train_loss,test_acc,grad_norm_sq\n",
    );
    for (key, outcome) in results {
        let mut cum = 0.0;
        for m in &outcome.trace {
            cum += m.realized_energy_j;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                key.run_id,
                key.scheme,
                key.rho,
                key.seed_label,
                m.round,
                m.participants.len(),
                m.expected_energy_j,
                m.realized_energy_j,
                cum,
                m.train_loss,
                m.test_accuracy,
                m.global_grad_norm_sq
            ));
        }
    }
    out
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    results_schema: &'static str,
    config: &'a ExperimentConfig,
    runs: Vec<&'a RunSummary>,
    aggregates: Vec<SweepAggregate>,
}

/// summary.json payload: per-run summaries plus per-rho means and the full
/// config.
pub fn summary_json(
    config: &ExperimentConfig,
    results: &[(RunKey, RunOutcome)],
) -> Result<String, ExperimentError> {
    let file = SummaryFile {
        results_schema: RESULTS_SCHEMA,
        config,
        runs: results.iter().map(|(_, o)| &o.summary).collect(),
        aggregates: aggregate_sweep(results),
    };
    serde_json::to_string_pretty(&file)
        .map_err(|e| ExperimentError::Invalid(format!("summary serialization: {e}")))
}

/// Offline solve of the configured instance over the full horizon, with
/// round-0-style static gains per round (fading draws per round otherwise).
pub fn solve_offline(
    config: &ExperimentConfig,
    rho: f64,
    seeds: SeedSet,
) -> Result<(ProblemInstance, SolveResult), ExperimentError> {
    config.validate()?;
    let shape = config.task.shape();
    let cell = config.cell.resolve(&shape);
    let profiles = config.clients.resolve(seeds.data);
    let k_n = profiles.len();
    let t_n = config.rounds.max(1) as usize;
    let mut gains = Array2::zeros((k_n, t_n));
    for (k, profile) in profiles.iter().enumerate() {
        for t in 0..t_n {
            gains[[k, t]] = channel_gain(profile, t as u64, config.fading, seeds.fading)?;
        }
    }
    let inst = ProblemInstance::new(t_n, rho, config.lambda_min, cell, profiles, gains)?;
    let result = solve_joint(&inst, &config.solver.resolve())?;
    Ok((inst, result))
}

/// Solver iteration trace as CSV with provenance.
pub fn diagnostics_csv(config: &ExperimentConfig, diags: &[OuterDiag]) -> String {
    let mut out = provenance_header(config);
    out.push_str("iteration,residual_norm,objective,line_search_l,dual_iterations\n");
    for d in diags {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            d.iteration,
            d.residual_sq.sqrt(),
            d.objective,
            d.line_search_l.map_or(String::new(), |l| l.to_string()),
            d.dual_iterations
        ));
    }
    out
}

#[derive(Serialize)]
pub struct PlanFile<'a> {
    pub results_schema: &'static str,
    pub config: &'a ExperimentConfig,
    pub rho: f64,
    pub objective: f64,
    pub residual_sq: f64,
    pub outer_iterations: usize,
    /// K rows by T columns.
    pub p: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
    pub duals: Vec<f64>,
}

pub fn plan_json(
    config: &ExperimentConfig,
    rho: f64,
    result: &SolveResult,
) -> Result<String, ExperimentError> {
    let to_rows = |m: &Array2<f64>| -> Vec<Vec<f64>> {
        (0..m.nrows()).map(|k| m.row(k).to_vec()).collect()
    };
    let file = PlanFile {
        results_schema: RESULTS_SCHEMA,
        config,
        rho,
        objective: result.objective,
        residual_sq: result.residual_sq,
        outer_iterations: result.outer_iterations,
        p: to_rows(&result.p),
        w: to_rows(&result.w),
        duals: result.duals.clone(),
    };
    serde_json::to_string_pretty(&file)
        .map_err(|e| ExperimentError::Invalid(format!("plan serialization: {e}")))
}

#[derive(Serialize)]
pub struct BoundsReport {
    pub interval_bound: Option<f64>,
    pub probability_bound: Option<f64>,
    pub approx_intervals: Option<Vec<f64>>,
}

/// Evaluates the convergence-bound calculators on the config's `bounds`
/// section.
pub fn bounds_report(config: &ExperimentConfig) -> Result<BoundsReport, ExperimentError> {
    let section = config
        .bounds
        .as_ref()
        .ok_or_else(|| ExperimentError::Invalid("config has no `bounds` section".into()))?;
    let mut report = BoundsReport {
        interval_bound: None,
        probability_bound: None,
        approx_intervals: None,
    };
    if let Some(deltas) = &section.intervals {
        report.interval_bound = Some(convergence_bound_from_intervals(
            deltas,
            &section.constants,
            config.rounds.max(1) as usize,
        )?);
    }
    if let Some(rows) = &section.probabilities {
        let t_n = rows.first().map_or(0, |r| r.len());
        if t_n == 0 || rows.iter().any(|r| r.len() != t_n) {
            return Err(ExperimentError::Invalid(
                "bounds.probabilities rows must be equal nonzero length".into(),
            ));
        }
        let mut p = Array2::zeros((rows.len(), t_n));
        for (k, row) in rows.iter().enumerate() {
            for (t, &v) in row.iter().enumerate() {
                p[[k, t]] = v;
            }
        }
        report.probability_bound = Some(convergence_bound_from_probabilities(
            &p,
            &section.constants,
        )?);
        let mut intervals = Vec::with_capacity(rows.len());
        for (k, row) in rows.iter().enumerate() {
            intervals.push(approx_max_interval(row, k)?);
        }
        report.approx_intervals = Some(intervals);
    }
    if report.interval_bound.is_none() && report.probability_bound.is_none() {
        return Err(ExperimentError::Invalid(
            "bounds section needs `intervals` or `probabilities`".into(),
        ));
    }
    Ok(report)
}

/// Exit-code partition of failures: config 2, solver 3, simulation 4.
pub fn exit_code_for(err: &ExperimentError) -> i32 {
    match err {
        ExperimentError::Config(_) | ExperimentError::Invalid(_) | ExperimentError::Metrics(_) => 2,
        ExperimentError::Solver(_) => 3,
        ExperimentError::Engine(EngineError::Policy(_)) => 3,
        ExperimentError::Engine(_) | ExperimentError::Task(_) | ExperimentError::Wireless(_) => 4,
    }
}
