//! Joint optimizer for per-round client selection probabilities and uplink
//! bandwidth fractions.
//!
//! The objective trades expected convergence quality against expected
//! communication energy with weight `rho`:
//!
//! ```text
//! min  rho T^2/K sum_k (1 / sum_t p_kt)^2  +  (1-rho) sum_t sum_k p_kt P_k S / R_kt(w_kt)
//! s.t. sum_k w_kt <= 1,  0 <= w_kt <= 1,  lambda <= p_kt <= 1
//! ```
//!
//! The sum-of-ratios energy term is handled with a subtractive parametric
//! transform: auxiliary multipliers (alpha, beta, gamma) turn the inner
//! problem into per-client probability updates with a cube-root closed form
//! and per-round bandwidth allocations with a Lambert-W closed form, and an
//! outer modified-Newton loop drives the transform's fixed-point residuals to
//! zero. `solve_joint` optimizes a full horizon at once; `solve_online` is the
//! per-round variant with a time-invariant probability per client.

mod inner;
mod lambert;
mod online;
mod outer;
mod descent;
mod polish;

pub use inner::{bcd_update_p, optimal_w, solve_p_bcd, solve_w_dual};
pub use lambert::{lambert_w0, LambertError};
pub use online::{objective_online, solve_online, OnlineInstance, OnlineSolveResult};
pub use outer::{newton_step, residuals, solve_inner, AuxVars, InnerSolution, Residuals};

use ndarray::Array2;
use thiserror::Error;

use crate::wireless::{self, CellConfig, ClientProfile, WirelessError};

/// Accepted weight range; the endpoints degenerate (the energy term or the
/// probability update would lose its scale).
pub const RHO_MIN: f64 = 1e-4;
pub const RHO_MAX: f64 = 1.0 - 1e-4;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Lambert(#[from] LambertError),
    #[error(transparent)]
    Wireless(#[from] WirelessError),
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("invalid solver settings: {0}")]
    InvalidSettings(String),
    #[error("rho = {0} outside accepted range [{RHO_MIN}, {RHO_MAX}]")]
    RhoOutOfRange(f64),
    #[error("infeasible plan: {0}")]
    InfeasiblePlan(String),
    #[error("dual multiplier must be non-negative, got {0}")]
    NegativeDual(f64),
    #[error("probability update stalled for client {client}: change {last_change} after {sweeps} sweeps")]
    BcdStalled {
        client: usize,
        sweeps: usize,
        last_change: f64,
    },
    #[error("bandwidth dual stalled in round {round}: constraint gap {gap} after {iterations} iterations")]
    DualStalled {
        round: usize,
        gap: f64,
        iterations: usize,
    },
    #[error("line search exhausted {l_max} trial steps at residual {residual_sq}")]
    LineSearchFailed { l_max: usize, residual_sq: f64 },
    #[error("outer loop exhausted {iterations} iterations at residual {residual_sq}")]
    OuterBudgetExhausted {
        iterations: usize,
        residual_sq: f64,
        best: Box<SolveResult>,
    },
}

/// One horizon-level optimization problem over K clients and T rounds.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    pub rounds: usize,
    pub rho: f64,
    pub lambda_min: f64,
    pub cell: CellConfig,
    pub profiles: Vec<ClientProfile>,
    /// Channel power gains, K x T.
    pub gains: Array2<f64>,
}

impl ProblemInstance {
    pub fn new(
        rounds: usize,
        rho: f64,
        lambda_min: f64,
        cell: CellConfig,
        profiles: Vec<ClientProfile>,
        gains: Array2<f64>,
    ) -> Result<Self, SolverError> {
        let inst = Self {
            rounds,
            rho,
            lambda_min,
            cell,
            profiles,
            gains,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn n_clients(&self) -> usize {
        self.profiles.len()
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |msg: String| Err(SolverError::InvalidInstance(msg));
        if self.rounds == 0 {
            return bad("rounds must be >= 1".into());
        }
        if self.profiles.is_empty() {
            return bad("at least one client required".into());
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad(format!("rho must lie strictly in (0, 1), got {}", self.rho));
        }
        if !(self.lambda_min > 0.0 && self.lambda_min <= 1.0) {
            return bad(format!(
                "lambda_min must lie in (0, 1], got {}",
                self.lambda_min
            ));
        }
        self.cell.validate()?;
        for (i, c) in self.profiles.iter().enumerate() {
            if c.id != i + 1 {
                return bad(format!("client ids must be 1..=K in order, got {}", c.id));
            }
            if !(c.distance_km > 0.0 && c.distance_km <= self.cell.cell_radius_km) {
                return bad(format!(
                    "client {}: distance {} km outside (0, {}]",
                    c.id, c.distance_km, self.cell.cell_radius_km
                ));
            }
            if !(c.tx_power_w > 0.0) {
                return bad(format!("client {}: tx power must be positive", c.id));
            }
        }
        if self.gains.dim() != (self.profiles.len(), self.rounds) {
            return bad(format!(
                "gains shape {:?} != (K, T) = ({}, {})",
                self.gains.dim(),
                self.profiles.len(),
                self.rounds
            ));
        }
        if self.gains.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return bad("all channel gains must be positive and finite".into());
        }
        Ok(())
    }
}

/// Tolerances and iteration budgets. Defaults match the documented tuning.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    /// Coordinate-descent stop: max per-coordinate probability change.
    pub bcd_tol: f64,
    /// Bandwidth dual stop: |1 - sum_k w_kt|.
    pub dual_tol: f64,
    /// Outer stop: total squared fixed-point residual.
    pub outer_tol: f64,
    /// Sufficient-decrease constant of the line search, in (0, 1).
    pub epsilon: f64,
    /// Backtracking base of the line search, in (0, 1).
    pub zeta: f64,
    /// Largest backtracking exponent tried.
    pub l_max: usize,
    /// Seeds the dual bracket expansion: first upper bound is
    /// step_scale * mean(alpha beta W) when no warm start is available.
    pub step_scale: f64,
    pub max_bcd_sweeps: usize,
    pub max_dual_iters: usize,
    pub max_outer_iters: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            bcd_tol: 1e-9,
            dual_tol: 1e-7,
            outer_tol: 1e-8,
            epsilon: 0.01,
            zeta: 0.5,
            l_max: 60,
            step_scale: 0.1,
            max_bcd_sweeps: 100_000,
            max_dual_iters: 500_000,
            max_outer_iters: 2_000,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |msg: String| Err(SolverError::InvalidSettings(msg));
        for (v, name) in [
            (self.bcd_tol, "bcd_tol"),
            (self.dual_tol, "dual_tol"),
            (self.outer_tol, "outer_tol"),
            (self.step_scale, "step_scale"),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (v, name) in [(self.epsilon, "epsilon"), (self.zeta, "zeta")] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        if self.l_max == 0 || self.max_bcd_sweeps == 0 || self.max_dual_iters == 0
            || self.max_outer_iters == 0
        {
            return bad("iteration budgets must be >= 1".into());
        }
        Ok(())
    }
}

/// Converged plans plus the transform state they satisfy.
#[derive(Debug, Clone)]
pub struct SolveResult {
    /// Selection probabilities, K x T.
    pub p: Array2<f64>,
    /// Bandwidth fractions, K x T.
    pub w: Array2<f64>,
    /// Per-round bandwidth duals.
    pub duals: Vec<f64>,
    pub aux: AuxVars,
    pub objective: f64,
    pub residual_sq: f64,
    pub outer_iterations: usize,
    pub diagnostics: Vec<OuterDiag>,
}

/// Per-outer-iteration trace for diagnostics output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuterDiag {
    pub iteration: usize,
    pub residual_sq: f64,
    pub objective: f64,
    /// Accepted backtracking exponent (None on the terminal iteration).
    pub line_search_l: Option<usize>,
    pub dual_iterations: usize,
}

/// Achievable rates R(w_kt) for a full bandwidth plan, K x T.
pub fn rate_matrix(
    w: &Array2<f64>,
    inst: &ProblemInstance,
) -> Result<Array2<f64>, SolverError> {
    let (k_n, t_n) = w.dim();
    let mut rates = Array2::zeros((k_n, t_n));
    for k in 0..k_n {
        for t in 0..t_n {
            rates[[k, t]] = wireless::transmission_rate(
                w[[k, t]],
                self_power(inst, k),
                inst.gains[[k, t]],
                &inst.cell,
            )?;
        }
    }
    Ok(rates)
}

fn self_power(inst: &ProblemInstance, k: usize) -> f64 {
    inst.profiles[k].tx_power_w
}

/// Raw objective pieces: (convergence term, energy term), both unweighted.
/// The full objective is `rho * conv + (1 - rho) * energy`.
pub fn objective_parts(
    p: &Array2<f64>,
    w: &Array2<f64>,
    inst: &ProblemInstance,
) -> Result<(f64, f64), SolverError> {
    validate_plan(p, w, inst)?;
    let (k_n, t_n) = (inst.n_clients(), inst.rounds);
    let s_nats = inst.cell.model_size_nats();
    let tt = t_n as f64;

    let mut conv = 0.0;
    for k in 0..k_n {
        let row_sum: f64 = (0..t_n).map(|t| p[[k, t]]).sum();
        conv += 1.0 / (row_sum * row_sum);
    }
    conv *= tt * tt / k_n as f64;

    let mut energy = 0.0;
    for t in 0..t_n {
        for k in 0..k_n {
            if p[[k, t]] == 0.0 {
                continue;
            }
            let rate = wireless::transmission_rate(
                w[[k, t]],
                self_power(inst, k),
                inst.gains[[k, t]],
                &inst.cell,
            )?;
            if rate <= 0.0 {
                return Err(SolverError::InfeasiblePlan(format!(
                    "client {} round {t}: p = {} but zero rate",
                    k + 1,
                    p[[k, t]]
                )));
            }
            energy += p[[k, t]] * self_power(inst, k) * s_nats / rate;
        }
    }
    Ok((conv, energy))
}

/// Full weighted objective of a feasible plan pair.
pub fn objective_p1(
    p: &Array2<f64>,
    w: &Array2<f64>,
    inst: &ProblemInstance,
) -> Result<f64, SolverError> {
    let (conv, energy) = objective_parts(p, w, inst)?;
    Ok(inst.rho * conv + (1.0 - inst.rho) * energy)
}

/// Feasibility slack for plan validation; converged duals satisfy the
/// bandwidth budget to well below this.
const PLAN_FEAS_TOL: f64 = 1e-9;

fn validate_plan(
    p: &Array2<f64>,
    w: &Array2<f64>,
    inst: &ProblemInstance,
) -> Result<(), SolverError> {
    let (k_n, t_n) = (inst.n_clients(), inst.rounds);
    if p.dim() != (k_n, t_n) || w.dim() != (k_n, t_n) {
        return Err(SolverError::InfeasiblePlan(format!(
            "plan shapes p{:?} w{:?} != ({k_n}, {t_n})",
            p.dim(),
            w.dim()
        )));
    }
    for t in 0..t_n {
        let mut band = 0.0;
        for k in 0..k_n {
            let pv = p[[k, t]];
            if !(inst.lambda_min - PLAN_FEAS_TOL..=1.0 + PLAN_FEAS_TOL).contains(&pv) {
                return Err(SolverError::InfeasiblePlan(format!(
                    "p[{},{t}] = {pv} outside [{}, 1]",
                    k + 1,
                    inst.lambda_min
                )));
            }
            let wv = w[[k, t]];
            if !(-PLAN_FEAS_TOL..=1.0 + PLAN_FEAS_TOL).contains(&wv) {
                return Err(SolverError::InfeasiblePlan(format!(
                    "w[{},{t}] = {wv} outside [0, 1]",
                    k + 1
                )));
            }
            band += wv;
        }
        if band > 1.0 + PLAN_FEAS_TOL {
            return Err(SolverError::InfeasiblePlan(format!(
                "round {t}: bandwidth fractions sum to {band} > 1"
            )));
        }
    }
    Ok(())
}

/// Initial transform state: uniform probabilities (lambda+1)/2, equal split
/// bandwidth 1/K, and multipliers consistent with those plans.
pub(crate) fn initial_state(
    inst: &ProblemInstance,
) -> Result<(Array2<f64>, AuxVars), SolverError> {
    let (k_n, t_n) = (inst.n_clients(), inst.rounds);
    let s_nats = inst.cell.model_size_nats();
    let tt = t_n as f64;
    let p0 = (inst.lambda_min + 1.0) / 2.0;
    let w0 = Array2::from_elem((k_n, t_n), 1.0 / k_n as f64);
    let rates = rate_matrix(&w0, inst)?;
    let mut alpha = Array2::zeros((k_n, t_n));
    let mut beta = Array2::zeros((k_n, t_n));
    for k in 0..k_n {
        for t in 0..t_n {
            let r = rates[[k, t]];
            alpha[[k, t]] = 1.0 / r;
            beta[[k, t]] = p0 * self_power(inst, k) * s_nats * (1.0 - inst.rho) / r;
        }
    }
    let gamma = vec![inst.rho * tt * tt / (k_n as f64 * (tt * p0) * (tt * p0)); k_n];
    Ok((
        Array2::from_elem((k_n, t_n), p0),
        AuxVars { alpha, beta, gamma },
    ))
}

/// Full-horizon solve: alternates exact inner solves (probabilities by
/// coordinate descent, bandwidth by the dual closed form) with modified
/// Newton updates of the transform multipliers until the fixed-point
/// residuals vanish.
pub fn solve_joint(
    inst: &ProblemInstance,
    settings: &SolverSettings,
) -> Result<SolveResult, SolverError> {
    inst.validate()?;
    settings.validate()?;
    if !(RHO_MIN..=RHO_MAX).contains(&inst.rho) {
        return Err(SolverError::RhoOutOfRange(inst.rho));
    }
    let t_n = inst.rounds;
    let (_, mut aux) = initial_state(inst)?;
    let mut eval = solve_inner(inst, &aux, &vec![0.0; t_n], settings)?;
    let mut diagnostics: Vec<OuterDiag> = Vec::new();
    let mut best: Option<SolveResult> = None;

    for iter in 0..settings.max_outer_iters {
        let residual_sq = eval.res.norm_sq();
        // Intermediate iterates may pin a client's bandwidth so low that its
        // energy is effectively unbounded; report that as an infinite
        // objective rather than aborting.
        let objective = match objective_p1(&eval.p, &eval.w, inst) {
            Ok(v) => v,
            Err(SolverError::InfeasiblePlan(_)) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        diagnostics.push(OuterDiag {
            iteration: iter,
            residual_sq,
            objective,
            line_search_l: None,
            dual_iterations: eval.dual_iterations,
        });

        let current = SolveResult {
            p: eval.p.clone(),
            w: eval.w.clone(),
            duals: eval.duals.clone(),
            aux: aux.clone(),
            objective,
            residual_sq,
            outer_iterations: iter + 1,
            diagnostics: Vec::new(),
        };
        if residual_sq <= settings.outer_tol {
            let mut done = current;
            done.diagnostics = diagnostics;
            return Ok(done);
        }
        if best
            .as_ref()
            .map_or(true, |b| residual_sq < b.residual_sq)
        {
            best = Some(current.clone());
        }

        // The alternation's direction can become an ascent direction of the
        // true residual norm near badly coupled fixed points. Hand the last
        // stretch to the Newton endgame when the line search fails outright
        // or twenty iterations bought less than a halving of the residual.
        let stalled = iter >= 20 && residual_sq > 0.5 * diagnostics[iter - 20].residual_sq;
        let step = if stalled {
            None
        } else {
            match newton_step(inst, &aux, &eval, settings) {
                Ok(s) => Some(s),
                Err(SolverError::LineSearchFailed { .. }) => None,
                Err(e) => return Err(e),
            }
        };
        match step {
            Some((next_aux, next_eval, l)) => {
                aux = next_aux;
                eval = next_eval;
                diagnostics.last_mut().expect("pushed above").line_search_l = Some(l);
            }
            None => {
                let budget = (settings.max_outer_iters - iter).max(30);
                return finish_with_polish(
                    inst, &aux, &eval.duals, budget, iter + 1, diagnostics, best, settings,
                );
            }
        }
    }

    finish_with_polish(
        inst,
        &aux,
        &eval.duals,
        30,
        settings.max_outer_iters,
        diagnostics,
        best,
        settings,
    )
}

/// Run the Newton endgame and package its outcome as a final result. gamma
/// does not influence the plans, so it is assigned its exact target here,
/// which zeroes the chi residuals.
#[allow(clippy::too_many_arguments)]
fn finish_with_polish(
    inst: &ProblemInstance,
    aux: &AuxVars,
    warm_duals: &[f64],
    budget: usize,
    iterations_so_far: usize,
    mut diagnostics: Vec<OuterDiag>,
    best: Option<SolveResult>,
    settings: &SolverSettings,
) -> Result<SolveResult, SolverError> {
    let outcome = polish::polish(inst, aux, warm_duals, budget, settings)?;
    let mut total_iterations = iterations_so_far + outcome.iterations;
    let (mut alpha, mut beta, mut eval, mut converged) =
        (outcome.alpha, outcome.beta, outcome.eval, outcome.converged);
    if !converged {
        // Newton stalled; switch to exact alternating descent on the plans,
        // then give Newton one more short run from the descent's point.
        let d = descent::descend(inst, &eval.p, &eval.w, &eval.duals, 4_000, settings)?;
        total_iterations += d.sweeps;
        (alpha, beta, eval, converged) = (d.alpha, d.beta, d.eval, d.converged);
        if !converged {
            let aux2 = AuxVars {
                alpha: alpha.clone(),
                beta: beta.clone(),
                gamma: vec![0.0; inst.n_clients()],
            };
            let again = polish::polish(inst, &aux2, &eval.duals, 30, settings)?;
            total_iterations += again.iterations;
            if again.eval.residual_sq() < eval.residual_sq() {
                (alpha, beta, eval, converged) =
                    (again.alpha, again.beta, again.eval, again.converged);
            }
        }
    }
    let (k_n, t_n) = (inst.n_clients(), inst.rounds);
    let tt = t_n as f64;
    let mut gamma = vec![0.0; k_n];
    for k in 0..k_n {
        let row_sum: f64 = (0..t_n).map(|t| eval.p[[k, t]]).sum();
        gamma[k] = inst.rho * tt * tt / (k_n as f64 * row_sum * row_sum);
    }
    let residual_sq = eval.residual_sq();
    let objective = match objective_p1(&eval.p, &eval.w, inst) {
        Ok(v) => v,
        Err(SolverError::InfeasiblePlan(_)) if !converged => f64::INFINITY,
        Err(e) => return Err(e),
    };
    diagnostics.push(OuterDiag {
        iteration: total_iterations,
        residual_sq,
        objective,
        line_search_l: None,
        dual_iterations: eval.dual_iterations,
    });
    let polished = SolveResult {
        p: eval.p,
        w: eval.w,
        duals: eval.duals,
        aux: AuxVars { alpha, beta, gamma },
        objective,
        residual_sq,
        outer_iterations: total_iterations,
        diagnostics: Vec::new(),
    };
    if converged {
        let mut done = polished;
        done.diagnostics = diagnostics;
        return Ok(done);
    }
    let mut best = match best {
        Some(b) if b.residual_sq < polished.residual_sq => b,
        _ => polished,
    };
    let residual_sq = best.residual_sq;
    best.diagnostics = diagnostics;
    Err(SolverError::OuterBudgetExhausted {
        iterations: total_iterations,
        residual_sq,
        best: Box::new(best),
    })
}
