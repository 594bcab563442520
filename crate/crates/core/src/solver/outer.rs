//! Fixed-point residuals of the subtractive transform and the modified
//! Newton update of its multipliers.

use ndarray::Array2;

use super::inner::{solve_p_bcd, solve_w_dual};
use super::{rate_matrix, ProblemInstance, SolverError, SolverSettings};

/// Transform multipliers: alpha and beta per (client, round), gamma per
/// client. At the solution, alpha R = 1, beta R = p P S (1-rho), and
/// gamma = rho T^2 / (K (sum_t p)^2).
#[derive(Debug, Clone, PartialEq)]
pub struct AuxVars {
    pub alpha: Array2<f64>,
    pub beta: Array2<f64>,
    pub gamma: Vec<f64>,
}

/// Fixed-point residuals: psi and kappa per (client, round), chi per client.
#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    pub psi: Array2<f64>,
    pub kappa: Array2<f64>,
    pub chi: Vec<f64>,
}

impl Residuals {
    /// Total squared residual; chi counts once per client.
    pub fn norm_sq(&self) -> f64 {
        let mut total = 0.0;
        for v in self.psi.iter() {
            total += v * v;
        }
        for v in self.kappa.iter() {
            total += v * v;
        }
        for v in &self.chi {
            total += v * v;
        }
        total
    }
}

/// Exact inner-layer solution at fixed multipliers: probability plan from
/// coordinate descent, bandwidth plan from the per-round duals, plus the
/// rates and fixed-point residuals those plans induce.
#[derive(Debug, Clone)]
pub struct InnerSolution {
    pub p: Array2<f64>,
    pub w: Array2<f64>,
    pub duals: Vec<f64>,
    pub rates: Array2<f64>,
    pub res: Residuals,
    pub dual_iterations: usize,
}

/// Solve both inner subproblems at fixed multipliers. `warm_duals` seeds the
/// per-round dual searches (length T, zeros are fine).
pub fn solve_inner(
    inst: &ProblemInstance,
    aux: &AuxVars,
    warm_duals: &[f64],
    settings: &SolverSettings,
) -> Result<InnerSolution, SolverError> {
    let (k_n, t_n) = (inst.n_clients(), inst.rounds);
    let p = solve_p_bcd(inst, &aux.alpha, settings)?;
    let mut w = Array2::zeros((k_n, t_n));
    let mut duals = vec![0.0; t_n];
    let mut dual_iterations = 0;
    for t in 0..t_n {
        let warm = warm_duals.get(t).copied().unwrap_or(0.0);
        let (col, v_t, iters) = solve_w_dual(inst, &aux.alpha, &aux.beta, t, warm, settings)?;
        for k in 0..k_n {
            w[[k, t]] = col[k];
        }
        duals[t] = v_t;
        dual_iterations += iters;
    }
    let rates = rate_matrix(&w, inst)?;
    let res = residuals_with_rates(inst, &p, &rates, aux);
    Ok(InnerSolution {
        p,
        w,
        duals,
        rates,
        res,
        dual_iterations,
    })
}

/// Residuals of plans (p, w) against multipliers `aux`.
pub fn residuals(
    inst: &ProblemInstance,
    p: &Array2<f64>,
    w: &Array2<f64>,
    aux: &AuxVars,
) -> Result<Residuals, SolverError> {
    let rates = rate_matrix(w, inst)?;
    Ok(residuals_with_rates(inst, p, &rates, aux))
}

pub(crate) fn residuals_with_rates(
    inst: &ProblemInstance,
    p: &Array2<f64>,
    rates: &Array2<f64>,
    aux: &AuxVars,
) -> Residuals {
    let (k_n, t_n) = (inst.n_clients(), inst.rounds);
    let s_nats = inst.cell.model_size_nats();
    let tt = t_n as f64;
    let mut psi = Array2::zeros((k_n, t_n));
    let mut kappa = Array2::zeros((k_n, t_n));
    let mut chi = vec![0.0; k_n];
    for k in 0..k_n {
        let power = inst.profiles[k].tx_power_w;
        let mut row_sum = 0.0;
        for t in 0..t_n {
            let r = rates[[k, t]];
            psi[[k, t]] = aux.alpha[[k, t]] * r - 1.0;
            kappa[[k, t]] =
                aux.beta[[k, t]] * r - p[[k, t]] * power * s_nats * (1.0 - inst.rho);
            row_sum += p[[k, t]];
        }
        chi[k] = aux.gamma[k] - inst.rho * tt * tt / (k_n as f64 * row_sum * row_sum);
    }
    Residuals { psi, kappa, chi }
}

/// Multiplier values that would zero each residual at the current plans.
fn targets(
    inst: &ProblemInstance,
    p: &Array2<f64>,
    rates: &Array2<f64>,
) -> Result<AuxVars, SolverError> {
    let (k_n, t_n) = (inst.n_clients(), inst.rounds);
    let s_nats = inst.cell.model_size_nats();
    let tt = t_n as f64;
    let mut alpha = Array2::zeros((k_n, t_n));
    let mut beta = Array2::zeros((k_n, t_n));
    let mut gamma = vec![0.0; k_n];
    for k in 0..k_n {
        let power = inst.profiles[k].tx_power_w;
        let mut row_sum = 0.0;
        for t in 0..t_n {
            let r = rates[[k, t]];
            if !(r > 0.0) {
                return Err(SolverError::InfeasiblePlan(format!(
                    "client {} round {t}: zero rate blocks the multiplier update",
                    k + 1
                )));
            }
            alpha[[k, t]] = 1.0 / r;
            beta[[k, t]] = p[[k, t]] * power * s_nats * (1.0 - inst.rho) / r;
            row_sum += p[[k, t]];
        }
        gamma[k] = inst.rho * tt * tt / (k_n as f64 * row_sum * row_sum);
    }
    Ok(AuxVars { alpha, beta, gamma })
}

/// Convex combination of current multipliers and targets with the given weight.
fn blend(aux: &AuxVars, target: &AuxVars, weight: f64) -> AuxVars {
    let keep = 1.0 - weight;
    AuxVars {
        alpha: keep * &aux.alpha + weight * &target.alpha,
        beta: keep * &aux.beta + weight * &target.beta,
        gamma: aux
            .gamma
            .iter()
            .zip(&target.gamma)
            .map(|(g, tg)| keep * g + weight * tg)
            .collect(),
    }
}

/// Modified Newton update: step toward the residual-zeroing targets with the
/// largest backtracked weight zeta^l, l in {1, 2, ...}, whose re-solved inner
/// solution passes the sufficient-decrease test
/// |r(new)|^2 <= (1 - epsilon zeta^l) |r(old)|^2.
///
/// The test must use the residuals of the candidate's own inner solution; at
/// fixed plans the residuals are affine in the multipliers and every step
/// would look like a guaranteed contraction, so a fixed-plan test cannot damp
/// the iteration when the plans swing. Capping the weight at zeta also keeps
/// the update away from full-step oscillation when the inner map reverses
/// direction. Returns the accepted multipliers, their inner solution, and the
/// accepted exponent l.
pub fn newton_step(
    inst: &ProblemInstance,
    aux: &AuxVars,
    current: &InnerSolution,
    settings: &SolverSettings,
) -> Result<(AuxVars, InnerSolution, usize), SolverError> {
    let target = targets(inst, &current.p, &current.rates)?;
    let current_sq = current.res.norm_sq();
    for l in 1..=settings.l_max {
        let weight = settings.zeta.powi(l as i32);
        let candidate = blend(aux, &target, weight);
        let trial = solve_inner(inst, &candidate, &current.duals, settings)?;
        if trial.res.norm_sq() <= (1.0 - settings.epsilon * weight) * current_sq {
            return Ok((candidate, trial, l));
        }
    }
    Err(SolverError::LineSearchFailed {
        l_max: settings.l_max,
        residual_sq: current_sq,
    })
}
