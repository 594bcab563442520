//! Per-round variant of the optimizer: one probability and one bandwidth
//! fraction per client, using only the current round's channel gains. The
//! horizon length scales the energy term, and nothing else in the problem
//! depends on the round count, so the single-round problem over horizon T is
//! exactly the full-horizon problem with T = 1 and the model size multiplied
//! by the horizon. `solve_online` exploits that and delegates to
//! [`solve_joint`](super::solve_joint).

use super::outer::AuxVars;
use super::{solve_joint, OuterDiag, ProblemInstance, SolverError, SolverSettings};
use crate::wireless::{self, CellConfig, ClientProfile};
use ndarray::Array2;

/// Single-round problem data. `horizon_rounds` is the deployment horizon T
/// entering the objective scaling, not the number of gain columns (always 1).
#[derive(Debug, Clone)]
pub struct OnlineInstance {
    pub horizon_rounds: usize,
    pub rho: f64,
    pub lambda_min: f64,
    pub cell: CellConfig,
    pub profiles: Vec<ClientProfile>,
    /// Current-round channel gains, one per client.
    pub gains: Vec<f64>,
}

impl OnlineInstance {
    pub fn new(
        horizon_rounds: usize,
        rho: f64,
        lambda_min: f64,
        cell: CellConfig,
        profiles: Vec<ClientProfile>,
        gains: Vec<f64>,
    ) -> Result<Self, SolverError> {
        let inst = Self {
            horizon_rounds,
            rho,
            lambda_min,
            cell,
            profiles,
            gains,
        };
        inst.as_scaled_instance()?;
        Ok(inst)
    }

    /// The equivalent T=1 offline instance: same gains, model size scaled by
    /// the horizon. At `horizon_rounds == 1` the instances match bit for bit.
    fn as_scaled_instance(&self) -> Result<ProblemInstance, SolverError> {
        if self.horizon_rounds == 0 {
            return Err(SolverError::InvalidInstance(
                "horizon_rounds must be >= 1".into(),
            ));
        }
        let k_n = self.profiles.len();
        let gains = Array2::from_shape_fn((k_n, 1), |(k, _)| self.gains[k]);
        let mut cell = self.cell.clone();
        cell.model_size_bits *= self.horizon_rounds as f64;
        ProblemInstance::new(1, self.rho, self.lambda_min, cell, self.profiles.clone(), gains)
    }
}

/// Converged single-round plan.
#[derive(Debug, Clone)]
pub struct OnlineSolveResult {
    pub p: Vec<f64>,
    pub w: Vec<f64>,
    pub dual: f64,
    pub objective: f64,
    pub residual_sq: f64,
    pub outer_iterations: usize,
    pub diagnostics: Vec<OuterDiag>,
    /// Transform multipliers at the returned plan.
    pub aux: AuxVars,
}

/// Objective of the time-invariant plan:
/// rho/K sum_k (1/p_k)^2 + (1-rho) T sum_k p_k P_k S / R_k.
pub fn objective_online(p: &[f64], w: &[f64], inst: &OnlineInstance) -> Result<f64, SolverError> {
    let k_n = inst.profiles.len();
    let s_nats = inst.cell.model_size_nats();
    let tt = inst.horizon_rounds as f64;
    let mut conv = 0.0;
    let mut energy = 0.0;
    for k in 0..k_n {
        if !(inst.lambda_min - 1e-9..=1.0 + 1e-9).contains(&p[k]) {
            return Err(SolverError::InfeasiblePlan(format!(
                "p[{}] = {} outside [{}, 1]",
                k + 1,
                p[k],
                inst.lambda_min
            )));
        }
        conv += 1.0 / (p[k] * p[k]);
        let rate = wireless::transmission_rate(
            w[k],
            inst.profiles[k].tx_power_w,
            inst.gains[k],
            &inst.cell,
        )?;
        if rate <= 0.0 {
            return Err(SolverError::InfeasiblePlan(format!(
                "client {}: zero rate with positive probability",
                k + 1
            )));
        }
        energy += p[k] * inst.profiles[k].tx_power_w * s_nats / rate;
    }
    Ok(inst.rho * conv / k_n as f64 + (1.0 - inst.rho) * tt * energy)
}

/// Solve the single-round problem by delegating to the full-horizon solver on
/// the equivalent scaled instance.
pub fn solve_online(
    inst: &OnlineInstance,
    settings: &SolverSettings,
) -> Result<OnlineSolveResult, SolverError> {
    let scaled = inst.as_scaled_instance()?;
    let out = solve_joint(&scaled, settings)?;
    Ok(OnlineSolveResult {
        p: out.p.iter().copied().collect(),
        w: out.w.iter().copied().collect(),
        dual: out.duals[0],
        objective: out.objective,
        residual_sq: out.residual_sq,
        outer_iterations: out.outer_iterations,
        diagnostics: out.diagnostics,
        aux: out.aux,
    })
}
