//! Damped Newton endgame for the transform's fixed-point system.
//!
//! The alternation in `newton_step` moves the multipliers toward targets
//! computed at the current plans, ignoring how the plans react. Near some
//! fixed points that direction turns into an ascent direction of the true
//! residual norm and the backtracking stalls well above `outer_tol`. This
//! module differentiates the full residual map (inner solutions included) by
//! finite differences and drives it to zero with damped Newton steps.
//!
//! Rounds with bit-identical gain columns are exchangeable: the fixed point
//! ties their plans and multipliers, and a one-round perturbation of a tied
//! row snaps the row's fill to a different optimal face, so the one-round
//! derivative does not exist. The Jacobian is therefore taken on the quotient
//! system, perturbing a client's multiplier across a whole round group; the
//! tied response is smooth and zeroing the representative residuals zeroes
//! every member's.
//!
//! gamma is excluded from the system: it does not influence the plans, so it
//! is assigned its exact target at the end, which zeroes chi.

use std::collections::HashMap;

use ndarray::Array2;

use super::inner::{solve_p_row, solve_w_dual};
use super::outer::AuxVars;
use super::{ProblemInstance, SolverError, SolverSettings};
use crate::wireless;

/// Exchangeable-round groups: rounds whose entire gain column is
/// bit-identical, ordered by first occurrence.
struct RoundGroups {
    members: Vec<Vec<usize>>,
}

impl RoundGroups {
    fn detect(inst: &ProblemInstance) -> Self {
        let (k_n, t_n) = (inst.n_clients(), inst.rounds);
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut members: Vec<Vec<usize>> = Vec::new();
        for t in 0..t_n {
            let key: Vec<u64> = (0..k_n).map(|k| inst.gains[[k, t]].to_bits()).collect();
            let g = *seen.entry(key).or_insert_with(|| {
                members.push(Vec::new());
                members.len() - 1
            });
            members[g].push(t);
        }
        Self { members }
    }

    fn len(&self) -> usize {
        self.members.len()
    }

    fn rep(&self, g: usize) -> usize {
        self.members[g][0]
    }
}

/// Plans, rates and the full residual vector induced by one inner solve.
pub(crate) struct PolishEval {
    pub p: Array2<f64>,
    pub w: Array2<f64>,
    pub duals: Vec<f64>,
    pub rates: Array2<f64>,
    /// psi entries at k*T + t, then kappa entries at KT + k*T + t.
    pub r: Vec<f64>,
    pub dual_iterations: usize,
}

impl PolishEval {
    pub fn residual_sq(&self) -> f64 {
        self.r.iter().map(|v| v * v).sum()
    }
}

fn rate_of(inst: &ProblemInstance, w: f64, k: usize, t: usize) -> Result<f64, SolverError> {
    Ok(wireless::transmission_rate(
        w,
        inst.profiles[k].tx_power_w,
        inst.gains[[k, t]],
        &inst.cell,
    )?)
}

fn psi_at(alpha_kt: f64, rate: f64) -> f64 {
    alpha_kt * rate - 1.0
}

fn kappa_at(inst: &ProblemInstance, beta_kt: f64, rate: f64, p_kt: f64, k: usize) -> f64 {
    beta_kt * rate
        - p_kt * inst.profiles[k].tx_power_w * inst.cell.model_size_nats() * (1.0 - inst.rho)
}

pub(crate) fn evaluate(
    inst: &ProblemInstance,
    alpha: &Array2<f64>,
    beta: &Array2<f64>,
    warm_duals: &[f64],
    settings: &SolverSettings,
) -> Result<PolishEval, SolverError> {
    let (k_n, t_n) = (inst.n_clients(), inst.rounds);
    let mut p = Array2::zeros((k_n, t_n));
    for k in 0..k_n {
        let alpha_row: Vec<f64> = (0..t_n).map(|t| alpha[[k, t]]).collect();
        let row = solve_p_row(inst, &alpha_row, k, settings)?;
        for t in 0..t_n {
            p[[k, t]] = row[t];
        }
    }
    let mut w = Array2::zeros((k_n, t_n));
    let mut duals = vec![0.0; t_n];
    let mut dual_iterations = 0;
    for t in 0..t_n {
        let warm = warm_duals.get(t).copied().unwrap_or(0.0);
        let (col, v_t, iters) = solve_w_dual(inst, alpha, beta, t, warm, settings)?;
        for k in 0..k_n {
            w[[k, t]] = col[k];
        }
        duals[t] = v_t;
        dual_iterations += iters;
    }
    let mut rates = Array2::zeros((k_n, t_n));
    let mut r = vec![0.0; 2 * k_n * t_n];
    for k in 0..k_n {
        for t in 0..t_n {
            let rate = rate_of(inst, w[[k, t]], k, t)?;
            rates[[k, t]] = rate;
            r[k * t_n + t] = psi_at(alpha[[k, t]], rate);
            r[k_n * t_n + k * t_n + t] = kappa_at(inst, beta[[k, t]], rate, p[[k, t]], k);
        }
    }
    Ok(PolishEval {
        p,
        w,
        duals,
        rates,
        r,
        dual_iterations,
    })
}

/// Residuals of the quotient system: psi then kappa at each (client, group
/// representative).
fn reduced_residual(eval: &PolishEval, groups: &RoundGroups, k_n: usize, t_n: usize) -> Vec<f64> {
    let g_n = groups.len();
    let mut r = vec![0.0; 2 * k_n * g_n];
    for k in 0..k_n {
        for g in 0..g_n {
            let t = groups.rep(g);
            r[k * g_n + g] = eval.r[k * t_n + t];
            r[k_n * g_n + k * g_n + g] = eval.r[k_n * t_n + k * t_n + t];
        }
    }
    r
}

/// Finite-difference Jacobian of the quotient residual map. Perturbing the
/// alpha of (client k, group g) reaches residuals only through client k's
/// probability row and group g's bandwidth column; perturbing the beta only
/// through the column. Each variable costs one row re-solve and/or one dual
/// re-solve.
fn jacobian(
    inst: &ProblemInstance,
    alpha: &Array2<f64>,
    beta: &Array2<f64>,
    base: &PolishEval,
    groups: &RoundGroups,
    settings: &SolverSettings,
) -> Result<Array2<f64>, SolverError> {
    let (k_n, t_n) = (inst.n_clients(), inst.rounds);
    let g_n = groups.len();
    let n = 2 * k_n * g_n;
    let mut jac = Array2::zeros((n, n));
    let base_red = reduced_residual(base, groups, k_n, t_n);

    let mut col_buf = vec![0.0; n];
    for k in 0..k_n {
        for g in 0..g_n {
            let rep = groups.rep(g);
            // alpha[(k, g)] column.
            {
                let h = 1e-6 * alpha[[k, rep]];
                let mut alpha_p = alpha.clone();
                for &t in &groups.members[g] {
                    alpha_p[[k, t]] += h;
                }
                let alpha_row: Vec<f64> = (0..t_n).map(|j| alpha_p[[k, j]]).collect();
                let p_row = solve_p_row(inst, &alpha_row, k, settings)?;
                let (w_col, _, _) =
                    solve_w_dual(inst, &alpha_p, beta, rep, base.duals[rep], settings)?;
                col_buf.iter_mut().for_each(|v| *v = 0.0);
                for j in 0..k_n {
                    let rate = rate_of(inst, w_col[j], j, rep)?;
                    let p_j = if j == k { p_row[rep] } else { base.p[[j, rep]] };
                    col_buf[j * g_n + g] = psi_at(alpha_p[[j, rep]], rate) - base_red[j * g_n + g];
                    col_buf[k_n * g_n + j * g_n + g] =
                        kappa_at(inst, beta[[j, rep]], rate, p_j, j)
                            - base_red[k_n * g_n + j * g_n + g];
                }
                for gj in 0..g_n {
                    if gj == g {
                        continue;
                    }
                    // Other groups keep their rates; only p moved.
                    let tj = groups.rep(gj);
                    col_buf[k_n * g_n + k * g_n + gj] =
                        kappa_at(inst, beta[[k, tj]], base.rates[[k, tj]], p_row[tj], k)
                            - base_red[k_n * g_n + k * g_n + gj];
                }
                let col_idx = k * g_n + g;
                for (row, dv) in col_buf.iter().enumerate() {
                    jac[[row, col_idx]] = dv / h;
                }
            }
            // beta[(k, g)] column: probabilities do not depend on beta.
            {
                let h = 1e-6 * beta[[k, rep]];
                let mut beta_p = beta.clone();
                for &t in &groups.members[g] {
                    beta_p[[k, t]] += h;
                }
                let (w_col, _, _) =
                    solve_w_dual(inst, alpha, &beta_p, rep, base.duals[rep], settings)?;
                col_buf.iter_mut().for_each(|v| *v = 0.0);
                for j in 0..k_n {
                    let rate = rate_of(inst, w_col[j], j, rep)?;
                    col_buf[j * g_n + g] = psi_at(alpha[[j, rep]], rate) - base_red[j * g_n + g];
                    col_buf[k_n * g_n + j * g_n + g] =
                        kappa_at(inst, beta_p[[j, rep]], rate, base.p[[j, rep]], j)
                            - base_red[k_n * g_n + j * g_n + g];
                }
                let col_idx = k_n * g_n + k * g_n + g;
                for (row, dv) in col_buf.iter().enumerate() {
                    jac[[row, col_idx]] = dv / h;
                }
            }
        }
    }
    Ok(jac)
}

/// In-place LU solve with partial pivoting and row equilibration.
/// Returns None when a pivot collapses (singular system).
fn lu_solve(mut a: Array2<f64>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for i in 0..n {
        let scale = (0..n).map(|j| a[[i, j]].abs()).fold(0.0f64, f64::max);
        if !(scale > 0.0 && scale.is_finite()) {
            return None;
        }
        for j in 0..n {
            a[[i, j]] /= scale;
        }
        b[i] /= scale;
    }
    let mut perm: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let (pivot_row, pivot_abs) = (col..n)
            .map(|r| (r, a[[perm[r], col]].abs()))
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap();
        if pivot_abs < 1e-14 {
            return None;
        }
        perm.swap(col, pivot_row);
        let prow = perm[col];
        for r in (col + 1)..n {
            let row = perm[r];
            let factor = a[[row, col]] / a[[prow, col]];
            if factor == 0.0 {
                continue;
            }
            a[[row, col]] = factor;
            for j in (col + 1)..n {
                let upd = a[[prow, j]];
                a[[row, j]] -= factor * upd;
            }
            b[row] -= factor * b[prow];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let row = perm[col];
        let mut acc = b[row];
        for j in (col + 1)..n {
            acc -= a[[row, j]] * x[j];
        }
        x[col] = acc / a[[row, col]];
    }
    Some(x)
}

pub(crate) struct PolishOutcome {
    pub alpha: Array2<f64>,
    pub beta: Array2<f64>,
    pub eval: PolishEval,
    pub iterations: usize,
    pub converged: bool,
}

/// Newton iterations from (alpha, beta) until the squared residual falls
/// below `outer_tol` or `budget` iterations run out. Steps are damped by
/// backtracking and kept inside the positive orthant. The step direction
/// comes from the quotient system; the decrease test uses the full residual.
pub(crate) fn polish(
    inst: &ProblemInstance,
    aux: &AuxVars,
    warm_duals: &[f64],
    budget: usize,
    settings: &SolverSettings,
) -> Result<PolishOutcome, SolverError> {
    let (k_n, t_n) = (inst.n_clients(), inst.rounds);
    let groups = RoundGroups::detect(inst);
    let g_n = groups.len();

    // Symmetrize within groups so exchangeable rounds carry one value; the
    // alternation keeps them tied anyway, this guards against drift.
    let mut alpha = aux.alpha.clone();
    let mut beta = aux.beta.clone();
    for k in 0..k_n {
        for g in 0..g_n {
            let m = groups.members[g].len() as f64;
            let mean_a: f64 = groups.members[g].iter().map(|&t| alpha[[k, t]]).sum::<f64>() / m;
            let mean_b: f64 = groups.members[g].iter().map(|&t| beta[[k, t]]).sum::<f64>() / m;
            for &t in &groups.members[g] {
                alpha[[k, t]] = mean_a;
                beta[[k, t]] = mean_b;
            }
        }
    }

    let mut eval = evaluate(inst, &alpha, &beta, warm_duals, settings)?;
    let mut iterations = 0;

    while iterations < budget {
        let res_sq = eval.residual_sq();
        if res_sq <= settings.outer_tol {
            return Ok(PolishOutcome {
                alpha,
                beta,
                eval,
                iterations,
                converged: true,
            });
        }
        iterations += 1;
        let jac = jacobian(inst, &alpha, &beta, &eval, &groups, settings)?;
        let rhs: Vec<f64> = reduced_residual(&eval, &groups, k_n, t_n)
            .iter()
            .map(|v| -v)
            .collect();
        let Some(d) = lu_solve(jac, rhs) else {
            break;
        };

        // Keep every multiplier at least 10% of its current value.
        let mut s_max = 1.0f64;
        for k in 0..k_n {
            for g in 0..g_n {
                let rep = groups.rep(g);
                let da = d[k * g_n + g];
                if da < 0.0 {
                    s_max = s_max.min(0.9 * alpha[[k, rep]] / -da);
                }
                let db = d[k_n * g_n + k * g_n + g];
                if db < 0.0 {
                    s_max = s_max.min(0.9 * beta[[k, rep]] / -db);
                }
            }
        }

        let mut accepted = None;
        let mut s = s_max;
        for _ in 0..settings.l_max {
            let mut alpha_c = alpha.clone();
            let mut beta_c = beta.clone();
            for k in 0..k_n {
                for g in 0..g_n {
                    for &t in &groups.members[g] {
                        alpha_c[[k, t]] += s * d[k * g_n + g];
                        beta_c[[k, t]] += s * d[k_n * g_n + k * g_n + g];
                    }
                }
            }
            let trial = evaluate(inst, &alpha_c, &beta_c, &eval.duals, settings)?;
            if trial.residual_sq() <= (1.0 - settings.epsilon * s) * res_sq {
                accepted = Some((alpha_c, beta_c, trial));
                break;
            }
            s *= settings.zeta;
        }
        match accepted {
            Some((a, b, trial)) => {
                alpha = a;
                beta = b;
                eval = trial;
            }
            None => break,
        }
    }
    let converged = eval.residual_sq() <= settings.outer_tol;
    Ok(PolishOutcome {
        alpha,
        beta,
        eval,
        iterations,
        converged,
    })
}
