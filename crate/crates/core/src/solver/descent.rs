//! Exact alternating descent on the weighted objective in plan space.
//!
//! The multiplier fixed point that the outer loop and the Newton endgame
//! chase is the stationarity system of the weighted objective itself. That
//! objective is convex in the probabilities for fixed bandwidth and convex
//! in the bandwidth for fixed probabilities (1/rate is convex because the
//! rate is concave in the fraction), and the feasible set is a product of a
//! box and per-round simplices. Minimizing each block exactly in turn
//! therefore decreases the true objective at every sweep and its limit
//! points are stationary, which is exactly a zero of the fixed-point
//! residual. No linearization is involved, so the iteration walks through
//! the active-set kinks that can defeat Newton directions when a round's
//! bandwidth column couples several clamped probability rows.
//!
//! The probability step reuses the closed-form row fill at marginal prices
//! 1/rate. The bandwidth step minimizes the round's expected transmission
//! energy directly: one dual bisection over the budget multiplier, with a
//! nested bisection per client on the marginal-energy curve, which is
//! strictly decreasing in the fraction.

use ndarray::Array2;

use super::inner::solve_p_row;
use super::polish::{evaluate, PolishEval};
use super::{ProblemInstance, SolverError, SolverSettings};
use crate::wireless::{self, CellConfig};

/// Marginal energy value of bandwidth for one client: -d/dw of c / R(w),
/// that is c R'(w) / R(w)^2 with R the transmission rate. Strictly
/// decreasing in w; diverges as w tends to zero.
fn energy_slope(c: f64, tx_power_w: f64, gain: f64, cell: &CellConfig, w: f64) -> f64 {
    let band = w * cell.total_bandwidth_hz;
    let snr = tx_power_w * gain / (band * cell.noise_density_w_per_hz);
    let rate = band * snr.ln_1p();
    let slope = cell.total_bandwidth_hz * (snr.ln_1p() - snr / (1.0 + snr));
    c * slope / (rate * rate)
}

/// Bandwidth fraction minimizing c / R(w) + v w over (0, 1]: the root of
/// energy_slope(w) = v, or 1 when the full band is still worth its price.
fn w_at_dual(c: f64, tx_power_w: f64, gain: f64, cell: &CellConfig, v: f64) -> f64 {
    let slope = |w: f64| energy_slope(c, tx_power_w, gain, cell, w);
    if slope(1.0) >= v {
        return 1.0;
    }
    // Walk down until the marginal value exceeds the price. The slope grows
    // without bound as w shrinks (rate^2 underflows before snr overflows),
    // so this terminates well inside the normal range.
    let mut hi = 1.0f64;
    let mut lo = 0.5f64;
    while slope(lo) < v {
        hi = lo;
        lo *= 0.5;
    }
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return lo;
        }
        if slope(mid) >= v {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}

/// One round's bandwidth column minimizing the round's expected
/// transmission energy subject to the unit budget. Returns the fractions,
/// the budget dual, and the number of dual evaluations.
fn solve_w_energy_column(
    inst: &ProblemInstance,
    p: &Array2<f64>,
    t: usize,
    v_init: f64,
    settings: &SolverSettings,
) -> Result<(Vec<f64>, f64, usize), SolverError> {
    let k_n = inst.n_clients();
    let s_nats = inst.cell.model_size_nats();
    let c: Vec<f64> = (0..k_n)
        .map(|k| p[[k, t]] * inst.profiles[k].tx_power_w * s_nats)
        .collect();

    let mut evals = 0usize;
    let column = |v: f64, evals: &mut usize| -> (Vec<f64>, f64) {
        *evals += 1;
        let mut w = vec![0.0; k_n];
        let mut sum_w = 0.0;
        for k in 0..k_n {
            w[k] = w_at_dual(
                c[k],
                inst.profiles[k].tx_power_w,
                inst.gains[[k, t]],
                &inst.cell,
                v,
            );
            sum_w += w[k];
        }
        (w, 1.0 - sum_w)
    };

    let finish = |mut w: Vec<f64>, v: f64, evals: usize| {
        let sum_w: f64 = w.iter().sum();
        if sum_w > 1.0 {
            // Exact feasibility: shrink the root-resolution overshoot.
            let scale = sum_w * (1.0 + 1e-12);
            for wk in &mut w {
                *wk /= scale;
            }
        }
        (w, v, evals)
    };

    // Every client takes the full band at a zero price, so the budget is
    // slack only for a single client.
    let (w0, gap0) = column(0.0, &mut evals);
    if gap0 >= 0.0 {
        return Ok(finish(w0, 0.0, evals));
    }

    // Expand from the marginal value of an even split until the budget
    // flips to slack; gap(lo) < 0 <= gap(hi).
    let even = (0..k_n)
        .map(|k| {
            energy_slope(
                c[k],
                inst.profiles[k].tx_power_w,
                inst.gains[[k, t]],
                &inst.cell,
                1.0 / k_n as f64,
            )
        })
        .sum::<f64>()
        / k_n as f64;
    let mut lo = 0.0f64;
    let mut hi = if v_init > 0.0 { v_init } else { even }.max(f64::MIN_POSITIVE);
    let mut best: Option<(Vec<f64>, f64, f64)> = None;
    let note = |w: Vec<f64>, v: f64, gap: f64, best: &mut Option<(Vec<f64>, f64, f64)>| {
        if best.as_ref().map_or(true, |(_, _, g)| gap.abs() < g.abs()) {
            *best = Some((w, v, gap));
        }
    };
    loop {
        let (w_hi, gap_hi) = column(hi, &mut evals);
        if gap_hi >= 0.0 {
            note(w_hi, hi, gap_hi, &mut best);
            break;
        }
        lo = hi;
        hi *= 2.0;
        if evals >= settings.max_dual_iters || !hi.is_finite() {
            return Err(SolverError::DualStalled {
                round: t,
                gap: gap_hi.abs(),
                iterations: evals,
            });
        }
    }

    // Bisect until the bracket collapses to adjacent floats.
    while evals < settings.max_dual_iters {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let (w_mid, gap_mid) = column(mid, &mut evals);
        note(w_mid, mid, gap_mid, &mut best);
        if gap_mid < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }

    let (w, v, gap) = best.expect("bracket expansion noted at least one point");
    if gap.abs() <= settings.dual_tol {
        Ok(finish(w, v, evals))
    } else {
        Err(SolverError::DualStalled {
            round: t,
            gap: gap.abs(),
            iterations: evals,
        })
    }
}

pub(crate) struct DescentOutcome {
    pub alpha: Array2<f64>,
    pub beta: Array2<f64>,
    pub eval: PolishEval,
    pub sweeps: usize,
    pub converged: bool,
}

/// Alternating exact block minimization from the given plans until the
/// fixed-point residual at the induced multipliers falls below `outer_tol`,
/// the sweep budget runs out, or twenty sweeps in a row fail to improve the
/// best residual by at least one percent.
pub(crate) fn descend(
    inst: &ProblemInstance,
    p0: &Array2<f64>,
    w0: &Array2<f64>,
    duals0: &[f64],
    budget: usize,
    settings: &SolverSettings,
) -> Result<DescentOutcome, SolverError> {
    let (k_n, t_n) = (inst.n_clients(), inst.rounds);
    let s_nats = inst.cell.model_size_nats();
    let energy_weight = 1.0 - inst.rho;

    let rate_at = |w: f64, k: usize, t: usize| -> Result<f64, SolverError> {
        Ok(wireless::transmission_rate(
            w,
            inst.profiles[k].tx_power_w,
            inst.gains[[k, t]],
            &inst.cell,
        )?)
    };

    let mut p = p0.clone();
    let mut w = w0.clone();
    // The warm duals come from the multiplier-weighted bandwidth problem,
    // whose prices carry an extra energy weight; the expansion absorbs the
    // difference.
    let mut duals: Vec<f64> = duals0.iter().map(|v| v / energy_weight).collect();
    let mut eval_duals = duals0.to_vec();

    let mut best: Option<(Array2<f64>, Array2<f64>, PolishEval)> = None;
    let mut best_res = f64::INFINITY;
    let mut sweeps_since_gain = 0usize;

    for sweep in 1..=budget {
        // Probability rows at marginal energy prices 1/rate.
        for k in 0..k_n {
            let mut alpha_row = vec![0.0; t_n];
            for t in 0..t_n {
                alpha_row[t] = 1.0 / rate_at(w[[k, t]], k, t)?;
            }
            let row = solve_p_row(inst, &alpha_row, k, settings)?;
            for t in 0..t_n {
                p[[k, t]] = row[t];
            }
        }
        // Bandwidth columns at the new probabilities.
        for t in 0..t_n {
            let (col, v_t, _) = solve_w_energy_column(inst, &p, t, duals[t], settings)?;
            for k in 0..k_n {
                w[[k, t]] = col[k];
            }
            duals[t] = v_t;
        }
        // Measure the fixed-point residual at the induced multipliers.
        let mut alpha = Array2::zeros((k_n, t_n));
        let mut beta = Array2::zeros((k_n, t_n));
        for k in 0..k_n {
            for t in 0..t_n {
                let rate = rate_at(w[[k, t]], k, t)?;
                alpha[[k, t]] = 1.0 / rate;
                beta[[k, t]] =
                    p[[k, t]] * inst.profiles[k].tx_power_w * s_nats * energy_weight / rate;
            }
        }
        let eval = evaluate(inst, &alpha, &beta, &eval_duals, settings)?;
        eval_duals = eval.duals.clone();
        let res = eval.residual_sq();
        if res < 0.99 * best_res {
            sweeps_since_gain = 0;
        } else {
            sweeps_since_gain += 1;
        }
        if res < best_res {
            best_res = res;
            best = Some((alpha, beta, eval));
        }
        if best_res <= settings.outer_tol {
            let (alpha, beta, eval) = best.expect("best recorded on improvement");
            return Ok(DescentOutcome {
                alpha,
                beta,
                eval,
                sweeps: sweep,
                converged: true,
            });
        }
        if sweeps_since_gain >= 20 {
            let (alpha, beta, eval) = best.expect("best recorded on improvement");
            return Ok(DescentOutcome {
                alpha,
                beta,
                eval,
                sweeps: sweep,
                converged: false,
            });
        }
    }
    match best {
        Some((alpha, beta, eval)) => Ok(DescentOutcome {
            alpha,
            beta,
            eval,
            sweeps: budget,
            converged: best_res <= settings.outer_tol,
        }),
        None => Err(SolverError::InvalidSettings(
            "descent budget must be positive".into(),
        )),
    }
}
