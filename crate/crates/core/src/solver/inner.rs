//! Inner solves for fixed transform multipliers: per-client probability
//! rows by exact cyclic coordinate descent, per-round bandwidth columns by a
//! Lambert-W closed form under a projected subgradient dual.

use ndarray::Array2;

use super::lambert::lambert_w0;
use super::{ProblemInstance, SolverError, SolverSettings};

/// Cube-root target for the row sum of client k's probabilities implied by
/// the stationarity condition at (k, t):
/// sum_t p = (2 rho T^2 / (K alpha_kt P_k S (1-rho)))^(1/3).
fn row_sum_target(inst: &ProblemInstance, alpha_kt: f64, k: usize) -> f64 {
    let tt = inst.rounds as f64;
    let k_n = inst.n_clients() as f64;
    let s_nats = inst.cell.model_size_nats();
    let numer = 2.0 * inst.rho * tt * tt;
    let denom = k_n * alpha_kt * inst.profiles[k].tx_power_w * s_nats * (1.0 - inst.rho);
    (numer / denom).cbrt()
}

/// Exact minimizer of the (k, t) coordinate with the rest of the row fixed:
/// clamp(target_sum - sum_{j != t} p_kj, lambda, 1).
pub fn bcd_update_p(
    inst: &ProblemInstance,
    alpha_kt: f64,
    p_row: &[f64],
    k: usize,
    t: usize,
) -> f64 {
    let sum_others: f64 = p_row
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != t)
        .map(|(_, v)| v)
        .sum();
    let target = row_sum_target(inst, alpha_kt, k);
    (target - sum_others).clamp(inst.lambda_min, 1.0)
}

/// One client's probability row. The row objective depends on p only through
/// its sum and the alpha-weighted sum, so the minimizer fills rounds in
/// ascending-alpha order (ones, then one fractional coordinate, then the
/// floor) with the total picked by the cube-root stationarity condition of
/// the fractional round. Coordinate sweeps from that point are verification:
/// naive cyclic descent from a cold start crawls when alphas within a row are
/// nearly tied, stepping only by the gap between their cube-root targets.
pub fn solve_p_row(
    inst: &ProblemInstance,
    alpha_row: &[f64],
    k: usize,
    settings: &SolverSettings,
) -> Result<Vec<f64>, SolverError> {
    let t_n = inst.rounds;
    let lambda = inst.lambda_min;
    let mut order: Vec<usize> = (0..t_n).collect();
    order.sort_by(|&a, &b| alpha_row[a].total_cmp(&alpha_row[b]).then(a.cmp(&b)));

    // Segment j: rounds order[..j] pinned at 1, order[j] fractional,
    // order[j+1..] at lambda. The row-sum derivative is increasing within a
    // segment and jumps up at breakpoints, so scan for the first segment
    // whose stationary sum falls inside it.
    let mut row = vec![lambda; t_n];
    let mut placed = false;
    for j in 0..t_n {
        let target = row_sum_target(inst, alpha_row[order[j]], k);
        let lo = j as f64 + lambda * (t_n - j) as f64;
        let hi = (j + 1) as f64 + lambda * (t_n - j - 1) as f64;
        if target <= hi {
            let s_opt = target.max(lo);
            for &t in &order[..j] {
                row[t] = 1.0;
            }
            row[order[j]] = (s_opt - j as f64 - lambda * (t_n - j - 1) as f64)
                .clamp(lambda, 1.0);
            placed = true;
            break;
        }
    }
    if !placed {
        row.iter_mut().for_each(|p| *p = 1.0);
    }

    let mut converged = false;
    let mut last_change = f64::INFINITY;
    for _sweep in 0..settings.max_bcd_sweeps {
        let mut max_change: f64 = 0.0;
        for t in 0..t_n {
            let new = bcd_update_p(inst, alpha_row[t], &row, k, t);
            max_change = max_change.max((new - row[t]).abs());
            row[t] = new;
        }
        if max_change <= settings.bcd_tol {
            converged = true;
            break;
        }
        last_change = max_change;
    }
    if !converged {
        return Err(SolverError::BcdStalled {
            client: k + 1,
            sweeps: settings.max_bcd_sweeps,
            last_change,
        });
    }
    canonicalize_ties(inst, alpha_row, &mut row);
    Ok(row)
}

/// Cyclic coordinate descent over each client's probability row, all clients
/// independent.
pub fn solve_p_bcd(
    inst: &ProblemInstance,
    alpha: &Array2<f64>,
    settings: &SolverSettings,
) -> Result<Array2<f64>, SolverError> {
    let (k_n, t_n) = (inst.n_clients(), inst.rounds);
    let mut p = Array2::zeros((k_n, t_n));
    for k in 0..k_n {
        let alpha_row: Vec<f64> = (0..t_n).map(|t| alpha[[k, t]]).collect();
        let row = solve_p_row(inst, &alpha_row, k, settings)?;
        for t in 0..t_n {
            p[[k, t]] = row[t];
        }
    }
    Ok(p)
}

/// Rounds with bit-identical alpha have identical coordinate gradients, so
/// any split of their total is optimal; average them so symmetric inputs
/// yield symmetric plans.
fn canonicalize_ties(inst: &ProblemInstance, alpha_row: &[f64], row: &mut [f64]) {
    let t_n = row.len();
    let mut handled = vec![false; t_n];
    for t in 0..t_n {
        if handled[t] {
            continue;
        }
        let key = alpha_row[t].to_bits();
        let group: Vec<usize> = (t..t_n)
            .filter(|&j| alpha_row[j].to_bits() == key)
            .collect();
        if group.len() > 1 {
            let mean = group.iter().map(|&j| row[j]).sum::<f64>() / group.len() as f64;
            let mean = mean.clamp(inst.lambda_min, 1.0);
            for &j in &group {
                row[j] = mean;
            }
        }
        for &j in &group {
            handled[j] = true;
        }
    }
}

/// exp(W0(-e^{-A}) + A) - 1 for A >= 1, the denominator factor of the
/// closed-form bandwidth fraction. Near A = 1 the two exponent terms cancel,
/// so a branch-point series for the sum keeps full relative accuracy.
fn denominator_factor(a: f64) -> Result<f64, SolverError> {
    debug_assert!(a >= 1.0);
    let delta = a - 1.0;
    if delta < 1e-4 {
        // p = sqrt(2 (1 - e^{-delta})); W0 series around the branch point.
        let p = (-2.0 * (-delta).exp_m1()).max(0.0).sqrt();
        let series_tail = p
            * (1.0
                + p * (-1.0 / 3.0
                    + p * (11.0 / 72.0
                        + p * (-43.0 / 540.0
                            + p * (769.0 / 17280.0 - p * 221.0 / 8505.0)))));
        Ok((series_tail + delta).exp_m1())
    } else {
        let w0 = lambert_w0(-(-a).exp())?;
        Ok((w0 + a).exp_m1())
    }
}

/// Closed-form maximizer of alpha beta R(w) - v w over w in [0, 1]:
/// w = clamp(P h / (W N0 (exp(W0(-e^{-A}) + A) - 1)), 0, 1) with
/// A = (alpha beta W + v) / (alpha beta W).
pub fn optimal_w(
    alpha_kt: f64,
    beta_kt: f64,
    v: f64,
    tx_power_w: f64,
    gain: f64,
    inst: &ProblemInstance,
) -> Result<f64, SolverError> {
    if v < 0.0 {
        return Err(SolverError::NegativeDual(v));
    }
    if !(alpha_kt > 0.0 && beta_kt > 0.0) {
        return Err(SolverError::InvalidInstance(format!(
            "multipliers must be positive, got alpha = {alpha_kt}, beta = {beta_kt}"
        )));
    }
    let band_weight = alpha_kt * beta_kt * inst.cell.total_bandwidth_hz;
    let a = (band_weight + v) / band_weight;
    let factor = denominator_factor(a)?;
    if factor <= 0.0 {
        // v = 0: the unconstrained optimum is unbounded, clamp to the full band.
        return Ok(1.0);
    }
    let unclamped = tx_power_w * gain
        / (inst.cell.total_bandwidth_hz * inst.cell.noise_density_w_per_hz * factor);
    Ok(unclamped.min(1.0))
}

/// Bandwidth allocation for round `t`: closed-form fractions under a shared
/// dual `v`, with `v` driven to the band budget. Returns (fractions, final
/// dual, closed-form evaluations of the whole column).
///
/// The budget gap 1 - sum_k w_k(v) is continuous and non-decreasing in `v`,
/// so the dual is found by bracketing and bisection; a diminishing-step
/// subgradient on the same update needs millions of iterations to reach the
/// tolerance and is not used. The bracket is always collapsed to floating
/// point resolution, not just to `dual_tol`: the outer loop needs the
/// returned allocation to be a stable function of the multipliers, and any
/// slack left in the dual shows up as a floor on the outer residual.
/// `v_init` warm-starts the bracket search.
pub fn solve_w_dual(
    inst: &ProblemInstance,
    alpha: &Array2<f64>,
    beta: &Array2<f64>,
    t: usize,
    v_init: f64,
    settings: &SolverSettings,
) -> Result<(Vec<f64>, f64, usize), SolverError> {
    let k_n = inst.n_clients();
    let band_hz = inst.cell.total_bandwidth_hz;
    let mean_weight = (0..k_n)
        .map(|k| alpha[[k, t]] * beta[[k, t]] * band_hz)
        .sum::<f64>()
        / k_n as f64;

    let mut evals = 0usize;
    let column = |v: f64, evals: &mut usize| -> Result<(Vec<f64>, f64), SolverError> {
        *evals += 1;
        let mut w = vec![0.0; k_n];
        let mut sum_w = 0.0;
        for k in 0..k_n {
            w[k] = optimal_w(
                alpha[[k, t]],
                beta[[k, t]],
                v,
                inst.profiles[k].tx_power_w,
                inst.gains[[k, t]],
                inst,
            )?;
            sum_w += w[k];
        }
        Ok((w, 1.0 - sum_w))
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

    // Slack budget at v = 0: complementary slackness holds, keep v = 0.
    let (w0, gap0) = column(0.0, &mut evals)?;
    if gap0 >= 0.0 {
        return Ok(finish(w0, 0.0, evals));
    }

    // Expand until the budget flips to slack; gap(lo) < 0 <= gap(hi).
    let mut lo = 0.0f64;
    let mut hi = v_init
        .max(settings.step_scale * mean_weight)
        .max(f64::MIN_POSITIVE);
    let mut best: Option<(Vec<f64>, f64, f64)> = None;
    let note = |w: Vec<f64>, v: f64, gap: f64, best: &mut Option<(Vec<f64>, f64, f64)>| {
        if best.as_ref().map_or(true, |(_, _, g)| gap.abs() < g.abs()) {
            *best = Some((w, v, gap));
        }
    };
    loop {
        let (w_hi, gap_hi) = column(hi, &mut evals)?;
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
        let (w_mid, gap_mid) = column(mid, &mut evals)?;
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
