//! Principal branch of the Lambert W function, used by the closed-form
//! bandwidth allocation.
//!
//! W0 solves w e^w = x for x >= -1/e. Evaluation picks a branch-appropriate
//! initial guess (series expansion near the branch point, log asymptote for
//! large x) and polishes with Halley iterations until the defining identity
//! holds to 1e-13 relative.

use thiserror::Error;

/// 1/e, the negated branch-point abscissa.
const INV_E: f64 = 1.0 / std::f64::consts::E;
/// Identity residual target: |W e^W - x| <= IDENTITY_TOL * max(1, |x|).
const IDENTITY_TOL: f64 = 1e-13;
const MAX_ITERATIONS: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum LambertError {
    #[error("lambert_w0 is undefined for x = {0} < -1/e")]
    OutOfDomain(f64),
}

/// Series for W0 around the branch point x = -1/e in powers of
/// p = sqrt(2 (e x + 1)).
fn branch_series(p: f64) -> f64 {
    -1.0 + p * (1.0
        + p * (-1.0 / 3.0
            + p * (11.0 / 72.0
                + p * (-43.0 / 540.0 + p * (769.0 / 17280.0 - p * 221.0 / 8505.0)))))
}

fn initial_guess(x: f64) -> f64 {
    if x < -0.25 {
        let p = (2.0 * (std::f64::consts::E * x + 1.0)).max(0.0).sqrt();
        branch_series(p)
    } else if x <= std::f64::consts::E {
        // Crude rational guess; Halley converges from here in a few steps.
        x / (1.0 + x)
    } else {
        let l = x.ln();
        l - l.ln()
    }
}

/// Principal branch W0(x) for x >= -1/e.
pub fn lambert_w0(x: f64) -> Result<f64, LambertError> {
    if x.is_nan() || x < -INV_E - 1e-14 {
        return Err(LambertError::OutOfDomain(x));
    }
    // Clamp tiny negative excursions below the branch point to the branch point.
    let x = x.max(-INV_E);
    if x == 0.0 {
        return Ok(0.0);
    }
    let ex1 = std::f64::consts::E * x + 1.0;
    if ex1 <= 0.0 {
        return Ok(-1.0);
    }
    // Close to the branch point the derivative of w e^w vanishes and Halley
    // stalls; the series alone is accurate there.
    if ex1 < 1e-6 {
        return Ok(branch_series((2.0 * ex1).sqrt()));
    }

    let mut w = initial_guess(x);
    let tol = IDENTITY_TOL * x.abs().max(1.0);
    for _ in 0..MAX_ITERATIONS {
        let e = w.exp();
        let f = w * e - x;
        if f.abs() <= tol {
            return Ok(w);
        }
        let wp1 = w + 1.0;
        // Halley step for f(w) = w e^w - x.
        let denom = e * wp1 - (w + 2.0) * f / (2.0 * wp1);
        let step = f / denom;
        w -= step;
        if w < -1.0 {
            w = -1.0 + f64::EPSILON;
        }
    }
    let residual = w * w.exp() - x;
    debug_assert!(
        residual.abs() <= tol * 10.0,
        "lambert_w0({x}) stalled with residual {residual}"
    );
    Ok(w)
}
