//! Convergence-bound calculators and communication-interval statistics.
//!
//! The bounds are calculators over user-supplied constants; nothing here is
//! estimated from training runs. `expected_first_comm_round` is the printed
//! formula even though it measures the expected round of the first upload
//! rather than a maximum interval; `mc_mean_comm_gap` is the empirical
//! counterpart for the interval reading.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("learning rate {eta} exceeds validity ceiling 1/(8L) = {ceiling}")]
    EtaTooLarge { eta: f64, ceiling: f64 },
    #[error("bound constant {name} must be positive, got {value}")]
    NonPositiveConstant { name: &'static str, value: f64 },
    #[error("client {client}: probability row sums to zero")]
    ZeroProbabilitySum { client: usize },
    #[error("interval values must be positive, got {0}")]
    NonPositiveInterval(f64),
}

/// Constants of the smoothness/variance assumptions entering the bounds.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundConstants {
    /// Gradient Lipschitz constant L.
    pub smoothness: f64,
    /// Uniform gradient-norm bound G_max.
    pub grad_norm_bound: f64,
    /// Stochastic-gradient variance sigma^2.
    pub grad_variance: f64,
    /// Initial-to-optimal loss gap f(x0) - f(x*).
    pub loss_gap: f64,
    /// SGD step size eta; must satisfy eta <= 1/(8L).
    pub learning_rate: f64,
}

impl BoundConstants {
    pub fn validate(&self) -> Result<(), MetricsError> {
        for (value, name) in [
            (self.smoothness, "smoothness"),
            (self.grad_norm_bound, "grad_norm_bound"),
            (self.grad_variance, "grad_variance"),
            (self.loss_gap, "loss_gap"),
            (self.learning_rate, "learning_rate"),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(MetricsError::NonPositiveConstant { name, value });
            }
        }
        let ceiling = 1.0 / (8.0 * self.smoothness);
        if self.learning_rate > ceiling {
            return Err(MetricsError::EtaTooLarge {
                eta: self.learning_rate,
                ceiling,
            });
        }
        Ok(())
    }
}

/// Convergence bound from per-client communication intervals:
/// 8 f_max/(eta T) + 92 eta^2 L^2 G^2 (sum Delta_k^2)/K + 9 sigma^2.
pub fn convergence_bound_from_intervals(
    deltas: &[f64],
    c: &BoundConstants,
    rounds: usize,
) -> Result<f64, MetricsError> {
    c.validate()?;
    for &d in deltas {
        if !(d > 0.0 && d.is_finite()) {
            return Err(MetricsError::NonPositiveInterval(d));
        }
    }
    let k_n = deltas.len() as f64;
    let sum_sq: f64 = deltas.iter().map(|d| d * d).sum();
    let eta = c.learning_rate;
    Ok(8.0 * c.loss_gap / (eta * rounds as f64)
        + 92.0
            * eta
            * eta
            * c.smoothness
            * c.smoothness
            * c.grad_norm_bound
            * c.grad_norm_bound
            * (sum_sq / k_n)
        + 9.0 * c.grad_variance)
}

/// Same bound with each interval approximated from the selection
/// probabilities: Delta_k = T / sum_t p_kt.
pub fn convergence_bound_from_probabilities(
    p: &Array2<f64>,
    c: &BoundConstants,
) -> Result<f64, MetricsError> {
    let (k_n, t_n) = p.dim();
    let mut deltas = Vec::with_capacity(k_n);
    for k in 0..k_n {
        let row: Vec<f64> = (0..t_n).map(|t| p[[k, t]]).collect();
        deltas.push(approx_max_interval(&row, k)?);
    }
    convergence_bound_from_intervals(&deltas, c, t_n)
}

/// Approximate maximum communication interval of one client: T / sum_t p_t.
pub fn approx_max_interval(p_row: &[f64], client: usize) -> Result<f64, MetricsError> {
    let sum: f64 = p_row.iter().sum();
    if sum <= 0.0 {
        return Err(MetricsError::ZeroProbabilitySum { client });
    }
    Ok(p_row.len() as f64 / sum)
}

/// Expected round of the first upload under independent Bernoulli(p_t):
/// sum_t t p_t prod_{tau<t} (1 - p_tau).
pub fn expected_first_comm_round(p_row: &[f64]) -> f64 {
    let mut none_yet = 1.0;
    let mut acc = 0.0;
    for (t, &p) in p_row.iter().enumerate() {
        acc += t as f64 * p * none_yet;
        none_yet *= 1.0 - p;
    }
    acc
}

/// Convergence surrogate with constants dropped: (T^2/K) sum_k (1/sum_t p)^2.
pub fn convergence_metric(p: &Array2<f64>) -> Result<f64, MetricsError> {
    let (k_n, t_n) = p.dim();
    let tt = t_n as f64;
    let mut acc = 0.0;
    for k in 0..k_n {
        let sum: f64 = (0..t_n).map(|t| p[[k, t]]).sum();
        if sum <= 0.0 {
            return Err(MetricsError::ZeroProbabilitySum { client: k });
        }
        acc += 1.0 / (sum * sum);
    }
    Ok(tt * tt / k_n as f64 * acc)
}

/// Sum of squared intervals against the uniform vector matching the same
/// harmonic sum; the uniform vector minimizes the sum of squares.
pub fn interval_fairness_gap(deltas: &[f64]) -> Result<(f64, f64), MetricsError> {
    for &d in deltas {
        if !(d > 0.0 && d.is_finite()) {
            return Err(MetricsError::NonPositiveInterval(d));
        }
    }
    let n = deltas.len() as f64;
    let sum_sq: f64 = deltas.iter().map(|d| d * d).sum();
    let harmonic: f64 = deltas.iter().map(|d| 1.0 / d).sum();
    let uniform = n / harmonic;
    let uniform_sum_sq = n * uniform * uniform;
    debug_assert!(sum_sq >= uniform_sum_sq * (1.0 - 1e-12));
    Ok((sum_sq, uniform_sum_sq))
}

/// Monte-Carlo mean gap between consecutive uploads of one client under
/// independent Bernoulli(p_t) rounds; the empirical counterpart of
/// `approx_max_interval` for constant p.
pub fn mc_mean_comm_gap(p_row: &[f64], trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0f64;
    let mut count = 0u64;
    for _ in 0..trials {
        let mut last: Option<usize> = None;
        for (t, &p) in p_row.iter().enumerate() {
            if rng.random::<f64>() < p {
                if let Some(prev) = last {
                    total += (t - prev) as f64;
                    count += 1;
                }
                last = Some(t);
            }
        }
    }
    if count == 0 {
        f64::NAN
    } else {
        total / count as f64
    }
}
