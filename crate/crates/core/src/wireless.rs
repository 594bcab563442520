//! Uplink channel model: log-distance path loss, optional Rayleigh block
//! fading, Shannon-style achievable rate in nats/s, and upload energy.
//!
//! Rates use the natural logarithm throughout, so the model size enters all
//! energy formulas in nats (`model_size_bits * ln 2`).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seedmix;

/// Path loss model constants: PL(dB) = 128.1 + 37.6 log10(r_km).
const PATH_LOSS_INTERCEPT_DB: f64 = 128.1;
const PATH_LOSS_SLOPE_DB: f64 = 37.6;

#[derive(Debug, Error, PartialEq)]
pub enum WirelessError {
    #[error("distance must be positive, got {0} km")]
    NonPositiveDistance(f64),
    #[error("bandwidth fraction must lie in [0, 1], got {0}")]
    BandwidthFractionOutOfRange(f64),
    #[error("selection probability must lie in [0, 1], got {0}")]
    SelectionProbabilityOutOfRange(f64),
    #[error("client {id}: selection probability {p} > 0 but allocated rate is zero")]
    InfeasibleEnergy { id: usize, p: f64 },
    #[error("client {id}: realized upload requires a positive rate (w = {w})")]
    ZeroRateUpload { id: usize, w: f64 },
    #[error("length mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid cell parameter: {0}")]
    InvalidCell(String),
}

/// Shared-cell parameters. Noise density is stored linear (W/Hz); config
/// files give it in dBm/Hz and convert on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub total_bandwidth_hz: f64,
    pub noise_density_w_per_hz: f64,
    pub model_size_bits: f64,
    pub cell_radius_km: f64,
}

impl CellConfig {
    pub fn validate(&self) -> Result<(), WirelessError> {
        let checks = [
            (self.total_bandwidth_hz, "total_bandwidth_hz"),
            (self.noise_density_w_per_hz, "noise_density_w_per_hz"),
            (self.model_size_bits, "model_size_bits"),
            (self.cell_radius_km, "cell_radius_km"),
        ];
        for (value, name) in checks {
            if !(value > 0.0 && value.is_finite()) {
                return Err(WirelessError::InvalidCell(format!(
                    "{name} must be positive and finite, got {value}"
                )));
            }
        }
        Ok(())
    }

    /// Upload size in nats; rates are in nats/s.
    pub fn model_size_nats(&self) -> f64 {
        self.model_size_bits * std::f64::consts::LN_2
    }
}

/// Per-client radio parameters. Ids are 1-based and stable across a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    pub id: usize,
    pub distance_km: f64,
    pub tx_power_w: f64,
}

/// Fading model applied on top of distance-based path loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FadingConfig {
    /// Gain is a pure function of distance.
    Static,
    /// Unit-mean exponential power factor, drawn independently per
    /// (seed, client id, round); block fading within a round.
    Rayleigh,
}

/// PL(dB) = 128.1 + 37.6 log10(r_km).
pub fn path_loss_db(distance_km: f64) -> Result<f64, WirelessError> {
    if !(distance_km > 0.0) {
        return Err(WirelessError::NonPositiveDistance(distance_km));
    }
    Ok(PATH_LOSS_INTERCEPT_DB + PATH_LOSS_SLOPE_DB * distance_km.log10())
}

/// Linear channel power gain for one client in one round.
pub fn channel_gain(
    profile: &ClientProfile,
    round: u64,
    fading: FadingConfig,
    fading_seed: u64,
) -> Result<f64, WirelessError> {
    let pl_db = path_loss_db(profile.distance_km)?;
    let base = 10f64.powf(-pl_db / 10.0);
    let factor = match fading {
        FadingConfig::Static => 1.0,
        FadingConfig::Rayleigh => {
            let mut rng =
                seedmix::rng_for(fading_seed, &[seedmix::tag::FADING, profile.id as u64, round]);
            let u: f64 = rand::Rng::random(&mut rng);
            // Unit-mean exponential power factor; floor keeps the gain positive.
            (-(1.0 - u).ln()).max(f64::MIN_POSITIVE)
        }
    };
    Ok(base * factor)
}

/// Achievable uplink rate in nats/s for bandwidth fraction `w`:
/// R = w W ln(1 + P h / (w W N0)), extended by continuity to R(0) = 0.
pub fn transmission_rate(
    w: f64,
    tx_power_w: f64,
    gain: f64,
    cell: &CellConfig,
) -> Result<f64, WirelessError> {
    if !(0.0..=1.0).contains(&w) {
        return Err(WirelessError::BandwidthFractionOutOfRange(w));
    }
    if w == 0.0 {
        return Ok(0.0);
    }
    let band = w * cell.total_bandwidth_hz;
    let snr = tx_power_w * gain / (band * cell.noise_density_w_per_hz);
    Ok(band * snr.ln_1p())
}

/// Expected communication energy of one round: sum of p_k P_k S_nats / R_k
/// over clients with p_k > 0.
pub fn expected_round_energy(
    p: &[f64],
    w: &[f64],
    profiles: &[ClientProfile],
    gains: &[f64],
    cell: &CellConfig,
) -> Result<f64, WirelessError> {
    let k = profiles.len();
    if p.len() != k || w.len() != k || gains.len() != k {
        return Err(WirelessError::DimensionMismatch(format!(
            "p={}, w={}, gains={}, profiles={}",
            p.len(),
            w.len(),
            gains.len(),
            k
        )));
    }
    let s_nats = cell.model_size_nats();
    let mut total = 0.0;
    for i in 0..k {
        if !(0.0..=1.0).contains(&p[i]) {
            return Err(WirelessError::SelectionProbabilityOutOfRange(p[i]));
        }
        if p[i] == 0.0 {
            continue;
        }
        let rate = transmission_rate(w[i], profiles[i].tx_power_w, gains[i], cell)?;
        if rate <= 0.0 {
            return Err(WirelessError::InfeasibleEnergy {
                id: profiles[i].id,
                p: p[i],
            });
        }
        total += p[i] * profiles[i].tx_power_w * s_nats / rate;
    }
    Ok(total)
}

/// Energy actually spent by one upload: P S_nats / R.
pub fn realized_transmission_energy(
    profile: &ClientProfile,
    w: f64,
    gain: f64,
    cell: &CellConfig,
) -> Result<f64, WirelessError> {
    let rate = transmission_rate(w, profile.tx_power_w, gain, cell)?;
    if rate <= 0.0 {
        return Err(WirelessError::ZeroRateUpload { id: profile.id, w });
    }
    Ok(profile.tx_power_w * cell.model_size_nats() / rate)
}
