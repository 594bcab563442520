//! JSON experiment configuration. Field names carry their units
//! (`..._hz`, `..._w`, `..._km`, `..._dbm_per_hz`) so mixed-unit mistakes
//! fail loudly at the schema boundary; unknown fields are rejected with the
//! offending name in the error.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::SeedSet;
use crate::metrics::BoundConstants;
use crate::seedmix;
use crate::solver::SolverSettings;
use crate::task::MlpShape;
use crate::wireless::{CellConfig, ClientProfile, FadingConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config schema error: {0}")]
    Schema(#[from] serde_json::Error),
    #[error("config field `{field}`: {reason}")]
    BadField { field: String, reason: String },
}

fn bad(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::BadField {
        field: field.into(),
        reason: reason.into(),
    }
}

/// Complete description of one experiment; every subcommand consumes this.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub cell: CellSection,
    pub clients: ClientsSection,
    #[serde(default)]
    pub task: TaskSection,
    pub scheme: SchemeSection,
    #[serde(default)]
    pub solver: SolverSection,
    pub rounds: u64,
    pub rho: f64,
    #[serde(default = "default_lambda_min")]
    pub lambda_min: f64,
    #[serde(default = "default_fading")]
    pub fading: FadingConfig,
    pub seeds: SeedsSection,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    /// Uniform hard communication cap in rounds; absent = off.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub force_cap: Option<u64>,
    /// Divide aggregates by participant count instead of client count.
    /// Not part of the modeled protocol; off by default.
    #[serde(default)]
    pub divide_by_participants: bool,
    /// Constants for the bound calculators; only the `bounds` subcommand
    /// needs this section.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoundsSection>,
}

fn default_lambda_min() -> f64 {
    0.05
}
fn default_fading() -> FadingConfig {
    FadingConfig::Static
}
fn default_eval_every() -> u64 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSection {
    pub total_bandwidth_hz: f64,
    pub noise_density_dbm_per_hz: f64,
    /// Upload size; omit to use the model's parameter count at 32 bits each.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_size_bits: Option<f64>,
    pub cell_radius_km: f64,
}

impl CellSection {
    /// Linear-noise cell with the model size resolved against the task.
    pub fn resolve(&self, shape: &MlpShape) -> CellConfig {
        CellConfig {
            total_bandwidth_hz: self.total_bandwidth_hz,
            noise_density_w_per_hz: 10f64.powf(self.noise_density_dbm_per_hz / 10.0) / 1000.0,
            model_size_bits: self.model_size_bits.unwrap_or_else(|| shape.size_bits()),
            cell_radius_km: self.cell_radius_km,
        }
    }
}

/// Client positions: given outright, or drawn uniformly (by area) from an
/// annulus as in the clustered-placement scenarios.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "placement", rename_all = "snake_case")]
pub enum ClientsSection {
    Explicit { profiles: Vec<ClientSpec> },
    Annulus {
        count: usize,
        inner_radius_km: f64,
        outer_radius_km: f64,
        tx_power_w: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSpec {
    pub distance_km: f64,
    pub tx_power_w: f64,
}

impl ClientsSection {
    pub fn count(&self) -> usize {
        match self {
            ClientsSection::Explicit { profiles } => profiles.len(),
            ClientsSection::Annulus { count, .. } => *count,
        }
    }

    /// Ids are assigned 1..K in listing/draw order. Annulus draws are
    /// area-uniform and deterministic per data seed.
    pub fn resolve(&self, data_seed: u64) -> Vec<ClientProfile> {
        match self {
            ClientsSection::Explicit { profiles } => profiles
                .iter()
                .enumerate()
                .map(|(k, spec)| ClientProfile {
                    id: k + 1,
                    distance_km: spec.distance_km,
                    tx_power_w: spec.tx_power_w,
                })
                .collect(),
            ClientsSection::Annulus {
                count,
                inner_radius_km,
                outer_radius_km,
                tx_power_w,
            } => {
                let mut rng = seedmix::rng_for(data_seed, &[seedmix::tag::PLACEMENT]);
                let (r1_sq, r2_sq) = (
                    inner_radius_km * inner_radius_km,
                    outer_radius_km * outer_radius_km,
                );
                (0..*count)
                    .map(|k| {
                        let u: f64 = rand::Rng::random(&mut rng);
                        ClientProfile {
                            id: k + 1,
                            distance_km: (r1_sq + u * (r2_sq - r1_sq)).sqrt(),
                            tx_power_w: *tx_power_w,
                        }
                    })
                    .collect()
            }
        }
    }
}

/// Synthetic task and local-training hyperparameters; defaults are the
/// desk-scale stand-ins for the image benchmarks.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub classes: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub separation: f64,
    pub shards_per_client: usize,
    pub local_steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            classes: 10,
            feature_dim: 20,
            hidden: 32,
            per_class_train: 500,
            per_class_test: 100,
            separation: 3.0,
            shards_per_client: 5,
            local_steps: 5,
            batch: 10,
            learning_rate: 0.01,
        }
    }
}

impl TaskSection {
    pub fn shape(&self) -> MlpShape {
        MlpShape {
            input_dim: self.feature_dim,
            hidden: self.hidden,
            classes: self.classes,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "name", rename_all = "snake_case")]
pub enum SchemeSection {
    /// Uniform probability for everyone.
    Random { p: f64 },
    /// Top-gain deterministic selection; k_sel omitted = calibrate to the
    /// solver-driven scheme's expected participant count.
    Greedy {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        k_sel: Option<usize>,
    },
    /// Round-robin blocks; k_sel as for greedy.
    AgeBased {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        k_sel: Option<usize>,
    },
    /// Per-round single-round solve against current gains. horizon_rounds
    /// omitted = the run's round count.
    Proposed {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        horizon_rounds: Option<u64>,
    },
}

impl SchemeSection {
    pub fn name(&self) -> &'static str {
        match self {
            SchemeSection::Random { .. } => "random",
            SchemeSection::Greedy { .. } => "greedy",
            SchemeSection::AgeBased { .. } => "age_based",
            SchemeSection::Proposed { .. } => "proposed",
        }
    }
}

/// Optional overrides of the solver defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub outer_tol: Option<f64>,
    pub bcd_tol: Option<f64>,
    pub dual_tol: Option<f64>,
    pub max_outer_iters: Option<usize>,
}

impl SolverSection {
    pub fn resolve(&self) -> SolverSettings {
        let mut settings = SolverSettings::default();
        if let Some(v) = self.outer_tol {
            settings.outer_tol = v;
        }
        if let Some(v) = self.bcd_tol {
            settings.bcd_tol = v;
        }
        if let Some(v) = self.dual_tol {
            settings.dual_tol = v;
        }
        if let Some(v) = self.max_outer_iters {
            settings.max_outer_iters = v;
        }
        settings
    }
}

/// One base seed spread into the named streams, or all four given explicitly.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SeedsSection {
    Base(u64),
    Named(SeedSet),
}

impl SeedsSection {
    pub fn resolve(&self) -> SeedSet {
        match self {
            SeedsSection::Base(base) => SeedSet::from_base(*base),
            SeedsSection::Named(set) => *set,
        }
    }
}

/// Inputs of the convergence-bound calculators, used by the `bounds`
/// subcommand. Supply either per-client intervals or a probability matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundsSection {
    #[serde(flatten)]
    pub constants: BoundConstants,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intervals: Option<Vec<f64>>,
    /// K rows of T selection probabilities.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<Vec<Vec<f64>>>,
}

impl ExperimentConfig {
    pub fn from_str(text: &str) -> Result<Self, ConfigError> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            (self.cell.total_bandwidth_hz, "cell.total_bandwidth_hz"),
            (self.cell.cell_radius_km, "cell.cell_radius_km"),
            (self.task.separation, "task.separation"),
            (self.task.learning_rate, "task.learning_rate"),
        ];
        for (value, field) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(bad(field, format!("must be positive, got {value}")));
            }
        }
        if let Some(bits) = self.cell.model_size_bits {
            if !(bits > 0.0 && bits.is_finite()) {
                return Err(bad("cell.model_size_bits", format!("must be positive, got {bits}")));
            }
        }
        if !self.cell.noise_density_dbm_per_hz.is_finite() {
            return Err(bad("cell.noise_density_dbm_per_hz", "must be finite"));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(bad("rho", format!("must lie in (0, 1), got {}", self.rho)));
        }
        if !(self.lambda_min > 0.0 && self.lambda_min <= 1.0) {
            return Err(bad(
                "lambda_min",
                format!("must lie in (0, 1], got {}", self.lambda_min),
            ));
        }

        let k_n = self.clients.count();
        if k_n == 0 {
            return Err(bad("clients", "needs at least one client"));
        }
        match &self.clients {
            ClientsSection::Explicit { profiles } => {
                for (i, spec) in profiles.iter().enumerate() {
                    if !(spec.distance_km > 0.0 && spec.distance_km <= self.cell.cell_radius_km) {
                        return Err(bad(
                            &format!("clients.profiles[{i}].distance_km"),
                            format!(
                                "must lie in (0, {}], got {}",
                                self.cell.cell_radius_km, spec.distance_km
                            ),
                        ));
                    }
                    if !(spec.tx_power_w > 0.0) {
                        return Err(bad(
                            &format!("clients.profiles[{i}].tx_power_w"),
                            "must be positive",
                        ));
                    }
                }
            }
            ClientsSection::Annulus {
                inner_radius_km,
                outer_radius_km,
                tx_power_w,
                ..
            } => {
                if !(*inner_radius_km > 0.0 && inner_radius_km <= outer_radius_km) {
                    return Err(bad(
                        "clients.inner_radius_km",
                        format!("needs 0 < inner <= outer, got {inner_radius_km}"),
                    ));
                }
                if *outer_radius_km > self.cell.cell_radius_km {
                    return Err(bad(
                        "clients.outer_radius_km",
                        format!(
                            "{outer_radius_km} exceeds cell radius {}",
                            self.cell.cell_radius_km
                        ),
                    ));
                }
                if !(*tx_power_w > 0.0) {
                    return Err(bad("clients.tx_power_w", "must be positive"));
                }
            }
        }

        let t = &self.task;
        if t.classes < 2 {
            return Err(bad("task.classes", "needs at least two classes"));
        }
        if t.feature_dim == 0 || t.per_class_train == 0 || t.per_class_test == 0 {
            return Err(bad("task", "dataset dimensions must be positive"));
        }
        if t.batch == 0 {
            return Err(bad("task.batch", "must be positive"));
        }
        let d = t.shards_per_client;
        if d == 0 || d > t.classes {
            return Err(bad(
                "task.shards_per_client",
                format!("must lie in 1..={}, got {d}", t.classes),
            ));
        }
        if (d * k_n) % t.classes != 0 {
            return Err(bad(
                "task.shards_per_client",
                format!(
                    "shards_per_client * clients = {} not divisible by {} classes",
                    d * k_n,
                    t.classes
                ),
            ));
        }
        let shards_per_class = d * k_n / t.classes;
        if t.per_class_train % shards_per_class != 0 {
            return Err(bad(
                "task.per_class_train",
                format!("{} not divisible into {shards_per_class} shards", t.per_class_train),
            ));
        }

        match &self.scheme {
            SchemeSection::Random { p } => {
                if !(0.0..=1.0).contains(p) {
                    return Err(bad("scheme.p", format!("must lie in [0, 1], got {p}")));
                }
            }
            SchemeSection::Greedy { k_sel } | SchemeSection::AgeBased { k_sel } => {
                if let Some(k) = k_sel {
                    if *k == 0 || *k > k_n {
                        return Err(bad(
                            "scheme.k_sel",
                            format!("must lie in 1..={k_n}, got {k}"),
                        ));
                    }
                }
            }
            SchemeSection::Proposed { horizon_rounds } => {
                if let Some(h) = horizon_rounds {
                    if *h == 0 {
                        return Err(bad("scheme.horizon_rounds", "must be positive"));
                    }
                }
            }
        }

        if let Some(cap) = self.force_cap {
            if cap == 0 {
                return Err(bad("force_cap", "must be positive when present"));
            }
        }
        if let Some(bounds) = &self.bounds {
            if let Some(rows) = &bounds.probabilities {
                if rows.len() != k_n {
                    return Err(bad(
                        "bounds.probabilities",
                        format!("{} rows for {k_n} clients", rows.len()),
                    ));
                }
            }
        }
        Ok(())
    }
}
