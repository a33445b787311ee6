//! Model parameters and scenario descriptions.
//!
//! Every constant of the tracking model lives in [`Parameters`]:
//!
//! | field              | symbol      | meaning                                              |
//! |--------------------|-------------|------------------------------------------------------|
//! | `p_jump`           | p_jump      | per-step probability of a global jump                |
//! | `p_meas`           | p_meas      | detection probability of a co-located object         |
//! | `p_birth`          | p_birth     | birth probability per candidate measurement          |
//! | `p_death`          | p_death     | per-step death probability                           |
//! | `sigma_q`          | σ_q         | spatial process noise std per step (m)               |
//! | `sigma_r`          | σ_r         | spatial measurement noise std (m)                    |
//! | `feature_meas_cov` | R^f         | feature measurement covariance (3×3)                 |
//! | `clutter_area`     | A_k         | spatial clutter support (m²)                         |
//! | `feature_support`  | S^f         | feature clutter support (feature-space volume)       |
//! | `lambda_init`      | λ           | Poisson mean visits for the initialization boost     |
//! | `kappa`            | κ           | identity clustering threshold                        |
//!
//! `p_life = 1 - p_death` is derived on demand and never stored.
//!
//! Both files are plain JSON. Parameter files use the field names above plus
//! `n_particles`, `n_gibbs` and `n_burnin`; missing fields take the defaults of
//! [`Parameters::default`]. `feature_meas_cov` is written as three rows.

use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// All model constants shared by the filter, learner and simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Parameters {
    pub p_jump: f64,
    pub p_meas: f64,
    pub p_birth: f64,
    pub p_death: f64,
    pub sigma_q: f64,
    pub sigma_r: f64,
    #[serde(with = "matrix_rows")]
    pub feature_meas_cov: Matrix3<f64>,
    pub clutter_area: f64,
    pub feature_support: f64,
    pub lambda_init: f64,
    pub kappa: f64,
    pub n_particles: usize,
    pub n_gibbs: usize,
    pub n_burnin: usize,
}

impl Default for Parameters {
    fn default() -> Self {
        Self {
            p_jump: 0.03,
            p_meas: 0.98,
            p_birth: 0.01,
            p_death: 0.005,
            sigma_q: 0.15,
            sigma_r: 0.35,
            feature_meas_cov: Matrix3::identity() * 0.01,
            clutter_area: 20.0,
            feature_support: 1.0,
            lambda_init: 1.0,
            kappa: 0.5,
            n_particles: 300,
            n_gibbs: 50,
            n_burnin: 25,
        }
    }
}

impl Parameters {
    #[inline]
    pub fn p_life(&self) -> f64 {
        1.0 - self.p_death
    }

    /// Checks the hard invariants. Returns the first violation found.
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("p_jump", self.p_jump),
            ("p_meas", self.p_meas),
            ("p_birth", self.p_birth),
            ("p_death", self.p_death),
            ("kappa", self.kappa),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::Validation(format!("{name} out of [0,1]: {value}")));
            }
        }
        for (name, value) in [
            ("sigma_q", self.sigma_q),
            ("sigma_r", self.sigma_r),
            ("clutter_area", self.clutter_area),
            ("feature_support", self.feature_support),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::Validation(format!("{name} must be positive: {value}")));
            }
        }
        if !(self.lambda_init >= 0.0 && self.lambda_init.is_finite()) {
            return Err(Error::Validation(format!(
                "lambda_init must be non-negative: {}",
                self.lambda_init
            )));
        }
        if self.n_particles == 0 {
            return Err(Error::Validation("n_particles must be at least 1".into()));
        }
        if self.n_gibbs == 0 {
            return Err(Error::Validation("n_gibbs must be at least 1".into()));
        }
        check_spd(&self.feature_meas_cov)
    }

    /// Soft tuning rules. Violations are legal but usually a mistake.
    pub fn tuning_warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.p_birth >= self.p_jump {
            out.push(format!(
                "p_birth ({}) is not below p_jump ({}); jumps may be explained as births",
                self.p_birth, self.p_jump
            ));
        }
        if self.p_death >= self.p_jump {
            out.push(format!(
                "p_death ({}) is not below p_jump ({}); jumps may be explained as deaths",
                self.p_death, self.p_jump
            ));
        }
        out
    }

    /// Canonical serialization: fixed field order, pretty printed, trailing newline.
    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("parameters always serialize");
        s.push('\n');
        s
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let params: Parameters = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<parameters>".into(),
            line: e.line(),
            message: e.to_string(),
        })?;
        params.validate()?;
        Ok(params)
    }
}

fn check_spd(m: &Matrix3<f64>) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("R^f has non-finite entries".into()));
    }
    let asym = (m - m.transpose()).abs().max();
    if asym > 1e-9 * (1.0 + m.abs().max()) {
        return Err(Error::Validation("R^f not symmetric".into()));
    }
    let eig = SymmetricEigen::new(*m);
    if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
        return Err(Error::Validation("R^f not positive definite".into()));
    }
    Ok(())
}

/// Reads and validates a JSON parameter file.
pub fn load_parameters(path: impl AsRef<Path>) -> Result<Parameters> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let params: Parameters = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    params.validate()?;
    for w in params.tuning_warnings() {
        log::warn!("{}: {w}", path.display());
    }
    Ok(params)
}

pub fn save_parameters(params: &Parameters, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, params.to_canonical_json()).map_err(|e| Error::io(path, e))
}

/// Order in which the simulated robot visits locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VisitSchedule {
    Explicit(Vec<usize>),
    Policy(SchedulePolicy),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchedulePolicy {
    RoundRobin,
    UniformRandom,
}

/// A forced relocation of one initial object, applied before observing `step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedJump {
    pub step: usize,
    pub object: u64,
    pub to_location: usize,
}

/// Synthetic experiment description consumed by the simulator.
///
/// `feature_box` is the per-dimension sampling interval for object feature
/// prototypes and clutter features; its volume should equal
/// `Parameters::feature_support` so that the filter's clutter density matches
/// the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_locations: usize,
    pub n_objects_initial: usize,
    pub horizon: usize,
    #[serde(default = "default_schedule")]
    pub visit_schedule: VisitSchedule,
    #[serde(default)]
    pub clutter_rate: f64,
    #[serde(default = "default_feature_box")]
    pub feature_box: [[f64; 2]; 3],
    #[serde(default = "default_extent")]
    pub location_extent: f64,
    #[serde(default)]
    pub enable_births: bool,
    #[serde(default)]
    pub enable_deaths: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub scripted_jumps: Vec<ScriptedJump>,
}

fn default_schedule() -> VisitSchedule {
    VisitSchedule::Policy(SchedulePolicy::RoundRobin)
}

fn default_feature_box() -> [[f64; 2]; 3] {
    [[0.0, 1.0]; 3]
}

fn default_extent() -> f64 {
    20f64.sqrt()
}

impl ScenarioConfig {
    pub fn new(n_locations: usize, n_objects_initial: usize, horizon: usize) -> Self {
        Self {
            n_locations,
            n_objects_initial,
            horizon,
            visit_schedule: default_schedule(),
            clutter_rate: 0.0,
            feature_box: default_feature_box(),
            location_extent: default_extent(),
            enable_births: false,
            enable_deaths: false,
            seed: 0,
            scripted_jumps: Vec::new(),
        }
    }

    pub fn feature_box_volume(&self) -> f64 {
        self.feature_box.iter().map(|[lo, hi]| hi - lo).product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Validation("horizon must be at least 1".into()));
        }
        if self.n_locations == 0 {
            return Err(Error::Validation("n_locations must be at least 1".into()));
        }
        if !(self.clutter_rate >= 0.0 && self.clutter_rate.is_finite()) {
            return Err(Error::Validation(format!(
                "clutter_rate must be non-negative: {}",
                self.clutter_rate
            )));
        }
        if !(self.location_extent > 0.0) {
            return Err(Error::Validation("location_extent must be positive".into()));
        }
        if self.feature_box.iter().any(|[lo, hi]| !(hi > lo)) {
            return Err(Error::Validation("feature_box intervals must be non-empty".into()));
        }
        if let VisitSchedule::Explicit(list) = &self.visit_schedule {
            if list.len() != self.horizon {
                return Err(Error::Validation(format!(
                    "visit_schedule has {} entries, horizon is {}",
                    list.len(),
                    self.horizon
                )));
            }
            if let Some(bad) = list.iter().find(|&&l| l >= self.n_locations) {
                return Err(Error::Validation(format!("visit_schedule location {bad} out of range")));
            }
        }
        for jump in &self.scripted_jumps {
            if jump.to_location >= self.n_locations {
                return Err(Error::Validation(format!(
                    "scripted jump to unknown location {}",
                    jump.to_location
                )));
            }
        }
        Ok(())
    }

    /// Warns when the clutter feature volume and the filter's `S^f` disagree.
    pub fn coupling_warning(&self, params: &Parameters) -> Option<String> {
        let vol = self.feature_box_volume();
        ((vol - params.feature_support).abs() > 1e-9 * vol.max(1.0)).then(|| {
            format!(
                "feature_box volume {vol} differs from feature_support {}",
                params.feature_support
            )
        })
    }
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<ScenarioConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let scn: ScenarioConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    scn.validate()?;
    Ok(scn)
}

pub mod matrix_rows {
    use nalgebra::Matrix3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix3<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: [[f64; 3]; 3] = std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]));
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix3<f64>, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(d)?;
        Ok(Matrix3::from_fn(|r, c| rows[r][c]))
    }
}
