//! Run configuration: TOML in, validated, and dumped back out verbatim.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{IdmParams, SimLimits};
use crate::env::{EnvConfig, NoiseConfig, NormalizationScales, RewardConfig};
use crate::netgeom::{GeometryConfig, RoadNetwork};
use crate::sim::{EngineOptions, Scenario, SimConfig};
use crate::transfer::{EvalConfig, PerturbationProfile};
use crate::trpo::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("cannot serialize config: {0}")]
    Serialize(#[from] toml::ser::Error),
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.to_string(), reason: reason.into() }
}

/// Everything a run needs. Missing keys take their defaults; unknown keys
/// are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub network: GeometryConfig,
    pub idm: IdmParams,
    pub limits: SimLimits,
    pub sim: SimConfig,
    pub noise: NoiseConfig,
    pub reward: RewardConfig,
    pub scales: NormalizationScales,
    pub train: TrainConfig,
    pub perturbation: PerturbationProfile,
    pub eval: EvalConfig,
}

struct Checker {
    errors: Vec<ConfigError>,
}

impl Checker {
    fn positive(&mut self, field: &str, v: f64) {
        if !(v > 0.0 && v.is_finite()) {
            self.errors.push(invalid(field, format!("must be positive and finite, got {v}")));
        }
    }

    fn non_negative(&mut self, field: &str, v: f64) {
        if !(v >= 0.0 && v.is_finite()) {
            self.errors.push(invalid(field, format!("must be non-negative and finite, got {v}")));
        }
    }

    fn require(&mut self, ok: bool, field: &str, reason: &str) {
        if !ok {
            self.errors.push(invalid(field, reason));
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text)
    }

    /// The effective configuration as TOML; parsing it back yields `self`.
    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Range-check every numeric field; reports the first violation.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut c = Checker { errors: Vec::new() };
        let n = &self.network;
        c.positive("network.west_entry_length", n.west_entry_length);
        c.positive("network.north_entry_length", n.north_entry_length);
        c.positive("network.ring_circumference", n.ring_circumference);
        c.positive("network.frame_length", n.frame_length);

        let i = &self.idm;
        c.positive("idm.time_headway", i.time_headway);
        c.positive("idm.accel", i.accel);
        c.positive("idm.decel", i.decel);
        c.positive("idm.delta", i.delta);
        c.non_negative("idm.jam_distance", i.jam_distance);
        c.positive("idm.desired_speed", i.desired_speed);
        c.non_negative("idm.accel_noise_std", i.accel_noise_std);

        let l = &self.limits;
        c.positive("limits.a_max", l.a_max);
        c.require(l.a_min < 0.0 && l.a_min.is_finite(), "limits.a_min", "must be negative");
        c.positive("limits.v_max", l.v_max);
        c.positive("limits.dt", l.dt);

        let s = &self.sim;
        for (name, p) in [("north", &s.north), ("west", &s.west)] {
            c.non_negative(&format!("sim.{name}.spawn_gap"), p.spawn_gap);
            c.non_negative(&format!("sim.{name}.spawn_speed"), p.spawn_speed);
        }
        c.positive("sim.spawn_period", s.spawn_period);
        c.positive("sim.vehicle_length", s.vehicle_length);
        c.positive("sim.speed_limit", s.speed_limit);
        c.non_negative("sim.desired_speed_std_frac", s.desired_speed_std_frac);
        c.non_negative("sim.merge_window", s.merge_window);
        c.require(s.waves != Some(0), "sim.waves", "must be at least 1 when set");

        c.non_negative("noise.std", self.noise.std);

        let r = &self.reward;
        c.positive("reward.v_max", r.v_max);
        c.non_negative("reward.standstill_weight", r.standstill_weight);
        c.positive("reward.slow_threshold", r.slow_threshold);

        let sc = &self.scales;
        c.positive("scales.distance", sc.distance);
        c.positive("scales.north_entry_distance", sc.north_entry_distance);
        c.positive("scales.west_entry_distance", sc.west_entry_distance);
        c.positive("scales.velocity", sc.velocity);
        c.positive("scales.queue_north", sc.queue_north);
        c.positive("scales.queue_west", sc.queue_west);

        let t = &self.train;
        c.require(t.discount > 0.0 && t.discount <= 1.0, "train.discount", "must lie in (0, 1]");
        c.positive("train.kl_limit", t.kl_limit);
        c.require(t.horizon > 0, "train.horizon", "must be positive");
        c.require(t.batch_size >= t.horizon, "train.batch_size", "must be at least train.horizon");
        c.non_negative("train.cg_damping", t.cg_damping);
        c.require(t.backtrack_ratio > 0.0 && t.backtrack_ratio < 1.0, "train.backtrack_ratio", "must lie in (0, 1)");
        c.non_negative("train.baseline_ridge", t.baseline_ridge);
        c.require(!t.hidden_sizes.contains(&0), "train.hidden_sizes", "widths must be positive");

        let p = &self.perturbation;
        c.non_negative("perturbation.speed_tracking_time_constant", p.speed_tracking_time_constant);
        c.require((0.0..1.0).contains(&p.geometry_scale_error), "perturbation.geometry_scale_error", "must lie in [0, 1)");
        c.require((0.0..=1.0).contains(&p.sensor_dropout_prob), "perturbation.sensor_dropout_prob", "must lie in [0, 1]");
        c.non_negative("perturbation.yield_gap", p.yield_gap);

        let e = &self.eval;
        c.require(e.trials >= 1, "eval.trials", "must be at least 1");
        c.require(e.max_steps >= 1, "eval.max_steps", "must be at least 1");
        c.require(e.waves >= 1, "eval.waves", "must be at least 1");

        if let Some(err) = c.errors.into_iter().next() {
            return Err(err);
        }
        RoadNetwork::from_config(&self.network).map_err(|e| invalid("network", e.to_string()))?;
        Ok(())
    }

    pub fn scenario(&self) -> Result<Scenario, ConfigError> {
        let network = RoadNetwork::from_config(&self.network).map_err(|e| invalid("network", e.to_string()))?;
        Ok(Scenario {
            network: Arc::new(network),
            idm: self.idm,
            limits: self.limits,
            sim: self.sim.clone(),
            options: EngineOptions::default(),
        })
    }

    /// Environment for training or nominal evaluation; `noise` toggles
    /// state and action perturbation together.
    pub fn env_config(&self, noise: bool) -> Result<EnvConfig, ConfigError> {
        Ok(EnvConfig {
            scenario: Arc::new(self.scenario()?),
            noise: NoiseConfig { enabled: noise && self.noise.enabled, std: self.noise.std },
            reward: self.reward,
            scales: self.scales,
            horizon: self.train.horizon,
        })
    }
}
