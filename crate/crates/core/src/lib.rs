//! Roundabout ramp-metering toolkit: a discrete-time micro-simulator with
//! IDM car following, a partially observed control environment around it,
//! a Gaussian MLP policy trained with TRPO, and a perturbed-dynamics
//! evaluation harness for zero-shot transfer.

pub mod config;
pub mod dynamics;
pub mod env;
pub mod io;
pub mod netgeom;
pub mod policy;
pub mod rng;
pub mod sim;
pub mod transfer;
pub mod trpo;

pub use config::{ConfigError, RunConfig};
pub use dynamics::{Controller, IdmParams, Leader, SimLimits, VehicleId, VehicleState};
pub use env::{
    EnvConfig, Environment, Episode, EpisodeMetrics, NoiseConfig, NormalizationScales, ObservationVector, RewardConfig,
    RoundaboutEnv,
};
pub use netgeom::{GeometryConfig, Location, RoadNetwork, RouteId};
pub use policy::{ActionDistribution, ActionMode, PolicyError, PolicyParameters};
pub use sim::{Scenario, SimConfig, TrajectoryRecord, World};
pub use transfer::{EvalCase, EvalConfig, EvalReport, PerturbationProfile};
pub use trpo::{IterationRecord, TrainConfig, TrainOutcome, TrajectoryBatch};
