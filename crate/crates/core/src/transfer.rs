//! Replays a frozen policy in a world with altered dynamics (actuation and
//! observation delay, velocity lag, geometry jitter, sensor dropout and a
//! yield rule at the north entry) and summarizes the outcome per case.

use std::collections::VecDeque;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::VehicleId;
use crate::env::{
    assign_actions, build_observation, layout, EnvConfig, EnvError, EpisodeMetrics, NoiseConfig, ObservationVector,
    RlQueues, ENTRY_SLOTS, RING_SLOTS,
};
use crate::netgeom::{GeometryConfig, Location, NetworkError, RoadNetwork, RouteId};
use crate::policy::{PolicyError, PolicyParameters};
use crate::rng::{derive_seed, stream, Stream};
use crate::sim::{Scenario, StepEvents, TrajectoryRecord, World};

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("case {0} needs a policy")]
    MissingPolicy(EvalCase),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("invalid perturbation profile: {0}")]
    Profile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationProfile {
    pub actuation_delay_steps: usize,
    /// First-order lag between commanded and realized velocity, seconds; 0 disables.
    pub speed_tracking_time_constant: f64,
    pub observation_delay_steps: usize,
    /// Segment lengths are scaled by `1 + geometry_scale_error * u`, u ~ U[-1, 1].
    pub geometry_scale_error: f64,
    pub sensor_dropout_prob: f64,
    /// Clear arc length a north entry vehicle needs before entering; 0 disables the rule.
    pub yield_gap: f64,
}

impl Default for PerturbationProfile {
    fn default() -> Self {
        Self {
            actuation_delay_steps: 2,
            speed_tracking_time_constant: 1.5,
            observation_delay_steps: 1,
            geometry_scale_error: 0.05,
            sensor_dropout_prob: 0.05,
            yield_gap: 12.0,
        }
    }
}

impl PerturbationProfile {
    /// No perturbation at all: the nominal simulator.
    pub fn zero() -> Self {
        Self {
            actuation_delay_steps: 0,
            speed_tracking_time_constant: 0.0,
            observation_delay_steps: 0,
            geometry_scale_error: 0.0,
            sensor_dropout_prob: 0.0,
            yield_gap: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), TransferError> {
        let bad = |m: &str| Err(TransferError::Profile(m.to_string()));
        if !(self.speed_tracking_time_constant >= 0.0) {
            return bad("speed_tracking_time_constant must be non-negative");
        }
        if !(0.0..1.0).contains(&self.geometry_scale_error) {
            return bad("geometry_scale_error must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.sensor_dropout_prob) {
            return bad("sensor_dropout_prob must lie in [0, 1]");
        }
        if !(self.yield_gap >= 0.0) {
            return bad("yield_gap must be non-negative");
        }
        Ok(())
    }
}

impl fmt::Display for PerturbationProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "actuation_delay={} steps, lag_tau={} s, obs_delay={} steps, geometry=±{}%, dropout={}, yield_gap={}",
            self.actuation_delay_steps,
            self.speed_tracking_time_constant,
            self.observation_delay_steps,
            self.geometry_scale_error * 100.0,
            self.sensor_dropout_prob,
            if self.yield_gap > 0.0 { format!("{} m", self.yield_gap) } else { "off".to_string() },
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum YieldDecision {
    Proceed,
    Stop,
}

/// Stop when a circulating vehicle is within `gap` upstream of the north
/// merge point, or its rear has not yet cleared it.
pub fn yield_controller(net: &RoadNetwork, ring: impl Iterator<Item = (Location, f64)>, gap: f64) -> YieldDecision {
    let Some((merge, _)) = net.merge_arc() else {
        return YieldDecision::Proceed;
    };
    for (loc, length) in ring {
        let conflict = if loc.frame <= merge { merge - loc.frame < gap } else { loc.frame - merge < length };
        if conflict {
            return YieldDecision::Stop;
        }
    }
    YieldDecision::Proceed
}

/// Fixed-length FIFO: every pushed value comes back out `delay` pushes later.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayBuffer<T> {
    queue: VecDeque<T>,
}

impl<T: Clone> DelayBuffer<T> {
    pub fn new(delay: usize, fill: T) -> Self {
        Self { queue: std::iter::repeat_n(fill, delay).collect() }
    }

    pub fn delay(&self) -> usize {
        self.queue.len()
    }

    pub fn push(&mut self, value: T) -> T {
        self.queue.push_back(value);
        self.queue.pop_front().expect("just pushed")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EvalCase {
    #[serde(rename = "BASELINE")]
    Baseline,
    #[serde(rename = "RL_NOISE_FREE")]
    RlNoiseFree,
    #[serde(rename = "RL_NOISE_TRAINED")]
    RlNoiseTrained,
}

impl EvalCase {
    pub const ALL: [EvalCase; 3] = [EvalCase::Baseline, EvalCase::RlNoiseFree, EvalCase::RlNoiseTrained];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalCase::Baseline => "BASELINE",
            EvalCase::RlNoiseFree => "RL_NOISE_FREE",
            EvalCase::RlNoiseTrained => "RL_NOISE_TRAINED",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }

    pub fn needs_policy(self) -> bool {
        self != EvalCase::Baseline
    }
}

impl fmt::Display for EvalCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub trials: usize,
    /// Step cap per trial; unfinished travel times are censored here.
    pub max_steps: usize,
    /// Platoon waves per trial.
    pub waves: u32,
    pub sample_actions: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { trials: 3, max_steps: 500, waves: 1, sample_actions: false }
    }
}

/// The sim engine with a perturbation profile wrapped around the policy loop.
#[derive(Debug, Clone)]
pub struct PerturbedRunner {
    world: World,
    queues: RlQueues,
    profile: PerturbationProfile,
    env: EnvConfig,
    actions: DelayBuffer<Vec<f64>>,
    observations: DelayBuffer<ObservationVector>,
    dropout_rng: ChaCha8Rng,
    collisions: usize,
}

impl PerturbedRunner {
    /// Build the trial world: geometry is jittered once, the lag and yield
    /// rule are switched on in the engine, and noise injection is off.
    pub fn new(
        env: &EnvConfig,
        geometry: &GeometryConfig,
        profile: &PerturbationProfile,
        waves: Option<u32>,
        seed: u64,
        log: bool,
    ) -> Result<Self, TransferError> {
        profile.validate()?;
        let mut scenario: Scenario = (*env.scenario).clone();
        if profile.geometry_scale_error > 0.0 {
            let u: f64 = stream(seed, Stream::Geometry).random_range(-1.0..=1.0);
            let factor = 1.0 + profile.geometry_scale_error * u;
            scenario.network = Arc::new(RoadNetwork::from_config(&geometry.scaled(factor))?);
        }
        scenario.options.velocity_lag_tau = profile.speed_tracking_time_constant;
        scenario.options.yield_gap = (profile.yield_gap > 0.0).then_some(profile.yield_gap);
        if waves.is_some() {
            scenario.sim.waves = waves;
        }
        let mut world = World::new(Arc::new(scenario), derive_seed(seed, &[0]));
        if log {
            world = world.with_logging();
        }
        let mut queues = RlQueues::default();
        let ids: Vec<_> = world.vehicles().keys().copied().collect();
        queues.sync_inserted(&world, &ids);
        let first = build_observation(&world, &queues, &env.scales);
        let env = EnvConfig { noise: NoiseConfig::off(), ..env.clone() };
        Ok(Self {
            world,
            queues,
            profile: *profile,
            env,
            actions: DelayBuffer::new(profile.actuation_delay_steps, vec![0.0; 2]),
            observations: DelayBuffer::new(profile.observation_delay_steps, first),
            dropout_rng: stream(seed, Stream::Dropout),
            collisions: 0,
        })
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn world_mut(&mut self) -> &mut World {
        &mut self.world
    }

    pub fn queues(&self) -> &RlQueues {
        &self.queues
    }

    pub fn collisions(&self) -> usize {
        self.collisions
    }

    /// Current observation as the policy receives it: delayed and with
    /// non-AV slots dropped to padding.
    pub fn observe(&mut self) -> ObservationVector {
        let fresh = build_observation(&self.world, &self.queues, &self.env.scales);
        let mut o = self.observations.push(fresh);
        let p = self.profile.sensor_dropout_prob;
        if p > 0.0 {
            for k in 0..ENTRY_SLOTS {
                for (dist, vel) in [(layout::NORTH_DISTANCE, layout::NORTH_VELOCITY), (layout::WEST_DISTANCE, layout::WEST_VELOCITY)] {
                    if self.dropout_rng.random_bool(p) {
                        o.0[dist + k] = 1.0;
                        o.0[vel + k] = 0.0;
                    }
                }
            }
            for k in 0..RING_SLOTS {
                if self.dropout_rng.random_bool(p) {
                    o.0[layout::RING_POSITION + k] = 0.0;
                    o.0[layout::RING_VELOCITY + k] = 0.0;
                }
            }
        }
        o
    }

    /// Issue `action` (or nothing, for an all-IDM run) and advance one step.
    /// Collided vehicles are towed immediately.
    pub fn step(&mut self, action: Option<&[f64]>) -> StepEvents {
        let controls: Vec<(VehicleId, f64)> = match action {
            Some(a) => {
                let applied = self.actions.push(a.to_vec());
                let mut unused = stream(0, Stream::ActionNoise);
                assign_actions(&applied, &self.queues, &NoiseConfig::off(), &self.env.scenario.limits, &mut unused)
            }
            None => Vec::new(),
        };
        let events = self.world.step(&controls);
        for id in &events.retired {
            self.queues.remove(*id);
        }
        if !events.collisions.is_empty() {
            self.collisions += events.collisions.len();
            let ids: Vec<_> = self.world.vehicles().values().filter(|v| v.collided).map(|v| v.id).collect();
            for id in ids {
                self.queues.remove(id);
            }
            self.world.tow_collided();
        }
        self.queues.sync_inserted(&self.world, &events.inserted);
        events
    }

    /// Metrics with travel times of unfinished and towed vehicles censored
    /// at `cap` seconds.
    pub fn metrics(&self, cap: f64) -> EpisodeMetrics {
        let mut times: Vec<f64> =
            self.world.retired().iter().filter_map(|v| v.exited_at.map(|t| t - v.entered_at)).collect();
        let unfinished = self.world.vehicles().values().chain(self.world.towed());
        times.extend(unfinished.map(|v| cap - v.entered_at));
        EpisodeMetrics::from_travel_times(self.world.average_velocity(), times, self.collisions, self.world.steps() as usize, 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub metrics: EpisodeMetrics,
    pub metering_score: f64,
    pub trajectory: Vec<TrajectoryRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub case: EvalCase,
    pub avg_velocity: f64,
    pub avg_time: f64,
    pub max_time: f64,
    pub collisions: usize,
    pub trials: usize,
    pub metering_score: f64,
}

impl EvalReport {
    /// Per-trial metrics averaged; collisions summed.
    pub fn from_trials(case: EvalCase, trials: &[TrialResult]) -> Self {
        let n = trials.len().max(1) as f64;
        let mean = |f: &dyn Fn(&TrialResult) -> f64| trials.iter().map(f).sum::<f64>() / n;
        Self {
            case,
            avg_velocity: mean(&|t| t.metrics.avg_velocity),
            avg_time: mean(&|t| t.metrics.avg_travel_time),
            max_time: mean(&|t| t.metrics.max_travel_time),
            collisions: trials.iter().map(|t| t.metrics.collisions).sum(),
            trials: trials.len(),
            metering_score: mean(&|t| t.metering_score),
        }
    }

    /// More than half of the trials saw a collision.
    pub fn collision_storm(&self, per_trial: &[TrialResult]) -> bool {
        2 * per_trial.iter().filter(|t| t.metrics.collisions > 0).count() > self.trials
    }
}

/// Run one trial to completion or to the step cap.
pub fn run_trial(
    policy: Option<&PolicyParameters>,
    env: &EnvConfig,
    geometry: &GeometryConfig,
    profile: &PerturbationProfile,
    eval: &EvalConfig,
    seed: u64,
) -> Result<(EpisodeMetrics, Vec<TrajectoryRecord>), TransferError> {
    let mut runner = PerturbedRunner::new(env, geometry, profile, Some(eval.waves), seed, true)?;
    let mut sample_rng = stream(seed, Stream::PolicySample);
    for _ in 0..eval.max_steps {
        if runner.world().is_drained() {
            break;
        }
        let obs = runner.observe();
        let action = match policy {
            Some(p) => {
                let d = p.forward(obs.as_slice())?;
                Some(if eval.sample_actions { d.sample(&mut sample_rng).0 } else { d.mean })
            }
            None => None,
        };
        runner.step(action.as_deref());
    }
    let cap = eval.max_steps as f64 * env.scenario.limits.dt;
    let metrics = runner.metrics(cap);
    let log = runner.world_mut().take_trajectory();
    Ok((metrics, log))
}

/// Evaluate one case over `eval.trials` trials. Trial `k` uses the seed
/// derived from `(seed, k)` for every case, so cases see the same jitter.
pub fn evaluate(
    case: EvalCase,
    policy: Option<&PolicyParameters>,
    env: &EnvConfig,
    geometry: &GeometryConfig,
    profile: &PerturbationProfile,
    eval: &EvalConfig,
    seed: u64,
) -> Result<(EvalReport, Vec<TrialResult>), TransferError> {
    let policy = match (case.needs_policy(), policy) {
        (true, None) => return Err(TransferError::MissingPolicy(case)),
        (true, p) => p,
        (false, _) => None,
    };
    let s0 = env.scenario.idm.jam_distance;
    let trials = (0..eval.trials.max(1))
        .into_par_iter()
        .map(|k| {
            let trial_seed = derive_seed(seed, &[k as u64]);
            let (metrics, trajectory) = run_trial(policy, env, geometry, profile, eval, trial_seed)?;
            let net = trial_network(env, geometry, profile, trial_seed)?;
            let sc = &env.scenario;
            let score = metering_score(&trajectory, &net, sc.sim.vehicle_length, 2.0 * s0, sc.sim.merge_window, sc.limits.dt);
            Ok(TrialResult { trial: k, seed: trial_seed, metrics, metering_score: score, trajectory })
        })
        .collect::<Result<Vec<_>, TransferError>>()?;
    Ok((EvalReport::from_trials(case, &trials), trials))
}

fn trial_network(
    env: &EnvConfig,
    geometry: &GeometryConfig,
    profile: &PerturbationProfile,
    seed: u64,
) -> Result<Arc<RoadNetwork>, TransferError> {
    if profile.geometry_scale_error > 0.0 {
        let u: f64 = stream(seed, Stream::Geometry).random_range(-1.0..=1.0);
        Ok(Arc::new(RoadNetwork::from_config(&geometry.scaled(1.0 + profile.geometry_scale_error * u))?))
    } else {
        Ok(Arc::clone(&env.scenario.network))
    }
}

/// Total time during which some north and some west vehicle are both in the
/// conflict zone with a bumper-to-bumper gap below `threshold`. The zone is
/// the merge arc plus the last `approach` metres of both entries, where the
/// two routes share frame coordinates measured back from the merge.
pub fn metering_score(
    log: &[TrajectoryRecord],
    net: &RoadNetwork,
    vehicle_length: f64,
    threshold: f64,
    approach: f64,
    dt: f64,
) -> f64 {
    let Some((merge_start, end)) = net.merge_arc() else {
        return 0.0;
    };
    let start = merge_start - approach;
    let mut score = 0.0;
    let mut i = 0;
    while i < log.len() {
        let t = log[i].time;
        let mut j = i;
        let mut north = Vec::new();
        let mut west = Vec::new();
        while j < log.len() && log[j].time == t {
            let r = &log[j];
            if (start..end).contains(&r.position_1d) {
                match r.route {
                    RouteId::North => north.push(r.position_1d),
                    RouteId::West => west.push(r.position_1d),
                }
            }
            j += 1;
        }
        let close = north.iter().any(|n| west.iter().any(|w| (n - w).abs() - vehicle_length < threshold));
        if close {
            score += dt;
        }
        i = j;
    }
    score
}
