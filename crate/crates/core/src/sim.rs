//! Discrete-time world stepper for the roundabout scenario.
//!
//! Each step computes every vehicle's control from the same snapshot, updates
//! velocities, integrates positions, retires finished vehicles, detects
//! collisions and finally releases due platoons onto the network.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    idm_accel, safe_velocity, sample_desired_speed, step_velocity_av, step_velocity_idm,
    Controller, IdmParams, Leader, SimLimits, VehicleId, VehicleState,
};
use crate::netgeom::{Location, RoadNetwork, RouteId};
use crate::rng::{stream, Stream};
use crate::transfer::{yield_controller, YieldDecision};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlatoonSpec {
    pub size: u32,
    pub leader_rl_capable: bool,
    /// Spacing of queued vehicles behind the route origin, meters.
    pub spawn_gap: f64,
    pub spawn_speed: f64,
}

impl Default for PlatoonSpec {
    fn default() -> Self {
        Self { size: 1, leader_rl_capable: true, spawn_gap: 5.0, spawn_speed: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub north: PlatoonSpec,
    pub west: PlatoonSpec,
    /// Seconds between platoon releases on each route.
    pub spawn_period: f64,
    /// Number of waves per route; unlimited when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub waves: Option<u32>,
    pub vehicle_length: f64,
    /// Lane speed limit around which per-vehicle speed caps are drawn.
    pub speed_limit: f64,
    /// Std of the per-vehicle speed cap as a fraction of the limit; 0 disables.
    pub desired_speed_std_frac: f64,
    /// Distance to a merge within which vehicles react to traffic converging
    /// from the other route.
    pub merge_window: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            north: PlatoonSpec { size: 3, ..Default::default() },
            west: PlatoonSpec { size: 4, ..Default::default() },
            spawn_period: 72.0,
            waves: None,
            vehicle_length: 5.0,
            speed_limit: 15.0,
            desired_speed_std_frac: 0.2,
            merge_window: 30.0,
        }
    }
}

impl SimConfig {
    pub fn platoon(&self, route: RouteId) -> &PlatoonSpec {
        match route {
            RouteId::North => &self.north,
            RouteId::West => &self.west,
        }
    }
}

/// Dynamics alterations used by the transfer evaluation. The default is the
/// nominal simulator.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EngineOptions {
    /// First-order lag between commanded and realized velocity; 0 disables.
    pub velocity_lag_tau: f64,
    /// Explicit yield rule for IDM vehicles at the north entry.
    pub yield_gap: Option<f64>,
}

/// Everything a world needs besides its mutable state.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub network: Arc<RoadNetwork>,
    pub idm: IdmParams,
    pub limits: SimLimits,
    pub sim: SimConfig,
    pub options: EngineOptions,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            network: Arc::new(RoadNetwork::default()),
            idm: IdmParams::default(),
            limits: SimLimits::default(),
            sim: SimConfig::default(),
            options: EngineOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollisionEvent {
    pub time: f64,
    pub follower: VehicleId,
    pub leader: VehicleId,
    pub gap: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepEvents {
    pub inserted: Vec<VehicleId>,
    pub retired: Vec<VehicleId>,
    pub collisions: Vec<CollisionEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub time: f64,
    pub vehicle_id: VehicleId,
    pub route: RouteId,
    pub position_1d: f64,
    pub velocity: f64,
    pub controller: Controller,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Pending {
    rl_capable: bool,
    released_at: f64,
}

/// Snapshot of one on-network vehicle used during a step.
#[derive(Debug, Clone, Copy)]
struct Snap {
    id: VehicleId,
    loc: Location,
    velocity: f64,
    length: f64,
}

#[derive(Debug, Clone)]
pub struct World {
    scenario: Arc<Scenario>,
    steps: u64,
    vehicles: BTreeMap<VehicleId, VehicleState>,
    pending: [VecDeque<Pending>; 2],
    waves_released: [u32; 2],
    next_id: u32,
    retired: Vec<VehicleState>,
    towed: Vec<VehicleState>,
    inserted_total: usize,
    idm_rng: ChaCha8Rng,
    speed_rng: ChaCha8Rng,
    log: Option<Vec<TrajectoryRecord>>,
    velocity_sum: f64,
    vehicle_steps: u64,
}

impl World {
    /// Fresh world at t = 0 with the first platoons released.
    pub fn new(scenario: Arc<Scenario>, seed: u64) -> Self {
        let mut w = Self {
            scenario,
            steps: 0,
            vehicles: BTreeMap::new(),
            pending: [VecDeque::new(), VecDeque::new()],
            waves_released: [0, 0],
            next_id: 0,
            retired: Vec::new(),
            towed: Vec::new(),
            inserted_total: 0,
            idm_rng: stream(seed, Stream::IdmNoise),
            speed_rng: stream(seed, Stream::DesiredSpeed),
            log: None,
            velocity_sum: 0.0,
            vehicle_steps: 0,
        };
        let mut events = StepEvents::default();
        w.spawn_platoons(&mut events);
        w
    }

    pub fn with_logging(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn network(&self) -> &RoadNetwork {
        &self.scenario.network
    }

    pub fn time(&self) -> f64 {
        self.steps as f64 * self.scenario.limits.dt
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn vehicles(&self) -> &BTreeMap<VehicleId, VehicleState> {
        &self.vehicles
    }

    pub fn vehicle(&self, id: VehicleId) -> Option<&VehicleState> {
        self.vehicles.get(&id)
    }

    pub fn retired(&self) -> &[VehicleState] {
        &self.retired
    }

    /// Vehicles removed from the network after a collision.
    pub fn towed(&self) -> &[VehicleState] {
        &self.towed
    }

    pub fn pending_count(&self, route: RouteId) -> usize {
        self.pending[route.index()].len()
    }

    /// Vehicles ever inserted onto the network.
    pub fn inserted_total(&self) -> usize {
        self.inserted_total
    }

    pub fn collided_count(&self) -> usize {
        self.towed.len() + self.vehicles.values().filter(|v| v.collided).count()
    }

    pub fn active_count(&self) -> usize {
        self.vehicles.values().filter(|v| !v.collided).count()
    }

    pub fn trajectory(&self) -> Option<&[TrajectoryRecord]> {
        self.log.as_deref()
    }

    pub fn take_trajectory(&mut self) -> Vec<TrajectoryRecord> {
        self.log.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Mean velocity over all vehicle-steps recorded so far.
    pub fn average_velocity(&self) -> f64 {
        if self.vehicle_steps == 0 {
            0.0
        } else {
            self.velocity_sum / self.vehicle_steps as f64
        }
    }

    /// True once every scheduled wave is released and the network is empty.
    pub fn is_drained(&self) -> bool {
        let all_released = match self.scenario.sim.waves {
            Some(n) => self.waves_released.iter().all(|&w| w >= n),
            None => false,
        };
        all_released && self.vehicles.is_empty() && self.pending.iter().all(|p| p.is_empty())
    }

    pub fn location(&self, id: VehicleId) -> Option<Location> {
        let v = self.vehicles.get(&id)?;
        self.network().locate(v.route, v.progress).ok()
    }

    fn snapshot(&self) -> Vec<Snap> {
        self.vehicles
            .values()
            .map(|v| Snap {
                id: v.id,
                loc: self.network().locate(v.route, v.progress).expect("vehicle on its route"),
                velocity: v.velocity,
                length: v.length,
            })
            .collect()
    }

    /// Nearest vehicle ahead of `id` whose path conflicts with its remaining
    /// route, including traffic converging on the next merge.
    pub fn leader_of(&self, id: VehicleId) -> Option<(VehicleId, Leader)> {
        let snaps = self.snapshot();
        let ego = snaps.iter().position(|s| s.id == id)?;
        find_leader(&self.scenario, &snaps, ego, false).map(|(i, l)| (snaps[i].id, l))
    }

    /// Nearest vehicle physically ahead on the same path.
    pub fn physical_leader_of(&self, id: VehicleId) -> Option<(VehicleId, Leader)> {
        let snaps = self.snapshot();
        let ego = snaps.iter().position(|s| s.id == id)?;
        find_leader(&self.scenario, &snaps, ego, true).map(|(i, l)| (snaps[i].id, l))
    }

    /// Closest vehicle whose leader is `id`, with its gap.
    pub fn follower_of(&self, id: VehicleId) -> Option<(VehicleId, f64)> {
        let snaps = self.snapshot();
        let mut best: Option<(VehicleId, f64)> = None;
        for (i, s) in snaps.iter().enumerate() {
            if s.id == id {
                continue;
            }
            if let Some((j, l)) = find_leader(&self.scenario, &snaps, i, false) {
                if snaps[j].id == id && best.is_none_or(|(_, g)| l.headway < g) {
                    best = Some((s.id, l.headway));
                }
            }
        }
        best
    }

    /// Queue platoons whose release time has come and insert whatever fits.
    pub fn spawn_platoons(&mut self, events: &mut StepEvents) {
        let now = self.time();
        let period = self.scenario.sim.spawn_period;
        for route in RouteId::ALL {
            let r = route.index();
            loop {
                if self.scenario.sim.waves.is_some_and(|n| self.waves_released[r] >= n) {
                    break;
                }
                let due = self.waves_released[r] as f64 * period;
                if due > now + 1e-9 {
                    break;
                }
                let spec = *self.scenario.sim.platoon(route);
                for k in 0..spec.size {
                    self.pending[r].push_back(Pending {
                        rl_capable: k == 0 && spec.leader_rl_capable,
                        released_at: due,
                    });
                }
                self.waves_released[r] += 1;
            }
            self.insert_pending(route, events);
        }
    }

    fn insert_pending(&mut self, route: RouteId, events: &mut StepEvents) {
        let r = route.index();
        let Some(front) = self.pending[r].front().copied() else {
            return;
        };
        let spec = *self.scenario.sim.platoon(route);
        let s0 = self.scenario.idm.jam_distance;
        let entry = self.network().entry_segment(route);
        // only the last vehicle on the entry segment can block the origin
        let blocked = self.vehicles.values().any(|v| {
            let loc = self.network().locate(v.route, v.progress).expect("on route");
            loc.segment == entry && loc.offset - v.length < s0 + spec.spawn_gap
        });
        if blocked {
            return;
        }
        self.pending[r].pop_front();
        let id = VehicleId(self.next_id);
        self.next_id += 1;
        let sim = &self.scenario.sim;
        let speed_cap = sample_desired_speed(sim.speed_limit, sim.desired_speed_std_frac, &mut self.speed_rng);
        self.vehicles.insert(
            id,
            VehicleState {
                id,
                route,
                progress: 0.0,
                velocity: spec.spawn_speed,
                controller: Controller::Idm,
                rl_capable: front.rl_capable,
                length: sim.vehicle_length,
                speed_cap,
                entered_at: front.released_at,
                exited_at: None,
                collided: false,
            },
        );
        self.inserted_total += 1;
        events.inserted.push(id);
    }

    /// Advance one step. `av_accels` lists the vehicles driven by the policy
    /// this step together with their (already clipped) accelerations; every
    /// other vehicle runs the saturated IDM.
    pub fn step(&mut self, av_accels: &[(VehicleId, f64)]) -> StepEvents {
        let sc = Arc::clone(&self.scenario);
        let limits = sc.limits;
        let snaps = self.snapshot();
        let mut new_velocity = Vec::with_capacity(snaps.len());
        for (i, s) in snaps.iter().enumerate() {
            let v = &self.vehicles[&s.id];
            if v.collided {
                new_velocity.push((0.0, v.controller));
                continue;
            }
            let cmd = if let Some(&(_, a)) = av_accels.iter().find(|(id, _)| *id == s.id) {
                (step_velocity_av(v.velocity, a, &limits), Controller::Rl)
            } else {
                let mut leader = find_leader(&sc, &snaps, i, false).map(|(_, l)| l);
                if let Some(gap) = sc.options.yield_gap {
                    if let Some(stop) = yield_stop_line(&sc, &snaps, i, gap) {
                        if leader.is_none_or(|l| stop.headway < l.headway) {
                            leader = Some(stop);
                        }
                    }
                }
                let next = match idm_accel(&sc.idm, v.velocity, leader) {
                    Ok(a) => {
                        let a = sc.idm.perturb(a, &mut self.idm_rng);
                        let mut cap = v.speed_cap;
                        if let Some(l) = leader {
                            cap = cap.min(safe_velocity(l.headway, l.velocity, sc.idm.jam_distance, &limits));
                        }
                        step_velocity_idm(v.velocity, a, cap, &limits)
                    }
                    // overlapping already; the collision check below reports it
                    Err(_) => 0.0,
                };
                (next, Controller::Idm)
            };
            let realized = if sc.options.velocity_lag_tau > 0.0 {
                let alpha = (limits.dt / sc.options.velocity_lag_tau).min(1.0);
                v.velocity + alpha * (cmd.0 - v.velocity)
            } else {
                cmd.0
            };
            new_velocity.push((realized, cmd.1));
        }

        self.steps += 1;
        let now = self.time();
        let mut events = StepEvents::default();
        for (s, (vel, controller)) in snaps.iter().zip(new_velocity) {
            let total = sc.network.route(s.loc.route).total_length;
            let v = self.vehicles.get_mut(&s.id).expect("snapshot vehicle");
            if v.collided {
                continue;
            }
            v.velocity = vel;
            v.controller = controller;
            v.progress += vel * limits.dt;
            if v.progress >= total {
                v.progress = total;
                v.exited_at = Some(now);
                events.retired.push(s.id);
            }
        }
        for id in &events.retired {
            let v = self.vehicles.remove(id).expect("retiring vehicle");
            self.retired.push(v);
        }

        let snaps = self.snapshot();
        for (i, s) in snaps.iter().enumerate() {
            if let Some((j, l)) = find_leader(&sc, &snaps, i, true) {
                if l.headway <= 0.0 {
                    events.collisions.push(CollisionEvent {
                        time: now,
                        follower: s.id,
                        leader: snaps[j].id,
                        gap: l.headway,
                    });
                }
            }
        }
        for c in &events.collisions {
            for id in [c.follower, c.leader] {
                if let Some(v) = self.vehicles.get_mut(&id) {
                    v.collided = true;
                    v.velocity = 0.0;
                }
            }
        }

        self.spawn_platoons(&mut events);

        for v in self.vehicles.values() {
            self.velocity_sum += v.velocity;
            self.vehicle_steps += 1;
        }
        if let Some(log) = self.log.as_mut() {
            for v in self.vehicles.values() {
                log.push(TrajectoryRecord {
                    time: now,
                    vehicle_id: v.id,
                    route: v.route,
                    position_1d: sc.network.position_1d(v.route, v.progress).expect("on route"),
                    velocity: v.velocity,
                    controller: v.controller,
                });
            }
        }
        events
    }

    /// Remove collided vehicles from the network.
    pub fn tow_collided(&mut self) {
        let ids: Vec<_> = self.vehicles.values().filter(|v| v.collided).map(|v| v.id).collect();
        for id in ids {
            let v = self.vehicles.remove(&id).expect("collided vehicle");
            self.towed.push(v);
        }
    }

    /// Overwrite a vehicle's kinematic state; used to set up test scenes.
    pub fn place(&mut self, id: VehicleId, progress: f64, velocity: f64) {
        if let Some(v) = self.vehicles.get_mut(&id) {
            v.progress = progress;
            v.velocity = velocity;
        }
    }

    /// Insert a vehicle directly, bypassing the platoon schedule.
    pub fn insert_vehicle(&mut self, route: RouteId, progress: f64, velocity: f64, rl_capable: bool) -> VehicleId {
        let id = VehicleId(self.next_id);
        self.next_id += 1;
        let sim = &self.scenario.sim;
        self.vehicles.insert(
            id,
            VehicleState {
                id,
                route,
                progress,
                velocity,
                controller: Controller::Idm,
                rl_capable,
                length: sim.vehicle_length,
                speed_cap: sim.speed_limit,
                entered_at: self.time(),
                exited_at: None,
                collided: false,
            },
        );
        self.inserted_total += 1;
        id
    }

    /// Drop every vehicle and pending release; the schedule is left as is.
    pub fn clear(&mut self) {
        self.vehicles.clear();
        for p in &mut self.pending {
            p.clear();
        }
    }
}

fn find_leader(sc: &Scenario, snaps: &[Snap], ego: usize, physical_only: bool) -> Option<(usize, Leader)> {
    let net = &sc.network;
    let e = &snaps[ego];
    let route = net.route(e.loc.route);
    let mut best: Option<(usize, Leader)> = None;
    let mut consider = |i: usize, l: Leader| {
        if best.is_none_or(|(_, b)| l.headway < b.headway) {
            best = Some((i, l));
        }
    };
    for (i, x) in snaps.iter().enumerate() {
        if i == ego {
            continue;
        }
        let on_path = route.segments[e.loc.route_index..]
            .iter()
            .position(|&s| s == x.loc.segment)
            .map(|k| k + e.loc.route_index);
        if let Some(j) = on_path {
            let dist = route.starts[j] + x.loc.offset - e.loc.progress;
            let ahead = dist > 0.0 || (dist == 0.0 && x.id < e.id);
            if ahead {
                consider(i, Leader { headway: dist - x.length, velocity: x.velocity });
            }
            continue;
        }
        if physical_only || x.loc.route == e.loc.route {
            continue;
        }
        let (Some(me), Some(mx)) = (net.merge_index(e.loc.route), net.merge_index(x.loc.route)) else {
            continue;
        };
        let d_e = route.starts[me] - e.loc.progress;
        let d_x = net.route(x.loc.route).starts[mx] - x.loc.progress;
        if d_e <= 0.0 || d_x <= 0.0 || d_e > sc.sim.merge_window {
            continue;
        }
        let ahead = d_x < d_e || (d_x == d_e && x.id < e.id);
        if !ahead {
            continue;
        }
        let projected = d_e - d_x - x.length;
        if projected > 0.0 {
            consider(i, Leader { headway: projected, velocity: x.velocity });
        } else {
            // side by side: hold at the merge point until the other vehicle is through
            consider(i, Leader { headway: d_e, velocity: 0.0 });
        }
    }
    best
}

/// Virtual stopped obstacle at the north entry line when the yield rule says stop.
fn yield_stop_line(sc: &Scenario, snaps: &[Snap], ego: usize, gap: f64) -> Option<Leader> {
    let net = &sc.network;
    let e = &snaps[ego];
    if e.loc.route != RouteId::North || e.loc.route_index != 0 {
        return None;
    }
    let ring = snaps.iter().filter(|s| s.id != e.id).filter(|s| net.roundabout_ids().contains(&s.loc.segment));
    match yield_controller(net, ring.map(|s| (s.loc, s.length)), gap) {
        YieldDecision::Proceed => None,
        YieldDecision::Stop => {
            let d = net.entry_length(RouteId::North) - e.loc.progress;
            Some(Leader { headway: d.max(1e-6), velocity: 0.0 })
        }
    }
}
