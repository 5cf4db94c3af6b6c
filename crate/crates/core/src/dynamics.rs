//! Intelligent Driver Model, safe-velocity supervisor and the clipped Euler
//! velocity updates used for human-driven and autonomous vehicles.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netgeom::RouteId;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum DynamicsError {
    #[error("non-positive headway {0} m: vehicles are in collision")]
    Collision(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdmParams {
    /// Safe time headway T, seconds.
    pub time_headway: f64,
    /// Comfortable acceleration a, m/s².
    pub accel: f64,
    /// Comfortable deceleration b, m/s².
    pub decel: f64,
    /// Acceleration exponent δ.
    pub delta: f64,
    /// Linear jam distance s0, meters.
    pub jam_distance: f64,
    /// Desired speed v0, m/s.
    pub desired_speed: f64,
    /// Std of the zero-mean Gaussian perturbation added to every IDM acceleration.
    pub accel_noise_std: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            time_headway: 1.0,
            accel: 1.0,
            decel: 1.5,
            delta: 4.0,
            jam_distance: 2.0,
            desired_speed: 30.0,
            accel_noise_std: 0.1,
        }
    }
}

impl IdmParams {
    /// Desired gap s*(v, Δv).
    pub fn desired_gap(&self, velocity: f64, approach_rate: f64) -> f64 {
        let dynamic = velocity * self.time_headway
            + velocity * approach_rate / (2.0 * (self.accel * self.decel).sqrt());
        self.jam_distance + dynamic.max(0.0)
    }

    /// Steady-state gap behind a leader driving at `velocity`.
    pub fn equilibrium_gap(&self, velocity: f64) -> f64 {
        self.desired_gap(velocity, 0.0)
            / (1.0 - (velocity / self.desired_speed).powf(self.delta)).sqrt()
    }

    /// Adds the per-step acceleration perturbation.
    pub fn perturb<R: Rng + ?Sized>(&self, accel: f64, rng: &mut R) -> f64 {
        if self.accel_noise_std > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            accel + self.accel_noise_std * z
        } else {
            accel
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimLimits {
    pub a_max: f64,
    pub a_min: f64,
    pub v_max: f64,
    pub dt: f64,
}

impl Default for SimLimits {
    fn default() -> Self {
        Self { a_max: 1.0, a_min: -1.0, v_max: 15.0, dt: 1.0 }
    }
}

impl SimLimits {
    pub fn clip_accel(&self, accel: f64) -> f64 {
        accel.clamp(self.a_min, self.a_max)
    }
}

/// Vehicle ahead of the ego vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Leader {
    /// Bumper-to-bumper gap, meters.
    pub headway: f64,
    pub velocity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VehicleId(pub u32);

impl std::fmt::Display for VehicleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Controller {
    Idm,
    Rl,
}

impl Controller {
    pub fn as_str(self) -> &'static str {
        match self {
            Controller::Idm => "idm",
            Controller::Rl => "rl",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleState {
    pub id: VehicleId,
    pub route: RouteId,
    /// Meters travelled along the route (front bumper).
    pub progress: f64,
    pub velocity: f64,
    /// Controller that drove the vehicle on the latest step.
    pub controller: Controller,
    pub rl_capable: bool,
    /// Bumper-to-bumper footprint, meters.
    pub length: f64,
    /// Per-vehicle speed cap drawn around the lane speed limit.
    pub speed_cap: f64,
    /// Time the vehicle's platoon was released into the scenario.
    pub entered_at: f64,
    pub exited_at: Option<f64>,
    pub collided: bool,
}

/// IDM acceleration without the random perturbation. `None` is free road, in
/// which case the interaction term is dropped.
pub fn idm_accel(
    params: &IdmParams,
    velocity: f64,
    leader: Option<Leader>,
) -> Result<f64, DynamicsError> {
    let free = 1.0 - (velocity / params.desired_speed).powf(params.delta);
    let interaction = match leader {
        None => 0.0,
        Some(l) if l.headway <= 0.0 => return Err(DynamicsError::Collision(l.headway)),
        Some(l) => {
            let s_star = params.desired_gap(velocity, velocity - l.velocity);
            (s_star / l.headway).powi(2)
        }
    };
    Ok(params.accel * (free - interaction))
}

/// Gaussian desired speed around `speed_limit` with `std_frac · speed_limit`
/// spread, clamped from below at a tenth of the limit.
pub fn sample_desired_speed<R: Rng + ?Sized>(speed_limit: f64, std_frac: f64, rng: &mut R) -> f64 {
    let floor = 0.1 * speed_limit;
    let draw = match Normal::new(speed_limit, std_frac * speed_limit) {
        Ok(n) if std_frac > 0.0 => n.sample(rng),
        _ => speed_limit,
    };
    draw.max(floor)
}

/// Largest velocity that still lets the ego stop `jam_distance` behind a
/// leader that brakes at `|a_min|` right now, when the ego keeps its speed for
/// one step before braking at `|a_min|` as well.
pub fn safe_velocity(headway: f64, lead_velocity: f64, jam_distance: f64, limits: &SimLimits) -> f64 {
    let b = limits.a_min.abs();
    let reaction = b * limits.dt;
    let budget = (headway - jam_distance).max(0.0);
    let v = -reaction + (reaction * reaction + lead_velocity * lead_velocity + 2.0 * b * budget).sqrt();
    v.clamp(0.0, limits.v_max)
}

/// Saturated IDM update: `cap` is the tighter of v_max, the per-vehicle speed
/// cap and the safe velocity.
pub fn step_velocity_idm(velocity: f64, accel: f64, cap: f64, limits: &SimLimits) -> f64 {
    (velocity + accel * limits.dt).min(cap.min(limits.v_max)).max(0.0)
}

/// First-order Euler update for an autonomous vehicle; no safety cap.
pub fn step_velocity_av(velocity: f64, accel: f64, limits: &SimLimits) -> f64 {
    (velocity + accel * limits.dt).min(limits.v_max).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noiseless() -> IdmParams {
        IdmParams { accel_noise_std: 0.0, ..Default::default() }
    }

    #[test]
    fn free_road_from_rest_is_comfortable_accel() {
        let a = idm_accel(&noiseless(), 0.0, Some(Leader { headway: 1e9, velocity: 0.0 })).unwrap();
        assert!((a - 1.0).abs() < 1e-12);
        assert_eq!(idm_accel(&noiseless(), 0.0, None).unwrap(), 1.0);
    }

    #[test]
    fn hand_evaluated_accelerations() {
        let p = noiseless();
        assert!((p.desired_gap(5.0, 0.0) - 7.0).abs() < 1e-12);
        let a = idm_accel(&p, 5.0, Some(Leader { headway: 10.0, velocity: 5.0 })).unwrap();
        let expected = 1.0 - (5.0f64 / 30.0).powi(4) - 0.49;
        assert!((a - expected).abs() < 1e-12);
        assert!((a - 0.50923).abs() < 1e-5);
        let a = idm_accel(&p, 30.0, Some(Leader { headway: 32.0, velocity: 30.0 })).unwrap();
        assert!((a + 1.0).abs() < 1e-12);
    }

    #[test]
    fn collision_headway_is_reported() {
        let r = idm_accel(&noiseless(), 3.0, Some(Leader { headway: 0.0, velocity: 0.0 }));
        assert_eq!(r, Err(DynamicsError::Collision(0.0)));
    }

    #[test]
    fn equilibrium_gap_root() {
        let p = noiseless();
        let s = p.equilibrium_gap(15.0);
        assert!((s - 17.558).abs() < 1e-3);
        let a = idm_accel(&p, 15.0, Some(Leader { headway: s, velocity: 15.0 })).unwrap();
        assert!(a.abs() < 1e-12);
    }

    #[test]
    fn desired_speed_degenerate_and_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_desired_speed(15.0, 0.0, &mut rng), 15.0);
        // 5σ below the mean is far under the floor
        let mut hits = 0;
        for _ in 0..200_000 {
            let v = sample_desired_speed(15.0, 0.2, &mut rng);
            assert!(v >= 1.5);
            if v == 1.5 {
                hits += 1;
            }
        }
        // P(z < -4.5) ≈ 3.4e-6, so clamped draws are rare but the floor holds
        assert!(hits < 10);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(sample_desired_speed(15.0, 50.0, &mut rng).min(1.5), 1.5);
    }

    #[test]
    fn desired_speed_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let v = sample_desired_speed(15.0, 0.2, &mut rng);
            s += v;
            s2 += v * v;
        }
        let mean = s / n as f64;
        let std = (s2 / n as f64 - mean * mean).sqrt();
        assert!((mean - 15.0).abs() < 0.01, "mean {mean}");
        assert!((std - 3.0).abs() < 0.05, "std {std}");
    }

    /// Bisection on ego stopping distance ≤ leader stopping distance − s0.
    fn safe_velocity_bisection(headway: f64, lead: f64, s0: f64, l: &SimLimits) -> f64 {
        let b = l.a_min.abs();
        let ok = |v: f64| v * l.dt + v * v / (2.0 * b) <= (headway - s0).max(0.0) + lead * lead / (2.0 * b);
        let (mut lo, mut hi) = (0.0, 1e6);
        if !ok(0.0) {
            return 0.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if ok(mid) {
                lo = mid
            } else {
                hi = mid
            }
        }
        lo.min(l.v_max)
    }

    #[test]
    fn safe_velocity_examples() {
        let l = SimLimits::default();
        assert_eq!(safe_velocity(2.0, 0.0, 2.0, &l), 0.0);
        let v = safe_velocity(6.5, 0.0, 2.0, &l);
        // v + v²/2 = 4.5  ⇒  v = √10 − 1
        assert!((v - (10f64.sqrt() - 1.0)).abs() < 1e-12);
        assert!((v - safe_velocity_bisection(6.5, 0.0, 2.0, &l)).abs() < 1e-9);
        assert_eq!(safe_velocity(1e9, 0.0, 2.0, &l), 15.0);
    }

    #[test]
    fn velocity_updates() {
        let l = SimLimits::default();
        assert_eq!(step_velocity_idm(0.5, -1.0, 15.0, &l), 0.0);
        assert_eq!(step_velocity_idm(14.8, 1.0, 15.0, &l), 15.0);
        assert!((step_velocity_idm(5.0, 0.509, 15.0, &l) - 5.509).abs() < 1e-12);
        assert_eq!(step_velocity_av(0.0, -1.0, &l), 0.0);
        assert_eq!(step_velocity_av(15.0, 1.0, &l), 15.0);
        assert!((step_velocity_av(7.2, -0.4, &l) - 6.8).abs() < 1e-12);
    }

    #[test]
    fn free_flow_converges_monotonically() {
        let p = IdmParams { desired_speed: 15.0, ..noiseless() };
        let l = SimLimits::default();
        let mut v = 0.0;
        for step in 1..=200 {
            let a = idm_accel(&p, v, None).unwrap();
            let next = step_velocity_idm(v, a, 15.0, &l);
            assert!(next >= v);
            v = next;
            if step >= 60 {
                assert!((v - 15.0).abs() <= 0.15);
            }
        }
    }

    proptest! {
        #[test]
        fn velocity_box(v in 0.0f64..15.0, a in -50.0f64..50.0, cap in 0.0f64..30.0) {
            let l = SimLimits::default();
            let x = step_velocity_idm(v, a, cap, &l);
            prop_assert!((0.0..=15.0).contains(&x));
            let y = step_velocity_av(v, l.clip_accel(a), &l);
            prop_assert!((0.0..=15.0).contains(&y));
        }

        #[test]
        fn safe_velocity_matches_bisection(h in 0.0f64..80.0, lead in 0.0f64..15.0) {
            let l = SimLimits::default();
            let closed = safe_velocity(h, lead, 2.0, &l);
            let oracle = safe_velocity_bisection(h, lead, 2.0, &l);
            prop_assert!((closed - oracle).abs() < 1e-6);
        }

        /// Leader brakes at full deceleration from an arbitrary state; a
        /// follower capped by the supervisor keeps a positive gap.
        #[test]
        fn supervisor_prevents_rear_end(gap in 2.5f64..60.0, v_lead in 0.0f64..15.0, v_f in 0.0f64..15.0) {
            let l = SimLimits::default();
            let p = noiseless();
            let s0 = p.jam_distance;
            // start from a state the supervisor admits
            let mut vf = v_f.min(safe_velocity(gap, v_lead, s0, &l));
            let (mut xl, mut xf, mut vl) = (gap, 0.0, v_lead);
            for _ in 0..60 {
                let h = xl - xf;
                prop_assert!(h > 0.0, "gap {h}");
                let a = idm_accel(&p, vf, Some(Leader { headway: h, velocity: vl })).unwrap();
                let cap = safe_velocity(h, vl, s0, &l);
                let nvl = (vl + l.a_min * l.dt).max(0.0);
                let nvf = step_velocity_idm(vf, a, cap, &l);
                xl += nvl * l.dt;
                xf += nvf * l.dt;
                vl = nvl;
                vf = nvf;
            }
            prop_assert!(xl - xf > 0.0);
        }
    }
}
