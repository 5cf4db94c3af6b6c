//! Fixtures shared by the criterion benches.

use std::sync::Arc;

use rampmeter_core::trpo::{collect_batch, compute_advantages, initial_policy, LinearBaseline, SampleSet};
use rampmeter_core::{EnvConfig, PolicyParameters, RoundaboutEnv, Scenario, TrainConfig, World};

pub fn default_policy(seed: u64) -> PolicyParameters {
    initial_policy(&TrainConfig::default(), 54, 2, seed)
}

pub fn observation() -> Vec<f64> {
    (0..54).map(|i| (0.37 * i as f64).sin()).collect()
}

/// A default world advanced `steps` steps so both platoons are on the network.
pub fn warm_world(steps: usize) -> World {
    let mut w = World::new(Arc::new(Scenario::default()), 3);
    for _ in 0..steps {
        w.step(&[]);
    }
    w
}

/// One small batch of roundabout rollouts packaged for the optimizer.
pub fn sample_set(policy: &PolicyParameters, batch_size: usize) -> SampleSet {
    let cfg = TrainConfig { batch_size, workers: 1, ..Default::default() };
    let env = EnvConfig::default();
    let batch = collect_batch(policy, &|| RoundaboutEnv::new(env.clone()), &cfg, 1, 0).expect("rollouts");
    let adv = compute_advantages(&batch, &LinearBaseline::new(cfg.horizon), cfg.discount);
    SampleSet::new(policy, &batch, adv).expect("sample set")
}
