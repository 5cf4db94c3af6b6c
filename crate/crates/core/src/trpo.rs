//! Trust-region policy optimization: parallel rollouts, linear baseline,
//! conjugate gradient on Fisher-vector products and a KL-bounded line search.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{rollout, EnvError, Environment, Episode};
use crate::policy::{ActionDistribution, ActionMode, ForwardCache, PolicyError, PolicyParameters, DEFAULT_LAYER_SIZES};
use crate::rng::{derive_seed, stream, Stream};

/// Samples per parallel work unit; fixed so sums do not depend on thread count.
const CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("rollout failed in iteration {iteration}, episode {episode}: {source}")]
    Rollout { iteration: usize, episode: usize, source: EnvError },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("non-finite policy gradient in iteration {0}")]
    NonFiniteGradient(usize),
    #[error("cannot build worker pool: {0}")]
    Pool(String),
    #[error("iteration callback failed: {0}")]
    Callback(String),
    #[error("invalid training config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub discount: f64,
    pub kl_limit: f64,
    pub batch_size: usize,
    pub horizon: usize,
    pub iterations: usize,
    pub cg_iters: usize,
    pub cg_damping: f64,
    pub backtrack_ratio: f64,
    pub max_backtracks: usize,
    pub baseline_ridge: f64,
    /// Rollout threads; 0 uses every core. Results do not depend on it.
    pub workers: usize,
    pub hidden_sizes: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            discount: 0.999,
            kl_limit: 0.01,
            batch_size: 20_000,
            horizon: 500,
            iterations: 100,
            cg_iters: 10,
            cg_damping: 0.1,
            backtrack_ratio: 0.8,
            max_backtracks: 10,
            baseline_ridge: 1e-5,
            workers: 0,
            hidden_sizes: DEFAULT_LAYER_SIZES[1..DEFAULT_LAYER_SIZES.len() - 1].to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return bad("discount must lie in (0, 1]");
        }
        if !(self.kl_limit > 0.0) {
            return bad("kl_limit must be positive");
        }
        if self.horizon == 0 || self.batch_size < self.horizon {
            return bad("batch_size must be at least horizon, and horizon positive");
        }
        if !(self.backtrack_ratio > 0.0 && self.backtrack_ratio < 1.0) {
            return bad("backtrack_ratio must lie in (0, 1)");
        }
        if !(self.cg_damping >= 0.0) || !(self.baseline_ridge >= 0.0) {
            return bad("cg_damping and baseline_ridge must be non-negative");
        }
        if self.hidden_sizes.contains(&0) {
            return bad("hidden layer widths must be positive");
        }
        Ok(())
    }

    pub fn layer_sizes(&self, obs_dim: usize, act_dim: usize) -> Vec<usize> {
        let mut s = vec![obs_dim];
        s.extend(&self.hidden_sizes);
        s.push(act_dim);
        s
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryBatch {
    pub episodes: Vec<Episode>,
    pub total_steps: usize,
}

impl TrajectoryBatch {
    pub fn from_episodes(episodes: Vec<Episode>) -> Self {
        let total_steps = episodes.iter().map(Episode::len).sum();
        Self { episodes, total_steps }
    }

    pub fn returns(&self) -> Vec<f64> {
        self.episodes.iter().map(Episode::total_reward).collect()
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, TrainError> {
    rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| TrainError::Pool(e.to_string()))
}

/// Roll out episodes until at least `batch_size` steps are collected.
/// Episode `k` of iteration `i` is seeded from `(master_seed, i, k)`; rounds
/// are sized from the remaining budget, so the batch is the same for any
/// worker count.
pub fn collect_batch<E, F>(
    policy: &PolicyParameters,
    make_env: &F,
    cfg: &TrainConfig,
    master_seed: u64,
    iteration: usize,
) -> Result<TrajectoryBatch, TrainError>
where
    E: Environment,
    F: Fn() -> E + Sync,
{
    let mut episodes = Vec::new();
    let mut total = 0;
    while total < cfg.batch_size {
        let round = (cfg.batch_size - total).div_ceil(cfg.horizon);
        let start = episodes.len();
        let results: Vec<Result<Episode, TrainError>> = (start..start + round)
            .into_par_iter()
            .map(|k| {
                let mut env = make_env();
                let seed = derive_seed(master_seed, &[iteration as u64, k as u64]);
                rollout(&mut env, policy, seed, ActionMode::Sample)
                    .map_err(|source| TrainError::Rollout { iteration, episode: k, source })
            })
            .collect();
        for r in results {
            if total >= cfg.batch_size {
                break;
            }
            let ep = r?;
            total += ep.len();
            episodes.push(ep);
        }
    }
    Ok(TrajectoryBatch { episodes, total_steps: total })
}

pub fn discounted_returns(rewards: &[f64], discount: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + discount * acc;
        out[t] = acc;
    }
    out
}

/// Linear value estimate over (obs, obs², t/T, (t/T)², (t/T)³, 1).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinearBaseline {
    coeffs: Option<Vec<f64>>,
    horizon: usize,
}

impl LinearBaseline {
    pub fn new(horizon: usize) -> Self {
        Self { coeffs: None, horizon }
    }

    pub fn is_fitted(&self) -> bool {
        self.coeffs.is_some()
    }

    pub fn coefficients(&self) -> Option<&[f64]> {
        self.coeffs.as_deref()
    }

    fn features(&self, obs: &[f64], t: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend(obs.iter().map(|o| o.clamp(-10.0, 10.0)));
        out.extend(obs.iter().map(|o| o.clamp(-10.0, 10.0).powi(2)));
        let s = t as f64 / self.horizon.max(1) as f64;
        out.extend([s, s * s, s * s * s, 1.0]);
    }

    pub fn predict(&self, obs: &[f64], t: usize) -> f64 {
        let Some(c) = &self.coeffs else { return 0.0 };
        let mut f = Vec::with_capacity(c.len());
        self.features(obs, t, &mut f);
        f.iter().zip(c).map(|(a, b)| a * b).sum()
    }

    /// Ridge regression of discounted returns on the features. The ridge is
    /// raised tenfold until the normal equations factor with finite output.
    pub fn fit(&mut self, batch: &TrajectoryBatch, discount: f64, ridge: f64) {
        let Some(first) = batch.episodes.iter().find(|e| !e.is_empty()) else {
            return;
        };
        let dim = 2 * first.observations[0].len() + 4;
        let mut xtx = DMatrix::<f64>::zeros(dim, dim);
        let mut xty = DVector::<f64>::zeros(dim);
        let mut f = Vec::with_capacity(dim);
        for ep in &batch.episodes {
            let g = discounted_returns(&ep.rewards, discount);
            for (t, obs) in ep.observations.iter().enumerate() {
                self.features(obs, t, &mut f);
                let fv = DVector::from_column_slice(&f);
                xtx.ger(1.0, &fv, &fv, 1.0);
                xty.axpy(g[t], &fv, 1.0);
            }
        }
        let mut reg = ridge;
        for _ in 0..5 {
            let a = &xtx + DMatrix::<f64>::identity(dim, dim) * reg;
            if let Some(ch) = a.cholesky() {
                let w = ch.solve(&xty);
                if w.iter().all(|x| x.is_finite()) {
                    self.coeffs = Some(w.as_slice().to_vec());
                    return;
                }
            }
            reg = (reg * 10.0).max(1e-8);
        }
    }
}

/// Returns-to-go minus baseline, normalized to zero mean and unit variance.
pub fn compute_advantages(batch: &TrajectoryBatch, baseline: &LinearBaseline, discount: f64) -> Vec<f64> {
    let mut adv = Vec::with_capacity(batch.total_steps);
    for ep in &batch.episodes {
        let g = discounted_returns(&ep.rewards, discount);
        for (t, obs) in ep.observations.iter().enumerate() {
            adv.push(g[t] - baseline.predict(obs, t));
        }
    }
    normalize(&mut adv);
    adv
}

fn normalize(x: &mut [f64]) {
    if x.is_empty() {
        return;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in x.iter_mut() {
        *v = (*v - mean) / (std + 1e-8);
    }
}

/// Flattened batch with cached forward passes of the policy that collected it.
pub struct SampleSet {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub advantages: Vec<f64>,
    caches: Vec<ForwardCache>,
    old: Vec<ActionDistribution>,
    old_log_probs: Vec<f64>,
}

impl SampleSet {
    pub fn new(policy: &PolicyParameters, batch: &TrajectoryBatch, advantages: Vec<f64>) -> Result<Self, PolicyError> {
        let observations: Vec<Vec<f64>> = batch.episodes.iter().flat_map(|e| e.observations.iter().cloned()).collect();
        let actions: Vec<Vec<f64>> = batch.episodes.iter().flat_map(|e| e.actions.iter().cloned()).collect();
        assert_eq!(observations.len(), advantages.len());
        let caches = observations.par_iter().map(|o| policy.forward_cache(o)).collect::<Result<Vec<_>, _>>()?;
        let old: Vec<ActionDistribution> = caches.iter().map(|c| policy.distribution_from(c.mean().to_vec())).collect();
        let old_log_probs = old.iter().zip(&actions).map(|(d, a)| d.log_prob(a)).collect();
        Ok(Self { observations, actions, advantages, caches, old, old_log_probs })
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Mean importance-weighted advantage and mean KL(old ‖ new).
    pub fn surrogate_and_kl(&self, new: &PolicyParameters) -> Result<(f64, f64), PolicyError> {
        let n = self.len().max(1) as f64;
        let parts = chunked(self.len(), |range| -> Result<(f64, f64), PolicyError> {
            let (mut s, mut k) = (0.0, 0.0);
            for i in range {
                let d = new.forward(&self.observations[i])?;
                let ratio = (d.log_prob(&self.actions[i]) - self.old_log_probs[i]).exp();
                s += ratio * self.advantages[i];
                k += self.old[i].kl(&d);
            }
            Ok((s, k))
        });
        let (mut s, mut k) = (0.0, 0.0);
        for p in parts {
            let (a, b) = p?;
            s += a;
            k += b;
        }
        Ok((s / n, k / n))
    }

    /// Gradient of the surrogate at the collecting policy.
    pub fn policy_gradient(&self, policy: &PolicyParameters) -> Vec<f64> {
        let n = self.len().max(1) as f64;
        let np = policy.num_params();
        let parts = chunked(self.len(), |range| {
            let mut g = vec![0.0; np];
            for i in range {
                policy.accumulate_grad_log_prob(&self.caches[i], &self.actions[i], self.advantages[i], &mut g);
            }
            g
        });
        sum_ordered(parts, np, 1.0 / n)
    }

    /// Fisher-information product F·v, averaged over the samples: the mean
    /// block is Jᵀ diag(σ⁻²) J and each log-std entry contributes 2.
    pub fn fisher_vector_product(&self, policy: &PolicyParameters, v: &[f64], damping: f64) -> Vec<f64> {
        let n = self.len().max(1) as f64;
        let np = policy.num_params();
        let inv_var: Vec<f64> = policy.log_std().iter().map(|s| (-2.0 * s).exp()).collect();
        let parts = chunked(self.len(), |range| {
            let mut out = vec![0.0; np];
            for i in range {
                let jv = policy.jvp_mean(&self.caches[i], v);
                let weighted: Vec<f64> = jv.iter().zip(&inv_var).map(|(a, b)| a * b).collect();
                policy.backward_mean(&self.caches[i], &weighted, 1.0, &mut out);
            }
            out
        });
        let mut out = sum_ordered(parts, np, 1.0 / n);
        let ls = np - policy.output_dim();
        for k in ls..np {
            out[k] += 2.0 * v[k];
        }
        for (o, x) in out.iter_mut().zip(v) {
            *o += damping * x;
        }
        out
    }
}

fn chunked<T: Send>(len: usize, f: impl Fn(std::ops::Range<usize>) -> T + Sync) -> Vec<T> {
    (0..len.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| f(c * CHUNK..((c + 1) * CHUNK).min(len)))
        .collect()
}

fn sum_ordered(parts: Vec<Vec<f64>>, n: usize, scale: f64) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for p in parts {
        for (o, x) in out.iter_mut().zip(p) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|x| *x *= scale);
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solve `A x = b` for symmetric positive-definite `A` given as a product.
/// Returns `None` when a non-positive curvature or non-finite value appears.
pub fn conjugate_gradient(apply: impl Fn(&[f64]) -> Vec<f64>, b: &[f64], iters: usize, tol: f64) -> Option<Vec<f64>> {
    let mut x = vec![0.0; b.len()];
    let mut r = b.to_vec();
    let mut p = b.to_vec();
    let mut rr = dot(&r, &r);
    for _ in 0..iters {
        if rr <= tol {
            break;
        }
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) || !pap.is_finite() {
            return None;
        }
        let alpha = rr / pap;
        for i in 0..x.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        for i in 0..p.len() {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub accepted: bool,
    pub mean_kl: f64,
    pub surrogate_gain: f64,
    pub backtracks: usize,
    pub used_fallback: bool,
}

/// One natural-gradient step with backtracking. Returns the old parameters
/// when no candidate satisfies both the KL bound and improvement.
pub fn trpo_step(
    policy: &PolicyParameters,
    samples: &SampleSet,
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<(PolicyParameters, StepInfo), TrainError> {
    let rejected = |backtracks, used_fallback| StepInfo { accepted: false, mean_kl: 0.0, surrogate_gain: 0.0, backtracks, used_fallback };
    let g = samples.policy_gradient(policy);
    if g.iter().any(|x| !x.is_finite()) {
        return Err(TrainError::NonFiniteGradient(iteration));
    }
    if g.iter().all(|&x| x == 0.0) {
        return Ok((policy.clone(), rejected(0, false)));
    }
    let fvp = |v: &[f64]| samples.fisher_vector_product(policy, v, cfg.cg_damping);
    let (mut dir, mut used_fallback) = match conjugate_gradient(fvp, &g, cfg.cg_iters, 1e-10) {
        Some(x) => (x, false),
        None => (g.clone(), true),
    };
    let mut curvature = dot(&dir, &fvp(&dir));
    if !(curvature > 0.0) || !curvature.is_finite() {
        dir = g.clone();
        used_fallback = true;
        curvature = dot(&dir, &fvp(&dir));
        if !(curvature > 0.0) || !curvature.is_finite() {
            return Ok((policy.clone(), rejected(0, true)));
        }
    }
    let scale = (2.0 * cfg.kl_limit / curvature).sqrt();
    let old_flat = policy.to_flat();
    let (old_surr, _) = samples.surrogate_and_kl(policy)?;
    let mut frac = 1.0;
    for k in 0..=cfg.max_backtracks {
        let cand: Vec<f64> = old_flat.iter().zip(&dir).map(|(x, d)| x + frac * scale * d).collect();
        if let Ok(new) = policy.with_flat(&cand) {
            if cand.iter().all(|x| x.is_finite()) {
                let (surr, kl) = samples.surrogate_and_kl(&new)?;
                if kl <= cfg.kl_limit && surr > old_surr {
                    let info = StepInfo { accepted: true, mean_kl: kl, surrogate_gain: surr - old_surr, backtracks: k, used_fallback };
                    return Ok((new, info));
                }
            }
        }
        frac *= cfg.backtrack_ratio;
    }
    Ok((policy.clone(), rejected(cfg.max_backtracks, used_fallback)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_kl: f64,
    pub steps: usize,
    pub episodes: usize,
    pub early_terminations: usize,
    pub step: StepInfo,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: PolicyParameters,
    pub curve: Vec<IterationRecord>,
}

pub fn initial_policy(cfg: &TrainConfig, obs_dim: usize, act_dim: usize, master_seed: u64) -> PolicyParameters {
    let mut rng = stream(master_seed, Stream::Init);
    PolicyParameters::init(&cfg.layer_sizes(obs_dim, act_dim), &mut rng)
}

/// Run `cfg.iterations` rounds of collect → advantages → step → refit.
/// `on_iteration` sees each record together with the updated policy.
pub fn train<E, F, O>(make_env: &F, cfg: &TrainConfig, master_seed: u64, mut on_iteration: O) -> Result<TrainOutcome, TrainError>
where
    E: Environment,
    F: Fn() -> E + Sync,
    O: FnMut(&IterationRecord, &PolicyParameters) -> Result<(), TrainError>,
{
    cfg.validate()?;
    let probe = make_env();
    let mut policy = initial_policy(cfg, probe.observation_dim(), probe.action_dim(), master_seed);
    drop(probe);
    let pool = pool(cfg.workers)?;
    let mut baseline = LinearBaseline::new(cfg.horizon);
    let mut curve = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let (next, record) = pool.install(|| -> Result<_, TrainError> {
            let batch = collect_batch(&policy, make_env, cfg, master_seed, it)?;
            let adv = compute_advantages(&batch, &baseline, cfg.discount);
            let samples = SampleSet::new(&policy, &batch, adv)?;
            let (next, step) = trpo_step(&policy, &samples, cfg, it)?;
            baseline.fit(&batch, cfg.discount, cfg.baseline_ridge);
            let returns = batch.returns();
            let n = returns.len() as f64;
            let mean = returns.iter().sum::<f64>() / n;
            let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
            let record = IterationRecord {
                iteration: it,
                mean_return: mean,
                std_return: std,
                mean_kl: step.mean_kl,
                steps: batch.total_steps,
                episodes: batch.episodes.len(),
                early_terminations: batch.episodes.iter().filter(|e| e.terminated_early).count(),
                step,
            };
            Ok((next, record))
        })?;
        policy = next;
        on_iteration(&record, &policy)?;
        curve.push(record);
    }
    Ok(TrainOutcome { policy, curve })
}
