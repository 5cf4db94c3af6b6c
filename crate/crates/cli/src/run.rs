use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rampmeter_core::io::{self, TrialRow};
use rampmeter_core::transfer::{self, TrialResult};
use rampmeter_core::trpo::{self, TrainError};
use rampmeter_core::{EvalCase, EvalReport, PerturbationProfile, PolicyParameters, RoundaboutEnv, RunConfig};

use crate::{Common, Noise};

/// Effective configuration plus the directory every output goes to.
struct Run {
    cfg: RunConfig,
    out: PathBuf,
}

impl Run {
    fn start(common: &Common, trials: Option<usize>) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg.master_seed = seed;
        }
        if let Some(n) = trials {
            cfg.eval.trials = n;
        }
        cfg.validate()?;
        let out = common
            .out
            .clone()
            .or_else(|| cfg.output_dir.clone())
            .context("no output directory: pass --out or set output_dir in the config")?;
        prepare_dir(&out)?;
        cfg.output_dir = None;
        let dump = format!("{}\n{}", io::header_line(cfg.master_seed), cfg.to_toml_string()?);
        fs::write(out.join("config.toml"), dump).with_context(|| format!("writing config dump to {}", out.display()))?;
        Ok(Self { cfg, out })
    }

    fn seed(&self) -> u64 {
        self.cfg.master_seed
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

/// Outputs never overwrite an earlier run.
fn prepare_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
        if entries.next().is_some() {
            bail!("output directory {} is not empty", dir.display());
        }
    } else {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn load_policy(path: &Path) -> Result<PolicyParameters> {
    PolicyParameters::load(path).with_context(|| format!("loading policy {}", path.display()))
}

pub fn train(common: &Common, noise: Noise) -> Result<()> {
    let run = Run::start(common, None)?;
    let env = run.cfg.env_config(noise == Noise::On)?;
    let seed = run.seed();
    let mut curve = io::RewardCurveWriter::create(&run.path("reward_curve.csv"), seed)?;
    let make_env = || RoundaboutEnv::new(env.clone());
    println!("training: noise {}, seed {seed}, {} iterations", if env.noise.enabled { "on" } else { "off" }, run.cfg.train.iterations);
    trpo::train(&make_env, &run.cfg.train, seed, |rec, policy| {
        let ckpt = run.path(&format!("policy_iter_{}.rndp", rec.iteration));
        policy.save(&ckpt).map_err(|e| TrainError::Callback(e.to_string()))?;
        curve.append(rec).map_err(|e| TrainError::Callback(e.to_string()))?;
        println!(
            "iter {:>4}  return {:>10.3} ± {:<9.3} kl {:.5}  episodes {:>3}  early {:>3}  backtracks {}",
            rec.iteration, rec.mean_return, rec.std_return, rec.mean_kl, rec.episodes, rec.early_terminations, rec.step.backtracks
        );
        Ok(())
    })?;
    println!("outputs in {}", run.out.display());
    Ok(())
}

pub fn baseline(common: &Common, trials: Option<usize>) -> Result<()> {
    let run = Run::start(common, trials)?;
    let reports = run_cases(&run, &[(EvalCase::Baseline, None)], &PerturbationProfile::zero())?;
    print_reports(&reports, None);
    Ok(())
}

pub fn eval(common: &Common, policy: &Path, noise: Noise, trials: Option<usize>) -> Result<()> {
    let policy = load_policy(policy)?;
    let run = Run::start(common, trials)?;
    let case = match noise {
        Noise::On => EvalCase::RlNoiseTrained,
        Noise::Off => EvalCase::RlNoiseFree,
    };
    let reports = run_cases(&run, &[(case, Some(&policy))], &PerturbationProfile::zero())?;
    print_reports(&reports, None);
    Ok(())
}

pub fn transfer_eval(common: &Common, trained: &Path, noise_free: &Path, trials: Option<usize>) -> Result<()> {
    let trained = load_policy(trained)?;
    let noise_free = load_policy(noise_free)?;
    let run = Run::start(common, trials)?;
    let profile = run.cfg.perturbation;
    let cases = [
        (EvalCase::Baseline, None),
        (EvalCase::RlNoiseFree, Some(&noise_free)),
        (EvalCase::RlNoiseTrained, Some(&trained)),
    ];
    let reports = run_cases(&run, &cases, &profile)?;
    print_reports(&reports, Some(&profile));
    Ok(())
}

pub fn export_plots(common: &Common, input: &Path) -> Result<()> {
    let run = Run::start(common, None)?;
    let records = io::read_trajectory(input)?;
    let seed = io::read_header_seed(input)?.unwrap_or(run.seed());
    io::write_plot_tables(&run.path("space_time.csv"), &run.path("velocity_profile.csv"), seed, &records)?;
    println!("{} records from {} -> {}", records.len(), input.display(), run.out.display());
    Ok(())
}

/// Evaluate each case, writing the report, per-trial metrics and per-trial
/// trajectory logs.
fn run_cases(
    run: &Run,
    cases: &[(EvalCase, Option<&PolicyParameters>)],
    profile: &PerturbationProfile,
) -> Result<Vec<(EvalReport, bool)>> {
    let env = run.cfg.env_config(false)?;
    let seed = run.seed();
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for &(case, policy) in cases {
        let (report, trials) = transfer::evaluate(case, policy, &env, &run.cfg.network, profile, &run.cfg.eval, seed)
            .with_context(|| format!("evaluating {case}"))?;
        for t in &trials {
            write_trial_log(run, case, t)?;
            rows.push(TrialRow::new(case, t));
        }
        let storm = report.collision_storm(&trials);
        reports.push((report, storm));
    }
    let plain: Vec<EvalReport> = reports.iter().map(|(r, _)| r.clone()).collect();
    io::write_report(&run.path("report.csv"), seed, &plain)?;
    io::write_trials(&run.path("trials.csv"), seed, &rows)?;
    Ok(reports)
}

fn write_trial_log(run: &Run, case: EvalCase, t: &TrialResult) -> Result<()> {
    let name = format!("trajectory_{}_trial{}.csv", case.as_str().to_lowercase(), t.trial);
    io::write_trajectory(&run.path(&name), run.seed(), &t.trajectory)?;
    Ok(())
}

fn print_reports(reports: &[(EvalReport, bool)], profile: Option<&PerturbationProfile>) {
    match profile {
        Some(p) => println!("perturbation profile: {p}"),
        None => println!("perturbation profile: none (nominal network)"),
    }
    println!(
        "{:<18} {:>12} {:>12} {:>12} {:>10} {:>10} {:>7}",
        "case", "avg vel m/s", "avg time s", "max time s", "metering s", "collisions", "trials"
    );
    for (r, storm) in reports {
        println!(
            "{:<18} {:>12.3} {:>12.2} {:>12.2} {:>10.1} {:>10} {:>7}",
            r.case.as_str(),
            r.avg_velocity,
            r.avg_time,
            r.max_time,
            r.metering_score,
            r.collisions,
            r.trials
        );
        if *storm {
            println!("!! {}: collisions in more than half of the trials; metrics are unreliable", r.case);
        }
    }
}
