use std::path::Path;

use rand::Rng;

use selfconf_core::flow::{make_schedule, rollout};
use selfconf_core::grpo::{compute_advantages, surrogate_on_tape, train_steps};
use selfconf_core::model::{init_model, Trainable};
use selfconf_core::reward::{probe_mse, sample_probes};
use selfconf_core::trainer::{collect_groups, pretrain_batch, SelfConfidence, TrainerState};
use selfconf_core::world::{make_world, sample_data, WorldSpec};
use selfconf_core::{flow::rf_pretrain_loss_on_tape, rng, ModelParams};
use selfconf_oracles::{
    brute_advantages, finite_diff_grad_check, moments_match, velocity_recovery_floor, AnalyticVelocity,
    MomentAccumulator, OracleReport,
};

use super::{load_compatible, write_json};
use crate::config::ExperimentConfig;
use crate::error::CliResult;
use crate::manifest::Run;

pub const REPORTS: &str = "oracle.json";
/// Tolerance of the marginal match, in the units of `marginal_match`.
pub const MARGINAL_TOL: f64 = 0.03;

/// Rectified-flow loss gradient against central differences.
pub fn rf_gradient(params: &ModelParams, cfg: &ExperimentConfig) -> CliResult<OracleReport> {
    let world = cfg.world()?;
    let batch: Vec<_> = pretrain_batch(&world, &cfg.pretrain, 0)?.into_iter().take(32).collect();
    let mut rep = finite_diff_grad_check(params, Trainable::Base, |tape| rf_pretrain_loss_on_tape(tape, &batch), 1e-4, cfg.seed);
    rep.name = "rf loss gradient".into();
    Ok(rep)
}

/// Full surrogate gradient on the adapters with ratios moved off 1.
pub fn surrogate_gradient(params: &ModelParams, cfg: &ExperimentConfig) -> CliResult<OracleReport> {
    let world = cfg.world()?;
    let post = &cfg.posttrain;
    let state = TrainerState::new(params, post)?;
    let reward = SelfConfidence { probe: post.probe.clone() };
    let batches = collect_groups(&state, &world, post, &reward)?;
    let sched = make_schedule(post.grpo.t_train)?;
    let window = train_steps(&sched, post.grpo.rho, post.grpo.timestep_fraction)?;
    let mut policy = state.policy.clone();
    let mut r = rng::stream(cfg.seed, &[0x0fd5]);
    let theta: Vec<f64> = policy
        .trainable_vec(Trainable::Adapters)
        .into_iter()
        .map(|w| w + 0.003 * (r.random::<f64>() - 0.5))
        .collect();
    policy.set_trainable(Trainable::Adapters, &theta)?;
    let (eps, beta) = (post.grpo.clip_eps, post.grpo.beta);
    let mut rep = finite_diff_grad_check(
        &policy,
        Trainable::Adapters,
        |tape| Ok(surrogate_on_tape(tape, &state.reference, &batches, &window, eps, beta)?.loss),
        1e-5,
        cfg.seed,
    );
    rep.name = "surrogate gradient".into();
    Ok(rep)
}

/// `compute_advantages` against the two-pass reimplementation on random
/// groups, including constant and tiny-spread ones.
pub fn advantage_agreement(groups: usize, seed: u64) -> CliResult<OracleReport> {
    let mut r = rng::stream(seed, &[0xad7]);
    let mut worst = 0.0f64;
    for i in 0..groups {
        let g = r.random_range(2..40);
        let scale = 10f64.powf(r.random_range(-9.0..3.0));
        let shift = r.random_range(-100.0..100.0);
        let rewards: Vec<f64> = if i % 50 == 0 {
            vec![shift; g]
        } else {
            (0..g).map(|_| shift + scale * (r.random::<f64>() - 0.5)).collect()
        };
        let a = compute_advantages(&rewards)?;
        let b = brute_advantages(&rewards).expect("group of at least 2");
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(OracleReport::new("advantages vs brute force", worst, 1e-12, format!("{groups} random groups")))
}

/// SDE samples driven by the Bayes-optimal velocity of `N(0, s^2 I)` against
/// the analytic marginals at every scheduled time.
pub fn marginal_check(noise_level: f64, steps: usize, n: usize, seed: u64) -> CliResult<OracleReport> {
    let s = 1.0;
    let world = make_world(&WorldSpec::IsotropicGaussian { dim: 2, scale: s, mean: None })?;
    let field = AnalyticVelocity::new(&world)?;
    let sched = make_schedule(steps)?;
    let prompt = world.prompt(0)?;
    let mut acc = vec![MomentAccumulator::new(2); sched.timesteps.len()];
    for i in 0..n {
        let mut r = rng::stream(seed, &[0x3a29, i as u64]);
        let traj = rollout(&field, &prompt, &sched, noise_level, 1.0, None, &mut r)?;
        for (a, z) in acc.iter_mut().zip(&traj.states) {
            a.push(z);
        }
    }
    let mut worst: Option<OracleReport> = None;
    for (a, &t) in acc.iter().zip(&sched.timesteps) {
        let var = (1.0 - t).powi(2) * s * s + t * t;
        let rep = moments_match(a, &[0.0, 0.0], &[var, 0.0, 0.0, var], t, MARGINAL_TOL)?;
        if worst.as_ref().is_none_or(|w| rep.statistic > w.statistic) {
            worst = Some(rep);
        }
    }
    let mut rep = worst.expect("at least one time");
    rep.details = format!("worst of {} times: {}", sched.timesteps.len(), rep.details);
    rep.name = format!("SDE marginals (a = {noise_level}, T = {steps})");
    Ok(rep)
}

/// Probe error of the Bayes-optimal velocity on data against its closed
/// form; the statistic is the relative error.
pub fn probe_floor_check(t: f64, n: usize, k: usize, seed: u64) -> CliResult<OracleReport> {
    let world = make_world(&WorldSpec::IsotropicGaussian { dim: 2, scale: 1.0, mean: None })?;
    let field = AnalyticVelocity::new(&world)?;
    let prompt = world.prompt(0)?;
    let xs = sample_data(&world, &prompt, n, seed)?;
    let mut total = 0.0;
    for (i, x) in xs.iter().enumerate() {
        let probes = sample_probes(k, 2, rng::derive_seed(seed, &[i as u64]))?;
        total += probe_mse(&field, &x.x, &probes, t, &prompt)?;
    }
    let mse = total / n as f64;
    let floor = velocity_recovery_floor(&world, t)?;
    Ok(OracleReport::new(
        format!("probe floor at t = {t}"),
        (mse - floor).abs() / floor,
        0.03,
        format!("Monte-Carlo {mse:.4} vs closed form {floor:.4} over {n} samples"),
    ))
}

pub fn run(cfg: &ExperimentConfig, checkpoint_path: Option<&Path>) -> CliResult<Vec<OracleReport>> {
    let world = cfg.world()?;
    let params = match checkpoint_path {
        Some(p) => load_compatible(p, cfg, &world)?.params,
        None => init_model(&cfg.arch(&world), cfg.pretrain.rank, cfg.pretrain.alpha, cfg.seed)?,
    };
    let inputs: Vec<&Path> = checkpoint_path.into_iter().collect();
    let run = Run::start(&cfg.out_dir, cfg, "oracle", &inputs, &[REPORTS])?;
    let post = &cfg.posttrain;
    let reports = vec![
        rf_gradient(&params, cfg)?,
        surrogate_gradient(&params, cfg)?,
        advantage_agreement(1000, cfg.seed)?,
        marginal_check(post.noise_level, cfg.oracle.marginal_steps, cfg.oracle.marginal_samples, cfg.seed)?,
        probe_floor_check(0.5, 20_000, post.probe.k, cfg.seed)?,
    ];
    write_json(&run.path(REPORTS), &reports)?;
    run.finish()?;
    Ok(reports)
}
