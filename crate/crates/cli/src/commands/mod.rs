//! Subcommand implementations. Each `run_*` function takes a resolved
//! config and returns a serializable summary; the binary only parses
//! arguments and maps errors to exit codes.

use std::path::Path;

use selfconf_core::checkpoint::{self, Checkpoint};
use selfconf_core::flow::make_schedule;
use selfconf_core::reward::{score_group, ProbeConfig};
use selfconf_core::trainer::{
    evaluate, posttrain_iteration, EvalReport, IterationReport, RewardModel, SelfConfidence, TrainerState,
};
use selfconf_core::world::{sample_data, ToyWorld};
use selfconf_core::{rng, ModelParams, VelocityField};
use selfconf_oracles::AnalyticVelocity;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::metrics::{EvalRecord, GroupRecord};

pub mod ablate;
pub mod collapse;
pub mod efficacy;
pub mod oracle;
pub mod posttrain;
pub mod pretrain;
pub mod rationale;
pub mod report;
pub mod score;

/// Loads a checkpoint and checks that it fits the configured world and
/// architecture.
pub fn load_compatible(path: &Path, cfg: &ExperimentConfig, world: &ToyWorld) -> CliResult<Checkpoint> {
    let ckpt = checkpoint::load(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let want = cfg.arch(world);
    if ckpt.params.arch != want {
        return Err(CliError::Config(format!(
            "incompatible checkpoint {}: arch {:?} but the config needs {:?}",
            path.display(),
            ckpt.params.arch,
            want
        )));
    }
    Ok(ckpt)
}

/// Iteration-level aggregates over the groups of one report.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IterationSummary {
    pub iteration: u64,
    pub self_confidence: f64,
    pub sample_spread: f64,
    pub data_scale: f64,
    pub mean_kl: f64,
    pub rollout_accuracy: f64,
}

pub fn summarize(report: &IterationReport) -> IterationSummary {
    let n = report.groups.len() as f64;
    let avg = |f: &dyn Fn(&selfconf_core::trainer::GroupMetrics) -> f64| report.groups.iter().map(f).sum::<f64>() / n;
    IterationSummary {
        iteration: report.iteration,
        self_confidence: avg(&|g| g.mean_raw_reward),
        sample_spread: avg(&|g| g.sample_spread),
        data_scale: avg(&|g| g.data_scale),
        mean_kl: report.stats.mean_kl,
        rollout_accuracy: avg(&|g| g.rollout_accuracy.unwrap_or(f64::NAN)),
    }
}

pub fn group_records(report: &IterationReport) -> Vec<GroupRecord> {
    report
        .groups
        .iter()
        .map(|g| GroupRecord {
            iteration: report.iteration,
            prompt_id: g.prompt_id,
            mean_reward: g.mean_reward,
            std_reward: g.std_reward,
            mean_self_confidence: g.mean_raw_reward,
            mean_kl: report.stats.mean_kl,
            clip_fraction: report.stats.clip_fraction,
            condition_accuracy: g.rollout_accuracy,
            sample_spread: g.sample_spread,
            mode_spread: g.mode_spread,
            wall_ms: report.wall_ms,
            rewards: g.rewards.clone(),
        })
        .collect()
}

fn eval_record(iteration: u64, e: &EvalReport) -> EvalRecord {
    EvalRecord { iteration, accuracy: e.accuracy, spread: e.spread, per_prompt: e.per_prompt.clone() }
}

/// Runs `iterations` post-training steps from `base`. Evaluates the EMA
/// weights before training, every `eval.every` iterations and at the end
/// when `with_eval` is set. `on_iteration` sees every report in order,
/// together with the state after the update.
pub fn train_loop(
    base: &ModelParams,
    world: &ToyWorld,
    cfg: &ExperimentConfig,
    iterations: usize,
    with_eval: bool,
    mut on_iteration: impl FnMut(&IterationReport, &TrainerState) -> CliResult<()>,
) -> CliResult<(TrainerState, Vec<EvalRecord>)> {
    let post = &cfg.posttrain;
    let mut state = TrainerState::new(base, post)?;
    let reward = SelfConfidence { probe: post.probe.clone() };
    let mut evals = Vec::new();
    if with_eval {
        evals.push(eval_record(0, &evaluate(&state.ema_policy()?, world, &post.eval)?));
    }
    for i in 0..iterations {
        let report = posttrain_iteration(&mut state, world, post, &reward)?;
        on_iteration(&report, &state)?;
        let done = (i + 1) as u64;
        if with_eval && (done.is_multiple_of(post.eval.every as u64) || i + 1 == iterations) {
            evals.push(eval_record(done, &evaluate(&state.ema_policy()?, world, &post.eval)?));
        }
    }
    Ok((state, evals))
}

/// Mean raw self-confidence of data samples under the given field, per
/// condition, averaged over conditions. Probe times follow the training
/// schedule and the configured probe settings without normalization.
pub fn data_self_confidence<F: VelocityField>(field: &F, world: &ToyWorld, cfg: &ExperimentConfig, n: usize) -> CliResult<f64> {
    let sched = make_schedule(cfg.posttrain.grpo.t_train)?;
    let probe = ProbeConfig { normalize: false, ..cfg.posttrain.probe.clone() };
    let mut total = 0.0;
    for prompt in world.prompts() {
        let seed = rng::derive_seed(cfg.seed, &[0xce11, prompt.prompt_id as u64]);
        let xs: Vec<Vec<f64>> = sample_data(world, &prompt, n, seed)?.into_iter().map(|s| s.x).collect();
        let recs = score_group(field, &xs, &prompt, &probe, &sched, seed)?;
        total += recs.iter().map(|r| r.raw_aggregate).sum::<f64>() / recs.len() as f64;
    }
    Ok(total / world.num_conditions() as f64)
}

/// Self-confidence ceiling: data scored by the Bayes-optimal velocity when
/// the world admits one, otherwise by `fallback`.
pub fn self_confidence_ceiling(world: &ToyWorld, cfg: &ExperimentConfig, fallback: &ModelParams) -> CliResult<(f64, &'static str)> {
    let n = cfg.collapse.ceiling_samples.max(2);
    match AnalyticVelocity::new(world) {
        Ok(field) => Ok((data_self_confidence(&field, world, cfg, n)?, "analytic velocity on data")),
        Err(_) => Ok((data_self_confidence(fallback, world, cfg, n)?, "checkpoint on data")),
    }
}

/// Scores one group with the configured reward and current policy.
pub fn score_with(policy: &ModelParams, cfg: &ExperimentConfig, z0: &[Vec<f64>], prompt: &selfconf_core::PromptContext, seed: u64) -> CliResult<Vec<selfconf_core::reward::RewardRecord>> {
    let sched = make_schedule(cfg.posttrain.grpo.t_train)?;
    Ok(SelfConfidence { probe: cfg.posttrain.probe.clone() }.score(policy, z0, prompt, &sched, seed)?)
}

pub(crate) fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text)?;
    Ok(())
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}
