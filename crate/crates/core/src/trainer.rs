//! Pretraining and post-training drivers.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{make_schedule, ode_sample, rf_pretrain_loss_on_tape, sde_sample_group, RfExample, RolloutConfig};
use crate::grpo::{aggregate_advantages, stepwise_advantages, surrogate_on_tape, train_steps, GroupBatch, GrpoConfig, SurrogateStats};
use crate::model::{init_model, Arch, ModelParams, Trainable};
use crate::optim::{AdamW, AdamWConfig, EmaShadow};
use crate::reward::{score_group, ProbeConfig, RewardRecord};
use crate::rng::{self, TAG_EVAL, TAG_PRETRAIN, TAG_PROMPTS};
use crate::world::{condition_accuracy_of, draw_from, group_spread, spread_about_modes, PromptContext, ToyWorld};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Probability of replacing the prompt by the null context.
    pub cond_dropout: f64,
    pub rank: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 256,
            optimizer: AdamWConfig::default(),
            cond_dropout: 0.1,
            rank: 2,
            alpha: 4.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: ModelParams,
    pub losses: Vec<f64>,
}

/// Fresh regression batch for pretraining step `step`.
pub fn pretrain_batch(world: &ToyWorld, cfg: &PretrainConfig, step: usize) -> Result<Vec<RfExample>> {
    let mut r = rng::stream(cfg.seed, &[TAG_PRETRAIN, step as u64]);
    let prompts = world.prompts();
    let null = world.null_prompt();
    let mut comps = Vec::with_capacity(prompts.len());
    for p in &prompts {
        comps.push(world.components_for(p)?);
    }
    Ok((0..cfg.batch_size)
        .map(|_| {
            let k = r.random_range(0..prompts.len());
            let x0 = draw_from(&comps[k], world.dim, &mut r);
            let x1 = rng::normal_vec(&mut r, world.dim);
            let t: f64 = r.random();
            let drop = r.random::<f64>() < cfg.cond_dropout;
            RfExample { x0, x1, t, prompt: if drop { null.clone() } else { prompts[k].clone() } }
        })
        .collect())
}

/// Minimizes the rectified-flow loss over the base weights. Aborts when a
/// batch loss exceeds ten times the first one.
pub fn pretrain(world: &ToyWorld, arch: &Arch, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    if arch.data_dim != world.dim || arch.cond_dim != world.num_conditions() {
        return Err(Error::InvalidArgument(format!(
            "arch ({} x {}) does not fit world ({} x {})",
            arch.data_dim,
            arch.cond_dim,
            world.dim,
            world.num_conditions()
        )));
    }
    if cfg.batch_size == 0 || !(0.0..1.0).contains(&cfg.cond_dropout) {
        return Err(Error::InvalidArgument("batch size must be >= 1 and dropout in [0, 1)".into()));
    }
    let mut params = init_model(arch, cfg.rank, cfg.alpha, cfg.seed)?;
    let mut opt = AdamW::new(cfg.optimizer.clone(), params.trainable_len(Trainable::Base));
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = pretrain_batch(world, cfg, step)?;
        let (loss, grad) = params.loss_and_grad(Trainable::Base, |tape| rf_pretrain_loss_on_tape(tape, &batch))?;
        if let Some(&first) = losses.first() {
            if loss > 10.0 * first {
                return Err(Error::Diverged(format!("step {step}: loss {loss:.4e} > 10 x initial {first:.4e}")));
            }
        }
        losses.push(loss);
        opt.step(&mut params, Trainable::Base, grad)?;
    }
    Ok(PretrainOutcome { params, losses })
}

/// A reward for a group of terminal samples. The self-confidence reward is
/// the built-in implementation; others can be plugged in.
pub trait RewardModel: Sync {
    fn score(
        &self,
        policy: &ModelParams,
        group_z0: &[Vec<f64>],
        prompt: &PromptContext,
        sched: &crate::flow::Schedule,
        seed: u64,
    ) -> Result<Vec<RewardRecord>>;
}

#[derive(Debug, Clone)]
pub struct SelfConfidence {
    pub probe: ProbeConfig,
}

impl RewardModel for SelfConfidence {
    fn score(
        &self,
        policy: &ModelParams,
        group_z0: &[Vec<f64>],
        prompt: &PromptContext,
        sched: &crate::flow::Schedule,
        seed: u64,
    ) -> Result<Vec<RewardRecord>> {
        let scorer = self.probe.mode.scorer(policy);
        score_group(&scorer, group_z0, prompt, &self.probe, sched, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Evaluate every this many iterations (0 disables periodic evaluation).
    pub every: usize,
    pub num_steps: usize,
    pub guidance_scale: f64,
    pub samples_per_prompt: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { every: 10, num_steps: 20, guidance_scale: 2.0, samples_per_prompt: 256, seed: 1234 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosttrainConfig {
    pub grpo: GrpoConfig,
    pub noise_level: f64,
    pub guidance_scale: f64,
    pub same_latent: bool,
    pub probe: ProbeConfig,
    pub optimizer: AdamWConfig,
    pub ema_decay: f64,
    pub ema_interval: u64,
    pub eval: EvalConfig,
}

impl Default for PosttrainConfig {
    fn default() -> Self {
        Self {
            grpo: GrpoConfig::default(),
            noise_level: 0.7,
            guidance_scale: 2.0,
            same_latent: false,
            probe: ProbeConfig::default(),
            optimizer: AdamWConfig { lr: 3e-4, ..AdamWConfig::default() },
            ema_decay: 0.9,
            ema_interval: 8,
            eval: EvalConfig::default(),
        }
    }
}

impl PosttrainConfig {
    pub fn rollout(&self) -> RolloutConfig {
        RolloutConfig {
            group_size: self.grpo.group_size,
            noise_level: self.noise_level,
            guidance_scale: self.guidance_scale,
            same_latent: self.same_latent,
        }
    }
}

/// Post-training state. `reference` is the frozen base (adapters off).
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub policy: ModelParams,
    pub reference: ModelParams,
    pub optimizer: AdamW,
    pub ema: EmaShadow,
    pub iteration: u64,
}

impl TrainerState {
    pub fn new(base: &ModelParams, cfg: &PosttrainConfig) -> Result<Self> {
        // Versions count post-training steps so the EMA cadence starts fresh.
        let mut policy = base.set_adapter_enabled(true);
        policy.version = 0;
        let reference = base.set_adapter_enabled(false);
        let optimizer = AdamW::new(cfg.optimizer.clone(), policy.trainable_len(Trainable::Adapters));
        let ema = EmaShadow::new(&policy, Trainable::Adapters, cfg.ema_decay, cfg.ema_interval)?;
        Ok(Self { policy, reference, optimizer, ema, iteration: 0 })
    }

    /// The policy with EMA adapters, used for evaluation.
    pub fn ema_policy(&self) -> Result<ModelParams> {
        self.ema.apply_to(&self.policy)
    }

    /// Euclidean distance between current and initial adapters.
    pub fn adapter_drift(&self, initial: &ModelParams) -> f64 {
        let a = self.policy.trainable_vec(Trainable::Adapters);
        let b = initial.trainable_vec(Trainable::Adapters);
        a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub prompt_id: usize,
    /// Training rewards (normalized when normalization is on).
    pub rewards: Vec<f64>,
    /// Un-normalized self-confidence per member.
    pub raw_rewards: Vec<f64>,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub mean_raw_reward: f64,
    /// RMS deviation of the group's samples from their own mean.
    pub sample_spread: f64,
    /// RMS distance of the samples to their nearest component mean.
    pub mode_spread: f64,
    /// `sample_spread` of the prompted data law, for scale.
    pub data_scale: f64,
    /// Fraction of rollouts landing on the prompted condition, when the
    /// world allows the measurement.
    pub rollout_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: u64,
    pub groups: Vec<GroupMetrics>,
    pub stats: SurrogateStats,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

/// Prompts for one iteration, drawn uniformly with replacement.
pub fn iteration_prompts(world: &ToyWorld, cfg: &GrpoConfig, iteration: u64) -> Vec<PromptContext> {
    let mut r = rng::stream(cfg.seed, &[TAG_PROMPTS, iteration]);
    let prompts = world.prompts();
    (0..cfg.prompts_per_batch)
        .map(|_| prompts[r.random_range(0..prompts.len())].clone())
        .collect()
}

/// Samples, scores and builds the groups of one iteration without
/// touching the parameters.
pub fn collect_groups<R: RewardModel + ?Sized>(
    state: &TrainerState,
    world: &ToyWorld,
    cfg: &PosttrainConfig,
    reward: &R,
) -> Result<Vec<GroupBatch>> {
    let sched = make_schedule(cfg.grpo.t_train)?;
    let rollout = cfg.rollout();
    let mut batches = Vec::new();
    for (p, prompt) in iteration_prompts(world, &cfg.grpo, state.iteration).into_iter().enumerate() {
        let seed = rng::derive_seed(cfg.grpo.seed, &[state.iteration, p as u64]);
        let trajectories = sde_sample_group(&state.policy, &prompt, &rollout, &sched, seed)?;
        let z0: Vec<Vec<f64>> = trajectories.iter().map(|t| t.terminal().to_vec()).collect();
        let mut rewards = reward.score(&state.policy, &z0, &prompt, &sched, seed)?;
        if rewards.iter().any(|r| !r.aggregate.is_finite()) {
            let agg: Vec<f64> = rewards.iter().map(|r| r.aggregate).collect();
            return Err(Error::NonFinite(format!(
                "rewards at iteration {} for prompt {}: {agg:?}; terminal states {z0:?}",
                state.iteration, prompt.prompt_id
            )));
        }
        let advantages = if cfg.grpo.stepwise_advantage {
            stepwise_advantages(&rewards, &sched)?
        } else {
            aggregate_advantages(&rewards, sched.num_steps())?
        };
        for (r, a) in rewards.iter_mut().zip(&advantages) {
            r.advantage = Some(a.iter().sum::<f64>() / a.len() as f64);
        }
        batches.push(GroupBatch { prompt, trajectories, rewards, advantages });
    }
    Ok(batches)
}

/// One GRPO iteration: rollouts, scoring, advantages, `inner_epochs`
/// optimizer steps on the adapters, and the EMA update.
pub fn posttrain_iteration<R: RewardModel + ?Sized>(
    state: &mut TrainerState,
    world: &ToyWorld,
    cfg: &PosttrainConfig,
    reward: &R,
) -> Result<IterationReport> {
    let start = Instant::now();
    cfg.grpo.validate()?;
    let sched = make_schedule(cfg.grpo.t_train)?;
    let window = train_steps(&sched, cfg.grpo.rho, cfg.grpo.timestep_fraction)?;
    let batches = collect_groups(state, world, cfg, reward)?;
    let mut first_stats = None;
    let mut grad_norm = 0.0;
    for _ in 0..cfg.grpo.inner_epochs {
        let policy = state.policy.clone();
        let mut stats = None;
        let (_, grad) = policy
            .loss_and_grad(Trainable::Adapters, |tape| {
                let s = surrogate_on_tape(tape, &state.reference, &batches, &window, cfg.grpo.clip_eps, cfg.grpo.beta)?;
                stats = Some(s);
                Ok(s.loss)
            })
            .map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!(
                    "{m} at iteration {}; groups: {}",
                    state.iteration,
                    group_diagnostic(&batches)
                )),
                other => other,
            })?;
        first_stats.get_or_insert(stats.expect("closure ran"));
        grad_norm = state.optimizer.step(&mut state.policy, Trainable::Adapters, grad)?;
        state.ema = state.ema.updated(&state.policy)?;
    }
    let groups = batches.iter().map(|b| group_metrics(world, b)).collect();
    let report = IterationReport {
        iteration: state.iteration,
        groups,
        stats: first_stats.expect("at least one epoch"),
        grad_norm,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    state.iteration += 1;
    Ok(report)
}

fn group_metrics(world: &ToyWorld, b: &GroupBatch) -> GroupMetrics {
    let rewards: Vec<f64> = b.rewards.iter().map(|r| r.aggregate).collect();
    let raw: Vec<f64> = b.rewards.iter().map(|r| r.raw_aggregate).collect();
    let (mean_reward, std_reward) = mean_std(&rewards);
    let xs: Vec<&[f64]> = b.trajectories.iter().map(|t| t.terminal()).collect();
    GroupMetrics {
        prompt_id: b.prompt.prompt_id,
        mean_reward,
        std_reward,
        mean_raw_reward: mean_std(&raw).0,
        rewards,
        raw_rewards: raw,
        sample_spread: group_spread(&xs),
        mode_spread: spread_about_modes(world, &xs),
        data_scale: world.data_scale(&b.prompt).unwrap_or(f64::NAN),
        rollout_accuracy: condition_accuracy_of(world, &b.prompt, &xs).ok(),
    }
}

fn group_diagnostic(batches: &[GroupBatch]) -> String {
    let summary: Vec<serde_json::Value> = batches
        .iter()
        .map(|b| {
            serde_json::json!({
                "prompt_id": b.prompt.prompt_id,
                "rewards": b.rewards.iter().map(|r| r.aggregate).collect::<Vec<_>>(),
                "advantages": b.advantages.iter().map(|a| a[a.len() - 1]).collect::<Vec<_>>(),
                "terminal": b.trajectories.iter().map(|t| t.terminal().to_vec()).collect::<Vec<_>>(),
            })
        })
        .collect();
    serde_json::Value::Array(summary).to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_prompt: Vec<f64>,
    pub accuracy: f64,
    pub spread: f64,
}

/// Guided ODE samples for every condition from fixed initial draws;
/// returns per-condition accuracy and the spread about modes.
pub fn evaluate(params: &ModelParams, world: &ToyWorld, cfg: &EvalConfig) -> Result<EvalReport> {
    if cfg.samples_per_prompt == 0 {
        return Err(Error::InvalidArgument("samples_per_prompt must be >= 1".into()));
    }
    let sched = make_schedule(cfg.num_steps)?;
    let mut per_prompt = Vec::new();
    let mut all = Vec::new();
    for prompt in world.prompts() {
        let mut r = rng::stream(cfg.seed, &[TAG_EVAL, prompt.prompt_id as u64]);
        let z1s: Vec<Vec<f64>> = (0..cfg.samples_per_prompt).map(|_| rng::normal_vec(&mut r, world.dim)).collect();
        let xs = eval_samples(params, &prompt, &z1s, &sched, cfg.guidance_scale)?;
        let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        per_prompt.push(condition_accuracy_of(world, &prompt, &refs)?);
        all.extend(xs);
    }
    let refs: Vec<&[f64]> = all.iter().map(|x| x.as_slice()).collect();
    Ok(EvalReport {
        accuracy: per_prompt.iter().sum::<f64>() / per_prompt.len() as f64,
        per_prompt,
        spread: spread_about_modes(world, &refs),
    })
}

fn eval_samples(
    params: &ModelParams,
    prompt: &PromptContext,
    z1s: &[Vec<f64>],
    sched: &crate::flow::Schedule,
    s: f64,
) -> Result<Vec<Vec<f64>>> {
    use rayon::prelude::*;
    z1s.par_iter()
        .map(|z| ode_sample(params, z, prompt, sched, s).map(|x| x.x))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{make_world, WorldSpec};

    fn small() -> (ToyWorld, Arch) {
        let w = make_world(&WorldSpec::Mixture {
            dim: 2,
            conditions: 4,
            components_per_condition: 1,
            radius: 3.0 * 2f64.sqrt(),
            scale: 0.3,
        })
        .unwrap();
        let arch = Arch { data_dim: 2, cond_dim: 4, time_freqs: 4, hidden: vec![16, 16] };
        (w, arch)
    }

    #[test]
    fn pretraining_is_deterministic_and_reduces_loss() {
        let (w, arch) = small();
        let cfg = PretrainConfig { steps: 60, batch_size: 64, ..Default::default() };
        let a = pretrain(&w, &arch, &cfg).unwrap();
        let b = pretrain(&w, &arch, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        let head: f64 = a.losses[..10].iter().sum();
        let tail: f64 = a.losses[50..].iter().sum();
        assert!(tail < head);
    }

    #[test]
    fn first_iteration_is_on_policy() {
        let (w, arch) = small();
        let base = pretrain(&w, &arch, &PretrainConfig { steps: 20, batch_size: 32, ..Default::default() })
            .unwrap()
            .params;
        let cfg = PosttrainConfig {
            grpo: GrpoConfig { group_size: 4, prompts_per_batch: 2, ..Default::default() },
            ..Default::default()
        };
        let mut st = TrainerState::new(&base, &cfg).unwrap();
        let rep = posttrain_iteration(&mut st, &w, &cfg, &SelfConfidence { probe: cfg.probe.clone() }).unwrap();
        assert_eq!(rep.stats.mean_ratio, 1.0);
        assert_eq!(rep.stats.mean_kl, 0.0);
        assert_eq!(rep.stats.clip_fraction, 0.0);
        assert_eq!(st.iteration, 1);
        assert_eq!(st.policy.version, 1);
    }

    #[test]
    fn arch_must_fit_world() {
        let (w, mut arch) = small();
        arch.cond_dim = 3;
        assert!(pretrain(&w, &arch, &PretrainConfig::default()).is_err());
    }
}
