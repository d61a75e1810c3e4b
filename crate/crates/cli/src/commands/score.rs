use std::path::Path;

use serde::{Deserialize, Serialize};

use selfconf_core::flow::{make_schedule, sde_sample_group};
use selfconf_core::reward::StepRecord;
use selfconf_core::rng;

use super::{load_compatible, score_with, write_json};
use crate::config::ExperimentConfig;
use crate::error::CliResult;
use crate::manifest::Run;
use crate::metrics::Jsonl;

pub const LOG: &str = "scores.jsonl";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub prompt_id: usize,
    pub member: usize,
    pub x: Vec<f64>,
    pub self_confidence: f64,
    pub reward: f64,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreSummary {
    /// Mean self-confidence per condition.
    pub per_prompt: Vec<f64>,
    pub mean: f64,
}

/// Rolls one group per condition with the configured sampler and scores
/// it with the configured reward.
pub fn run(cfg: &ExperimentConfig, checkpoint_path: &Path) -> CliResult<ScoreSummary> {
    let world = cfg.world()?;
    let ckpt = load_compatible(checkpoint_path, cfg, &world)?;
    let run = Run::start(&cfg.out_dir, cfg, "score", &[checkpoint_path], &[LOG, "summary.json"])?;
    let sched = make_schedule(cfg.posttrain.grpo.t_train)?;
    let mut log = Jsonl::create(&run.path(LOG))?;
    let mut per_prompt = Vec::new();
    for prompt in world.prompts() {
        let seed = rng::derive_seed(cfg.seed, &[0x5c0e, prompt.prompt_id as u64]);
        let trajectories = sde_sample_group(&ckpt.params, &prompt, &cfg.posttrain.rollout(), &sched, seed)?;
        let z0: Vec<Vec<f64>> = trajectories.iter().map(|t| t.terminal().to_vec()).collect();
        let recs = score_with(&ckpt.params, cfg, &z0, &prompt, seed)?;
        for (member, (x, r)) in z0.iter().zip(&recs).enumerate() {
            log.write(&ScoreRecord {
                prompt_id: prompt.prompt_id,
                member,
                x: x.clone(),
                self_confidence: r.raw_aggregate,
                reward: r.aggregate,
                steps: r.steps.clone(),
            })?;
        }
        per_prompt.push(recs.iter().map(|r| r.raw_aggregate).sum::<f64>() / recs.len() as f64);
    }
    log.flush()?;
    let summary = ScoreSummary { mean: per_prompt.iter().sum::<f64>() / per_prompt.len() as f64, per_prompt };
    write_json(&run.path("summary.json"), &summary)?;
    run.finish()?;
    Ok(summary)
}
