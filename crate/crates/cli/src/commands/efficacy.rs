use serde::{Deserialize, Serialize};

use selfconf_core::trainer::pretrain;

use super::{train_loop, write_json};
use crate::config::ExperimentConfig;
use crate::error::CliResult;
use crate::manifest::Run;
use crate::stats::{median, sign_test_p};

pub const REPORT: &str = "efficacy.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub baseline: f64,
    pub posttrained: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficacyReport {
    pub seeds: Vec<SeedResult>,
    pub median_baseline: f64,
    pub median_posttrained: f64,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// One-sided sign test over seeds, ties dropped.
    pub p_value: f64,
    /// Median improves and `p_value <= 0.05`.
    pub pass: bool,
}

/// Pretrains and post-trains once per seed and compares evaluation
/// accuracy of the pretrained weights with the post-trained EMA weights.
pub fn experiment(cfg: &ExperimentConfig, seeds: &[u64]) -> CliResult<EfficacyReport> {
    let world = cfg.world()?;
    let mut results = Vec::new();
    for &seed in seeds {
        let mut c = cfg.clone();
        c.seed = seed;
        c.pretrain.seed = seed;
        c.posttrain.grpo.seed = seed;
        let iterations = c.posttrain.grpo.iterations;
        c.posttrain.eval.every = iterations.max(1);
        let base = pretrain(&world, &c.arch(&world), &c.pretrain)?.params;
        let (_, evals) = train_loop(&base, &world, &c, iterations, true, |_, _| Ok(()))?;
        results.push(SeedResult { seed, baseline: evals[0].accuracy, posttrained: evals[evals.len() - 1].accuracy });
    }
    let base: Vec<f64> = results.iter().map(|r| r.baseline).collect();
    let post: Vec<f64> = results.iter().map(|r| r.posttrained).collect();
    let wins = results.iter().filter(|r| r.posttrained > r.baseline).count();
    let losses = results.iter().filter(|r| r.posttrained < r.baseline).count();
    let p_value = sign_test_p(wins, losses);
    let (mb, mp) = (median(&base), median(&post));
    Ok(EfficacyReport {
        ties: results.len() - wins - losses,
        seeds: results,
        median_baseline: mb,
        median_posttrained: mp,
        wins,
        losses,
        p_value,
        pass: mp > mb && p_value <= 0.05,
    })
}

pub fn run(cfg: &ExperimentConfig, seeds: &[u64]) -> CliResult<EfficacyReport> {
    let run = Run::start(&cfg.out_dir, cfg, "efficacy", &[], &[REPORT])?;
    let report = experiment(cfg, seeds)?;
    write_json(&run.path(REPORT), &report)?;
    run.finish()?;
    Ok(report)
}
