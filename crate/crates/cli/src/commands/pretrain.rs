use std::time::Instant;

use serde::{Deserialize, Serialize};

use selfconf_core::checkpoint::{self, Checkpoint};
use selfconf_core::trainer::{evaluate, pretrain};

use super::{write_json, write_text};
use crate::config::ExperimentConfig;
use crate::error::CliResult;
use crate::manifest::Run;
use crate::metrics::Jsonl;
use crate::svg::{line_chart, Series};

pub const CHECKPOINT: &str = "pretrain.ckpt";
pub const LOG: &str = "pretrain.jsonl";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub steps: usize,
    pub first_loss: f64,
    /// Mean loss over the last 100 steps.
    pub final_loss: f64,
    pub eval_accuracy: f64,
    pub eval_spread: f64,
    pub wall_ms: f64,
}

pub fn run(cfg: &ExperimentConfig) -> CliResult<PretrainSummary> {
    let world = cfg.world()?;
    let arch = cfg.arch(&world);
    let run = Run::start(&cfg.out_dir, cfg, "pretrain", &[], &[CHECKPOINT, LOG, "loss.svg", "summary.json"])?;
    let start = Instant::now();
    let outcome = pretrain(&world, &arch, &cfg.pretrain)?;
    let mut log = Jsonl::create(&run.path(LOG))?;
    for (step, &loss) in outcome.losses.iter().enumerate() {
        log.write(&LossRecord { step, loss })?;
    }
    log.flush()?;
    checkpoint::save(&run.path(CHECKPOINT), &Checkpoint { params: outcome.params.clone(), ema: None })?;
    let stride = (outcome.losses.len() / 500).max(1);
    let pts: Vec<(f64, f64)> = outcome.losses.iter().enumerate().step_by(stride).map(|(i, l)| (i as f64, *l)).collect();
    write_text(&run.path("loss.svg"), &line_chart("pretraining loss", "step", "loss", &[Series::new("loss", pts)]))?;
    let eval = evaluate(&outcome.params, &world, &cfg.posttrain.eval)?;
    let losses = &outcome.losses;
    let tail = &losses[losses.len().saturating_sub(100)..];
    let summary = PretrainSummary {
        steps: losses.len(),
        first_loss: losses.first().copied().unwrap_or(f64::NAN),
        final_loss: tail.iter().sum::<f64>() / tail.len().max(1) as f64,
        eval_accuracy: eval.accuracy,
        eval_spread: eval.spread,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    write_json(&run.path("summary.json"), &summary)?;
    run.finish()?;
    Ok(summary)
}
