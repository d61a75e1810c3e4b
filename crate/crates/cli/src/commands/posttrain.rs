use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use selfconf_core::checkpoint::{self, Checkpoint};

use super::{group_records, load_compatible, summarize, train_loop, write_json, write_text, IterationSummary};
use crate::config::ExperimentConfig;
use crate::error::CliResult;
use crate::manifest::Run;
use crate::metrics::{write_csv, EvalRecord, Jsonl};
use crate::svg::{line_chart, Series};

pub const CHECKPOINT: &str = "posttrain.ckpt";
pub const LOG: &str = "metrics.jsonl";
pub const EVAL_CSV: &str = "eval.csv";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosttrainSummary {
    pub iterations: usize,
    pub baseline_accuracy: f64,
    pub final_accuracy: f64,
    pub final_spread: f64,
    /// Norm of the adapter up-projections, zero at initialization.
    pub adapter_b_norm: f64,
    /// Distance of all adapter weights from their initial values.
    pub adapter_drift: f64,
    pub mean_kl_last: f64,
    pub mode: String,
    pub wall_ms: f64,
}

/// Mean over the last `n` entries.
fn tail_mean(v: &[f64], n: usize) -> f64 {
    let t = &v[v.len().saturating_sub(n)..];
    t.iter().sum::<f64>() / t.len().max(1) as f64
}

pub fn run(cfg: &ExperimentConfig, checkpoint_path: &Path) -> CliResult<PosttrainSummary> {
    let world = cfg.world()?;
    let ckpt = load_compatible(checkpoint_path, cfg, &world)?;
    let artifacts = [CHECKPOINT, LOG, EVAL_CSV, "reward.svg", "kl.svg", "accuracy.svg", "spread.svg", "final.json"];
    let run = Run::start(&cfg.out_dir, cfg, "posttrain", &[checkpoint_path], &artifacts)?;
    let start = Instant::now();
    let mut log = Jsonl::create(&run.path(LOG))?;
    let mut summaries: Vec<IterationSummary> = Vec::new();
    let every = cfg.checkpoint_every;
    let initial = ckpt.params.set_adapter_enabled(true);
    let (state, evals) = train_loop(&ckpt.params, &world, cfg, cfg.posttrain.grpo.iterations, true, |rep, st| {
        for r in group_records(rep) {
            log.write(&r)?;
        }
        summaries.push(summarize(rep));
        let done = rep.iteration + 1;
        if every > 0 && done % every as u64 == 0 {
            let ckpt = Checkpoint { params: st.policy.clone(), ema: Some(st.ema.clone()) };
            checkpoint::save(&run.path(&format!("posttrain_{done:06}.ckpt")), &ckpt)?;
        }
        Ok(())
    })?;
    log.flush()?;
    checkpoint::save(&run.path(CHECKPOINT), &Checkpoint { params: state.policy.clone(), ema: Some(state.ema.clone()) })?;
    write_eval_csv(&run.path(EVAL_CSV), &evals)?;
    let it: Vec<f64> = summaries.iter().map(|s| s.iteration as f64).collect();
    let series = |f: fn(&IterationSummary) -> f64| -> Vec<(f64, f64)> { it.iter().copied().zip(summaries.iter().map(f)).collect() };
    write_text(
        &run.path("reward.svg"),
        &line_chart("self-confidence", "iteration", "mean self-confidence", &[Series::new("rollouts", series(|s| s.self_confidence))]),
    )?;
    write_text(&run.path("kl.svg"), &line_chart("KL to reference", "iteration", "mean KL", &[Series::new("KL", series(|s| s.mean_kl))]))?;
    write_text(
        &run.path("spread.svg"),
        &line_chart(
            "sample spread",
            "iteration",
            "RMS deviation",
            &[Series::new("group spread", series(|s| s.sample_spread)), Series::new("data scale", series(|s| s.data_scale))],
        ),
    )?;
    let acc: Vec<(f64, f64)> = evals.iter().map(|e| (e.iteration as f64, e.accuracy)).collect();
    write_text(&run.path("accuracy.svg"), &line_chart("condition accuracy (EMA weights)", "iteration", "accuracy", &[Series::new("eval", acc)]))?;
    let kls: Vec<f64> = summaries.iter().map(|s| s.mean_kl).collect();
    let last = evals.last().expect("final evaluation");
    let summary = PosttrainSummary {
        iterations: summaries.len(),
        baseline_accuracy: evals[0].accuracy,
        final_accuracy: last.accuracy,
        final_spread: last.spread,
        adapter_b_norm: state.policy.adapter_b_norm(),
        adapter_drift: state.adapter_drift(&initial),
        mean_kl_last: tail_mean(&kls, 10),
        mode: format!("{:?}", cfg.posttrain.probe.mode).to_lowercase(),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    write_json(&run.path("final.json"), &summary)?;
    run.finish()?;
    Ok(summary)
}

pub fn write_eval_csv(path: &Path, evals: &[EvalRecord]) -> CliResult<()> {
    let k = evals.first().map(|e| e.per_prompt.len()).unwrap_or(0);
    let mut header = vec!["iteration".to_string(), "accuracy".into(), "spread".into()];
    header.extend((0..k).map(|i| format!("accuracy_prompt{i}")));
    let rows: Vec<Vec<String>> = evals
        .iter()
        .map(|e| {
            let mut r = vec![e.iteration.to_string(), e.accuracy.to_string(), e.spread.to_string()];
            r.extend(e.per_prompt.iter().map(|a| a.to_string()));
            r
        })
        .collect();
    write_csv(path, &header.iter().map(|s| s.as_str()).collect::<Vec<_>>(), &rows)
}
