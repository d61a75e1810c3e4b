use std::path::Path;

use serde::{Deserialize, Serialize};

use selfconf_core::flow::{make_schedule, ode_sample};
use selfconf_core::reward::{score_group, ProbeConfig};
use selfconf_core::{rng, ModelParams};

use super::{load_compatible, write_json, write_text};
use crate::config::ExperimentConfig;
use crate::error::CliResult;
use crate::manifest::{sha256_file, Run};
use crate::stats::{bootstrap_mean_ci, mean};
use crate::svg::histogram_chart;

pub const REPORT: &str = "rationale.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub name: String,
    pub steps: usize,
    pub guidance_scale: f64,
    pub n: usize,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationaleReport {
    /// Ordered from the expected lowest to the expected highest mean.
    pub regimes: Vec<Regime>,
    /// Intervals separate in the expected order.
    pub ordered: bool,
    pub verdict: String,
    pub confidence: f64,
    pub scorer_sha256: String,
    pub scores: Vec<Vec<f64>>,
}

/// Samples every condition under three regimes from shared initial draws
/// and scores all samples with one CFG-free scorer and shared probes.
pub fn experiment(params: &ModelParams, cfg: &ExperimentConfig, scorer_sha256: String) -> CliResult<RationaleReport> {
    let world = cfg.world()?;
    let rc = &cfg.rationale;
    let specs = [
        (format!("T={}, no CFG", rc.low_steps), rc.low_steps, 1.0),
        (format!("T={}, CFG", rc.low_steps), rc.low_steps, rc.guidance_scale),
        (format!("T={}, CFG", rc.high_steps), rc.high_steps, rc.guidance_scale),
    ];
    let score_sched = make_schedule(cfg.posttrain.grpo.t_train)?;
    let probe = ProbeConfig { normalize: false, use_cfg: false, ..cfg.posttrain.probe.clone() };
    let mut scores: Vec<Vec<f64>> = vec![Vec::new(); specs.len()];
    for prompt in world.prompts() {
        let pid = prompt.prompt_id as u64;
        let mut r = rng::stream(cfg.seed, &[0x7a71, pid]);
        let z1s: Vec<Vec<f64>> = (0..rc.samples_per_prompt).map(|_| rng::normal_vec(&mut r, world.dim)).collect();
        let probe_seed = rng::derive_seed(cfg.seed, &[0x7a72, pid]);
        for (k, (_, steps, s)) in specs.iter().enumerate() {
            let sched = make_schedule(*steps)?;
            let xs = z1s
                .iter()
                .map(|z1| Ok(ode_sample(params, z1, &prompt, &sched, *s)?.x))
                .collect::<CliResult<Vec<_>>>()?;
            let recs = score_group(params, &xs, &prompt, &probe, &score_sched, probe_seed)?;
            scores[k].extend(recs.iter().map(|r| r.raw_aggregate));
        }
    }
    let regimes: Vec<Regime> = specs
        .iter()
        .zip(&scores)
        .enumerate()
        .map(|(k, ((name, steps, s), xs))| {
            let (lo, hi) = bootstrap_mean_ci(xs, rc.bootstrap, rc.confidence, rng::derive_seed(cfg.seed, &[0x7a73, k as u64]));
            Regime { name: name.clone(), steps: *steps, guidance_scale: *s, n: xs.len(), mean: mean(xs), ci_low: lo, ci_high: hi }
        })
        .collect();
    let ordered = regimes.windows(2).all(|w| w[1].ci_low > w[0].ci_high);
    let verdict = if ordered {
        "ordered: self-confidence rises with sampler quality".to_string()
    } else {
        "inconclusive: intervals overlap or the order differs".to_string()
    };
    Ok(RationaleReport { regimes, ordered, verdict, confidence: rc.confidence, scorer_sha256, scores })
}

pub fn run(cfg: &ExperimentConfig, checkpoint_path: &Path) -> CliResult<RationaleReport> {
    let world = cfg.world()?;
    let ckpt = load_compatible(checkpoint_path, cfg, &world)?;
    let run = Run::start(&cfg.out_dir, cfg, "rationale", &[checkpoint_path], &[REPORT, "rationale.svg", "rationale.md"])?;
    let report = experiment(&ckpt.params, cfg, sha256_file(checkpoint_path)?)?;
    write_json(&run.path(REPORT), &report)?;
    let groups: Vec<(String, Vec<f64>)> = report.regimes.iter().zip(&report.scores).map(|(r, s)| (r.name.clone(), s.clone())).collect();
    write_text(&run.path("rationale.svg"), &histogram_chart("self-confidence by sampler regime", "self-confidence", &groups, 40))?;
    write_text(&run.path("rationale.md"), &markdown(&report))?;
    run.finish()?;
    Ok(report)
}

pub fn markdown(r: &RationaleReport) -> String {
    let mut s = String::from("# Self-confidence by sampler regime\n\n");
    s.push_str(&format!("Scorer checkpoint sha256: `{}`\n\n", r.scorer_sha256));
    s.push_str(&format!("| regime | n | mean | {:.0}% interval |\n|---|---|---|---|\n", r.confidence * 100.0));
    for g in &r.regimes {
        s.push_str(&format!("| {} | {} | {:.4} | [{:.4}, {:.4}] |\n", g.name, g.n, g.mean, g.ci_low, g.ci_high));
    }
    s.push_str(&format!("\nVerdict: {}\n", r.verdict));
    s
}
