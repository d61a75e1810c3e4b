use std::path::Path;

use serde::{Deserialize, Serialize};

use selfconf_core::ModelParams;

use super::{group_records, load_compatible, self_confidence_ceiling, summarize, train_loop, write_json, write_text, IterationSummary};
use crate::config::{CollapseConfig, ExperimentConfig};
use crate::error::CliResult;
use crate::manifest::Run;
use crate::metrics::Jsonl;
use crate::svg::{line_chart, Series};

pub const REPORT: &str = "collapse.json";

/// Collapse verdict of one curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub collapsed: bool,
    /// First iteration of the qualifying window.
    pub first_iteration: Option<u64>,
    pub max_self_confidence: f64,
    pub min_spread_ratio: f64,
}

/// Fires when, for `window` consecutive iterations, mean self-confidence
/// reaches `ceiling - margin` while the group spread falls below
/// `spread_fraction` times the data scale.
pub fn detect(curve: &[IterationSummary], ceiling: f64, c: &CollapseConfig) -> Verdict {
    let mut run = 0usize;
    let mut first = None;
    for (i, s) in curve.iter().enumerate() {
        let spike = s.self_confidence >= ceiling - c.margin;
        let narrow = s.sample_spread < c.spread_fraction * s.data_scale;
        run = if spike && narrow { run + 1 } else { 0 };
        if run >= c.window && first.is_none() {
            first = Some(curve[i + 1 - c.window].iteration);
        }
    }
    Verdict {
        collapsed: first.is_some(),
        first_iteration: first,
        max_self_confidence: curve.iter().map(|s| s.self_confidence).fold(f64::NEG_INFINITY, f64::max),
        min_spread_ratio: curve.iter().map(|s| s.sample_spread / s.data_scale).fold(f64::INFINITY, f64::min),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub overrides: Vec<String>,
    pub verdict: Verdict,
    pub curve: Vec<IterationSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub ceiling: f64,
    pub ceiling_source: String,
    pub margin: f64,
    pub spread_fraction: f64,
    pub window: usize,
    pub iterations: usize,
    pub arms: Vec<Arm>,
}

/// The three arms: defaults, every transition trained, rollouts without
/// guidance.
pub fn arms(cfg: &ExperimentConfig) -> Vec<(String, Vec<String>, ExperimentConfig)> {
    let mut rho = cfg.clone();
    rho.posttrain.grpo.rho = 1.0;
    let mut nocfg = cfg.clone();
    nocfg.posttrain.guidance_scale = 1.0;
    vec![
        ("default".into(), vec![], cfg.clone()),
        ("rho=1.0".into(), vec!["train.rho=1.0".into()], rho),
        ("rollout CFG off".into(), vec!["sample.guidance_scale=1.0".into()], nocfg),
    ]
}

/// Runs every arm for the configured budget. `log_dir`, when given,
/// receives one metrics file per arm.
pub fn experiment(base: &ModelParams, cfg: &ExperimentConfig, log_dir: Option<&Path>) -> CliResult<CollapseReport> {
    let world = cfg.world()?;
    let (ceiling, source) = self_confidence_ceiling(&world, cfg, base)?;
    let c = &cfg.collapse;
    let mut out = Vec::new();
    for (k, (name, overrides, arm_cfg)) in arms(cfg).into_iter().enumerate() {
        let mut log = match log_dir {
            Some(d) => Some(Jsonl::create(&d.join(format!("arm{k}.jsonl")))?),
            None => None,
        };
        let mut curve = Vec::new();
        train_loop(base, &world, &arm_cfg, c.iterations, false, |rep, _| {
            if let Some(l) = log.as_mut() {
                for r in group_records(rep) {
                    l.write(&r)?;
                }
            }
            curve.push(summarize(rep));
            Ok(())
        })?;
        if let Some(l) = log.as_mut() {
            l.flush()?;
        }
        out.push(Arm { name, overrides, verdict: detect(&curve, ceiling, c), curve });
    }
    Ok(CollapseReport {
        ceiling,
        ceiling_source: source.into(),
        margin: c.margin,
        spread_fraction: c.spread_fraction,
        window: c.window,
        iterations: c.iterations,
        arms: out,
    })
}

pub fn run(cfg: &ExperimentConfig, checkpoint_path: &Path) -> CliResult<CollapseReport> {
    let world = cfg.world()?;
    let ckpt = load_compatible(checkpoint_path, cfg, &world)?;
    let artifacts = [REPORT, "arm0.jsonl", "arm1.jsonl", "arm2.jsonl", "self_confidence.svg", "spread.svg"];
    let run = Run::start(&cfg.out_dir, cfg, "collapse", &[checkpoint_path], &artifacts)?;
    let report = experiment(&ckpt.params, cfg, Some(&run.dir))?;
    write_json(&run.path(REPORT), &report)?;
    let curve = |f: fn(&IterationSummary) -> f64| -> Vec<Series> {
        report
            .arms
            .iter()
            .map(|a| Series::new(a.name.clone(), a.curve.iter().map(|s| (s.iteration as f64, f(s))).collect()))
            .collect()
    };
    let mut sc = curve(|s| s.self_confidence);
    let n = report.iterations.max(1) as f64;
    sc.push(Series::new("ceiling - margin", vec![(0.0, report.ceiling - report.margin), (n - 1.0, report.ceiling - report.margin)]));
    write_text(&run.path("self_confidence.svg"), &line_chart("self-confidence per arm", "iteration", "mean self-confidence", &sc))?;
    let sp = curve(|s| s.sample_spread / s.data_scale);
    write_text(&run.path("spread.svg"), &line_chart("group spread / data scale", "iteration", "ratio", &sp))?;
    run.finish()?;
    Ok(report)
}
