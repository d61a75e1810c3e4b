use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::Value;

use selfconf_core::flow::make_schedule;
use selfconf_core::reward::{probe_mse, sample_probes};
use selfconf_core::world::sample_data;
use selfconf_core::{rng, ModelParams};

use super::collapse::detect;
use super::{load_compatible, self_confidence_ceiling, summarize, train_loop, write_json, write_text};
use crate::config::{is_known, parse_flat, ConfigError, ExperimentConfig, Flat};
use crate::error::{CliError, CliResult};
use crate::manifest::Run;
use crate::metrics::write_csv;
use crate::stats::mean;

pub const TABLE: &str = "ablation.md";
const GROUP_KEY: &str = "sample.num_image_per_prompt";

/// The axes varied one at a time when no matrix is given.
pub fn default_matrix() -> Flat {
    let text = r#"
"reward.num_probes" = [4, 8, 16]
"reward.mode" = ["offline", "online"]
"reward.cfg" = [false, true]
"sample.num_image_per_prompt" = [8, 16, 32]
"train.stepwise_advantage" = [false, true]
"#;
    parse_flat(text).expect("valid built-in matrix")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub axis: String,
    pub value: String,
    pub overrides: Vec<String>,
    pub accuracy: f64,
    pub self_confidence: f64,
    pub mean_kl: f64,
    pub probe_mse_variance: f64,
    pub collapsed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub baseline_accuracy: f64,
    pub cells: Vec<Cell>,
    pub notes: Vec<String>,
}

fn cell_config(base: &ExperimentConfig, key: &str, value: &Value) -> Result<(ExperimentConfig, Vec<String>), ConfigError> {
    let mut flat = base.to_flat();
    let mut overrides = vec![format!("{key}={value}")];
    flat.insert(key.to_string(), value.clone());
    if key == GROUP_KEY {
        // hold the number of rollouts per iteration fixed
        if let Value::Integer(g) = value {
            let budget = (base.posttrain.grpo.group_size * base.posttrain.grpo.prompts_per_batch) as i64;
            let p = (budget / (*g).max(1)).max(1);
            flat.insert("sample.prompts_per_batch".into(), Value::Integer(p));
            overrides.push(format!("sample.prompts_per_batch={p}"));
        }
    }
    Ok((ExperimentConfig::from_flat(&flat)?, overrides))
}

/// Variance across probe draws of the single-sample probe error, averaged
/// over a fixed set of data points, at the first probe time.
fn probe_variance(params: &ModelParams, cfg: &ExperimentConfig) -> CliResult<f64> {
    let world = cfg.world()?;
    let prompt = world.prompt(0)?;
    let sched = make_schedule(cfg.posttrain.grpo.t_train)?;
    let t = cfg.posttrain.probe.resolve(&sched)?[0].0;
    let xs = sample_data(&world, &prompt, 16, rng::derive_seed(cfg.seed, &[0xab1]))?;
    let mut vars = Vec::new();
    for (i, x) in xs.iter().enumerate() {
        let est = (0..64)
            .map(|r| {
                let probes = sample_probes(cfg.posttrain.probe.k, world.dim, rng::derive_seed(cfg.seed, &[0xab2, i as u64, r]))?;
                Ok(probe_mse(params, &x.x, &probes, t, &prompt)?)
            })
            .collect::<CliResult<Vec<f64>>>()?;
        let m = mean(&est);
        vars.push(est.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / (est.len() - 1) as f64);
    }
    Ok(mean(&vars))
}

pub fn experiment(base_params: &ModelParams, cfg: &ExperimentConfig, matrix: &Flat) -> CliResult<AblationReport> {
    let mut errors = Vec::new();
    for (k, v) in matrix {
        if !is_known(k) {
            errors.push(format!("unknown key `{k}`"));
        } else if !matches!(v, Value::Array(_)) {
            errors.push(format!("`{k}`: expected an array of values"));
        }
    }
    if !errors.is_empty() {
        return Err(ConfigError(errors).into());
    }
    let world = cfg.world()?;
    let (ceiling, _) = self_confidence_ceiling(&world, cfg, base_params)?;
    let baseline_accuracy = selfconf_core::trainer::evaluate(base_params, &world, &cfg.posttrain.eval)?.accuracy;
    let mut cells = Vec::new();
    for (key, values) in matrix {
        for value in values.as_array().expect("checked above") {
            let (mut c, overrides) = cell_config(cfg, key, value).map_err(CliError::from)?;
            let iterations = c.posttrain.grpo.iterations;
            c.posttrain.eval.every = iterations.max(1);
            let mut curve = Vec::new();
            let (_, evals) = train_loop(base_params, &world, &c, iterations, true, |rep, _| {
                curve.push(summarize(rep));
                Ok(())
            })?;
            let tail = &curve[curve.len().saturating_sub(10)..];
            cells.push(Cell {
                axis: key.clone(),
                value: match value {
                    Value::String(v) => v.clone(),
                    v => v.to_string(),
                },
                overrides,
                accuracy: evals[evals.len() - 1].accuracy,
                self_confidence: mean(&tail.iter().map(|s| s.self_confidence).collect::<Vec<_>>()),
                mean_kl: mean(&tail.iter().map(|s| s.mean_kl).collect::<Vec<_>>()),
                probe_mse_variance: probe_variance(base_params, &c)?,
                collapsed: detect(&curve, ceiling, &c.collapse).collapsed,
            });
        }
    }
    let notes = notes(&cells);
    Ok(AblationReport { baseline_accuracy, cells, notes })
}

fn notes(cells: &[Cell]) -> Vec<String> {
    let mut out = Vec::new();
    let axis = |k: &str| cells.iter().filter(|c| c.axis == k).collect::<Vec<_>>();
    let k = axis("reward.num_probes");
    if k.len() > 1 {
        let dec = k.windows(2).all(|w| w[1].probe_mse_variance < w[0].probe_mse_variance);
        out.push(format!(
            "probe-error variance {} with K ({})",
            if dec { "decreases" } else { "does not decrease monotonically" },
            k.iter().map(|c| format!("K={}: {:.3e}", c.value, c.probe_mse_variance)).collect::<Vec<_>>().join(", ")
        ));
    }
    let s = axis("train.stepwise_advantage");
    if s.len() == 2 {
        let (agg, step) = (s[0], s[1]);
        let winner = if step.accuracy > agg.accuracy {
            "step-wise"
        } else if step.accuracy < agg.accuracy {
            "aggregated"
        } else {
            "neither (tie)"
        };
        out.push(format!(
            "higher condition accuracy: {winner} (step-wise {:.4}, aggregated {:.4})",
            step.accuracy, agg.accuracy
        ));
    }
    for c in axis(GROUP_KEY) {
        if c.collapsed {
            out.push(format!("G={} flagged by the collapse detector", c.value));
        }
    }
    if out.iter().all(|n| !n.contains("flagged")) && !axis(GROUP_KEY).is_empty() {
        out.push("no group size flagged by the collapse detector".into());
    }
    out
}

pub fn markdown(r: &AblationReport) -> String {
    let mut s = format!("# Ablations\n\nPretrained accuracy: {:.4}\n\n", r.baseline_accuracy);
    s.push_str("| axis | value | accuracy | self-confidence | KL | probe-error variance | collapse |\n|---|---|---|---|---|---|---|\n");
    for c in &r.cells {
        s.push_str(&format!(
            "| {} | {} | {:.4} | {:.4} | {:.3e} | {:.3e} | {} |\n",
            c.axis,
            c.value,
            c.accuracy,
            c.self_confidence,
            c.mean_kl,
            c.probe_mse_variance,
            if c.collapsed { "yes" } else { "no" }
        ));
    }
    s.push('\n');
    for n in &r.notes {
        s.push_str(&format!("- {n}\n"));
    }
    s
}

pub fn run(cfg: &ExperimentConfig, checkpoint_path: &Path, matrix_path: Option<&Path>) -> CliResult<AblationReport> {
    let matrix = match matrix_path {
        Some(p) => parse_flat(&std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?)?,
        None => default_matrix(),
    };
    let world = cfg.world()?;
    let ckpt = load_compatible(checkpoint_path, cfg, &world)?;
    let mut inputs: Vec<&Path> = vec![checkpoint_path];
    inputs.extend(matrix_path);
    let run = Run::start(&cfg.out_dir, cfg, "ablate", &inputs, &[TABLE, "ablation.csv", "ablation.json"])?;
    let report = experiment(&ckpt.params, cfg, &matrix)?;
    let rows: Vec<Vec<String>> = report
        .cells
        .iter()
        .map(|c| {
            vec![
                c.axis.clone(),
                c.value.replace(',', ";"),
                c.accuracy.to_string(),
                c.self_confidence.to_string(),
                c.mean_kl.to_string(),
                c.probe_mse_variance.to_string(),
                c.collapsed.to_string(),
            ]
        })
        .collect();
    write_csv(
        &run.path("ablation.csv"),
        &["axis", "value", "accuracy", "self_confidence", "mean_kl", "probe_mse_variance", "collapsed"],
        &rows,
    )?;
    write_text(&run.path(TABLE), &markdown(&report))?;
    write_json(&run.path("ablation.json"), &report)?;
    run.finish()?;
    Ok(report)
}
