//! Markdown summaries of one or two run directories.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::Value;

use super::pretrain::LossRecord;
use super::write_text;
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{read_manifest, Run, RunManifest, MANIFEST};
use crate::metrics::{read_jsonl, GroupRecord};
use crate::svg::{line_chart, Series};

pub const REPORT: &str = "report.md";

/// JSON summaries rendered as key/value tables when present.
const SUMMARIES: &[&str] = &["summary.json", "final.json"];
/// Logs a report looks for; absent ones are listed unless the manifest
/// says the run never produces them.
const LOGS: &[&str] = &[
    "pretrain.jsonl",
    "metrics.jsonl",
    "eval.csv",
    "summary.json",
    "final.json",
    "oracle.json",
    "rationale.json",
    "collapse.json",
    "efficacy.json",
    "ablation.md",
];

type Curve = Vec<(f64, f64)>;

#[derive(Debug, Default)]
struct RunData {
    label: String,
    manifest: Option<RunManifest>,
    loss: Curve,
    self_confidence: Curve,
    kl: Curve,
    spread: Curve,
    accuracy: Curve,
    json: BTreeMap<String, Value>,
    ablation: Option<String>,
    missing: Vec<String>,
    warnings: Vec<String>,
}

fn per_iteration(rows: &[GroupRecord], f: impl Fn(&GroupRecord) -> f64) -> Curve {
    let mut acc: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry(r.iteration).or_insert((0.0, 0));
        e.0 += f(r);
        e.1 += 1;
    }
    acc.into_iter().map(|(i, (s, n))| (i as f64, s / n as f64)).collect()
}

fn read_eval_csv(path: &Path, warnings: &mut Vec<String>) -> CliResult<Curve> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let mut f = line.split(',');
        match (f.next().map(str::parse::<f64>), f.next().map(str::parse::<f64>)) {
            (Some(Ok(it)), Some(Ok(acc))) => out.push((it, acc)),
            _ => warnings.push(format!("{} line {}: unparseable row", path.display(), i + 1)),
        }
    }
    Ok(out)
}

fn load(dir: &Path, label: String) -> CliResult<RunData> {
    if !dir.is_dir() {
        return Err(CliError::Config(format!("{} is not a run directory", dir.display())));
    }
    let mut d = RunData { label, ..Default::default() };
    match read_manifest(dir) {
        Ok(m) => d.manifest = Some(m),
        Err(_) => d.missing.push(MANIFEST.to_string()),
    }
    let expected: Option<Vec<String>> = d.manifest.as_ref().map(|m| m.artifacts.clone());
    for &name in LOGS {
        let path = dir.join(name);
        if !path.exists() {
            if expected.as_ref().is_none_or(|a| a.iter().any(|x| x == name)) {
                d.missing.push(name.to_string());
            }
            continue;
        }
        match name {
            "pretrain.jsonl" => {
                let (rows, w) = read_jsonl::<LossRecord>(&path)?;
                d.warnings.extend(w);
                d.loss = rows.iter().map(|r| (r.step as f64, r.loss)).collect();
            }
            "metrics.jsonl" => {
                let (rows, w) = read_jsonl::<GroupRecord>(&path)?;
                d.warnings.extend(w);
                d.self_confidence = per_iteration(&rows, |r| r.mean_self_confidence);
                d.kl = per_iteration(&rows, |r| r.mean_kl);
                d.spread = per_iteration(&rows, |r| r.sample_spread);
            }
            "eval.csv" => d.accuracy = read_eval_csv(&path, &mut d.warnings)?,
            "ablation.md" => d.ablation = Some(std::fs::read_to_string(&path)?),
            _ => match serde_json::from_str::<Value>(&std::fs::read_to_string(&path)?) {
                Ok(v) => {
                    d.json.insert(name.to_string(), v);
                }
                Err(e) => d.warnings.push(format!("{}: {e}", path.display())),
            },
        }
    }
    Ok(d)
}

fn fmt_value(v: &Value) -> String {
    match v {
        Value::Number(n) => match n.as_f64() {
            Some(x) if n.is_f64() => format!("{x:.6}"),
            _ => n.to_string(),
        },
        Value::String(s) => s.clone(),
        Value::Null => "-".into(),
        other => other.to_string(),
    }
}

/// Scalar fields of the summary files, keyed `file: field`, timing removed.
fn scalars(d: &RunData) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    if let Some(m) = &d.manifest {
        out.insert("command".into(), m.command.clone());
        out.insert("config sha256".into(), m.config_sha256[..12.min(m.config_sha256.len())].to_string());
        out.insert("version".into(), m.version.clone());
    }
    for &file in SUMMARIES {
        if let Some(Value::Object(map)) = d.json.get(file) {
            for (k, v) in map {
                if k != "wall_ms" && !v.is_array() && !v.is_object() {
                    out.insert(format!("{file}: {k}"), fmt_value(v));
                }
            }
        }
    }
    if let Some(v) = d.json.get("efficacy.json") {
        for k in ["median_baseline", "median_posttrained", "wins", "losses", "p_value", "pass"] {
            if let Some(x) = v.get(k) {
                out.insert(format!("efficacy: {k}"), fmt_value(x));
            }
        }
    }
    if let Some(v) = d.json.get("rationale.json").and_then(|v| v.get("verdict")) {
        out.insert("rationale: verdict".into(), fmt_value(v));
    }
    out
}

fn table(runs: &[RunData]) -> String {
    let cols: Vec<BTreeMap<String, String>> = runs.iter().map(scalars).collect();
    let mut keys: Vec<&String> = cols.iter().flat_map(|c| c.keys()).collect();
    keys.sort();
    keys.dedup();
    if keys.is_empty() {
        return String::new();
    }
    let mut s = format!("| |{}\n|---|{}\n", runs.iter().map(|r| format!(" {} |", r.label)).collect::<String>(), "---|".repeat(runs.len()));
    for k in keys {
        s.push_str(&format!("| {k} |"));
        for c in &cols {
            s.push_str(&format!(" {} |", c.get(k).map(String::as_str).unwrap_or("-")));
        }
        s.push('\n');
    }
    s.push('\n');
    s
}

fn chart(runs: &[RunData], title: &str, y: &str, pick: fn(&RunData) -> &Curve, x: &str) -> Option<String> {
    let series: Vec<Series> = runs.iter().filter(|r| !pick(r).is_empty()).map(|r| Series::new(r.label.clone(), pick(r).clone())).collect();
    if series.is_empty() {
        return None;
    }
    Some(format!("### {title}\n\n{}\n\n", line_chart(title, x, y, &series)))
}

fn oracle_section(v: &Value) -> String {
    let mut s = String::from("| check | statistic | tolerance | result |\n|---|---|---|---|\n");
    for r in v.as_array().into_iter().flatten() {
        s.push_str(&format!(
            "| {} | {} | {} | {} |\n",
            fmt_value(&r["name"]),
            fmt_value(&r["statistic"]),
            fmt_value(&r["tolerance"]),
            if r["pass"].as_bool() == Some(true) { "PASS" } else { "FAIL" }
        ));
    }
    s
}

fn collapse_section(v: &Value) -> String {
    let mut s = format!("Ceiling {} ({}).\n\n| arm | collapsed | first iteration | max self-confidence | min spread ratio |\n|---|---|---|---|---|\n",
        fmt_value(&v["ceiling"]), fmt_value(&v["ceiling_source"]));
    for a in v["arms"].as_array().into_iter().flatten() {
        let verdict = &a["verdict"];
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            fmt_value(&a["name"]),
            fmt_value(&verdict["collapsed"]),
            fmt_value(&verdict["first_iteration"]),
            fmt_value(&verdict["max_self_confidence"]),
            fmt_value(&verdict["min_spread_ratio"])
        ));
    }
    s
}

fn rationale_section(v: &Value) -> String {
    let mut s = String::from("| regime | n | mean | CI low | CI high |\n|---|---|---|---|---|\n");
    for r in v["regimes"].as_array().into_iter().flatten() {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            fmt_value(&r["name"]),
            fmt_value(&r["n"]),
            fmt_value(&r["mean"]),
            fmt_value(&r["ci_low"]),
            fmt_value(&r["ci_high"])
        ));
    }
    s
}

pub fn render(runs: &[(PathBuf, String)]) -> CliResult<String> {
    let data = runs.iter().map(|(p, l)| load(p, l.clone())).collect::<CliResult<Vec<_>>>()?;
    let mut s = format!("# Report: {}\n\n", data.iter().map(|d| d.label.as_str()).collect::<Vec<_>>().join(" vs "));
    s.push_str(&table(&data));
    let charts = [
        chart(&data, "pretraining loss", "loss", |r| &r.loss, "step"),
        chart(&data, "self-confidence", "mean self-confidence", |r| &r.self_confidence, "iteration"),
        chart(&data, "KL to reference", "mean KL", |r| &r.kl, "iteration"),
        chart(&data, "group spread", "RMS deviation", |r| &r.spread, "iteration"),
        chart(&data, "condition accuracy", "accuracy", |r| &r.accuracy, "iteration"),
    ];
    let charts: String = charts.into_iter().flatten().collect();
    if !charts.is_empty() {
        s.push_str("## Curves\n\n");
        s.push_str(&charts);
    }
    for d in &data {
        let mut body = String::new();
        if let Some(v) = d.json.get("oracle.json") {
            body.push_str(&format!("### Oracles\n\n{}\n", oracle_section(v)));
        }
        if let Some(v) = d.json.get("rationale.json") {
            body.push_str(&format!("### Sampling regimes\n\n{}\n", rationale_section(v)));
        }
        if let Some(v) = d.json.get("collapse.json") {
            body.push_str(&format!("### Collapse arms\n\n{}\n", collapse_section(v)));
        }
        if let Some(a) = &d.ablation {
            body.push_str(&format!("### Ablations\n\n{}\n", a.trim_start_matches("# Ablations").trim()));
            body.push('\n');
        }
        if !d.missing.is_empty() {
            body.push_str("### Missing logs\n\n");
            for m in &d.missing {
                body.push_str(&format!("- {m}\n"));
            }
            body.push('\n');
        }
        if !d.warnings.is_empty() {
            body.push_str("### Warnings\n\n");
            for w in &d.warnings {
                body.push_str(&format!("- {w}\n"));
            }
            body.push('\n');
        }
        if !body.is_empty() {
            s.push_str(&format!("## {}\n\n{body}", d.label));
        }
    }
    Ok(s)
}

/// Labels runs by directory name, falling back to their position when
/// names collide.
pub fn labels(dirs: &[PathBuf]) -> Vec<(PathBuf, String)> {
    let names: Vec<String> = dirs
        .iter()
        .enumerate()
        .map(|(i, p)| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| format!("run{}", i + 1)))
        .collect();
    dirs.iter()
        .enumerate()
        .map(|(i, p)| {
            let dup = names.iter().filter(|n| **n == names[i]).count() > 1;
            (p.clone(), if dup { format!("run{}", i + 1) } else { names[i].clone() })
        })
        .collect()
}

pub fn run(cfg: &ExperimentConfig, dirs: &[PathBuf]) -> CliResult<PathBuf> {
    if dirs.is_empty() || dirs.len() > 2 {
        return Err(CliError::Config(format!("report takes one or two run directories, got {}", dirs.len())));
    }
    let text = render(&labels(dirs))?;
    let manifests: Vec<PathBuf> = dirs.iter().map(|d| d.join(MANIFEST)).filter(|p| p.exists()).collect();
    let inputs: Vec<&Path> = manifests.iter().map(PathBuf::as_path).collect();
    let run = Run::start(&cfg.out_dir, cfg, "report", &inputs, &[REPORT])?;
    let path = run.path(REPORT);
    write_text(&path, &text)?;
    run.finish()?;
    Ok(path)
}
