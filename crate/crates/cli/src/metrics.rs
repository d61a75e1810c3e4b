//! Line-delimited JSON metrics and small CSV helpers.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CliResult;

/// One post-training group record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub iteration: u64,
    pub prompt_id: usize,
    pub mean_reward: f64,
    pub std_reward: f64,
    /// Mean un-normalized self-confidence of the group.
    pub mean_self_confidence: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub condition_accuracy: Option<f64>,
    pub sample_spread: f64,
    pub mode_spread: f64,
    pub wall_ms: f64,
    pub rewards: Vec<f64>,
}

/// One evaluation of the EMA weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: u64,
    pub accuracy: f64,
    pub spread: f64,
    pub per_prompt: Vec<f64>,
}

pub struct Jsonl {
    out: BufWriter<File>,
}

impl Jsonl {
    pub fn create(path: &Path) -> CliResult<Self> {
        Ok(Self { out: BufWriter::new(File::create(path)?) })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> CliResult<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> CliResult<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Parsed lines plus a warning for each line that failed to parse
/// (1-based line numbers).
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<(Vec<T>, Vec<String>)> {
    let f = File::open(path).map_err(|e| crate::CliError::Config(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(v) => rows.push(v),
            Err(e) => warnings.push(format!("{} line {}: {e}", path.display(), i + 1)),
        }
    }
    Ok((rows, warnings))
}

/// Writes a CSV with a header row; fields are formatted with `{}`.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{}", header.join(","))?;
    for r in rows {
        writeln!(out, "{}", r.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Removes `wall_ms` fields so timing noise does not affect comparisons.
pub fn strip_timing(line: &str) -> String {
    match serde_json::from_str::<serde_json::Value>(line) {
        Ok(mut v) => {
            strip(&mut v);
            v.to_string()
        }
        Err(_) => line.to_string(),
    }
}

fn strip(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(m) => {
            m.remove("wall_ms");
            m.values_mut().for_each(strip);
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(strip),
        _ => {}
    }
}
