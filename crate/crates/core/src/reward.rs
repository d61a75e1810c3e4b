//! Self-confidence reward: how well the model recovers noise it is shown.
//!
//! A terminal sample `z0` is re-noised with shared probes `eps_m` at a few
//! times `t`, the model's velocity at `(z_t, t, c)` is turned back into a
//! noise estimate `eps_hat = v + z0`, and the squared recovery error is
//! averaged over probes. Scores are `-ln(mse + delta)`. Scoring uses the
//! conditional branch only unless `use_cfg` is set.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::flow::{cfg_velocity, Schedule};
use crate::model::{ModelParams, VelocityField};
use crate::rng::{self, TAG_PROBES};
use crate::world::PromptContext;

pub const DEFAULT_DELTA: f64 = 1e-6;
/// Floor on the group standard deviation when z-scoring.
pub const STD_FLOOR: f64 = 1e-8;
/// Tolerance when matching configured probe times to schedule points.
const TIME_MATCH_TOL: f64 = 1e-9;

/// `K` probes; the second half negates the first so the set sums to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSet {
    pub probes: Vec<Vec<f64>>,
    pub seed: u64,
}

impl ProbeSet {
    pub fn k(&self) -> usize {
        self.probes.len()
    }
}

pub fn sample_probes(k: usize, d: usize, seed: u64) -> Result<ProbeSet> {
    if k < 2 || !k.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("probe count {k} must be even and >= 2")));
    }
    let mut r = rng::stream(seed, &[TAG_PROBES]);
    let half: Vec<Vec<f64>> = (0..k / 2).map(|_| rng::normal_vec(&mut r, d)).collect();
    let mut probes = half.clone();
    probes.extend(half.iter().map(|p| p.iter().map(|v| -v).collect::<Vec<f64>>()));
    Ok(ProbeSet { probes, seed })
}

/// `(1 - t) z0 + t eps`.
pub fn renoise(z0: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>> {
    ensure_len(z0.len(), eps.len())?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
    }
    Ok(z0.iter().zip(eps).map(|(a, e)| (1.0 - t) * a + t * e).collect())
}

/// `v(z_t, t, c) + z0` from the conditional branch.
pub fn recover_noise<F: VelocityField>(
    field: &F,
    z_t: &[f64],
    z0: &[f64],
    t: f64,
    c: &PromptContext,
) -> Result<Vec<f64>> {
    ensure_len(z_t.len(), z0.len())?;
    let v = field.velocity(z_t, t, c)?;
    Ok(v.iter().zip(z0).map(|(a, b)| a + b).collect())
}

/// `(1/K) sum_m |eps_hat_m - eps_m|^2`, summed over coordinates.
pub fn probe_mse<F: VelocityField>(
    field: &F,
    z0: &[f64],
    probes: &ProbeSet,
    t: f64,
    c: &PromptContext,
) -> Result<f64> {
    probe_mse_with(field, z0, probes, t, c, None)
}

/// [`probe_mse`] with an optional guidance scale for the velocity.
pub fn probe_mse_with<F: VelocityField>(
    field: &F,
    z0: &[f64],
    probes: &ProbeSet,
    t: f64,
    c: &PromptContext,
    guidance: Option<f64>,
) -> Result<f64> {
    if probes.probes.is_empty() {
        return Err(Error::InvalidArgument("empty probe set".into()));
    }
    let mut total = 0.0;
    for eps in &probes.probes {
        let z_t = renoise(z0, eps, t)?;
        let v = match guidance {
            None => field.velocity(&z_t, t, c)?,
            Some(s) => cfg_velocity(field, &z_t, t, c, s)?,
        };
        total += v
            .iter()
            .zip(z0)
            .zip(eps)
            .map(|((vi, zi), ei)| (vi + zi - ei).powi(2))
            .sum::<f64>();
    }
    Ok(total / probes.k() as f64)
}

/// `-ln(mse + delta)`.
pub fn step_score(mse: f64, delta: f64) -> Result<f64> {
    if !(mse >= 0.0) {
        return Err(Error::InvalidArgument(format!("mse {mse} must be >= 0")));
    }
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("delta {delta} must be > 0")));
    }
    Ok(-(mse + delta).ln())
}

/// Weighted mean of `(t, score)` pairs; `weights` must cover the same times
/// in the same order.
pub fn aggregate_reward(scores: &[(f64, f64)], weights: &[(f64, f64)]) -> Result<f64> {
    if scores.len() != weights.len() || scores.iter().zip(weights).any(|(s, w)| s.0 != w.0) {
        return Err(Error::InvalidArgument("score and weight times differ".into()));
    }
    if weights.iter().any(|w| !(w.1 >= 0.0)) {
        return Err(Error::InvalidArgument("weights must be nonnegative".into()));
    }
    let wsum: f64 = weights.iter().map(|w| w.1).sum();
    if !(wsum > 0.0) {
        return Err(Error::InvalidArgument("total weight is zero".into()));
    }
    let num: f64 = scores.iter().zip(weights).map(|(s, w)| s.1 * w.1).sum();
    Ok(num / wsum)
}

/// Which parameters score the samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    /// The policy being trained.
    Online,
    /// The frozen reference (adapters off).
    Offline,
}

impl ScoreMode {
    pub fn scorer(self, policy: &ModelParams) -> ModelParams {
        match self {
            ScoreMode::Online => policy.clone(),
            ScoreMode::Offline => policy.set_adapter_enabled(false),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub k: usize,
    pub delta: f64,
    /// `None` selects the last half of the schedule's interior times.
    pub probe_times: Option<Vec<f64>>,
    /// Per-time weights aligned with the resolved times; `None` means 1.
    pub weights: Option<Vec<f64>>,
    pub use_cfg: bool,
    /// Guidance scale applied when `use_cfg` is set.
    pub cfg_scale: f64,
    pub mode: ScoreMode,
    pub normalize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            k: 8,
            delta: DEFAULT_DELTA,
            probe_times: None,
            weights: None,
            use_cfg: false,
            cfg_scale: 2.0,
            mode: ScoreMode::Online,
            normalize: true,
        }
    }
}

/// Last `ceil(n/2)` interior times of the schedule, largest first.
pub fn default_probe_times(sched: &Schedule) -> Vec<f64> {
    let interior = sched.interior();
    let n = interior.len();
    interior[n - n.div_ceil(2)..].to_vec()
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || !self.k.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("probe count {} must be even and >= 2", self.k)));
        }
        if !(self.delta > 0.0) {
            return Err(Error::InvalidArgument(format!("delta {} must be > 0", self.delta)));
        }
        Ok(())
    }

    /// Probe times snapped to schedule points, with their weights.
    pub fn resolve(&self, sched: &Schedule) -> Result<Vec<(f64, f64)>> {
        self.validate()?;
        let times = match &self.probe_times {
            None => default_probe_times(sched),
            Some(ts) => ts
                .iter()
                .map(|&t| {
                    sched
                        .timesteps
                        .iter()
                        .copied()
                        .find(|s| (s - t).abs() <= TIME_MATCH_TOL)
                        .ok_or_else(|| Error::InvalidArgument(format!("probe time {t} is not a schedule point")))
                })
                .collect::<Result<Vec<f64>>>()?,
        };
        if times.is_empty() {
            return Err(Error::InvalidArgument("no probe times".into()));
        }
        let weights = match &self.weights {
            None => vec![1.0; times.len()],
            Some(w) => {
                ensure_len(times.len(), w.len())?;
                w.clone()
            }
        };
        if weights.iter().any(|w| !(*w >= 0.0)) || !(weights.iter().sum::<f64>() > 0.0) {
            return Err(Error::InvalidArgument("probe weights must be >= 0 with positive sum".into()));
        }
        Ok(times.into_iter().zip(weights).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub mse: f64,
    pub score: f64,
    /// Group z-score of `score`, when normalization is on.
    pub normalized: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub steps: Vec<StepRecord>,
    /// Weighted mean of the normalized scores, or of the raw scores when
    /// normalization is off. This is the training reward.
    pub aggregate: f64,
    /// Weighted mean of the raw scores.
    pub raw_aggregate: f64,
    pub advantage: Option<f64>,
}

fn zscore(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_FLOOR);
    values.iter().map(|v| (v - mean) / std).collect()
}

/// Scores every member of a group with one shared probe set drawn from
/// `seed`. `field` should already be the scorer chosen by the mode.
pub fn score_group<F: VelocityField>(
    field: &F,
    group_z0: &[Vec<f64>],
    c: &PromptContext,
    cfg: &ProbeConfig,
    sched: &Schedule,
    seed: u64,
) -> Result<Vec<RewardRecord>> {
    if group_z0.is_empty() {
        return Err(Error::InvalidArgument("empty group".into()));
    }
    if cfg.normalize && group_z0.len() < 2 {
        return Err(Error::InvalidArgument("normalization needs a group of at least 2".into()));
    }
    let times = cfg.resolve(sched)?;
    let d = field.data_dim();
    for z in group_z0 {
        ensure_len(d, z.len())?;
    }
    let probes = sample_probes(cfg.k, d, seed)?;
    let guidance = cfg.use_cfg.then_some(cfg.cfg_scale);
    let nt = times.len();
    let mses: Vec<f64> = (0..group_z0.len() * nt)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / nt, idx % nt);
            probe_mse_with(field, &group_z0[i], &probes, times[j].0, c, guidance)
        })
        .collect::<Result<_>>()?;
    let mut records: Vec<RewardRecord> = Vec::with_capacity(group_z0.len());
    for i in 0..group_z0.len() {
        let steps = (0..nt)
            .map(|j| {
                let mse = mses[i * nt + j];
                Ok(StepRecord { t: times[j].0, mse, score: step_score(mse, cfg.delta)?, normalized: None })
            })
            .collect::<Result<Vec<_>>>()?;
        records.push(RewardRecord { steps, aggregate: 0.0, raw_aggregate: 0.0, advantage: None });
    }
    if cfg.normalize {
        for j in 0..nt {
            let col: Vec<f64> = records.iter().map(|r| r.steps[j].score).collect();
            for (r, z) in records.iter_mut().zip(zscore(&col)) {
                r.steps[j].normalized = Some(z);
            }
        }
    }
    for r in &mut records {
        let raw: Vec<(f64, f64)> = r.steps.iter().map(|s| (s.t, s.score)).collect();
        r.raw_aggregate = aggregate_reward(&raw, &times)?;
        r.aggregate = if cfg.normalize {
            let norm: Vec<(f64, f64)> = r.steps.iter().map(|s| (s.t, s.normalized.unwrap_or(0.0))).collect();
            aggregate_reward(&norm, &times)?
        } else {
            r.raw_aggregate
        };
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::make_schedule;
    use crate::model::{init_model, Arch};

    struct Zero(usize);

    impl VelocityField for Zero {
        fn data_dim(&self) -> usize {
            self.0
        }
        fn velocity(&self, _x: &[f64], _t: f64, _c: &PromptContext) -> Result<Vec<f64>> {
            Ok(vec![0.0; self.0])
        }
    }

    fn ctx() -> PromptContext {
        PromptContext { prompt_id: 0, embedding: vec![1.0], is_null: false }
    }

    #[test]
    fn probes_are_antithetic() {
        let p = sample_probes(8, 2, 3).unwrap();
        for k in 0..2 {
            assert_eq!(p.probes.iter().map(|e| e[k]).sum::<f64>(), 0.0);
        }
        let two = sample_probes(2, 3, 1).unwrap();
        assert_eq!(two.probes[1], two.probes[0].iter().map(|v| -v).collect::<Vec<_>>());
        assert!(sample_probes(7, 2, 0).is_err());
        assert!(sample_probes(0, 2, 0).is_err());
        assert_eq!(sample_probes(8, 2, 3).unwrap(), p);
    }

    #[test]
    fn renoise_examples() {
        assert_eq!(renoise(&[2.0, 0.0], &[0.0, 2.0], 0.5).unwrap(), vec![1.0, 1.0]);
        assert_eq!(renoise(&[2.0, 0.0], &[0.0, 2.0], 0.0).unwrap(), vec![2.0, 0.0]);
        assert_eq!(renoise(&[2.0, 0.0], &[0.0, 2.0], 1.0).unwrap(), vec![0.0, 2.0]);
        assert!(renoise(&[1.0], &[1.0, 2.0], 0.5).is_err());
    }

    #[test]
    fn zero_velocity_recovers_z0() {
        let z0 = [0.4, -1.0];
        assert_eq!(recover_noise(&Zero(2), &[9.0, 9.0], &z0, 0.3, &ctx()).unwrap(), z0.to_vec());
    }

    #[test]
    fn score_examples() {
        assert!((step_score(0.0, 1e-6).unwrap() - 13.815_510_557_964_274).abs() < 1e-9);
        assert!(step_score(1.0 - 1e-6, 1e-6).unwrap().abs() < 1e-12);
        assert!((step_score(std::f64::consts::E - 1e-6, 1e-6).unwrap() + 1.0).abs() < 1e-12);
        assert!(step_score(-0.1, 1e-6).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let ones = [(0.5, 1.0), (0.4, 1.0), (0.3, 1.0)];
        assert_eq!(aggregate_reward(&[(0.5, 1.0), (0.4, 2.0), (0.3, 3.0)], &ones).unwrap(), 2.0);
        assert_eq!(aggregate_reward(&[(0.5, 7.0)], &[(0.5, 1.0)]).unwrap(), 7.0);
        assert_eq!(aggregate_reward(&[(0.5, 0.0), (0.4, 4.0)], &[(0.5, 1.0), (0.4, 3.0)]).unwrap(), 3.0);
        assert!(aggregate_reward(&[(0.5, 0.0)], &[(0.4, 1.0)]).is_err());
        assert!(aggregate_reward(&[(0.5, 0.0)], &[(0.5, 0.0)]).is_err());
    }

    #[test]
    fn default_times_are_last_half() {
        let s = make_schedule(10).unwrap();
        let t = default_probe_times(&s);
        assert_eq!(t.len(), 5);
        for (a, b) in t.iter().zip([0.5, 0.4, 0.3, 0.2, 0.1]) {
            assert!((a - b).abs() < 1e-12);
        }
        let cfg = ProbeConfig { probe_times: Some(vec![0.3, 0.7]), ..Default::default() };
        assert_eq!(cfg.resolve(&s).unwrap().len(), 2);
        let bad = ProbeConfig { probe_times: Some(vec![0.35]), ..Default::default() };
        assert!(bad.resolve(&s).is_err());
    }

    #[test]
    fn identical_members_normalize_to_zero() {
        let arch = Arch { data_dim: 2, cond_dim: 1, time_freqs: 4, hidden: vec![8] };
        let p = init_model(&arch, 1, 1.0, 0).unwrap();
        let s = make_schedule(10).unwrap();
        let z = vec![vec![0.3, 0.2]; 2];
        let recs = score_group(&p, &z, &ctx(), &ProbeConfig::default(), &s, 5).unwrap();
        assert_eq!(recs[0], recs[1]);
        assert!(recs[0].steps.iter().all(|s| s.normalized == Some(0.0)));
        assert_eq!(recs[0].aggregate, 0.0);
        let single = score_group(&p, &z[..1], &ctx(), &ProbeConfig::default(), &s, 5);
        assert!(single.is_err());
    }

    #[test]
    fn online_and_offline_agree_at_identity_adapters() {
        let arch = Arch { data_dim: 2, cond_dim: 1, time_freqs: 4, hidden: vec![8] };
        let policy = init_model(&arch, 1, 1.0, 0).unwrap().set_adapter_enabled(true);
        let s = make_schedule(10).unwrap();
        let z = vec![vec![0.3, 0.2], vec![-1.0, 0.5], vec![2.0, 2.0]];
        let cfg = ProbeConfig::default();
        let on = score_group(&ScoreMode::Online.scorer(&policy), &z, &ctx(), &cfg, &s, 1).unwrap();
        let off = score_group(&ScoreMode::Offline.scorer(&policy), &z, &ctx(), &cfg, &s, 1).unwrap();
        assert_eq!(on, off);
    }
}
