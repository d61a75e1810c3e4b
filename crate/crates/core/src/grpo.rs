//! Group-relative policy optimization over stored SDE trajectories.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::flow::{
    cfg_velocity, cfg_velocity_batch_on_tape, mean_velocity_gain, sde_sigma, step_std, transition_logprob,
    transition_mean, Schedule, Trajectory,
};
use crate::model::{ModelParams, Tape};
use crate::reward::RewardRecord;
use crate::world::PromptContext;

pub const ADVANTAGE_STD_FLOOR: f64 = 1e-8;
pub const RATIO_MIN: f64 = 1e-6;
pub const RATIO_MAX: f64 = 1e6;

/// `(R_i - mean) / max(std, floor)` with the population standard deviation.
pub fn compute_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument(format!("group of {} is too small", rewards.len())));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("group reward".into()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= ADVANTAGE_STD_FLOOR {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// `exp(logp_new - logp_old)` clamped to `[RATIO_MIN, RATIO_MAX]`.
pub fn policy_ratio(logp_new: f64, logp_old: f64) -> Result<f64> {
    if !logp_new.is_finite() || !logp_old.is_finite() {
        return Err(Error::NonFinite(format!("log-probabilities {logp_new}, {logp_old}")));
    }
    Ok((logp_new - logp_old).exp().clamp(RATIO_MIN, RATIO_MAX))
}

/// `min(r A, clip(r, 1 - eps, 1 + eps) A)`.
pub fn clipped_surrogate(r: f64, a: f64, eps: f64) -> f64 {
    (r * a).min(r.clamp(1.0 - eps, 1.0 + eps) * a)
}

/// Whether the unclipped branch carries the gradient. At the clip boundary
/// the two branches coincide and the derivative from inside the band is used.
fn unclipped_active(r: f64, a: f64, eps: f64) -> bool {
    r * a <= r.clamp(1.0 - eps, 1.0 + eps) * a
}

/// `|mu_theta - mu_ref|^2 / (2 sigma^2)`.
pub fn kl_mean_gaussian(mu_theta: &[f64], mu_ref: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma {sigma} must be > 0")));
    }
    ensure_len(mu_theta.len(), mu_ref.len())?;
    let sq: f64 = mu_theta.iter().zip(mu_ref).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / (2.0 * sigma * sigma))
}

/// The last `ceil(rho * T)` transition indices.
pub fn suffix_window(sched: &Schedule, rho: f64) -> Result<Vec<usize>> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidArgument(format!("rho {rho} outside (0, 1]")));
    }
    let n = sched.num_steps();
    // Guard against 0.6 * 10 = 6.000000000000001.
    let len = ((rho * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    Ok((n - len..n).collect())
}

/// Transition indices eligible under the horizon truncation
/// `floor(fraction * T)` counted from `t = 1`, intersected with the suffix.
pub fn train_steps(sched: &Schedule, rho: f64, timestep_fraction: f64) -> Result<Vec<usize>> {
    if !(timestep_fraction > 0.0 && timestep_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("timestep fraction {timestep_fraction} outside (0, 1]")));
    }
    let horizon = ((timestep_fraction * sched.num_steps() as f64) + 1e-9).floor() as usize;
    Ok(suffix_window(sched, rho)?.into_iter().filter(|&j| j < horizon).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub beta: f64,
    pub rho: f64,
    pub t_train: usize,
    pub prompts_per_batch: usize,
    pub iterations: usize,
    pub seed: u64,
    pub stepwise_advantage: bool,
    /// Optimizer passes per sampled batch.
    pub inner_epochs: usize,
    pub timestep_fraction: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 16,
            clip_eps: 0.2,
            beta: 0.04,
            rho: 0.6,
            t_train: 10,
            prompts_per_batch: 4,
            iterations: 100,
            seed: 0,
            stepwise_advantage: false,
            inner_epochs: 1,
            timestep_fraction: 0.99,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.group_size < 2 {
            return bad(format!("group size {} < 2", self.group_size));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad(format!("clip epsilon {} outside (0, 1)", self.clip_eps));
        }
        if !(self.beta >= 0.0) {
            return bad(format!("beta {} < 0", self.beta));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad(format!("rho {} outside (0, 1]", self.rho));
        }
        if self.t_train == 0 || self.prompts_per_batch == 0 || self.inner_epochs == 0 {
            return bad("t_train, prompts_per_batch and inner_epochs must be >= 1".into());
        }
        if !(self.timestep_fraction > 0.0 && self.timestep_fraction <= 1.0) {
            return bad(format!("timestep fraction {} outside (0, 1]", self.timestep_fraction));
        }
        Ok(())
    }
}

/// One prompt's rollouts, rewards and advantages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBatch {
    pub prompt: PromptContext,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<RewardRecord>,
    /// `advantages[i][j]`: member `i`, transition `j`. Constant in `j`
    /// unless per-step advantages are used.
    pub advantages: Vec<Vec<f64>>,
}

/// Advantages broadcast over transitions from each member's aggregate.
pub fn aggregate_advantages(rewards: &[RewardRecord], num_steps: usize) -> Result<Vec<Vec<f64>>> {
    let agg: Vec<f64> = rewards.iter().map(|r| r.aggregate).collect();
    Ok(compute_advantages(&agg)?.into_iter().map(|a| vec![a; num_steps]).collect())
}

/// Per-step advantages: each probed time's scores are normalized across
/// the group, and transition `j` takes the advantage of the probed time
/// nearest its end point `t_{j+1}`.
pub fn stepwise_advantages(rewards: &[RewardRecord], sched: &Schedule) -> Result<Vec<Vec<f64>>> {
    let first = rewards.first().ok_or_else(|| Error::InvalidArgument("empty group".into()))?;
    let times: Vec<f64> = first.steps.iter().map(|s| s.t).collect();
    if times.is_empty() {
        return Err(Error::InvalidArgument("reward has no probed times".into()));
    }
    let per_time: Vec<Vec<f64>> = (0..times.len())
        .map(|k| compute_advantages(&rewards.iter().map(|r| r.steps[k].score).collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    let nearest: Vec<usize> = (0..sched.num_steps())
        .map(|j| {
            let t_to = sched.timesteps[j + 1];
            (0..times.len())
                .min_by(|&a, &b| (times[a] - t_to).abs().total_cmp(&(times[b] - t_to).abs()))
                .expect("nonempty")
        })
        .collect();
    Ok((0..rewards.len())
        .map(|i| nearest.iter().map(|&k| per_time[k][i]).collect())
        .collect())
}

/// Statistics of one surrogate evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateStats {
    /// `-J`, the minimized quantity.
    pub loss: f64,
    pub mean_surrogate: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
    pub max_abs_log_ratio: f64,
    pub terms: usize,
}

struct Term<'a> {
    traj: &'a Trajectory,
    j: usize,
    adv: f64,
}

fn collect_terms<'a>(batches: &'a [GroupBatch], window: &[usize]) -> Vec<Term<'a>> {
    let mut terms = Vec::new();
    for b in batches {
        for (traj, adv) in b.trajectories.iter().zip(&b.advantages) {
            for &j in window {
                if j < traj.num_steps() && traj.is_stochastic(j) {
                    terms.push(Term { traj, j, adv: adv[j] });
                }
            }
        }
    }
    terms
}

fn step_mean(traj: &Trajectory, j: usize, v: &[f64]) -> (Vec<f64>, f64, f64) {
    let (t_from, t_to) = (traj.timesteps[j], traj.timesteps[j + 1]);
    let sigma_t = sde_sigma(traj.noise_level, t_from, t_to);
    (
        transition_mean(&traj.states[j], v, t_from, t_to, sigma_t),
        step_std(sigma_t, t_from, t_to),
        mean_velocity_gain(t_from, t_to, sigma_t),
    )
}

/// Evaluates `-J = -(mean[clipped surrogate] - beta * mean[KL])` over the
/// stochastic transitions in `window` through `tape`, and seeds the tape
/// with its gradient. `reference` supplies the KL anchor means.
pub fn surrogate_on_tape(
    tape: &mut Tape<'_>,
    reference: &ModelParams,
    batches: &[GroupBatch],
    window: &[usize],
    clip_eps: f64,
    beta: f64,
) -> Result<SurrogateStats> {
    let terms = collect_terms(batches, window);
    if terms.is_empty() {
        return Err(Error::InvalidArgument("no stochastic transitions in the training window".into()));
    }
    let items: Vec<(&[f64], f64, &PromptContext, f64)> = terms
        .iter()
        .map(|tm| (tm.traj.states[tm.j].as_slice(), tm.traj.timesteps[tm.j], &tm.traj.prompt, tm.traj.cfg_scale))
        .collect();
    let guided = cfg_velocity_batch_on_tape(tape, &items)?;
    let ref_v: Vec<Vec<f64>> = if beta > 0.0 {
        items
            .par_iter()
            .map(|&(x, t, c, s)| cfg_velocity(reference, x, t, c, s))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let n = terms.len() as f64;
    let (mut surr_sum, mut kl_sum, mut ratio_sum, mut clipped, mut max_lr) = (0.0, 0.0, 0.0, 0usize, 0.0f64);
    for (k, (tm, (nodes, v))) in terms.iter().zip(&guided).enumerate() {
        let (mu, std, gain) = step_mean(tm.traj, tm.j, v);
        let next = &tm.traj.states[tm.j + 1];
        let old = tm.traj.logprobs_old[tm.j]
            .ok_or_else(|| Error::InvalidArgument(format!("transition {} has no stored log-probability", tm.j)))?;
        let logp = transition_logprob(&mu, std, next)?;
        max_lr = max_lr.max((logp - old).abs());
        let raw = (logp - old).exp();
        let r = policy_ratio(logp, old)?;
        ratio_sum += r;
        let a = tm.adv;
        surr_sum += clipped_surrogate(r, a, clip_eps);
        if (r - 1.0).abs() > clip_eps {
            clipped += 1;
        }
        let inv_var = 1.0 / (std * std);
        let g_surr = if unclipped_active(r, a, clip_eps) && raw == r { r * a } else { 0.0 };
        let mut d_mu: Vec<f64> = mu.iter().zip(next).map(|(m, z)| -(g_surr / n) * (z - m) * inv_var).collect();
        if beta > 0.0 {
            let (mu_ref, _, _) = step_mean(tm.traj, tm.j, &ref_v[k]);
            kl_sum += kl_mean_gaussian(&mu, &mu_ref, std)?;
            for (g, (m, mr)) in d_mu.iter_mut().zip(mu.iter().zip(&mu_ref)) {
                *g += (beta / n) * (m - mr) * inv_var;
            }
        }
        let d_v: Vec<f64> = d_mu.iter().map(|g| g * gain).collect();
        nodes.seed(tape, &d_v);
    }
    let mean_surrogate = surr_sum / n;
    let mean_kl = kl_sum / n;
    let loss = -(mean_surrogate - beta * mean_kl);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "surrogate loss (mean surrogate {mean_surrogate}, mean KL {mean_kl})"
        )));
    }
    Ok(SurrogateStats {
        loss,
        mean_surrogate,
        mean_kl,
        clip_fraction: clipped as f64 / n,
        mean_ratio: ratio_sum / n,
        max_abs_log_ratio: max_lr,
        terms: terms.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::make_schedule;

    #[test]
    fn advantage_examples() {
        let a = compute_advantages(&[1.0, 2.0, 3.0]).unwrap();
        let e = 1.224_744_871_391_589;
        assert!((a[0] + e).abs() < 1e-12 && a[1].abs() < 1e-15 && (a[2] - e).abs() < 1e-12);
        assert_eq!(compute_advantages(&[4.0; 5]).unwrap(), vec![0.0; 5]);
        assert!(compute_advantages(&[1.0]).is_err());
        let shifted = compute_advantages(&[33.0, 36.0, 39.0]).unwrap();
        for (x, y) in a.iter().zip(&shifted) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(policy_ratio(-3.0, -3.0).unwrap(), 1.0);
        assert!((policy_ratio(2f64.ln(), 0.0).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(policy_ratio(1000.0, 0.0).unwrap(), RATIO_MAX);
        assert_eq!(policy_ratio(-1000.0, 0.0).unwrap(), RATIO_MIN);
        assert!(policy_ratio(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn surrogate_examples() {
        assert_eq!(clipped_surrogate(1.0, -0.7, 0.2), -0.7);
        assert!((clipped_surrogate(1.5, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert!((clipped_surrogate(0.5, -1.0, 0.2) + 0.8).abs() < 1e-15);
        assert!(unclipped_active(1.5, -1.0, 0.2));
        assert!(!unclipped_active(1.5, 1.0, 0.2));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_mean_gaussian(&[1.0, 2.0], &[1.0, 2.0], 0.3).unwrap(), 0.0);
        assert!((kl_mean_gaussian(&[0.3, 0.4], &[0.0, 0.0], 0.5).unwrap() - 0.5).abs() < 1e-15);
        let a = kl_mean_gaussian(&[1.0], &[0.0], 1.0).unwrap();
        let b = kl_mean_gaussian(&[1.0], &[0.0], 2.0).unwrap();
        assert_eq!(b, a / 4.0);
        assert!(kl_mean_gaussian(&[1.0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn window_examples() {
        let s = make_schedule(10).unwrap();
        assert_eq!(suffix_window(&s, 0.6).unwrap(), (4..10).collect::<Vec<_>>());
        assert_eq!(suffix_window(&s, 1.0).unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(suffix_window(&s, 0.05).unwrap(), vec![9]);
        assert!(suffix_window(&s, 0.0).is_err());
        assert_eq!(train_steps(&s, 0.6, 0.99).unwrap(), (4..9).collect::<Vec<_>>());
        assert_eq!(train_steps(&s, 1.0, 1.0).unwrap(), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn config_defaults_validate() {
        GrpoConfig::default().validate().unwrap();
        assert!(GrpoConfig { clip_eps: 1.0, ..Default::default() }.validate().is_err());
        assert!(GrpoConfig { group_size: 1, ..Default::default() }.validate().is_err());
    }
}
