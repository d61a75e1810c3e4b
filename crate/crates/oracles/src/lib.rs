//! Reference computations for checking `selfconf-core`.
//!
//! Nothing here calls the code it is used to check: the velocities are
//! closed-form Gaussian conditioning, advantages are recomputed from
//! scratch, and gradients are checked by finite differences of plain loss
//! values.

use serde::{Deserialize, Serialize};

pub mod analytic;
pub mod gradcheck;
pub mod marginal;

pub use analytic::{
    analytic_velocity, optimal_probe_mse, posterior_noise_mean, rf_loss_floor, velocity_recovery_floor,
    AnalyticVelocity,
};
pub use gradcheck::finite_diff_grad_check;
pub use marginal::{marginal_match, moments, moments_match, MarginalReference, MomentAccumulator};

/// Outcome of one oracle check. `pass` holds exactly when
/// `statistic <= tolerance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub name: String,
    pub statistic: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub details: String,
}

impl OracleReport {
    pub fn new(name: impl Into<String>, statistic: f64, tolerance: f64, details: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            statistic,
            tolerance,
            pass: statistic <= tolerance,
            details: details.into(),
        }
    }
}

/// Group-normalized rewards, `(r - mean) / max(std, 1e-8)` with the
/// population standard deviation, computed in two passes.
pub fn brute_advantages(rewards: &[f64]) -> Option<Vec<f64>> {
    if rewards.len() < 2 {
        return None;
    }
    let mut total = 0.0;
    for r in rewards {
        total += *r;
    }
    let mean = total / rewards.len() as f64;
    let mut ss = 0.0;
    for r in rewards {
        let dev = *r - mean;
        ss += dev * dev;
    }
    let std = (ss / rewards.len() as f64).sqrt();
    if std <= 1e-8 {
        return Some(vec![0.0; rewards.len()]);
    }
    let mut out = Vec::with_capacity(rewards.len());
    for r in rewards {
        out.push((*r - mean) / std);
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brute_examples() {
        let a = brute_advantages(&[1.0, 2.0, 3.0]).unwrap();
        assert!((a[0] + 1.224_744_871_391_589).abs() < 1e-12);
        assert_eq!(a[1], 0.0);
        assert!((a[2] - 1.224_744_871_391_589).abs() < 1e-12);
        assert_eq!(brute_advantages(&[2.5; 4]).unwrap(), vec![0.0; 4]);
        assert!(brute_advantages(&[1.0]).is_none());
    }

    #[test]
    fn report_pass_flag() {
        assert!(OracleReport::new("x", 0.01, 0.03, "").pass);
        assert!(!OracleReport::new("x", 0.04, 0.03, "").pass);
        assert!(!OracleReport::new("x", f64::NAN, 0.03, "").pass);
    }
}
