//! Moment and histogram comparison of sample clouds.

use selfconf_core::{Error, Result};

use crate::OracleReport;

pub const MIN_SAMPLES: usize = 10_000;
const HIST_BINS: usize = 12;

pub enum MarginalReference<'a> {
    Samples(&'a [Vec<f64>]),
    /// Mean and row-major covariance.
    Analytic { mean: &'a [f64], cov: &'a [f64] },
}

/// Empirical mean and (population) covariance, row-major.
pub fn moments(xs: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = xs[0].len();
    let n = xs.len() as f64;
    let mut mean = vec![0.0; d];
    for x in xs {
        for i in 0..d {
            mean[i] += x[i];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![0.0; d * d];
    for x in xs {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += (x[i] - mean[i]) * (x[j] - mean[j]);
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= n);
    (mean, cov)
}

fn histogram(xs: &[Vec<f64>], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    let d = lo.len();
    let mut h = vec![0.0; HIST_BINS.pow(d as u32)];
    for x in xs {
        let mut idx = 0;
        for i in 0..d {
            let u = ((x[i] - lo[i]) / (hi[i] - lo[i]) * HIST_BINS as f64).floor();
            idx = idx * HIST_BINS + (u.max(0.0) as usize).min(HIST_BINS - 1);
        }
        h[idx] += 1.0 / xs.len() as f64;
    }
    h
}

/// Mean offsets in units of the reference standard deviation and
/// covariance entries relative to `sqrt(C_ii C_jj)`, whichever is largest.
fn moment_discrepancy(ma: &[f64], ca: &[f64], mb: &[f64], cb: &[f64]) -> f64 {
    let d = ma.len();
    let mut worst = 0.0f64;
    for i in 0..d {
        worst = worst.max((ma[i] - mb[i]).abs() / cb[i * d + i].sqrt());
        for j in 0..d {
            let s = (cb[i * d + i] * cb[j * d + j]).sqrt();
            worst = worst.max((ca[i * d + j] - cb[i * d + j]).abs() / s);
        }
    }
    if worst.is_finite() {
        worst
    } else {
        f64::INFINITY
    }
}

/// Running first and second moments, for sample clouds too large to keep.
#[derive(Debug, Clone)]
pub struct MomentAccumulator {
    n: usize,
    sum: Vec<f64>,
    outer: Vec<f64>,
}

impl MomentAccumulator {
    pub fn new(d: usize) -> Self {
        Self { n: 0, sum: vec![0.0; d], outer: vec![0.0; d * d] }
    }

    pub fn push(&mut self, x: &[f64]) {
        let d = self.sum.len();
        self.n += 1;
        for i in 0..d {
            self.sum[i] += x[i];
            for j in 0..d {
                self.outer[i * d + j] += x[i] * x[j];
            }
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Mean and population covariance.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.sum.len();
        let n = self.n as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let cov = (0..d * d).map(|k| self.outer[k] / n - mean[k / d] * mean[k % d]).collect();
        (mean, cov)
    }
}

/// [`marginal_match`] against an analytic reference from accumulated moments.
pub fn moments_match(acc: &MomentAccumulator, mean: &[f64], cov: &[f64], t: f64, tol: f64) -> Result<OracleReport> {
    if acc.len() < MIN_SAMPLES {
        return Err(Error::InvalidArgument(format!("{} samples; at least {MIN_SAMPLES} are needed", acc.len())));
    }
    let (ma, ca) = acc.moments();
    if mean.len() != ma.len() || cov.len() != ca.len() {
        return Err(Error::ShapeMismatch { expected: ma.len(), got: mean.len() });
    }
    let worst = moment_discrepancy(&ma, &ca, mean, cov);
    let details = format!("t = {t}, n = {}, mean {ma:?} vs {mean:?}, cov {ca:?} vs {cov:?}", acc.len());
    Ok(OracleReport::new(format!("marginal match at t = {t}"), worst, tol, details))
}

/// Largest discrepancy between the sample moments and the reference:
/// mean offsets in units of the reference standard deviation, and
/// covariance entries relative to `sqrt(C_ii C_jj)`. For `d <= 2` against
/// another sample set, the coarse-grid L1 histogram distance is also
/// reported in the details.
pub fn marginal_match(samples: &[Vec<f64>], reference: MarginalReference<'_>, t: f64, tol: f64) -> Result<OracleReport> {
    if samples.len() < MIN_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "{} samples; at least {MIN_SAMPLES} are needed",
            samples.len()
        )));
    }
    let (ma, ca) = moments(samples);
    let d = ma.len();
    let (mb, cb, other) = match reference {
        MarginalReference::Samples(b) => {
            if b.len() < MIN_SAMPLES {
                return Err(Error::InvalidArgument(format!("{} reference samples; need {MIN_SAMPLES}", b.len())));
            }
            let (m, c) = moments(b);
            (m, c, Some(b))
        }
        MarginalReference::Analytic { mean, cov } => {
            if mean.len() != d || cov.len() != d * d {
                return Err(Error::ShapeMismatch { expected: d, got: mean.len() });
            }
            (mean.to_vec(), cov.to_vec(), None)
        }
    };
    let worst = moment_discrepancy(&ma, &ca, &mb, &cb);
    let mut details = format!("t = {t}, n = {}, mean {ma:?} vs {mb:?}, cov {ca:?} vs {cb:?}", samples.len());
    if let (Some(b), true) = (other, d <= 2) {
        let lo: Vec<f64> = (0..d).map(|i| mb[i] - 3.0 * cb[i * d + i].sqrt()).collect();
        let hi: Vec<f64> = (0..d).map(|i| mb[i] + 3.0 * cb[i * d + i].sqrt()).collect();
        let l1: f64 = histogram(samples, &lo, &hi)
            .iter()
            .zip(histogram(b, &lo, &hi))
            .map(|(p, q)| (p - q).abs())
            .sum();
        details.push_str(&format!(", histogram L1 {l1:.4}"));
    }
    Ok(OracleReport::new(format!("marginal match at t = {t}"), worst, tol, details))
}

#[cfg(test)]
mod tests {
    use super::*;
    use selfconf_core::rng;

    fn cloud(seed: u64, n: usize, scale: f64) -> Vec<Vec<f64>> {
        let mut r = rng::stream(seed, &[]);
        (0..n).map(|_| rng::normal_vec(&mut r, 2).into_iter().map(|v| v * scale).collect()).collect()
    }

    #[test]
    fn same_law_passes_and_wrong_scale_fails() {
        let a = cloud(1, 20_000, 1.0);
        let b = cloud(2, 20_000, 1.0);
        assert!(marginal_match(&a, MarginalReference::Samples(&b), 0.5, 0.03).unwrap().pass);
        let id = [1.0, 0.0, 0.0, 1.0];
        assert!(marginal_match(&a, MarginalReference::Analytic { mean: &[0.0, 0.0], cov: &id }, 0.5, 0.03).unwrap().pass);
        let c = cloud(3, 20_000, 1.2);
        assert!(!marginal_match(&c, MarginalReference::Samples(&b), 0.5, 0.03).unwrap().pass);
    }

    #[test]
    fn streaming_moments_agree_with_batch() {
        let a = cloud(4, 12_000, 1.5);
        let mut acc = MomentAccumulator::new(2);
        a.iter().for_each(|x| acc.push(x));
        let (m1, c1) = moments(&a);
        let (m2, c2) = acc.moments();
        for (x, y) in m1.iter().chain(&c1).zip(m2.iter().chain(&c2)) {
            assert!((x - y).abs() < 1e-9);
        }
        let cov = [2.25, 0.0, 0.0, 2.25];
        assert!(moments_match(&acc, &[0.0, 0.0], &cov, 0.5, 0.03).unwrap().pass);
    }

    #[test]
    fn too_few_samples() {
        let a = cloud(1, 100, 1.0);
        assert!(marginal_match(&a, MarginalReference::Samples(&a), 0.0, 0.03).is_err());
    }
}
