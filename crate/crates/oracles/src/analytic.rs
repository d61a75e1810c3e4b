//! Closed-form velocities and error floors for Gaussian-mixture worlds.
//!
//! With data `x0 ~ sum_k w_k N(mu_k, s_k^2 I)` and prior `eps ~ N(0, I)`,
//! `x_t = (1 - t) x0 + t eps` is a mixture with component laws
//! `N((1 - t) mu_k, V_k I)`, `V_k = (1 - t)^2 s_k^2 + t^2`. Conditioning each
//! component is linear, and the mixture posterior reweights components by
//! their likelihood at `x`.

use selfconf_core::world::{Component, Family, PromptContext, ToyWorld};
use selfconf_core::{Error, Result, VelocityField};

/// Bayes-optimal velocity `E[eps - x0 | x_t = x, c]` of a world.
#[derive(Debug, Clone)]
pub struct AnalyticVelocity {
    world: ToyWorld,
}

impl AnalyticVelocity {
    /// Dirac, isotropic Gaussian and Gaussian-mixture worlds are supported.
    pub fn new(world: &ToyWorld) -> Result<Self> {
        match world.family {
            Family::Dirac | Family::IsotropicGaussian | Family::Mixture => Ok(Self { world: world.clone() }),
            Family::TwoMoons => Err(Error::Unsupported("no analytic velocity for two-moons".into())),
        }
    }
}

impl VelocityField for AnalyticVelocity {
    fn data_dim(&self) -> usize {
        self.world.dim
    }

    fn velocity(&self, x: &[f64], t: f64, c: &PromptContext) -> Result<Vec<f64>> {
        let comps = self.world.components_for(c)?;
        let (e_x0, e_eps) = posterior_means(&comps, x, t)?;
        Ok(e_eps.iter().zip(&e_x0).map(|(e, z)| e - z).collect())
    }
}

pub fn analytic_velocity(world: &ToyWorld, x: &[f64], t: f64, c: &PromptContext) -> Result<Vec<f64>> {
    AnalyticVelocity::new(world)?.velocity(x, t, c)
}

/// `(E[x0 | x_t], E[eps | x_t])` under a Gaussian mixture.
fn posterior_means(comps: &[Component], x: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
    }
    let d = x.len();
    // log responsibilities; a zero-variance component only explains its atom
    let logits: Vec<f64> = comps
        .iter()
        .map(|k| {
            let v = (1.0 - t).powi(2) * k.scale * k.scale + t * t;
            let sq: f64 = x.iter().zip(&k.mean).map(|(xi, m)| (xi - (1.0 - t) * m).powi(2)).sum();
            if v == 0.0 {
                if sq == 0.0 {
                    k.weight.ln()
                } else {
                    f64::NEG_INFINITY
                }
            } else {
                k.weight.ln() - 0.5 * d as f64 * v.ln() - sq / (2.0 * v)
            }
        })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let resp: Vec<f64> = if max == f64::NEG_INFINITY {
        vec![1.0 / comps.len() as f64; comps.len()]
    } else {
        let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    };
    let mut e_x0 = vec![0.0; d];
    let mut e_eps = vec![0.0; d];
    for (k, r) in comps.iter().zip(resp) {
        if r == 0.0 {
            continue;
        }
        let v = (1.0 - t).powi(2) * k.scale * k.scale + t * t;
        for i in 0..d {
            let resid = x[i] - (1.0 - t) * k.mean[i];
            let (mx, me) = if v == 0.0 {
                (k.mean[i], 0.0)
            } else {
                (k.mean[i] + (1.0 - t) * k.scale * k.scale / v * resid, t / v * resid)
            };
            e_x0[i] += r * mx;
            e_eps[i] += r * me;
        }
    }
    Ok((e_x0, e_eps))
}

/// `E[eps | x_t = x, c]`.
pub fn posterior_noise_mean(world: &ToyWorld, x: &[f64], t: f64, c: &PromptContext) -> Result<Vec<f64>> {
    let comps = world.components_for(c)?;
    Ok(posterior_means(&comps, x, t)?.1)
}

fn single_gaussian(world: &ToyWorld) -> Result<f64> {
    match (world.family, world.conditions.as_slice()) {
        (Family::IsotropicGaussian, [cond]) if cond.components.len() == 1 => Ok(cond.components[0].scale),
        _ => Err(Error::Unsupported(format!("{} is not a single isotropic Gaussian", world.name))),
    }
}

/// Minimum mean squared error of the noise posterior mean,
/// `d (1-t)^2 s^2 / ((1-t)^2 s^2 + t^2)`.
pub fn optimal_probe_mse(world: &ToyWorld, t: f64) -> Result<f64> {
    let s = single_gaussian(world)?;
    let a = (1.0 - t).powi(2) * s * s;
    let v = a + t * t;
    Ok(if v == 0.0 { world.dim as f64 } else { world.dim as f64 * a / v })
}

/// Minimum over all velocity fields of the probe error
/// `E |v(z_t) + z0 - eps|^2` when `z0` follows the data law:
/// `d s^2 / ((1-t)^2 s^2 + t^2)`, attained by the Bayes-optimal velocity.
pub fn velocity_recovery_floor(world: &ToyWorld, t: f64) -> Result<f64> {
    let s = single_gaussian(world)?;
    let v = (1.0 - t).powi(2) * s * s + t * t;
    if v == 0.0 {
        return Err(Error::InvalidArgument("floor undefined at t = 0 with s = 0".into()));
    }
    Ok(world.dim as f64 * s * s / v)
}

/// Bayes floor of the rectified-flow loss with `t ~ U(0, 1)`:
/// `d * int_0^1 [1 + s^2 - (t - (1-t) s^2)^2 / V_t] dt` by Simpson's rule.
pub fn rf_loss_floor(world: &ToyWorld) -> Result<f64> {
    let s2 = single_gaussian(world)?.powi(2);
    let f = |t: f64| {
        let v = (1.0 - t).powi(2) * s2 + t * t;
        if v == 0.0 {
            1.0 + s2
        } else {
            1.0 + s2 - (t - (1.0 - t) * s2).powi(2) / v
        }
    };
    let n = 2000;
    let h = 1.0 / n as f64;
    let mut acc = f(0.0) + f(1.0);
    for i in 1..n {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
    }
    Ok(world.dim as f64 * acc * h / 3.0)
}
