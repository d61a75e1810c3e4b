//! Conditional synthetic data distributions with closed-form densities.
//!
//! Every world is a per-condition isotropic Gaussian mixture (a Dirac world is
//! the zero-scale limit), so densities, moments and Bayes-optimal velocities
//! all have closed forms. Latent space and data space coincide.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::rng::{self, TAG_DATA};

/// Tolerance on the per-condition weight sum.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Conditioning context fed to the velocity network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptContext {
    pub prompt_id: usize,
    pub embedding: Vec<f64>,
    pub is_null: bool,
}

impl PromptContext {
    /// The unconditional context used for guidance: an all-zero embedding.
    pub fn null(cond_dim: usize) -> Self {
        Self {
            prompt_id: 0,
            embedding: vec![0.0; cond_dim],
            is_null: true,
        }
    }

    /// The null context with the same embedding width as `self`.
    pub fn null_like(&self) -> Self {
        Self::null(self.embedding.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub mean: Vec<f64>,
    pub scale: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionMixture {
    pub components: Vec<Component>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Dirac,
    IsotropicGaussian,
    Mixture,
    TwoMoons,
}

/// Parameters of a built-in world family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum WorldSpec {
    /// One condition, all mass at `point`.
    Dirac { point: Vec<f64> },
    /// One condition, `N(mean, scale^2 I)`; `mean` defaults to the origin.
    IsotropicGaussian {
        dim: usize,
        scale: f64,
        #[serde(default)]
        mean: Option<Vec<f64>>,
    },
    /// `conditions * components_per_condition` Gaussians on a ring of the
    /// given radius in the first two coordinates, dealt round-robin to the
    /// conditions. With 4 conditions, one component each and radius
    /// `3 * sqrt(2)` the means sit at `(+-3, +-3)`.
    Mixture {
        dim: usize,
        conditions: usize,
        components_per_condition: usize,
        radius: f64,
        scale: f64,
    },
    /// Two interleaved half-moons, each a chain of small Gaussians.
    TwoMoons {
        scale: f64,
        points_per_moon: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub prompt: PromptContext,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyWorld {
    pub name: String,
    pub dim: usize,
    pub family: Family,
    pub conditions: Vec<ConditionMixture>,
}

/// Builds and validates a world from one of the built-in families.
pub fn make_world(spec: &WorldSpec) -> Result<ToyWorld> {
    let world = match spec {
        WorldSpec::Dirac { point } => ToyWorld {
            name: "dirac".into(),
            dim: point.len(),
            family: Family::Dirac,
            conditions: vec![ConditionMixture {
                components: vec![Component {
                    mean: point.clone(),
                    scale: 0.0,
                    weight: 1.0,
                }],
            }],
        },
        WorldSpec::IsotropicGaussian { dim, scale, mean } => {
            let mean = mean.clone().unwrap_or_else(|| vec![0.0; *dim]);
            ensure_len(*dim, mean.len())?;
            ToyWorld {
                name: "isotropic-gaussian".into(),
                dim: *dim,
                family: Family::IsotropicGaussian,
                conditions: vec![ConditionMixture {
                    components: vec![Component {
                        mean,
                        scale: *scale,
                        weight: 1.0,
                    }],
                }],
            }
        }
        WorldSpec::Mixture {
            dim,
            conditions,
            components_per_condition,
            radius,
            scale,
        } => {
            if *dim < 2 {
                return Err(Error::InvalidWorld("mixture worlds need dim >= 2".into()));
            }
            if *components_per_condition == 0 {
                return Err(Error::InvalidWorld("components_per_condition must be >= 1".into()));
            }
            let total = conditions * components_per_condition;
            let mut conds = vec![ConditionMixture { components: vec![] }; *conditions];
            for k in 0..total {
                let angle = PI / 4.0 + 2.0 * PI * k as f64 / total as f64;
                let mut mean = vec![0.0; *dim];
                mean[0] = radius * angle.cos();
                mean[1] = radius * angle.sin();
                conds[k % conditions].components.push(Component {
                    mean,
                    scale: *scale,
                    weight: 1.0 / *components_per_condition as f64,
                });
            }
            ToyWorld {
                name: format!("mixture-{conditions}x{components_per_condition}"),
                dim: *dim,
                family: Family::Mixture,
                conditions: conds,
            }
        }
        WorldSpec::TwoMoons {
            scale,
            points_per_moon,
        } => {
            if *points_per_moon < 2 {
                return Err(Error::InvalidWorld("points_per_moon must be >= 2".into()));
            }
            let n = *points_per_moon;
            let w = 1.0 / n as f64;
            let arc = |upper: bool| ConditionMixture {
                components: (0..n)
                    .map(|k| {
                        let theta = PI * k as f64 / (n - 1) as f64;
                        let mean = if upper {
                            vec![theta.cos(), theta.sin()]
                        } else {
                            vec![1.0 - theta.cos(), 0.5 - theta.sin()]
                        };
                        Component {
                            mean,
                            scale: *scale,
                            weight: w,
                        }
                    })
                    .collect(),
            };
            ToyWorld {
                name: "two-moons".into(),
                dim: 2,
                family: Family::TwoMoons,
                conditions: vec![arc(true), arc(false)],
            }
        }
    };
    world.validate()?;
    Ok(world)
}

impl ToyWorld {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidWorld("dimension must be positive".into()));
        }
        if self.conditions.is_empty() {
            return Err(Error::InvalidWorld("condition list is empty".into()));
        }
        for (c, cond) in self.conditions.iter().enumerate() {
            if cond.components.is_empty() {
                return Err(Error::InvalidWorld(format!("condition {c} has no components")));
            }
            let mut sum = 0.0;
            for comp in &cond.components {
                ensure_len(self.dim, comp.mean.len())?;
                if !comp.mean.iter().all(|v| v.is_finite()) {
                    return Err(Error::InvalidWorld(format!("condition {c} has a non-finite mean")));
                }
                let scale_ok = match self.family {
                    Family::Dirac => comp.scale == 0.0,
                    _ => comp.scale > 0.0 && comp.scale.is_finite(),
                };
                if !scale_ok {
                    return Err(Error::InvalidWorld(format!(
                        "condition {c} has invalid scale {}",
                        comp.scale
                    )));
                }
                if !(comp.weight > 0.0) {
                    return Err(Error::InvalidWorld(format!(
                        "condition {c} has nonpositive weight {}",
                        comp.weight
                    )));
                }
                sum += comp.weight;
            }
            if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
                return Err(Error::InvalidWorld(format!(
                    "condition {c} weights sum to {sum}, expected 1"
                )));
            }
        }
        Ok(())
    }

    pub fn num_conditions(&self) -> usize {
        self.conditions.len()
    }

    /// One-hot embedding of condition `id`.
    pub fn prompt(&self, id: usize) -> Result<PromptContext> {
        let count = self.num_conditions();
        if id >= count {
            return Err(Error::UnknownPrompt { id, count });
        }
        let mut embedding = vec![0.0; count];
        embedding[id] = 1.0;
        Ok(PromptContext {
            prompt_id: id,
            embedding,
            is_null: false,
        })
    }

    pub fn prompts(&self) -> Vec<PromptContext> {
        (0..self.num_conditions())
            .map(|id| self.prompt(id).expect("id in range"))
            .collect()
    }

    pub fn null_prompt(&self) -> PromptContext {
        PromptContext::null(self.num_conditions())
    }

    fn check_prompt(&self, prompt: &PromptContext) -> Result<()> {
        ensure_len(self.num_conditions(), prompt.embedding.len())?;
        if !prompt.is_null && prompt.prompt_id >= self.num_conditions() {
            return Err(Error::UnknownPrompt {
                id: prompt.prompt_id,
                count: self.num_conditions(),
            });
        }
        Ok(())
    }

    /// Components of the prompted condition with their effective weights.
    /// The null prompt selects the equal-weight marginal over conditions.
    pub fn components_for(&self, prompt: &PromptContext) -> Result<Vec<Component>> {
        self.check_prompt(prompt)?;
        if prompt.is_null {
            let c = self.num_conditions() as f64;
            Ok(self
                .conditions
                .iter()
                .flat_map(|cond| {
                    cond.components.iter().map(move |comp| Component {
                        weight: comp.weight / c,
                        ..comp.clone()
                    })
                })
                .collect())
        } else {
            Ok(self.conditions[prompt.prompt_id].components.clone())
        }
    }

    /// Largest component scale in the world.
    pub fn max_scale(&self) -> f64 {
        self.conditions
            .iter()
            .flat_map(|c| c.components.iter().map(|k| k.scale))
            .fold(0.0, f64::max)
    }

    /// Analytic mean and covariance (row-major `d x d`) of the prompted law.
    pub fn moments(&self, prompt: &PromptContext) -> Result<(Vec<f64>, Vec<f64>)> {
        let comps = self.components_for(prompt)?;
        let d = self.dim;
        let mut mean = vec![0.0; d];
        let mut second = vec![0.0; d * d];
        for comp in &comps {
            for i in 0..d {
                mean[i] += comp.weight * comp.mean[i];
                for j in 0..d {
                    second[i * d + j] += comp.weight * comp.mean[i] * comp.mean[j];
                }
                second[i * d + i] += comp.weight * comp.scale * comp.scale;
            }
        }
        for i in 0..d {
            for j in 0..d {
                second[i * d + j] -= mean[i] * mean[j];
            }
        }
        Ok((mean, second))
    }

    /// Root-mean-square per-coordinate deviation of the prompted law,
    /// `sqrt(tr(Cov) / d)`.
    pub fn data_scale(&self, prompt: &PromptContext) -> Result<f64> {
        let (_, cov) = self.moments(prompt)?;
        let d = self.dim;
        Ok(((0..d).map(|i| cov[i * d + i]).sum::<f64>() / d as f64).sqrt())
    }
}

fn draw_component<R: Rng + ?Sized>(comps: &[Component], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, comp) in comps.iter().enumerate() {
        acc += comp.weight;
        if u < acc {
            return k;
        }
    }
    comps.len() - 1
}

/// I.i.d. draws from the prompted condition, deterministic given `seed`.
pub fn sample_data(
    world: &ToyWorld,
    prompt: &PromptContext,
    n: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let comps = world.components_for(prompt)?;
    let mut rng = rng::stream(seed, &[TAG_DATA, prompt.prompt_id as u64, prompt.is_null as u64]);
    Ok((0..n)
        .map(|_| Sample {
            x: draw_from(&comps, world.dim, &mut rng),
            prompt: prompt.clone(),
        })
        .collect())
}

pub(crate) fn draw_from<R: Rng + ?Sized>(comps: &[Component], dim: usize, rng: &mut R) -> Vec<f64> {
    let comp = &comps[draw_component(comps, rng)];
    let noise = rng::normal_vec(rng, dim);
    comp.mean
        .iter()
        .zip(noise)
        .map(|(m, e)| m + comp.scale * e)
        .collect()
}

/// Exact log density of the prompted mixture at `x`.
///
/// Dirac worlds have no density; they return `f64::NEG_INFINITY` as a
/// sentinel for every `x`, including the atom itself.
pub fn true_log_density(world: &ToyWorld, prompt: &PromptContext, x: &[f64]) -> Result<f64> {
    ensure_len(world.dim, x.len())?;
    let comps = world.components_for(prompt)?;
    if world.family == Family::Dirac {
        return Ok(f64::NEG_INFINITY);
    }
    let d = world.dim as f64;
    let terms: Vec<f64> = comps
        .iter()
        .map(|c| {
            let sq: f64 = x.iter().zip(&c.mean).map(|(a, b)| (a - b) * (a - b)).sum();
            c.weight.ln() - 0.5 * d * (2.0 * PI * c.scale * c.scale).ln() - sq / (2.0 * c.scale * c.scale)
        })
        .collect();
    Ok(log_sum_exp(&terms))
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Index of the condition owning the component nearest to `x`, together
/// with the squared distance to that component mean.
pub fn nearest_condition(world: &ToyWorld, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cond) in world.conditions.iter().enumerate() {
        for comp in &cond.components {
            let sq: f64 = x.iter().zip(&comp.mean).map(|(a, b)| (a - b) * (a - b)).sum();
            if sq < best.1 {
                best = (c, sq);
            }
        }
    }
    best
}

/// Smallest distance between component means that belong to different
/// conditions. Infinite for single-condition worlds.
pub fn min_cross_condition_distance(world: &ToyWorld) -> f64 {
    let mut best = f64::INFINITY;
    for (a, ca) in world.conditions.iter().enumerate() {
        for cb in world.conditions.iter().skip(a + 1) {
            for p in &ca.components {
                for q in &cb.components {
                    let d: f64 = p.mean.iter().zip(&q.mean).map(|(x, y)| (x - y) * (x - y)).sum();
                    best = best.min(d.sqrt());
                }
            }
        }
    }
    best
}

/// Fraction of samples whose nearest component mean belongs to the prompted
/// condition. Requires components of different conditions to be separated
/// by more than six times the largest component scale.
pub fn condition_accuracy(world: &ToyWorld, prompt: &PromptContext, samples: &[Sample]) -> Result<f64> {
    let xs: Vec<&[f64]> = samples.iter().map(|s| s.x.as_slice()).collect();
    condition_accuracy_of(world, prompt, &xs)
}

pub fn condition_accuracy_of(world: &ToyWorld, prompt: &PromptContext, xs: &[&[f64]]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::InvalidArgument("empty sample list".into()));
    }
    if prompt.is_null {
        return Err(Error::InvalidArgument("accuracy is undefined for the null prompt".into()));
    }
    world.check_prompt(prompt)?;
    let sep = min_cross_condition_distance(world);
    if !(sep > 6.0 * world.max_scale()) {
        return Err(Error::InvalidWorld(format!(
            "components are not well separated ({sep:.3} <= 6 * {:.3})",
            world.max_scale()
        )));
    }
    let mut hits = 0usize;
    for x in xs {
        ensure_len(world.dim, x.len())?;
        if nearest_condition(world, x).0 == prompt.prompt_id {
            hits += 1;
        }
    }
    Ok(hits as f64 / xs.len() as f64)
}

/// Root-mean-square per-coordinate distance of samples from their nearest
/// component mean. Matches the component scale for faithful samples.
pub fn spread_about_modes(world: &ToyWorld, xs: &[&[f64]]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let total: f64 = xs.iter().map(|x| nearest_condition(world, x).1).sum();
    (total / (xs.len() * world.dim) as f64).sqrt()
}

/// Root-mean-square per-coordinate deviation of a set of points from their
/// own mean; zero for a collapsed set.
pub fn group_spread(xs: &[&[f64]]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let d = xs[0].len();
    let n = xs.len() as f64;
    let mean: Vec<f64> = (0..d).map(|i| xs.iter().map(|x| x[i]).sum::<f64>() / n).collect();
    let ss: f64 = xs
        .iter()
        .map(|x| x.iter().zip(&mean).map(|(a, m)| (a - m) * (a - m)).sum::<f64>())
        .sum();
    (ss / (n * d as f64)).sqrt()
}
