//! Rectified-flow training loss, guidance, and the ODE / SDE samplers.
//!
//! Time runs from `t = 1` (prior) to `t = 0` (data). The stochastic sampler
//! integrates the marginal-preserving reverse SDE
//!
//! ```text
//! dz = [v + sigma_t^2 / (2t) * (z + (1 - t) v)] dt + sigma_t dW,   t: 1 -> 0
//! sigma_t = a * sqrt(t / (1 - t))
//! ```
//!
//! by Euler-Maruyama, so every transition is an isotropic Gaussian with a
//! computable mean and standard deviation.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_len, Error, Result};
use crate::model::{NodeId, Tape, VelocityField};
use crate::rng::{self, TAG_ROLLOUT};
use crate::world::{PromptContext, Sample};

/// `sigma_t` is evaluated at `min(t_from, SIGMA_T_CLIP)`, which keeps the
/// first step finite. At 10 steps this equals the grid point after `t = 1`.
pub const SIGMA_T_CLIP: f64 = 0.9;

/// Uniform grid `t_j = 1 - j / T`, shared by rollouts and probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub timesteps: Vec<f64>,
}

pub fn make_schedule(num_steps: usize) -> Result<Schedule> {
    if num_steps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    let t = num_steps as f64;
    let mut timesteps: Vec<f64> = (0..=num_steps).map(|j| 1.0 - j as f64 / t).collect();
    timesteps[0] = 1.0;
    timesteps[num_steps] = 0.0;
    Ok(Schedule { timesteps })
}

impl Schedule {
    pub fn num_steps(&self) -> usize {
        self.timesteps.len() - 1
    }

    /// `(t_from, t_to)` of transition `j`.
    pub fn step(&self, j: usize) -> (f64, f64) {
        (self.timesteps[j], self.timesteps[j + 1])
    }

    /// Timesteps strictly between 0 and 1.
    pub fn interior(&self) -> &[f64] {
        &self.timesteps[1..self.num_steps()]
    }

    pub fn contains(&self, t: f64) -> bool {
        self.timesteps.contains(&t)
    }
}

/// One regression example for the rectified-flow loss.
#[derive(Debug, Clone)]
pub struct RfExample {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub t: f64,
    pub prompt: PromptContext,
}

fn interpolate(x0: &[f64], x1: &[f64], t: f64) -> Vec<f64> {
    x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect()
}

fn check_example(ex: &RfExample, d: usize) -> Result<()> {
    ensure_len(d, ex.x0.len())?;
    ensure_len(d, ex.x1.len())
}

/// Mean over the batch of `|(x1 - x0) - v((1-t) x0 + t x1, t, c)|^2`.
pub fn rf_pretrain_loss<F: VelocityField>(field: &F, batch: &[RfExample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let d = field.data_dim();
    let terms = batch
        .par_iter()
        .map(|ex| {
            check_example(ex, d)?;
            let v = field.velocity(&interpolate(&ex.x0, &ex.x1, ex.t), ex.t, &ex.prompt)?;
            Ok((0..d).map(|i| (ex.x1[i] - ex.x0[i] - v[i]).powi(2)).sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(terms.iter().sum::<f64>() / batch.len() as f64)
}

/// Records the rectified-flow loss on `tape` and seeds its gradient.
pub fn rf_pretrain_loss_on_tape(tape: &mut Tape<'_>, batch: &[RfExample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let d = tape.params().arch.data_dim;
    let states: Vec<Vec<f64>> = batch
        .iter()
        .map(|ex| {
            check_example(ex, d)?;
            Ok(interpolate(&ex.x0, &ex.x1, ex.t))
        })
        .collect::<Result<_>>()?;
    let items: Vec<(&[f64], f64, &PromptContext)> = batch
        .iter()
        .zip(&states)
        .map(|(ex, z)| (z.as_slice(), ex.t, &ex.prompt))
        .collect();
    let outs = tape.forward_batch(&items)?;
    let n = batch.len() as f64;
    let mut total = 0.0;
    for (ex, (id, v)) in batch.iter().zip(outs) {
        let resid: Vec<f64> = (0..d).map(|i| v[i] - (ex.x1[i] - ex.x0[i])).collect();
        total += resid.iter().map(|r| r * r).sum::<f64>();
        let cot: Vec<f64> = resid.iter().map(|r| 2.0 * r / n).collect();
        tape.seed(id, &cot);
    }
    Ok(total / n)
}

/// `v_uncond + s (v_cond - v_uncond)`. `s = 1` returns the conditional
/// branch and `s = 0` the unconditional branch, each with one evaluation.
pub fn cfg_velocity<F: VelocityField>(
    field: &F,
    x: &[f64],
    t: f64,
    c: &PromptContext,
    s: f64,
) -> Result<Vec<f64>> {
    if s == 1.0 {
        return field.velocity(x, t, c);
    }
    let uncond = field.velocity(x, t, &c.null_like())?;
    if s == 0.0 {
        return Ok(uncond);
    }
    let cond = field.velocity(x, t, c)?;
    Ok(mix_guidance(&uncond, &cond, s))
}

pub fn mix_guidance(uncond: &[f64], cond: &[f64], s: f64) -> Vec<f64> {
    uncond.iter().zip(cond).map(|(u, c)| u + s * (c - u)).collect()
}

/// Tape nodes behind one guided velocity, with the weight each node's
/// output carries in the mixture.
#[derive(Debug, Clone)]
pub struct GuidedNodes {
    pub nodes: Vec<(NodeId, f64)>,
}

impl GuidedNodes {
    /// Pushes `d loss / d v` back to the underlying evaluations.
    pub fn seed(&self, tape: &mut Tape<'_>, d_v: &[f64]) {
        for &(id, w) in &self.nodes {
            let cot: Vec<f64> = d_v.iter().map(|g| w * g).collect();
            tape.seed(id, &cot);
        }
    }
}

/// Guided velocity evaluated through `tape` so it can be differentiated.
pub fn cfg_velocity_on_tape(
    tape: &mut Tape<'_>,
    x: &[f64],
    t: f64,
    c: &PromptContext,
    s: f64,
) -> Result<(GuidedNodes, Vec<f64>)> {
    if s == 1.0 {
        let (id, v) = tape.forward(x, t, c)?;
        return Ok((GuidedNodes { nodes: vec![(id, 1.0)] }, v));
    }
    let (uid, uncond) = tape.forward(x, t, &c.null_like())?;
    if s == 0.0 {
        return Ok((GuidedNodes { nodes: vec![(uid, 1.0)] }, uncond));
    }
    let (cid, cond) = tape.forward(x, t, c)?;
    Ok((
        GuidedNodes { nodes: vec![(uid, 1.0 - s), (cid, s)] },
        mix_guidance(&uncond, &cond, s),
    ))
}

/// Batched [`cfg_velocity_on_tape`]; items are `(x, t, c, s)`.
pub fn cfg_velocity_batch_on_tape(
    tape: &mut Tape<'_>,
    items: &[(&[f64], f64, &PromptContext, f64)],
) -> Result<Vec<(GuidedNodes, Vec<f64>)>> {
    let nulls: Vec<PromptContext> = items.iter().map(|it| it.2.null_like()).collect();
    let mut evals: Vec<(&[f64], f64, &PromptContext)> = Vec::new();
    // (uncond slot, cond slot) into `evals` per item
    let mut slots = Vec::with_capacity(items.len());
    for (k, &(x, t, c, s)) in items.iter().enumerate() {
        let u = (s != 1.0).then(|| {
            evals.push((x, t, &nulls[k]));
            evals.len() - 1
        });
        let cnd = (s != 0.0).then(|| {
            evals.push((x, t, c));
            evals.len() - 1
        });
        slots.push((u, cnd));
    }
    let outs = tape.forward_batch(&evals)?;
    Ok(items
        .iter()
        .zip(slots)
        .map(|(&(_, _, _, s), slot)| match slot {
            (None, Some(c)) => (GuidedNodes { nodes: vec![(outs[c].0, 1.0)] }, outs[c].1.clone()),
            (Some(u), None) => (GuidedNodes { nodes: vec![(outs[u].0, 1.0)] }, outs[u].1.clone()),
            (Some(u), Some(c)) => (
                GuidedNodes { nodes: vec![(outs[u].0, 1.0 - s), (outs[c].0, s)] },
                mix_guidance(&outs[u].1, &outs[c].1, s),
            ),
            (None, None) => unreachable!("s cannot be both 0 and 1"),
        })
        .collect())
}

fn euler_update(z: &[f64], v: &[f64], dt: f64) -> Vec<f64> {
    z.iter().zip(v).map(|(a, b)| a + dt * b).collect()
}

/// Explicit Euler integration of `dz/dt = v_cfg` from `t = 1` to `t = 0`.
pub fn ode_sample<F: VelocityField>(
    field: &F,
    z1: &[f64],
    c: &PromptContext,
    sched: &Schedule,
    s: f64,
) -> Result<Sample> {
    ensure_len(field.data_dim(), z1.len())?;
    ensure_finite("initial state", z1)?;
    let mut z = z1.to_vec();
    for j in 0..sched.num_steps() {
        let (t_from, t_to) = sched.step(j);
        let v = cfg_velocity(field, &z, t_from, c, s)?;
        z = euler_update(&z, &v, t_to - t_from);
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("ODE state after step {j}")));
        }
    }
    Ok(Sample { x: z, prompt: c.clone() })
}

/// Diffusion coefficient of one transition. Zero when `a = 0` or when the
/// step lands on `t = 0`.
pub fn sde_sigma(a: f64, t_from: f64, t_to: f64) -> f64 {
    if a == 0.0 || t_to <= 0.0 {
        return 0.0;
    }
    let te = t_from.min(SIGMA_T_CLIP);
    a * (te / (1.0 - te)).sqrt()
}

/// Transition standard deviation `sigma_t * sqrt(t_from - t_to)`.
pub fn step_std(sigma_t: f64, t_from: f64, t_to: f64) -> f64 {
    sigma_t * (t_from - t_to).sqrt()
}

/// Gaussian transition mean. With `sigma_t = 0` this is the ODE Euler step.
pub fn transition_mean(z: &[f64], v: &[f64], t_from: f64, t_to: f64, sigma_t: f64) -> Vec<f64> {
    let dt = t_to - t_from;
    if sigma_t == 0.0 {
        return euler_update(z, v, dt);
    }
    let k = sigma_t * sigma_t / (2.0 * t_from);
    z.iter()
        .zip(v)
        .map(|(&zi, &vi)| zi + dt * (vi + k * (zi + (1.0 - t_from) * vi)))
        .collect()
}

/// `d mean / d v` (a scalar multiple of the identity).
pub fn mean_velocity_gain(t_from: f64, t_to: f64, sigma_t: f64) -> f64 {
    let dt = t_to - t_from;
    if sigma_t == 0.0 {
        return dt;
    }
    dt * (1.0 + sigma_t * sigma_t * (1.0 - t_from) / (2.0 * t_from))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdeStep {
    pub next: Vec<f64>,
    pub mean: Vec<f64>,
    /// Transition standard deviation; 0 for deterministic steps.
    pub std: f64,
}

fn check_times(t_from: f64, t_to: f64) -> Result<()> {
    if !(t_from <= 1.0 && t_from > t_to && t_to >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need 1 >= t_from > t_to >= 0, got {t_from} -> {t_to}"
        )));
    }
    Ok(())
}

/// One Euler-Maruyama step of the reverse SDE.
#[allow(clippy::too_many_arguments)]
pub fn sde_step<F: VelocityField, R: Rng + ?Sized>(
    field: &F,
    z: &[f64],
    t_from: f64,
    t_to: f64,
    c: &PromptContext,
    a: f64,
    s: f64,
    rng: &mut R,
) -> Result<SdeStep> {
    check_times(t_from, t_to)?;
    if !(a >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise level {a} must be >= 0")));
    }
    let v = cfg_velocity(field, z, t_from, c, s)?;
    let sigma_t = sde_sigma(a, t_from, t_to);
    let mean = transition_mean(z, &v, t_from, t_to, sigma_t);
    let std = step_std(sigma_t, t_from, t_to);
    let next = if std == 0.0 {
        mean.clone()
    } else {
        let noise = rng::normal_vec(rng, z.len());
        mean.iter().zip(noise).map(|(m, e)| m + std * e).collect()
    };
    if !next.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!("SDE state at t = {t_to}")));
    }
    Ok(SdeStep { next, mean, std })
}

/// Exact log density of `z_next` under `N(mean, sigma^2 I)`.
pub fn transition_logprob(mean: &[f64], sigma: f64, z_next: &[f64]) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma {sigma} must be > 0")));
    }
    ensure_len(mean.len(), z_next.len())?;
    let d = mean.len() as f64;
    let sq: f64 = mean.iter().zip(z_next).map(|(m, z)| (z - m) * (z - m)).sum();
    Ok(-sq / (2.0 * sigma * sigma) - d * sigma.ln() - 0.5 * d * (2.0 * PI).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub group_size: usize,
    pub noise_level: f64,
    pub guidance_scale: f64,
    /// Start every member of a group from the same initial draw.
    pub same_latent: bool,
}

/// One reverse-time rollout with everything needed to recompute its
/// likelihood ratio later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub timesteps: Vec<f64>,
    /// `T + 1` states from `t = 1` to `t = 0`.
    pub states: Vec<Vec<f64>>,
    pub means: Vec<Vec<f64>>,
    /// Transition standard deviations.
    pub sigmas: Vec<f64>,
    /// `None` for deterministic transitions.
    pub logprobs_old: Vec<Option<f64>>,
    pub prompt: PromptContext,
    pub cfg_scale: f64,
    pub noise_level: f64,
}

impl Trajectory {
    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("non-empty trajectory")
    }

    pub fn num_steps(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_stochastic(&self, j: usize) -> bool {
        self.sigmas[j] > 0.0
    }

    /// Line-delimited JSON, one record per transition.
    pub fn write_dump<W: Write>(&self, w: &mut W) -> Result<()> {
        for j in 0..self.num_steps() {
            let rec = serde_json::json!({
                "step": j,
                "t_from": self.timesteps[j],
                "t_to": self.timesteps[j + 1],
                "sigma": self.sigmas[j],
                "logprob": self.logprobs_old[j],
            });
            writeln!(w, "{rec}")?;
        }
        Ok(())
    }
}

/// Rolls one trajectory; `rng` drives both the initial draw (unless
/// `initial` is given) and the step noise.
pub fn rollout<F: VelocityField, R: Rng + ?Sized>(
    field: &F,
    c: &PromptContext,
    sched: &Schedule,
    a: f64,
    s: f64,
    initial: Option<Vec<f64>>,
    rng: &mut R,
) -> Result<Trajectory> {
    let d = field.data_dim();
    let z1 = initial.unwrap_or_else(|| rng::normal_vec(rng, d));
    ensure_len(d, z1.len())?;
    let n = sched.num_steps();
    let mut states = Vec::with_capacity(n + 1);
    let mut means = Vec::with_capacity(n);
    let mut sigmas = Vec::with_capacity(n);
    let mut logprobs = Vec::with_capacity(n);
    states.push(z1);
    for j in 0..n {
        let (t_from, t_to) = sched.step(j);
        let step = sde_step(field, &states[j], t_from, t_to, c, a, s, rng)?;
        logprobs.push(if step.std > 0.0 {
            Some(transition_logprob(&step.mean, step.std, &step.next)?)
        } else {
            None
        });
        sigmas.push(step.std);
        means.push(step.mean);
        states.push(step.next);
    }
    Ok(Trajectory {
        timesteps: sched.timesteps.clone(),
        states,
        means,
        sigmas,
        logprobs_old: logprobs,
        prompt: c.clone(),
        cfg_scale: s,
        noise_level: a,
    })
}

/// `G` rollouts for one prompt. Member `i` draws from its own stream
/// derived from `(seed, i)`; results are ordered by member index.
pub fn sde_sample_group<F: VelocityField>(
    field: &F,
    c: &PromptContext,
    cfg: &RolloutConfig,
    sched: &Schedule,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if cfg.group_size < 2 {
        return Err(Error::InvalidArgument(format!(
            "group size {} < 2 leaves group statistics undefined",
            cfg.group_size
        )));
    }
    let shared = cfg
        .same_latent
        .then(|| rng::normal_vec(&mut rng::stream(seed, &[TAG_ROLLOUT, u64::MAX]), field.data_dim()));
    (0..cfg.group_size)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, &[TAG_ROLLOUT, i as u64]);
            rollout(field, c, sched, cfg.noise_level, cfg.guidance_scale, shared.clone(), &mut r)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, Arch, ModelParams};

    /// `v(x, t, c) = w` for every input, with a different constant for the
    /// null context.
    struct Constant {
        cond: Vec<f64>,
        uncond: Vec<f64>,
    }

    impl VelocityField for Constant {
        fn data_dim(&self) -> usize {
            self.cond.len()
        }
        fn velocity(&self, _x: &[f64], _t: f64, c: &PromptContext) -> Result<Vec<f64>> {
            Ok(if c.is_null { self.uncond.clone() } else { self.cond.clone() })
        }
    }

    fn ctx() -> PromptContext {
        PromptContext { prompt_id: 0, embedding: vec![1.0], is_null: false }
    }

    fn net() -> ModelParams {
        let arch = Arch { data_dim: 2, cond_dim: 1, time_freqs: 4, hidden: vec![8] };
        init_model(&arch, 1, 1.0, 4).unwrap()
    }

    #[test]
    fn schedule_grid() {
        let s = make_schedule(10).unwrap();
        assert_eq!(s.timesteps.len(), 11);
        assert_eq!(s.timesteps[0], 1.0);
        assert_eq!(s.timesteps[10], 0.0);
        for (j, t) in s.timesteps.iter().enumerate() {
            assert!((t - (1.0 - j as f64 / 10.0)).abs() < 1e-15);
        }
        assert!(s.timesteps.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(make_schedule(1).unwrap().timesteps, vec![1.0, 0.0]);
        assert!(make_schedule(0).is_err());
        assert_eq!(make_schedule(10).unwrap(), s);
    }

    #[test]
    fn rf_loss_examples() {
        let zero = Constant { cond: vec![0.0, 0.0], uncond: vec![0.0, 0.0] };
        let ex = RfExample { x0: vec![0.0, 0.0], x1: vec![1.0, 0.0], t: 0.3, prompt: ctx() };
        assert_eq!(rf_pretrain_loss(&zero, std::slice::from_ref(&ex)).unwrap(), 1.0);
        let exact = Constant { cond: vec![1.0, 0.0], uncond: vec![0.0, 0.0] };
        assert_eq!(rf_pretrain_loss(&exact, &[ex]).unwrap(), 0.0);
        assert!(rf_pretrain_loss(&zero, &[]).is_err());
    }

    #[test]
    fn tape_loss_matches_plain_loss() {
        let p = net();
        let batch: Vec<RfExample> = (0..5)
            .map(|k| RfExample {
                x0: vec![k as f64 * 0.3, -0.2],
                x1: vec![0.5, k as f64 * -0.1],
                t: 0.1 + 0.15 * k as f64,
                prompt: if k % 2 == 0 { ctx() } else { ctx().null_like() },
            })
            .collect();
        let plain = rf_pretrain_loss(&p, &batch).unwrap();
        let (taped, _) = p
            .loss_and_grad(crate::model::Trainable::Base, |tape| rf_pretrain_loss_on_tape(tape, &batch))
            .unwrap();
        assert!((plain - taped).abs() < 1e-12);
    }

    #[test]
    fn guidance_arithmetic() {
        let f = Constant { cond: vec![1.0, 1.0], uncond: vec![0.0, 0.0] };
        assert_eq!(cfg_velocity(&f, &[0.0, 0.0], 0.5, &ctx(), 7.0).unwrap(), vec![7.0, 7.0]);
        let p = net();
        let x = [0.3, -0.4];
        assert_eq!(cfg_velocity(&p, &x, 0.5, &ctx(), 1.0).unwrap(), p.forward(&x, 0.5, &ctx()).unwrap());
        assert_eq!(
            cfg_velocity(&p, &x, 0.5, &ctx(), 0.0).unwrap(),
            p.forward(&x, 0.5, &ctx().null_like()).unwrap()
        );
    }

    #[test]
    fn single_euler_step_with_constant_field() {
        let f = Constant { cond: vec![0.5, -2.0], uncond: vec![0.0, 0.0] };
        let s = make_schedule(1).unwrap();
        let out = ode_sample(&f, &[1.0, 1.0], &ctx(), &s, 1.0).unwrap();
        assert_eq!(out.x, vec![0.5, 3.0]);
    }

    #[test]
    fn zero_noise_sde_equals_euler() {
        let p = net();
        let z = [0.7, -0.3];
        let mut r = rng::stream(1, &[]);
        let step = sde_step(&p, &z, 0.6, 0.5, &ctx(), 0.0, 2.0, &mut r).unwrap();
        let v = cfg_velocity(&p, &z, 0.6, &ctx(), 2.0).unwrap();
        let dt = 0.5 - 0.6;
        let euler: Vec<f64> = z.iter().zip(&v).map(|(a, b)| a + dt * b).collect();
        assert_eq!(step.next, euler);
        assert_eq!(step.std, 0.0);
    }

    #[test]
    fn sde_step_is_reproducible_and_validates() {
        let p = net();
        let z = [0.7, -0.3];
        let a = sde_step(&p, &z, 0.6, 0.5, &ctx(), 0.7, 2.0, &mut rng::stream(3, &[])).unwrap();
        let b = sde_step(&p, &z, 0.6, 0.5, &ctx(), 0.7, 2.0, &mut rng::stream(3, &[])).unwrap();
        assert_eq!(a, b);
        assert!(a.std > 0.0);
        assert!(sde_step(&p, &z, 0.5, 0.6, &ctx(), 0.7, 2.0, &mut rng::stream(3, &[])).is_err());
        assert!(sde_step(&p, &z, 0.6, 0.5, &ctx(), -0.1, 2.0, &mut rng::stream(3, &[])).is_err());
    }

    #[test]
    fn final_step_is_deterministic_and_first_is_finite() {
        assert_eq!(sde_sigma(0.7, 0.1, 0.0), 0.0);
        let first = sde_sigma(0.7, 1.0, 0.9);
        assert!((first - 0.7 * 3.0).abs() < 1e-12);
    }

    #[test]
    fn logprob_examples() {
        let v = transition_logprob(&[0.0, 0.0], 1.0, &[0.0, 0.0]).unwrap();
        assert!((v + (2.0 * PI).ln()).abs() < 1e-12);
        let shifted = transition_logprob(&[3.0, -1.0], 0.4, &[3.5, -1.2]).unwrap();
        let base = transition_logprob(&[0.0, 0.0], 0.4, &[0.5, -0.2]).unwrap();
        assert!((shifted - base).abs() < 1e-12);
        let wide = transition_logprob(&[0.0, 0.0], 2.0, &[0.0, 0.0]).unwrap();
        assert!((v - wide - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!(transition_logprob(&[0.0], 0.0, &[0.0]).is_err());
    }

    #[test]
    fn logprob_integrates_to_one_in_one_dimension() {
        let (mean, sigma) = (0.3, 0.45);
        let h = 1e-3;
        let mut total = 0.0;
        let mut x = mean - 12.0 * sigma;
        while x <= mean + 12.0 * sigma {
            total += transition_logprob(&[mean], sigma, &[x]).unwrap().exp() * h;
            x += h;
        }
        assert!((total - 1.0).abs() < 1e-4, "{total}");
    }

    #[test]
    fn group_members_are_distinct_and_consistent() {
        let p = net();
        let s = make_schedule(6).unwrap();
        let cfg = RolloutConfig { group_size: 16, noise_level: 0.7, guidance_scale: 2.0, same_latent: false };
        let g = sde_sample_group(&p, &ctx(), &cfg, &s, 11).unwrap();
        assert_eq!(g.len(), 16);
        for i in 0..16 {
            for k in i + 1..16 {
                assert_ne!(g[i].states[0], g[k].states[0]);
            }
        }
        for traj in &g {
            assert_eq!(traj.states.len(), 7);
            for j in 0..traj.num_steps() {
                match traj.logprobs_old[j] {
                    Some(lp) => {
                        let again = transition_logprob(&traj.means[j], traj.sigmas[j], &traj.states[j + 1]).unwrap();
                        assert_eq!(lp, again);
                    }
                    None => assert_eq!(traj.sigmas[j], 0.0),
                }
            }
        }
        assert_eq!(sde_sample_group(&p, &ctx(), &cfg, &s, 11).unwrap(), g);
    }

    #[test]
    fn shared_latent_without_noise_gives_identical_members() {
        let p = net();
        let s = make_schedule(4).unwrap();
        let cfg = RolloutConfig { group_size: 3, noise_level: 0.0, guidance_scale: 2.0, same_latent: true };
        let g = sde_sample_group(&p, &ctx(), &cfg, &s, 2).unwrap();
        assert_eq!(g[0].states, g[1].states);
        assert_eq!(g[1].states, g[2].states);
        let bad = RolloutConfig { group_size: 1, ..cfg };
        assert!(sde_sample_group(&p, &ctx(), &bad, &s, 2).is_err());
    }

    #[test]
    fn dump_has_one_line_per_step() {
        let p = net();
        let s = make_schedule(3).unwrap();
        let t = rollout(&p, &ctx(), &s, 0.7, 1.0, None, &mut rng::stream(0, &[])).unwrap();
        let mut buf = Vec::new();
        t.write_dump(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        let last: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
        assert!(last["logprob"].is_null());
    }
}
