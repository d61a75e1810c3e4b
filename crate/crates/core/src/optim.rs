//! AdamW with global-norm clipping, and the EMA shadow of trainable weights.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::model::{ModelParams, Trainable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            max_grad_norm: Some(1.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Scales `grad` in place so its Euclidean norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

impl AdamW {
    pub fn new(config: AdamWConfig, len: usize) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    /// Clips `grad`, applies one decoupled-weight-decay Adam step to the
    /// `which` set of `params`, and bumps `params.version`. Returns the
    /// pre-clip gradient norm.
    pub fn step(&mut self, params: &mut ModelParams, which: Trainable, mut grad: Vec<f64>) -> Result<f64> {
        ensure_len(self.m.len(), grad.len())?;
        let norm = match self.config.max_grad_norm {
            Some(max) => clip_grad_norm(&mut grad, max),
            None => grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
        };
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient norm".into()));
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let mut theta = params.trainable_vec(which);
        for i in 0..theta.len() {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * grad[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            theta[i] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * theta[i]);
        }
        params.set_trainable(which, &theta)?;
        params.version += 1;
        Ok(norm)
    }
}

/// Exponential moving average of one trainable set, refreshed every
/// `update_interval` optimizer steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaShadow {
    pub shadow: Vec<f64>,
    pub decay: f64,
    pub update_interval: u64,
    pub tracks: Trainable,
}

impl EmaShadow {
    /// Starts the shadow at the current parameters.
    pub fn new(params: &ModelParams, tracks: Trainable, decay: f64, update_interval: u64) -> Result<Self> {
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::InvalidArgument(format!("EMA decay {decay} outside (0, 1]")));
        }
        if update_interval == 0 {
            return Err(Error::InvalidArgument("EMA update interval must be >= 1".into()));
        }
        Ok(Self {
            shadow: params.trainable_vec(tracks),
            decay,
            update_interval,
            tracks,
        })
    }

    /// `shadow <- decay * shadow + (1 - decay) * params` when
    /// `params.version` is a multiple of the interval; otherwise unchanged.
    pub fn updated(&self, params: &ModelParams) -> Result<EmaShadow> {
        let current = params.trainable_vec(self.tracks);
        ensure_len(self.shadow.len(), current.len())?;
        let mut next = self.clone();
        if params.version.is_multiple_of(self.update_interval) {
            next.blend(&current);
        }
        Ok(next)
    }

    fn blend(&mut self, current: &[f64]) {
        let d = self.decay;
        for (s, p) in self.shadow.iter_mut().zip(current) {
            *s = d * *s + (1.0 - d) * p;
        }
    }

    /// A copy of `params` whose tracked set is replaced by the shadow.
    pub fn apply_to(&self, params: &ModelParams) -> Result<ModelParams> {
        let mut out = params.clone();
        out.set_trainable(self.tracks, &self.shadow)?;
        Ok(out)
    }
}
