//! The conditional velocity network `v(x, t, c)`.
//!
//! A small SiLU multilayer perceptron over `[x, time features, prompt
//! embedding]`. Every dense layer carries a low-rank adapter pair
//! `W + (alpha / r) * B A`; with adapters disabled (or `B = 0`) the map is the
//! base network exactly. Gradients are computed by hand-written reverse mode
//! through a [`Tape`] that records network evaluations for a loss closure.

use std::f64::consts::PI;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_len, Error, Result};
use crate::rng::{self, TAG_INIT};
use crate::world::PromptContext;

/// Network layout. Input width is `data_dim + 2 * time_freqs + cond_dim`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub data_dim: usize,
    pub cond_dim: usize,
    pub time_freqs: usize,
    pub hidden: Vec<usize>,
}

impl Arch {
    pub fn input_dim(&self) -> usize {
        self.data_dim + 2 * self.time_freqs + self.cond_dim
    }

    /// `(fan_in, fan_out)` for each dense layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim();
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.data_dim));
        dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.cond_dim == 0 {
            return Err(Error::InvalidArgument("data_dim and cond_dim must be positive".into()));
        }
        if !(4..=8).contains(&self.time_freqs) {
            return Err(Error::InvalidArgument(format!(
                "time_freqs must be in 4..=8, got {}",
                self.time_freqs
            )));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// Sinusoidal time features `sin(w_k t), cos(w_k t)` with `w_k = pi (k + 1) / 2`.
pub fn time_features(t: f64, freqs: usize) -> impl Iterator<Item = f64> {
    (0..freqs).flat_map(move |k| {
        let w = PI * (k as f64 + 1.0) / 2.0;
        [(w * t).sin(), (w * t).cos()]
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Row-major `fan_out x fan_in`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Low-rank pair; `a` is `rank x fan_in`, `b` is `fan_out x rank`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// Which parameters a gradient or optimizer step covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trainable {
    /// Dense weights and biases (pretraining).
    Base,
    /// Adapter `A` and `B` matrices (post-training).
    Adapters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Arch,
    pub layers: Vec<Dense>,
    pub adapters: Vec<Adapter>,
    pub rank: usize,
    pub alpha: f64,
    pub adapter_enabled: bool,
    /// Number of optimizer steps applied so far.
    pub version: u64,
    pub seed: u64,
}

/// Builds a network with LeCun-normal base weights (std `1/sqrt(fan_in)`),
/// zero biases, Gaussian adapter `A` (std `1/sqrt(r)`) and zero adapter `B`.
pub fn init_model(arch: &Arch, rank: usize, alpha: f64, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    if rank == 0 {
        return Err(Error::InvalidArgument("adapter rank must be >= 1".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument("adapter alpha must be > 0".into()));
    }
    let dims = arch.layer_dims();
    if let Some(&(i, o)) = dims.iter().find(|(i, o)| rank > (*i).min(*o)) {
        return Err(Error::InvalidArgument(format!(
            "rank {rank} exceeds min dimension of a {i}x{o} layer"
        )));
    }
    let mut rng = rng::stream(seed, &[TAG_INIT]);
    let mut layers = Vec::with_capacity(dims.len());
    let mut adapters = Vec::with_capacity(dims.len());
    for &(fan_in, fan_out) in &dims {
        let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
        layers.push(Dense {
            fan_in,
            fan_out,
            weight: (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect(),
            bias: vec![0.0; fan_out],
        });
    }
    let a_dist = Normal::new(0.0, 1.0 / (rank as f64).sqrt()).expect("positive std");
    for &(fan_in, fan_out) in &dims {
        adapters.push(Adapter {
            a: (0..rank * fan_in).map(|_| a_dist.sample(&mut rng)).collect(),
            b: vec![0.0; fan_out * rank],
        });
    }
    Ok(ModelParams {
        arch: arch.clone(),
        layers,
        adapters,
        rank,
        alpha,
        adapter_enabled: false,
        version: 0,
        seed,
    })
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
    /// `A x` for each layer when adapters were active.
    low: Vec<Vec<f64>>,
    adapters_on: bool,
}

fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

fn silu_grad(z: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    s * (1.0 + z * (1.0 - s))
}

/// Something that produces a velocity for a state, time and context.
pub trait VelocityField: Sync {
    fn data_dim(&self) -> usize;
    fn velocity(&self, x: &[f64], t: f64, c: &PromptContext) -> Result<Vec<f64>>;
}

impl ModelParams {
    pub fn adapter_scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Returns a copy with adapters switched on or off; weights are untouched.
    pub fn set_adapter_enabled(&self, on: bool) -> ModelParams {
        let mut out = self.clone();
        out.adapter_enabled = on;
        out
    }

    fn network_input(&self, x: &[f64], t: f64, c: &PromptContext) -> Result<Vec<f64>> {
        ensure_len(self.arch.data_dim, x.len())?;
        ensure_len(self.arch.cond_dim, c.embedding.len())?;
        ensure_finite("network input x", x)?;
        if !t.is_finite() || !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
        }
        let mut input = Vec::with_capacity(self.arch.input_dim());
        input.extend_from_slice(x);
        input.extend(time_features(t, self.arch.time_freqs));
        input.extend_from_slice(&c.embedding);
        Ok(input)
    }

    fn forward_cached(&self, input: Vec<f64>, keep: bool) -> (Vec<f64>, Option<Cache>) {
        let n = self.layers.len();
        let on = self.adapter_enabled;
        let scale = self.adapter_scale();
        let mut cache = keep.then(|| Cache {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            low: Vec::with_capacity(n),
            adapters_on: on,
        });
        let mut x = input;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.bias.clone();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &layer.weight[o * layer.fan_in..(o + 1) * layer.fan_in];
                *zo += row.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>();
            }
            let mut low = Vec::new();
            if on {
                let ad = &self.adapters[l];
                low = (0..self.rank)
                    .map(|k| {
                        ad.a[k * layer.fan_in..(k + 1) * layer.fan_in]
                            .iter()
                            .zip(&x)
                            .map(|(a, v)| a * v)
                            .sum::<f64>()
                    })
                    .collect();
                for (o, zo) in z.iter_mut().enumerate() {
                    let brow = &ad.b[o * self.rank..(o + 1) * self.rank];
                    *zo += scale * brow.iter().zip(&low).map(|(b, h)| b * h).sum::<f64>();
                }
            }
            let last = l + 1 == n;
            let out: Vec<f64> = if last { z.clone() } else { z.iter().map(|&v| silu(v)).collect() };
            if let Some(c) = cache.as_mut() {
                c.inputs.push(x);
                c.pre.push(z);
                c.low.push(low);
            }
            x = out;
        }
        (x, cache)
    }

    /// Velocity at `(x, t, c)`.
    pub fn forward(&self, x: &[f64], t: f64, c: &PromptContext) -> Result<Vec<f64>> {
        let input = self.network_input(x, t, c)?;
        let (out, _) = self.forward_cached(input, false);
        ensure_finite("network output", &out)?;
        Ok(out)
    }

    /// Evaluates many inputs; identical to calling [`ModelParams::forward`] per item.
    pub fn forward_batch(&self, items: &[(&[f64], f64, &PromptContext)]) -> Result<Vec<Vec<f64>>> {
        items
            .par_iter()
            .map(|(x, t, c)| self.forward(x, *t, c))
            .collect()
    }

    /// Accumulates `d loss / d params` for one evaluation into `grad`.
    fn backward(&self, cache: &Cache, d_out: &[f64], which: Trainable, grad: &mut [f64]) {
        let n = self.layers.len();
        let scale = self.adapter_scale();
        let offsets = self.offsets(which);
        let mut delta = d_out.to_vec();
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            if l + 1 != n {
                for (d, &z) in delta.iter_mut().zip(&cache.pre[l]) {
                    *d *= silu_grad(z);
                }
            }
            let input = &cache.inputs[l];
            let off = offsets[l];
            // Upstream gradient through B: u = B^T delta.
            let u: Vec<f64> = if cache.adapters_on {
                let b = &self.adapters[l].b;
                (0..self.rank)
                    .map(|k| (0..layer.fan_out).map(|o| b[o * self.rank + k] * delta[o]).sum())
                    .collect()
            } else {
                Vec::new()
            };
            match which {
                Trainable::Base => {
                    let (gw, gb) = grad[off..off + layer.fan_out * (layer.fan_in + 1)]
                        .split_at_mut(layer.fan_out * layer.fan_in);
                    for o in 0..layer.fan_out {
                        let row = &mut gw[o * layer.fan_in..(o + 1) * layer.fan_in];
                        for (g, v) in row.iter_mut().zip(input) {
                            *g += delta[o] * v;
                        }
                        gb[o] += delta[o];
                    }
                }
                Trainable::Adapters if cache.adapters_on => {
                    let r = self.rank;
                    let (ga, gb) = grad[off..off + r * layer.fan_in + layer.fan_out * r]
                        .split_at_mut(r * layer.fan_in);
                    for k in 0..r {
                        let row = &mut ga[k * layer.fan_in..(k + 1) * layer.fan_in];
                        for (g, v) in row.iter_mut().zip(input) {
                            *g += scale * u[k] * v;
                        }
                    }
                    let low = &cache.low[l];
                    for o in 0..layer.fan_out {
                        for k in 0..r {
                            gb[o * r + k] += scale * delta[o] * low[k];
                        }
                    }
                }
                Trainable::Adapters => {}
            }
            if l > 0 {
                let mut prev = vec![0.0; layer.fan_in];
                for o in 0..layer.fan_out {
                    let row = &layer.weight[o * layer.fan_in..(o + 1) * layer.fan_in];
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += w * delta[o];
                    }
                }
                if cache.adapters_on {
                    let a = &self.adapters[l].a;
                    for k in 0..self.rank {
                        let row = &a[k * layer.fan_in..(k + 1) * layer.fan_in];
                        for (p, av) in prev.iter_mut().zip(row) {
                            *p += scale * av * u[k];
                        }
                    }
                }
                delta = prev;
            }
        }
    }

    fn offsets(&self, which: Trainable) -> Vec<usize> {
        let mut acc = 0;
        self.layers
            .iter()
            .map(|layer| {
                let start = acc;
                acc += match which {
                    Trainable::Base => layer.fan_out * (layer.fan_in + 1),
                    Trainable::Adapters => self.rank * (layer.fan_in + layer.fan_out),
                };
                start
            })
            .collect()
    }

    /// Number of scalars in the trainable set.
    pub fn trainable_len(&self, which: Trainable) -> usize {
        self.layers
            .iter()
            .map(|layer| match which {
                Trainable::Base => layer.fan_out * (layer.fan_in + 1),
                Trainable::Adapters => self.rank * (layer.fan_in + layer.fan_out),
            })
            .sum()
    }

    /// Flattened trainable set: per layer `weight, bias` or `A, B`.
    pub fn trainable_vec(&self, which: Trainable) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trainable_len(which));
        for (layer, ad) in self.layers.iter().zip(&self.adapters) {
            match which {
                Trainable::Base => {
                    out.extend_from_slice(&layer.weight);
                    out.extend_from_slice(&layer.bias);
                }
                Trainable::Adapters => {
                    out.extend_from_slice(&ad.a);
                    out.extend_from_slice(&ad.b);
                }
            }
        }
        out
    }

    pub fn set_trainable(&mut self, which: Trainable, flat: &[f64]) -> Result<()> {
        ensure_len(self.trainable_len(which), flat.len())?;
        let mut rest = flat;
        for (layer, ad) in self.layers.iter_mut().zip(self.adapters.iter_mut()) {
            let (first, second) = match which {
                Trainable::Base => (&mut layer.weight, &mut layer.bias),
                Trainable::Adapters => (&mut ad.a, &mut ad.b),
            };
            let (h, t) = rest.split_at(first.len());
            first.copy_from_slice(h);
            let (h2, t2) = t.split_at(second.len());
            second.copy_from_slice(h2);
            rest = t2;
        }
        Ok(())
    }

    /// Euclidean norm of all adapter parameters' `B` factors, a zero exactly
    /// when the adapted map equals the base map by construction.
    pub fn adapter_b_norm(&self) -> f64 {
        self.adapters
            .iter()
            .flat_map(|a| a.b.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Runs `loss` against a fresh [`Tape`] and returns the loss value with
    /// its gradient over the `which` parameter set.
    pub fn loss_and_grad<F>(&self, which: Trainable, loss: F) -> Result<(f64, Vec<f64>)>
    where
        F: FnOnce(&mut Tape<'_>) -> Result<f64>,
    {
        let mut tape = Tape {
            params: self,
            nodes: Vec::new(),
        };
        let value = loss(&mut tape)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss value {value}")));
        }
        let grad = tape.reduce(which);
        ensure_finite("gradient", &grad)?;
        Ok((value, grad))
    }
}

impl VelocityField for ModelParams {
    fn data_dim(&self) -> usize {
        self.arch.data_dim
    }

    fn velocity(&self, x: &[f64], t: f64, c: &PromptContext) -> Result<Vec<f64>> {
        self.forward(x, t, c)
    }
}

/// Handle to one network evaluation recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

struct Node {
    cache: Cache,
    cotangent: Option<Vec<f64>>,
}

/// Records network evaluations so a loss built from their outputs can be
/// differentiated. The loss closure evaluates the network through the tape,
/// computes its value, and seeds each output with `d loss / d output`.
pub struct Tape<'a> {
    params: &'a ModelParams,
    nodes: Vec<Node>,
}

/// Evaluations per backward work item; fixed so gradient sums do not depend
/// on the worker count.
const BACKWARD_CHUNK: usize = 32;

impl<'a> Tape<'a> {
    pub fn params(&self) -> &ModelParams {
        self.params
    }

    pub fn forward(&mut self, x: &[f64], t: f64, c: &PromptContext) -> Result<(NodeId, Vec<f64>)> {
        let input = self.params.network_input(x, t, c)?;
        let (out, cache) = self.params.forward_cached(input, true);
        ensure_finite("network output", &out)?;
        self.nodes.push(Node {
            cache: cache.expect("cache requested"),
            cotangent: None,
        });
        Ok((NodeId(self.nodes.len() - 1), out))
    }

    /// Parallel version of [`Tape::forward`]; ids follow item order.
    pub fn forward_batch(
        &mut self,
        items: &[(&[f64], f64, &PromptContext)],
    ) -> Result<Vec<(NodeId, Vec<f64>)>> {
        let params = self.params;
        let evals: Vec<(Vec<f64>, Cache)> = items
            .par_iter()
            .map(|(x, t, c)| {
                let input = params.network_input(x, *t, c)?;
                let (out, cache) = params.forward_cached(input, true);
                ensure_finite("network output", &out)?;
                Ok((out, cache.expect("cache requested")))
            })
            .collect::<Result<_>>()?;
        let base = self.nodes.len();
        let mut outs = Vec::with_capacity(evals.len());
        for (k, (out, cache)) in evals.into_iter().enumerate() {
            self.nodes.push(Node { cache, cotangent: None });
            outs.push((NodeId(base + k), out));
        }
        Ok(outs)
    }

    /// Adds `cotangent` (`d loss / d output`) to node `id`.
    pub fn seed(&mut self, id: NodeId, cotangent: &[f64]) {
        let node = &mut self.nodes[id.0];
        match node.cotangent.as_mut() {
            Some(acc) => acc.iter_mut().zip(cotangent).for_each(|(a, c)| *a += c),
            None => node.cotangent = Some(cotangent.to_vec()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn reduce(self, which: Trainable) -> Vec<f64> {
        let params = self.params;
        let n = params.trainable_len(which);
        let partials: Vec<Vec<f64>> = self
            .nodes
            .par_chunks(BACKWARD_CHUNK)
            .map(|chunk| {
                let mut g = vec![0.0; n];
                for node in chunk {
                    if let Some(cot) = &node.cotangent {
                        params.backward(&node.cache, cot, which, &mut g);
                    }
                }
                g
            })
            .collect();
        let mut grad = vec![0.0; n];
        for p in partials {
            grad.iter_mut().zip(p).for_each(|(g, v)| *g += v);
        }
        grad
    }
}
