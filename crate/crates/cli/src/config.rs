//! Flat dotted-key experiment configuration.
//!
//! A config file is TOML whose keys are dotted paths such as
//! `train.beta = 0.04` (nested tables are flattened to the same form).
//! Resolution starts from the defaults, switches the world defaults when
//! `world.family` changes, then applies the file and `--override` pairs in
//! that order. Every problem is collected before reporting, so one run
//! names every offending key.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use selfconf_core::grpo::GrpoConfig;
use selfconf_core::model::Arch;
use selfconf_core::optim::AdamWConfig;
use selfconf_core::reward::{ProbeConfig, ScoreMode};
use selfconf_core::trainer::{EvalConfig, PosttrainConfig, PretrainConfig};
use selfconf_core::world::{make_world, ToyWorld, WorldSpec};
use toml::Value;

pub type Flat = BTreeMap<String, Value>;

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("experiment.name", "run label recorded in the manifest"),
    ("experiment.out_dir", "output directory"),
    ("experiment.seed", "base seed for pretraining, rollouts and probes"),
    ("world.family", "dirac | isotropic-gaussian | mixture | two-moons"),
    ("world.dim", "data dimension"),
    ("world.conditions", "number of conditions (mixture)"),
    ("world.components_per_condition", "components per condition (mixture)"),
    ("world.radius", "ring radius of the component means (mixture)"),
    ("world.scale", "component standard deviation"),
    ("world.mean", "mean of the isotropic Gaussian"),
    ("world.point", "atom of the Dirac world"),
    ("world.points_per_moon", "chain length per moon (two-moons)"),
    ("model.hidden", "hidden layer widths"),
    ("model.time_freqs", "sinusoidal time frequencies"),
    ("lora.rank", "adapter rank"),
    ("lora.alpha", "adapter scaling numerator"),
    ("pretrain.steps", "optimizer steps"),
    ("pretrain.batch_size", "examples per step"),
    ("pretrain.learning_rate", "AdamW learning rate"),
    ("pretrain.weight_decay", "AdamW weight decay"),
    ("pretrain.max_grad_norm", "global gradient-norm clip, 0 disables"),
    ("pretrain.cond_dropout", "probability of training on the null condition"),
    ("sample.num_steps", "sampler steps during training"),
    ("sample.guidance_scale", "guidance scale of the rollouts"),
    ("sample.noise_level", "SDE noise level a"),
    ("sample.num_image_per_prompt", "group size G"),
    ("sample.prompts_per_batch", "prompts per iteration"),
    ("sample.same_latent", "start every group member from one latent"),
    ("train.iterations", "post-training iterations"),
    ("train.beta", "KL weight"),
    ("train.clip_range", "ratio clip epsilon"),
    ("train.rho", "suffix fraction of trained transitions"),
    ("train.timestep_fraction", "fraction of the schedule eligible for training"),
    ("train.learning_rate", "AdamW learning rate on adapters"),
    ("train.weight_decay", "AdamW weight decay on adapters"),
    ("train.max_grad_norm", "global gradient-norm clip, 0 disables"),
    ("train.ema_decay", "EMA decay"),
    ("train.ema_update_interval", "optimizer steps between EMA updates"),
    ("train.inner_epochs", "optimizer passes per sampling batch"),
    ("train.stepwise_advantage", "per-probe-time advantages"),
    ("train.checkpoint_every", "iterations between checkpoints, 0 writes only the final one"),
    ("reward.num_probes", "probes K per scoring event (even)"),
    ("reward.delta", "floor inside the log score"),
    ("reward.probe_times", "explicit probe times; omitted means the last half of the schedule"),
    ("reward.weights", "per-probe-time weights"),
    ("reward.cfg", "score with the guided velocity"),
    ("reward.cfg_scale", "guidance scale when reward.cfg is set"),
    ("reward.mode", "online | offline"),
    ("reward.normalize", "per-time z-score within each group"),
    ("eval.every", "iterations between evaluations"),
    ("eval.num_steps", "ODE steps of the evaluation sampler"),
    ("eval.guidance_scale", "guidance scale of the evaluation sampler"),
    ("eval.samples_per_prompt", "evaluation samples per condition"),
    ("eval.seed", "seed of the fixed evaluation latents"),
    ("collapse.iterations", "iteration budget per collapse arm"),
    ("collapse.margin", "nats below the self-confidence ceiling that count as a spike"),
    ("collapse.spread_fraction", "spread threshold as a fraction of the data scale"),
    ("collapse.window", "consecutive iterations required for a verdict"),
    ("collapse.ceiling_samples", "data samples per condition for the ceiling estimate"),
    ("rationale.samples_per_prompt", "samples per condition and regime"),
    ("rationale.low_steps", "sampler steps of the short regimes"),
    ("rationale.high_steps", "sampler steps of the long regime"),
    ("rationale.guidance_scale", "guidance scale of the guided regimes"),
    ("rationale.bootstrap", "bootstrap resamples"),
    ("rationale.confidence", "confidence level of the intervals"),
    ("oracle.marginal_samples", "trajectories for the marginal check"),
    ("oracle.marginal_steps", "sampler steps for the marginal check"),
];

pub fn is_known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollapseConfig {
    pub iterations: usize,
    pub margin: f64,
    pub spread_fraction: f64,
    pub window: usize,
    pub ceiling_samples: usize,
}

impl Default for CollapseConfig {
    fn default() -> Self {
        Self { iterations: 300, margin: 0.5, spread_fraction: 0.1, window: 5, ceiling_samples: 256 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RationaleConfig {
    pub samples_per_prompt: usize,
    pub low_steps: usize,
    pub high_steps: usize,
    pub guidance_scale: f64,
    pub bootstrap: usize,
    pub confidence: f64,
}

impl Default for RationaleConfig {
    fn default() -> Self {
        Self { samples_per_prompt: 4096, low_steps: 5, high_steps: 10, guidance_scale: 2.0, bootstrap: 2000, confidence: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    pub marginal_samples: usize,
    pub marginal_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub world: WorldSpec,
    pub hidden: Vec<usize>,
    pub time_freqs: usize,
    pub pretrain: PretrainConfig,
    pub posttrain: PosttrainConfig,
    pub checkpoint_every: usize,
    pub collapse: CollapseConfig,
    pub rationale: RationaleConfig,
    pub oracle: OracleConfig,
}

/// The default world: four conditions, three components each, on a ring.
pub fn default_world() -> WorldSpec {
    WorldSpec::Mixture { dim: 2, conditions: 4, components_per_condition: 3, radius: 3.0 * 2f64.sqrt(), scale: 0.3 }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let seed = 0;
        let pretrain = PretrainConfig { steps: 3000, batch_size: 128, seed, ..PretrainConfig::default() };
        let mut posttrain = PosttrainConfig::default();
        posttrain.grpo.seed = seed;
        Self {
            name: "selfconf".into(),
            out_dir: PathBuf::from("runs/selfconf"),
            seed,
            world: default_world(),
            hidden: vec![64, 64],
            time_freqs: 6,
            pretrain,
            posttrain,
            checkpoint_every: 0,
            collapse: CollapseConfig::default(),
            rationale: RationaleConfig::default(),
            oracle: OracleConfig { marginal_samples: 20_000, marginal_steps: 400 },
        }
    }
}

/// Configuration problems, one message per offending key.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub Vec<String>);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid configuration ({} problem{}):", self.0.len(), if self.0.len() == 1 { "" } else { "s" })?;
        for m in &self.0 {
            writeln!(f, "  - {m}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

fn int(v: u64) -> Value {
    Value::Integer(v as i64)
}

fn floats(v: &[f64]) -> Value {
    Value::Array(v.iter().map(|x| Value::Float(*x)).collect())
}

fn world_flat(spec: &WorldSpec) -> Flat {
    let mut m = Flat::new();
    let mut put = |k: &str, v: Value| {
        m.insert(format!("world.{k}"), v);
    };
    match spec {
        WorldSpec::Dirac { point } => {
            put("family", Value::String("dirac".into()));
            put("point", floats(point));
        }
        WorldSpec::IsotropicGaussian { dim, scale, mean } => {
            put("family", Value::String("isotropic-gaussian".into()));
            put("dim", int(*dim as u64));
            put("scale", Value::Float(*scale));
            if let Some(mean) = mean {
                put("mean", floats(mean));
            }
        }
        WorldSpec::Mixture { dim, conditions, components_per_condition, radius, scale } => {
            put("family", Value::String("mixture".into()));
            put("dim", int(*dim as u64));
            put("conditions", int(*conditions as u64));
            put("components_per_condition", int(*components_per_condition as u64));
            put("radius", Value::Float(*radius));
            put("scale", Value::Float(*scale));
        }
        WorldSpec::TwoMoons { scale, points_per_moon } => {
            put("family", Value::String("two-moons".into()));
            put("scale", Value::Float(*scale));
            put("points_per_moon", int(*points_per_moon as u64));
        }
    }
    m
}

fn family_defaults(family: &str) -> Option<WorldSpec> {
    Some(match family {
        "dirac" => WorldSpec::Dirac { point: vec![0.0, 0.0] },
        "isotropic-gaussian" => WorldSpec::IsotropicGaussian { dim: 2, scale: 1.0, mean: None },
        "mixture" => default_world(),
        "two-moons" => WorldSpec::TwoMoons { scale: 0.05, points_per_moon: 8 },
        _ => return None,
    })
}

impl ExperimentConfig {
    /// Every resolved key. Absent optional values are omitted.
    pub fn to_flat(&self) -> Flat {
        let mut m = world_flat(&self.world);
        let mut put = |k: &str, v: Value| {
            m.insert(k.to_string(), v);
        };
        let s = |x: &str| Value::String(x.to_string());
        let f = Value::Float;
        let b = Value::Boolean;
        put("experiment.name", s(&self.name));
        put("experiment.out_dir", s(&self.out_dir.to_string_lossy()));
        put("experiment.seed", int(self.seed));
        put("model.hidden", Value::Array(self.hidden.iter().map(|h| int(*h as u64)).collect()));
        put("model.time_freqs", int(self.time_freqs as u64));
        let pre = &self.pretrain;
        put("lora.rank", int(pre.rank as u64));
        put("lora.alpha", f(pre.alpha));
        put("pretrain.steps", int(pre.steps as u64));
        put("pretrain.batch_size", int(pre.batch_size as u64));
        put("pretrain.learning_rate", f(pre.optimizer.lr));
        put("pretrain.weight_decay", f(pre.optimizer.weight_decay));
        put("pretrain.max_grad_norm", f(pre.optimizer.max_grad_norm.unwrap_or(0.0)));
        put("pretrain.cond_dropout", f(pre.cond_dropout));
        let post = &self.posttrain;
        let g = &post.grpo;
        put("sample.num_steps", int(g.t_train as u64));
        put("sample.guidance_scale", f(post.guidance_scale));
        put("sample.noise_level", f(post.noise_level));
        put("sample.num_image_per_prompt", int(g.group_size as u64));
        put("sample.prompts_per_batch", int(g.prompts_per_batch as u64));
        put("sample.same_latent", b(post.same_latent));
        put("train.iterations", int(g.iterations as u64));
        put("train.beta", f(g.beta));
        put("train.clip_range", f(g.clip_eps));
        put("train.rho", f(g.rho));
        put("train.timestep_fraction", f(g.timestep_fraction));
        put("train.learning_rate", f(post.optimizer.lr));
        put("train.weight_decay", f(post.optimizer.weight_decay));
        put("train.max_grad_norm", f(post.optimizer.max_grad_norm.unwrap_or(0.0)));
        put("train.ema_decay", f(post.ema_decay));
        put("train.ema_update_interval", int(post.ema_interval));
        put("train.inner_epochs", int(g.inner_epochs as u64));
        put("train.stepwise_advantage", b(g.stepwise_advantage));
        put("train.checkpoint_every", int(self.checkpoint_every as u64));
        let p = &post.probe;
        put("reward.num_probes", int(p.k as u64));
        put("reward.delta", f(p.delta));
        if let Some(t) = &p.probe_times {
            put("reward.probe_times", floats(t));
        }
        if let Some(w) = &p.weights {
            put("reward.weights", floats(w));
        }
        put("reward.cfg", b(p.use_cfg));
        put("reward.cfg_scale", f(p.cfg_scale));
        put(
            "reward.mode",
            s(match p.mode {
                ScoreMode::Online => "online",
                ScoreMode::Offline => "offline",
            }),
        );
        put("reward.normalize", b(p.normalize));
        let e = &post.eval;
        put("eval.every", int(e.every as u64));
        put("eval.num_steps", int(e.num_steps as u64));
        put("eval.guidance_scale", f(e.guidance_scale));
        put("eval.samples_per_prompt", int(e.samples_per_prompt as u64));
        put("eval.seed", int(e.seed));
        let c = &self.collapse;
        put("collapse.iterations", int(c.iterations as u64));
        put("collapse.margin", f(c.margin));
        put("collapse.spread_fraction", f(c.spread_fraction));
        put("collapse.window", int(c.window as u64));
        put("collapse.ceiling_samples", int(c.ceiling_samples as u64));
        let r = &self.rationale;
        put("rationale.samples_per_prompt", int(r.samples_per_prompt as u64));
        put("rationale.low_steps", int(r.low_steps as u64));
        put("rationale.high_steps", int(r.high_steps as u64));
        put("rationale.guidance_scale", f(r.guidance_scale));
        put("rationale.bootstrap", int(r.bootstrap as u64));
        put("rationale.confidence", f(r.confidence));
        put("oracle.marginal_samples", int(self.oracle.marginal_samples as u64));
        put("oracle.marginal_steps", int(self.oracle.marginal_steps as u64));
        m
    }

    /// Builds a config from a complete key map.
    pub fn from_flat(map: &Flat) -> Result<Self, ConfigError> {
        let mut r = Reader { map, errors: Vec::new(), seen: Vec::new() };
        let world = r.world();
        let seed = r.u64("experiment.seed");
        let clip = |v: f64| if v > 0.0 { Some(v) } else { None };
        let pretrain = PretrainConfig {
            steps: r.usize("pretrain.steps"),
            batch_size: r.usize("pretrain.batch_size"),
            optimizer: AdamWConfig {
                lr: r.f64("pretrain.learning_rate"),
                weight_decay: r.f64("pretrain.weight_decay"),
                max_grad_norm: clip(r.f64("pretrain.max_grad_norm")),
                ..AdamWConfig::default()
            },
            cond_dropout: r.f64("pretrain.cond_dropout"),
            rank: r.usize("lora.rank"),
            alpha: r.f64("lora.alpha"),
            seed,
        };
        let grpo = GrpoConfig {
            group_size: r.usize("sample.num_image_per_prompt"),
            clip_eps: r.f64("train.clip_range"),
            beta: r.f64("train.beta"),
            rho: r.f64("train.rho"),
            t_train: r.usize("sample.num_steps"),
            prompts_per_batch: r.usize("sample.prompts_per_batch"),
            iterations: r.usize("train.iterations"),
            seed,
            stepwise_advantage: r.bool("train.stepwise_advantage"),
            inner_epochs: r.usize("train.inner_epochs"),
            timestep_fraction: r.f64("train.timestep_fraction"),
        };
        let mode = match r.string("reward.mode").as_str() {
            "online" => ScoreMode::Online,
            "offline" => ScoreMode::Offline,
            other => {
                r.errors.push(format!("`reward.mode`: expected \"online\" or \"offline\", got {other:?}"));
                ScoreMode::Online
            }
        };
        let probe = ProbeConfig {
            k: r.usize("reward.num_probes"),
            delta: r.f64("reward.delta"),
            probe_times: r.opt_floats("reward.probe_times"),
            weights: r.opt_floats("reward.weights"),
            use_cfg: r.bool("reward.cfg"),
            cfg_scale: r.f64("reward.cfg_scale"),
            mode,
            normalize: r.bool("reward.normalize"),
        };
        let posttrain = PosttrainConfig {
            grpo,
            noise_level: r.f64("sample.noise_level"),
            guidance_scale: r.f64("sample.guidance_scale"),
            same_latent: r.bool("sample.same_latent"),
            probe,
            optimizer: AdamWConfig {
                lr: r.f64("train.learning_rate"),
                weight_decay: r.f64("train.weight_decay"),
                max_grad_norm: clip(r.f64("train.max_grad_norm")),
                ..AdamWConfig::default()
            },
            ema_decay: r.f64("train.ema_decay"),
            ema_interval: r.u64("train.ema_update_interval"),
            eval: EvalConfig {
                every: r.usize("eval.every"),
                num_steps: r.usize("eval.num_steps"),
                guidance_scale: r.f64("eval.guidance_scale"),
                samples_per_prompt: r.usize("eval.samples_per_prompt"),
                seed: r.u64("eval.seed"),
            },
        };
        let cfg = Self {
            name: r.string("experiment.name"),
            out_dir: PathBuf::from(r.string("experiment.out_dir")),
            seed,
            world,
            hidden: r.usizes("model.hidden"),
            time_freqs: r.usize("model.time_freqs"),
            pretrain,
            posttrain,
            checkpoint_every: r.usize("train.checkpoint_every"),
            collapse: CollapseConfig {
                iterations: r.usize("collapse.iterations"),
                margin: r.f64("collapse.margin"),
                spread_fraction: r.f64("collapse.spread_fraction"),
                window: r.usize("collapse.window"),
                ceiling_samples: r.usize("collapse.ceiling_samples"),
            },
            rationale: RationaleConfig {
                samples_per_prompt: r.usize("rationale.samples_per_prompt"),
                low_steps: r.usize("rationale.low_steps"),
                high_steps: r.usize("rationale.high_steps"),
                guidance_scale: r.f64("rationale.guidance_scale"),
                bootstrap: r.usize("rationale.bootstrap"),
                confidence: r.f64("rationale.confidence"),
            },
            oracle: OracleConfig {
                marginal_samples: r.usize("oracle.marginal_samples"),
                marginal_steps: r.usize("oracle.marginal_steps"),
            },
        };
        for key in map.keys() {
            if !r.seen.contains(key) {
                if is_known(key) {
                    r.errors.push(format!("`{key}` is not a parameter of world family {}", family_name(&cfg.world)));
                } else {
                    r.errors.push(format!("unknown key `{key}`"));
                }
            }
        }
        let mut errors = r.errors;
        if errors.is_empty() {
            errors.extend(cfg.semantic_errors());
        }
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError(errors))
        }
    }

    fn semantic_errors(&self) -> Vec<String> {
        let mut out = Vec::new();
        let world = match make_world(&self.world) {
            Ok(w) => Some(w),
            Err(e) => {
                out.push(format!("`world.*`: {e}"));
                None
            }
        };
        if let Some(w) = &world {
            if let Err(e) = self.arch(w).validate() {
                out.push(format!("`model.*`: {e}"));
            }
        }
        if let Err(e) = self.posttrain.grpo.validate() {
            out.push(format!("`train.*` / `sample.*`: {e}"));
        }
        if let Err(e) = self.posttrain.probe.validate() {
            out.push(format!("`reward.*`: {e}"));
        }
        if self.posttrain.eval.every == 0 {
            out.push("`eval.every` must be >= 1".into());
        }
        if !(self.posttrain.ema_decay > 0.0 && self.posttrain.ema_decay <= 1.0) {
            out.push(format!("`train.ema_decay` {} outside (0, 1]", self.posttrain.ema_decay));
        }
        if !(self.rationale.confidence > 0.0 && self.rationale.confidence < 1.0) {
            out.push(format!("`rationale.confidence` {} outside (0, 1)", self.rationale.confidence));
        }
        if self.rationale.samples_per_prompt < 2 || self.rationale.bootstrap == 0 {
            out.push("`rationale.samples_per_prompt` must be >= 2 and `rationale.bootstrap` >= 1".into());
        }
        if self.collapse.window == 0 {
            out.push("`collapse.window` must be >= 1".into());
        }
        if self.oracle.marginal_steps == 0 {
            out.push("`oracle.marginal_steps` must be >= 1".into());
        }
        out
    }

    /// Serializes every resolved key, one `key = value` line each.
    pub fn to_toml(&self) -> String {
        render(&self.to_flat())
    }

    pub fn world(&self) -> selfconf_core::Result<ToyWorld> {
        make_world(&self.world)
    }

    pub fn arch(&self, world: &ToyWorld) -> Arch {
        Arch {
            data_dim: world.dim,
            cond_dim: world.num_conditions(),
            time_freqs: self.time_freqs,
            hidden: self.hidden.clone(),
        }
    }
}

fn family_name(spec: &WorldSpec) -> &'static str {
    match spec {
        WorldSpec::Dirac { .. } => "dirac",
        WorldSpec::IsotropicGaussian { .. } => "isotropic-gaussian",
        WorldSpec::Mixture { .. } => "mixture",
        WorldSpec::TwoMoons { .. } => "two-moons",
    }
}

pub fn render(flat: &Flat) -> String {
    let mut s = String::new();
    for (k, v) in flat {
        s.push_str(&format!("{k} = {v}\n"));
    }
    s
}

struct Reader<'a> {
    map: &'a Flat,
    errors: Vec<String>,
    seen: Vec<String>,
}

impl Reader<'_> {
    fn get(&mut self, key: &str) -> Option<&Value> {
        self.seen.push(key.to_string());
        let v = self.map.get(key);
        if v.is_none() {
            self.errors.push(format!("missing key `{key}`"));
        }
        v
    }

    fn bad(&mut self, key: &str, want: &str, v: &Value) {
        self.errors.push(format!("`{key}`: expected {want}, got {v}"));
    }

    fn f64(&mut self, key: &str) -> f64 {
        match self.get(key).cloned() {
            Some(Value::Float(x)) => x,
            Some(Value::Integer(i)) => i as f64,
            Some(v) => {
                self.bad(key, "a number", &v);
                0.0
            }
            None => 0.0,
        }
    }

    fn u64(&mut self, key: &str) -> u64 {
        match self.get(key).cloned() {
            Some(Value::Integer(i)) if i >= 0 => i as u64,
            Some(v) => {
                self.bad(key, "a non-negative integer", &v);
                0
            }
            None => 0,
        }
    }

    fn usize(&mut self, key: &str) -> usize {
        self.u64(key) as usize
    }

    fn bool(&mut self, key: &str) -> bool {
        match self.get(key).cloned() {
            Some(Value::Boolean(b)) => b,
            Some(v) => {
                self.bad(key, "true or false", &v);
                false
            }
            None => false,
        }
    }

    fn string(&mut self, key: &str) -> String {
        match self.get(key).cloned() {
            Some(Value::String(s)) => s,
            Some(v) => {
                self.bad(key, "a string", &v);
                String::new()
            }
            None => String::new(),
        }
    }

    fn floats(&mut self, key: &str) -> Vec<f64> {
        match self.get(key).cloned() {
            Some(Value::Array(a)) => {
                let mut out = Vec::new();
                for v in &a {
                    match v {
                        Value::Float(x) => out.push(*x),
                        Value::Integer(i) => out.push(*i as f64),
                        other => {
                            self.bad(key, "an array of numbers", other);
                            return out;
                        }
                    }
                }
                out
            }
            Some(v) => {
                self.bad(key, "an array of numbers", &v);
                Vec::new()
            }
            None => Vec::new(),
        }
    }

    fn opt_floats(&mut self, key: &str) -> Option<Vec<f64>> {
        if self.map.contains_key(key) {
            let v = self.floats(key);
            // an empty array selects the default
            (!v.is_empty()).then_some(v)
        } else {
            self.seen.push(key.to_string());
            None
        }
    }

    fn usizes(&mut self, key: &str) -> Vec<usize> {
        match self.get(key).cloned() {
            Some(Value::Array(a)) => {
                let mut out = Vec::new();
                for v in &a {
                    match v {
                        Value::Integer(i) if *i >= 0 => out.push(*i as usize),
                        other => {
                            self.bad(key, "an array of non-negative integers", other);
                            return out;
                        }
                    }
                }
                out
            }
            Some(v) => {
                self.bad(key, "an array of non-negative integers", &v);
                Vec::new()
            }
            None => Vec::new(),
        }
    }

    fn world(&mut self) -> WorldSpec {
        let family = self.string("world.family");
        match family.as_str() {
            "dirac" => WorldSpec::Dirac { point: self.floats("world.point") },
            "isotropic-gaussian" => WorldSpec::IsotropicGaussian {
                dim: self.usize("world.dim"),
                scale: self.f64("world.scale"),
                mean: self.opt_floats("world.mean"),
            },
            "mixture" => WorldSpec::Mixture {
                dim: self.usize("world.dim"),
                conditions: self.usize("world.conditions"),
                components_per_condition: self.usize("world.components_per_condition"),
                radius: self.f64("world.radius"),
                scale: self.f64("world.scale"),
            },
            "two-moons" => WorldSpec::TwoMoons {
                scale: self.f64("world.scale"),
                points_per_moon: self.usize("world.points_per_moon"),
            },
            other => {
                self.errors.push(format!(
                    "`world.family`: expected dirac, isotropic-gaussian, mixture or two-moons, got {other:?}"
                ));
                // keep reading so the remaining world keys are not reported as unknown
                for k in ["world.dim", "world.conditions", "world.components_per_condition", "world.radius", "world.scale", "world.mean", "world.point", "world.points_per_moon"] {
                    self.seen.push(k.to_string());
                }
                default_world()
            }
        }
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Flat) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

/// Parses TOML text into dotted keys.
pub fn parse_flat(text: &str) -> Result<Flat, ConfigError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError(vec![format!("TOML syntax: {e}")]))?;
    let mut out = Flat::new();
    flatten("", &table, &mut out);
    Ok(out)
}

/// Parses `key=value`; the value is read as a TOML literal, falling back to
/// a bare string.
pub fn parse_override(s: &str) -> Result<(String, Value), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("override {s:?} is not key=value"))?;
    let (k, v) = (k.trim(), v.trim());
    let value = format!("x = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("x"))
        .unwrap_or_else(|| Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

/// Inputs to resolution besides the config file.
#[derive(Debug, Clone, Default)]
pub struct CliOverrides {
    pub overrides: Vec<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Resolves defaults, an optional config file and command-line overrides.
/// A config file must declare `world.family`.
pub fn resolve(file_text: Option<&str>, cli: &CliOverrides) -> Result<ExperimentConfig, ConfigError> {
    let mut errors = Vec::new();
    let mut user = Flat::new();
    if let Some(text) = file_text {
        let file = parse_flat(text)?;
        if !file.contains_key("world.family") {
            errors.push("missing key `world.family`; a config file must name its world".into());
        }
        user.extend(file);
    }
    for o in &cli.overrides {
        match parse_override(o) {
            Ok((k, v)) => {
                user.insert(k, v);
            }
            Err(e) => errors.push(e),
        }
    }
    if let Some(seed) = cli.seed {
        user.insert("experiment.seed".into(), int(seed));
    }
    if let Some(out) = &cli.out {
        user.insert("experiment.out_dir".into(), Value::String(out.to_string_lossy().into_owned()));
    }
    for k in user.keys() {
        if !is_known(k) {
            errors.push(format!("unknown key `{k}`"));
        }
    }
    let mut base = ExperimentConfig::default().to_flat();
    if let Some(Value::String(fam)) = user.get("world.family") {
        if let Some(spec) = family_defaults(fam) {
            base.retain(|k, _| !k.starts_with("world."));
            base.extend(world_flat(&spec));
        }
    }
    base.extend(user.into_iter().filter(|(k, _)| is_known(k)));
    match ExperimentConfig::from_flat(&base) {
        Ok(cfg) if errors.is_empty() => Ok(cfg),
        Ok(_) => Err(ConfigError(errors)),
        Err(ConfigError(more)) => {
            errors.extend(more);
            Err(ConfigError(errors))
        }
    }
}

/// Reads and resolves a config file.
pub fn load(path: Option<&Path>, cli: &CliOverrides) -> Result<ExperimentConfig, ConfigError> {
    let text = match path {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| ConfigError(vec![format!("{}: {e}", p.display())]))?),
        None => None,
    };
    resolve(text.as_deref(), cli)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let again = resolve(Some(&cfg.to_toml()), &CliOverrides::default()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn every_problem_is_listed() {
        let text = "world.family = \"mixture\"\ntrain.betta = 1.0\nsample.noise_level = \"high\"\nfoo = 1\n";
        let err = resolve(Some(text), &CliOverrides::default()).unwrap_err();
        let all = err.to_string();
        assert!(all.contains("train.betta") && all.contains("sample.noise_level") && all.contains("`foo`"), "{all}");
    }

    #[test]
    fn family_switch_uses_family_defaults() {
        let cli = CliOverrides { overrides: vec!["world.family=isotropic-gaussian".into()], ..Default::default() };
        let cfg = resolve(None, &cli).unwrap();
        assert_eq!(cfg.world, WorldSpec::IsotropicGaussian { dim: 2, scale: 1.0, mean: None });
        let cli = CliOverrides { overrides: vec!["world.family=dirac".into(), "world.radius=2".into()], ..Default::default() };
        assert!(resolve(None, &cli).unwrap_err().to_string().contains("world.radius"));
    }

    #[test]
    fn override_values_are_typed() {
        assert_eq!(parse_override("train.beta=1e3").unwrap().1, Value::Float(1000.0));
        assert_eq!(parse_override("reward.mode=offline").unwrap().1, Value::String("offline".into()));
        assert_eq!(parse_override("model.hidden=[8, 8]").unwrap().1.as_array().unwrap().len(), 2);
        assert!(parse_override("no-equals").is_err());
    }
}
