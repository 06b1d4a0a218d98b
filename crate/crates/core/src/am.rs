//! Activation maximization: gradient ascent on one class logit, either
//! directly over the input coordinates or over the latent code of a trained
//! decoder.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierModel;
use crate::diffgraph::{sgd_step, std_dev, AdamState, Direction, Tape, Tensor};
use crate::error::{contract, Error, Result};
use crate::generators::LatentGenerator;
use crate::io::write_ply;
use crate::shapes::{class_average_cloud, derive_seed, random_cloud_uniform, AverageSource, DatasetSplit, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AmMethod {
    Zero,
    Random,
    Average,
    Instance,
    Ae,
    Aed,
    Naed,
}

impl AmMethod {
    pub const ALL: [AmMethod; 7] =
        [AmMethod::Zero, AmMethod::Random, AmMethod::Average, AmMethod::Instance, AmMethod::Ae, AmMethod::Aed, AmMethod::Naed];

    pub fn name(self) -> &'static str {
        match self {
            AmMethod::Zero => "zero",
            AmMethod::Random => "random",
            AmMethod::Average => "average",
            AmMethod::Instance => "instance",
            AmMethod::Ae => "ae",
            AmMethod::Aed => "aed",
            AmMethod::Naed => "naed",
        }
    }

    pub fn is_latent(self) -> bool {
        matches!(self, AmMethod::Ae | AmMethod::Aed | AmMethod::Naed)
    }
}

impl fmt::Display for AmMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AmMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AmMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Contract(format!("unknown AM method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmConfig {
    pub target_class: usize,
    pub method: AmMethod,
    pub lr: f64,
    pub iterations: usize,
    /// Stuck window `W`, in iterations.
    pub stuck_window: usize,
    /// Minimum activation gain over the window before a kick.
    pub stuck_eps: f64,
    /// Kick noise as a multiple of `std(z)`.
    pub kick_sigma: f64,
    /// Initial latent jitter as a multiple of `std(z₀)`.
    pub init_jitter: f64,
    pub optimizer: Optimizer,
    pub average_source: AverageSource,
    pub seed: u64,
}

impl AmConfig {
    pub fn new(target_class: usize, method: AmMethod) -> Self {
        Self {
            target_class,
            method,
            lr: 5e-6,
            iterations: 20_000,
            stuck_window: 500,
            stuck_eps: 1e-4,
            kick_sigma: 0.1,
            init_jitter: 0.05,
            optimizer: Optimizer::Adam,
            average_source: AverageSource::ClassTest,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return contract(format!("AM learning rate must be positive, got {}", self.lr));
        }
        if self.iterations == 0 {
            return contract("AM needs at least one iteration");
        }
        if self.stuck_window == 0 || self.stuck_window >= self.iterations {
            return contract(format!("stuck window {} must be in 1..{}", self.stuck_window, self.iterations));
        }
        if !(self.stuck_eps >= 0.0) || !(self.kick_sigma >= 0.0) || !(self.init_jitter >= 0.0) {
            return contract("stuck tolerance, kick and jitter scales must be ≥ 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmResult {
    #[serde(skip)]
    pub cloud: PointCloud,
    /// Target activation before the first step and after every step.
    pub activation_trace: Vec<f64>,
    /// Iterations at which a stuck kick replaced the gradient step.
    pub kick_events: Vec<usize>,
    pub init_descriptor: String,
    pub config: AmConfig,
    /// Final latent code for latent methods.
    pub latent: Option<Vec<f64>>,
}

impl AmResult {
    pub fn initial_activation(&self) -> f64 {
        self.activation_trace[0]
    }

    pub fn final_activation(&self) -> f64 {
        *self.activation_trace.last().expect("trace is never empty")
    }

    /// Running maximum of the trace.
    pub fn envelope(&self) -> Vec<f64> {
        self.activation_trace
            .iter()
            .scan(f64::NEG_INFINITY, |m, &a| {
                *m = m.max(a);
                Some(*m)
            })
            .collect()
    }

    pub fn sidecar_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        v["initial_activation"] = self.initial_activation().into();
        v["final_activation"] = self.final_activation().into();
        Ok(serde_json::to_string_pretty(&v)?)
    }

    /// Writes `<stem>.ply` and `<stem>.json`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        write_ply(&dir.join(format!("{stem}.ply")), &self.cloud)?;
        std::fs::write(dir.join(format!("{stem}.json")), self.sidecar_json()?)?;
        Ok(())
    }
}

/// `max(trace[t−W..=t]) − trace[t−W] < eps`, checked once `W` iterations
/// have passed since the previous kick (or the start).
fn is_stuck(trace: &[f64], t: usize, last_kick: usize, window: usize, eps: f64) -> bool {
    if t < last_kick + window {
        return false;
    }
    let span = &trace[t - window..=t];
    let gain = span.iter().copied().fold(f64::NEG_INFINITY, f64::max) - span[0];
    gain < eps
}

struct Ascent {
    optimizer: Optimizer,
    lr: f64,
    adam: AdamState,
}

impl Ascent {
    fn new(config: &AmConfig, len: usize) -> Self {
        Self { optimizer: config.optimizer, lr: config.lr, adam: AdamState::with_lens(config.lr, [len]) }
    }

    fn step(&mut self, x: &mut [f64], grad: Vec<f64>) -> Result<()> {
        let grads = [grad];
        match self.optimizer {
            Optimizer::Adam => self.adam.step_slices(&mut [x], &grads, Direction::Ascend),
            Optimizer::Sgd => sgd_step(&mut [x], &grads, self.lr, Direction::Ascend),
        }
    }
}

fn check_target(model: &ClassifierModel, config: &AmConfig) -> Result<()> {
    config.validate()?;
    if config.target_class >= model.classes() {
        return contract(format!("target class {} out of range for {} classes", config.target_class, model.classes()));
    }
    Ok(())
}

/// Starting cloud for an input-space method, and a description of it.
pub fn input_init(split: &DatasetSplit, config: &AmConfig) -> Result<(PointCloud, String)> {
    let n = split.points_per_cloud().ok_or_else(|| Error::Contract("dataset is empty".into()))?;
    let label = config.target_class;
    match config.method {
        AmMethod::Zero => Ok((PointCloud::origin(n), "zero".into())),
        AmMethod::Random => {
            let s = derive_seed(config.seed, 1);
            Ok((random_cloud_uniform(1.0, n, s)?, format!("uniform(-1,1) seed={s}")))
        }
        AmMethod::Average => {
            Ok((class_average_cloud(split, label, config.average_source)?, format!("average({:?}) class={label}", config.average_source)))
        }
        AmMethod::Instance => {
            let pool: Vec<_> = split.test_of_class(label).collect();
            if pool.is_empty() {
                return contract(format!("class {label} has no test instances"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 2));
            let pick = pool[rng.random_range(0..pool.len())];
            Ok((pick.cloud.clone(), format!("instance id={}", pick.instance_id)))
        }
        m => contract(format!("`{m}` is not an input-space method")),
    }
}

/// Ascent over the `n × 3` input coordinates. No renormalization.
pub fn am_input_space(model: &ClassifierModel, split: &DatasetSplit, config: &AmConfig) -> Result<AmResult> {
    check_target(model, config)?;
    let (init, init_descriptor) = input_init(split, config)?;
    let mut x = init.flat();
    let mut opt = Ascent::new(config, x.len());
    let mut trace = Vec::with_capacity(config.iterations + 1);
    for t in 0..=config.iterations {
        let (act, grad) = model.target_activation(&PointCloud::from_flat(&x)?, config.target_class)?;
        trace.push(act);
        if t == config.iterations {
            break;
        }
        opt.step(&mut x, grad)?;
    }
    Ok(AmResult {
        cloud: PointCloud::from_flat(&x)?,
        activation_trace: trace,
        kick_events: Vec::new(),
        init_descriptor,
        config: config.clone(),
        latent: None,
    })
}

fn add_noise(z: &mut [f64], scale: f64, rng: &mut ChaCha8Rng) {
    let sd = std_dev(z);
    let sigma = if sd > 0.0 { scale * sd } else { scale };
    if let Ok(normal) = Normal::new(0.0, sigma) {
        z.iter_mut().for_each(|v| *v += normal.sample(rng));
    }
}

fn latent_activation(model: &ClassifierModel, gen: &dyn LatentGenerator, z: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let zv = tape.variable(&Tensor::new(vec![1, z.len()], z.to_vec())?)?;
    let cloud = gen.decode_on(&mut tape, zv)?;
    let bound = model.bind(&mut tape, false)?;
    let taps = model.forward_on(&mut tape, &bound, cloud, 1)?;
    let logit = tape.pick(taps.logits, target)?;
    let value = tape.scalar(logit)?;
    Ok((value, tape.backward(logit)?.wrt(zv)))
}

/// Ascent over the latent code of `gen`, starting from the encoded class
/// average plus jitter. Kicks `z` with Gaussian noise when the activation
/// stalls; a kick takes the place of that iteration's gradient step. If
/// `std(z)` is zero the noise scale is used as an absolute sigma.
pub fn am_latent(model: &ClassifierModel, gen: &dyn LatentGenerator, split: &DatasetSplit, config: &AmConfig) -> Result<AmResult> {
    check_target(model, config)?;
    if !config.method.is_latent() {
        return contract(format!("`{}` is not a latent method", config.method));
    }
    let avg = class_average_cloud(split, config.target_class, config.average_source)?;
    let mut z = gen.encode(&avg)?;
    if z.len() != gen.latent_dim() {
        return contract(format!("encoder returned {} values for latent size {}", z.len(), gen.latent_dim()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 3));
    if config.init_jitter > 0.0 {
        add_noise(&mut z, config.init_jitter, &mut rng);
    }
    let init_descriptor = format!("encode(average({:?})) jitter={}", config.average_source, config.init_jitter);
    let mut opt = Ascent::new(config, z.len());
    let mut trace = Vec::with_capacity(config.iterations + 1);
    let mut kicks = Vec::new();
    let mut last_kick = 0;
    for t in 0..=config.iterations {
        let (act, grad) = latent_activation(model, gen, &z, config.target_class)?;
        trace.push(act);
        if t == config.iterations {
            break;
        }
        if is_stuck(&trace, t, last_kick, config.stuck_window, config.stuck_eps) {
            add_noise(&mut z, config.kick_sigma, &mut rng);
            kicks.push(t);
            last_kick = t;
        } else {
            opt.step(&mut z, grad)?;
        }
    }
    Ok(AmResult {
        cloud: gen.decode(&z)?,
        activation_trace: trace,
        kick_events: kicks,
        init_descriptor,
        config: config.clone(),
        latent: Some(z),
    })
}

/// `count` runs with seeds `seed, seed + 1, …`.
pub fn am_batch(
    model: &ClassifierModel,
    generator: Option<&dyn LatentGenerator>,
    split: &DatasetSplit,
    config: &AmConfig,
    count: usize,
) -> Result<Vec<AmResult>> {
    if count == 0 {
        return contract("AM batch count must be ≥ 1");
    }
    (0..count as u64).map(|i| am_single(model, generator, split, &AmConfig { seed: config.seed + i, ..config.clone() })).collect()
}

/// Dispatches on the method.
pub fn am_single(model: &ClassifierModel, generator: Option<&dyn LatentGenerator>, split: &DatasetSplit, config: &AmConfig) -> Result<AmResult> {
    if config.method.is_latent() {
        let gen = generator.ok_or_else(|| Error::Contract(format!("method `{}` needs a trained generator checkpoint", config.method)))?;
        am_latent(model, gen, split, config)
    } else {
        am_input_space(model, split, config)
    }
}
