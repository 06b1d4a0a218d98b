//! Generative priors for latent-space AM: a point-cloud autoencoder (AE),
//! the AE trained against a discriminator with a feature loss (AED), and the
//! AED variant with encoder parameter noise and a second, global feature
//! loss (NAED).

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Role};
use crate::classifier::{stack_clouds, ClassifierModel};
use crate::diffgraph::{AdamState, Direction, Tape, Tensor, Var};
use crate::error::{contract, Error, Result};
use crate::metrics::chamfer;
use crate::nn::{fingerprint, flatten_bound, perturb, Mlp};
use crate::shapes::{derive_seed, DatasetSplit, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenKind {
    Ae,
    Aed,
    Naed,
}

impl GenKind {
    pub const ALL: [GenKind; 3] = [GenKind::Ae, GenKind::Aed, GenKind::Naed];

    pub fn name(self) -> &'static str {
        match self {
            GenKind::Ae => "ae",
            GenKind::Aed => "aed",
            GenKind::Naed => "naed",
        }
    }
}

impl fmt::Display for GenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GenKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GenKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Contract(format!("unknown generator kind `{s}` (expected ae, aed or naed)")))
    }
}

/// Anything that maps a latent vector to a point cloud on a tape. AM in
/// latent space only needs this much.
pub trait LatentGenerator {
    fn latent_dim(&self) -> usize;

    fn encode(&self, cloud: &PointCloud) -> Result<Vec<f64>>;

    /// Decodes `z: [1, latent]` into an `[n, 3]` node.
    fn decode_on(&self, tape: &mut Tape, z: Var) -> Result<Var>;

    fn decode(&self, z: &[f64]) -> Result<PointCloud> {
        let mut tape = Tape::new();
        let z = tape.constant(&Tensor::new(vec![1, z.len()], z.to_vec())?)?;
        let out = self.decode_on(&mut tape, z)?;
        PointCloud::from_flat(tape.value(out))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AeConfig {
    pub points: usize,
    /// Shared per-point widths; the last one is the latent size.
    pub encoder: Vec<usize>,
    /// Hidden widths of the decoder; the output width is `points · 3`.
    pub decoder: Vec<usize>,
}

impl AeConfig {
    pub fn new(points: usize) -> Self {
        Self { points, encoder: vec![64, 128], decoder: vec![256, 512] }
    }

    pub fn latent_dim(&self) -> usize {
        *self.encoder.last().expect("validated")
    }

    pub fn validate(&self) -> Result<()> {
        if self.points == 0 || self.encoder.is_empty() || self.encoder.iter().chain(&self.decoder).any(|&w| w == 0) {
            return contract(format!("invalid autoencoder layout {self:?}"));
        }
        Ok(())
    }

    pub fn descriptor(&self) -> Vec<u32> {
        let mut d = vec![self.points as u32, self.encoder.len() as u32];
        d.extend(self.encoder.iter().map(|&w| w as u32));
        d.push(self.decoder.len() as u32);
        d.extend(self.decoder.iter().map(|&w| w as u32));
        d
    }

    pub fn from_descriptor(d: &[u32]) -> Result<Self> {
        let (points, rest) = d.split_first().ok_or_else(|| Error::Contract("empty autoencoder descriptor".into()))?;
        let (encoder, decoder) = split_widths(rest)?;
        let cfg = Self { points: *points as usize, encoder, decoder };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `[n_a, a.., n_b, b..]`.
fn split_widths(d: &[u32]) -> Result<(Vec<usize>, Vec<usize>)> {
    let bad = || Error::Contract(format!("malformed width descriptor {d:?}"));
    let na = *d.first().ok_or_else(bad)? as usize;
    let a = d.get(1..1 + na).ok_or_else(bad)?.iter().map(|&w| w as usize).collect();
    let nb = *d.get(1 + na).ok_or_else(bad)? as usize;
    let b = d.get(2 + na..2 + na + nb).ok_or_else(bad)?.iter().map(|&w| w as usize).collect();
    if d.len() != 2 + na + nb {
        return Err(bad());
    }
    Ok((a, b))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderModel {
    config: AeConfig,
    pub encoder: Mlp,
    pub decoder: Mlp,
}

/// Autoencoder parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundAutoencoder {
    pub encoder: Vec<(Var, Var)>,
    pub decoder: Vec<(Var, Var)>,
}

impl BoundAutoencoder {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = flatten_bound(&self.encoder);
        v.extend(flatten_bound(&self.decoder));
        v
    }
}

impl AutoencoderModel {
    pub fn new(config: AeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (enc, dec) = Self::widths(&config);
        Ok(Self { encoder: Mlp::init(&enc, &mut rng), decoder: Mlp::init(&dec, &mut rng), config })
    }

    pub fn zeros(config: AeConfig) -> Result<Self> {
        config.validate()?;
        let (enc, dec) = Self::widths(&config);
        Ok(Self { encoder: Mlp::zeros(&enc), decoder: Mlp::zeros(&dec), config })
    }

    fn widths(config: &AeConfig) -> (Vec<usize>, Vec<usize>) {
        let enc = std::iter::once(3).chain(config.encoder.iter().copied()).collect();
        let mut dec = vec![config.latent_dim()];
        dec.extend(&config.decoder);
        dec.push(config.points * 3);
        (enc, dec)
    }

    pub fn config(&self) -> &AeConfig {
        &self.config
    }

    pub fn points(&self) -> usize {
        self.config.points
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundAutoencoder> {
        Ok(BoundAutoencoder { encoder: self.encoder.bind(tape, trainable)?, decoder: self.decoder.bind(tape, trainable)? })
    }

    /// `x: [clouds·n, 3] → [clouds, latent]`. ReLU after every encoder layer
    /// but the last, then max-pool.
    pub fn encode_on(&self, tape: &mut Tape, bound: &BoundAutoencoder, x: Var, clouds: usize) -> Result<Var> {
        let rows = tape.shape(x)[0];
        if clouds == 0 || !rows.is_multiple_of(clouds) {
            return contract(format!("{rows} rows do not split into {clouds} clouds"));
        }
        let h = Mlp::forward(tape, &bound.encoder, x, false)?;
        tape.max_reduce_segments(h, rows / clouds)
    }

    /// `z: [clouds, latent] → [clouds·n, 3]`.
    pub fn decode_bound(&self, tape: &mut Tape, bound: &BoundAutoencoder, z: Var) -> Result<Var> {
        let clouds = tape.shape(z)[0];
        let out = Mlp::forward(tape, &bound.decoder, z, false)?;
        tape.reshape(out, vec![clouds * self.config.points, 3])
    }

    pub fn reconstruct(&self, cloud: &PointCloud) -> Result<PointCloud> {
        self.decode(&self.encode(cloud)?)
    }

    pub fn to_checkpoint(&self, metadata: serde_json::Value) -> Checkpoint {
        Checkpoint::new(Role::Autoencoder, self.config.descriptor(), metadata, &self.params())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = AeConfig::from_descriptor(&ckpt.architecture)?;
        ckpt.expect(Role::Autoencoder, &config.descriptor())?;
        let mut model = Self::zeros(config)?;
        ckpt.restore_into(&mut model.params_mut())?;
        Ok(model)
    }
}

impl LatentGenerator for AutoencoderModel {
    fn latent_dim(&self) -> usize {
        self.config.latent_dim()
    }

    fn encode(&self, cloud: &PointCloud) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let x = tape.constant(&cloud.to_tensor()?)?;
        let z = self.encode_on(&mut tape, &bound, x, 1)?;
        Ok(tape.value(z).to_vec())
    }

    fn decode_on(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        if tape.shape(z) != [1, self.latent_dim()] {
            return contract(format!("latent shape {:?}, expected [1, {}]", tape.shape(z), self.latent_dim()));
        }
        let bound = BoundAutoencoder { encoder: Vec::new(), decoder: self.decoder.bind(tape, false)? };
        self.decode_bound(tape, &bound, z)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub shared: Vec<usize>,
    pub head: Vec<usize>,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { shared: vec![32, 64, 128], head: vec![64] }
    }
}

impl DiscriminatorConfig {
    pub fn descriptor(&self) -> Vec<u32> {
        let mut d = vec![self.shared.len() as u32];
        d.extend(self.shared.iter().map(|&w| w as u32));
        d.push(self.head.len() as u32);
        d.extend(self.head.iter().map(|&w| w as u32));
        d
    }

    pub fn from_descriptor(d: &[u32]) -> Result<Self> {
        let (shared, head) = split_widths(d)?;
        let cfg = Self { shared, head };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shared.is_empty() || self.shared.iter().chain(&self.head).any(|&w| w == 0) {
            return contract(format!("invalid discriminator layout {self:?}"));
        }
        Ok(())
    }
}

/// Shared per-point MLP, max-pool, dense head, one sigmoid unit.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorModel {
    config: DiscriminatorConfig,
    pub shared: Mlp,
    pub head: Mlp,
}

impl DiscriminatorModel {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, h) = Self::widths(&config);
        Ok(Self { shared: Mlp::init(&s, &mut rng), head: Mlp::init(&h, &mut rng), config })
    }

    pub fn zeros(config: DiscriminatorConfig) -> Result<Self> {
        config.validate()?;
        let (s, h) = Self::widths(&config);
        Ok(Self { shared: Mlp::zeros(&s), head: Mlp::zeros(&h), config })
    }

    fn widths(config: &DiscriminatorConfig) -> (Vec<usize>, Vec<usize>) {
        let s = std::iter::once(3).chain(config.shared.iter().copied()).collect();
        let mut h = vec![*config.shared.last().expect("validated")];
        h.extend(&config.head);
        h.push(1);
        (s, h)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.shared.params();
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.shared.params_mut();
        p.extend(self.head.params_mut());
        p
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<(Var, Var)>> {
        let mut b = self.shared.bind(tape, trainable)?;
        b.extend(self.head.bind(tape, trainable)?);
        Ok(b)
    }

    /// Pre-sigmoid scores `[clouds, 1]` for `x: [clouds·n, 3]`.
    pub fn logits_on(&self, tape: &mut Tape, bound: &[(Var, Var)], x: Var, clouds: usize) -> Result<Var> {
        let rows = tape.shape(x)[0];
        if clouds == 0 || !rows.is_multiple_of(clouds) {
            return contract(format!("{rows} rows do not split into {clouds} clouds"));
        }
        let (s, h) = bound.split_at(self.shared.layers.len());
        let pw = Mlp::forward(tape, s, x, true)?;
        let pooled = tape.max_reduce_segments(pw, rows / clouds)?;
        Mlp::forward(tape, h, pooled, false)
    }

    /// Probability that each cloud is real.
    pub fn score(&self, clouds: &[&PointCloud]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let x = tape.constant(&stack_clouds(clouds)?)?;
        let l = self.logits_on(&mut tape, &bound, x, clouds.len())?;
        let p = tape.sigmoid(l)?;
        Ok(tape.value(p).to_vec())
    }

    pub fn to_checkpoint(&self, metadata: serde_json::Value) -> Checkpoint {
        Checkpoint::new(Role::Discriminator, self.config.descriptor(), metadata, &self.params())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = DiscriminatorConfig::from_descriptor(&ckpt.architecture)?;
        ckpt.expect(Role::Discriminator, &config.descriptor())?;
        let mut model = Self::zeros(config)?;
        ckpt.restore_into(&mut model.params_mut())?;
        Ok(model)
    }
}

/// Critic gap `L_D = mean d(fake) − mean d(real)` and the discriminator's
/// loss on fakes `L_Df = mean −ln(1 − d(fake))`, from discriminator
/// probabilities.
pub fn discriminator_loss(d_real: &[f64], d_fake: &[f64]) -> Result<(f64, f64)> {
    if d_real.is_empty() || d_fake.is_empty() {
        return contract("discriminator batches must be nonempty");
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let l_d = mean(d_fake) - mean(d_real);
    let l_df = d_fake.iter().map(|&p| -(-p).ln_1p()).sum::<f64>() / d_fake.len() as f64;
    Ok((l_d, l_df))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenTrainConfig {
    /// Pointwise feature loss weight (AED).
    pub w_f: f64,
    /// Pointwise feature loss weight (NAED).
    pub w_f1: f64,
    /// Global feature loss weight (NAED).
    pub w_f2: f64,
    /// Weight of the generator's adversarial term.
    pub w_d: f64,
    /// Train the generator when `L_D` is below this, the discriminator otherwise.
    pub d_alt_threshold: f64,
    /// Perturb the discriminator when `L_D` is below this.
    pub d_noise_threshold: f64,
    /// Discriminator noise, as a multiple of each parameter tensor's std.
    pub d_noise_sigma: f64,
    /// NAED encoder noise, as a multiple of each parameter tensor's std.
    pub ae_param_noise_sigma: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for GenTrainConfig {
    fn default() -> Self {
        Self {
            w_f: 1.0,
            w_f1: 1.0,
            w_f2: 1.0,
            w_d: 0.5,
            d_alt_threshold: 0.0,
            d_noise_threshold: -0.75,
            d_noise_sigma: 0.01,
            ae_param_noise_sigma: 0.01,
            epochs: 30,
            batch: 16,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl GenTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.w_f, self.w_f1, self.w_f2, self.w_d, self.d_noise_sigma, self.ae_param_noise_sigma];
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return contract("loss weights and noise scales must be finite and ≥ 0");
        }
        if !(self.d_noise_threshold < self.d_alt_threshold) {
            return contract("d_noise_threshold must be below d_alt_threshold");
        }
        if self.batch == 0 || !(self.lr > 0.0) {
            return contract("batch must be ≥ 1 and lr > 0");
        }
        Ok(())
    }

    /// `(pointwise, global)` feature weights for a generator kind.
    fn feature_weights(&self, kind: GenKind) -> (f64, f64) {
        match kind {
            GenKind::Ae => (0.0, 0.0),
            GenKind::Aed => (self.w_f, 0.0),
            GenKind::Naed => (self.w_f1, self.w_f2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Generator,
    Discriminator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub l_c: f64,
    pub l_f1: Option<f64>,
    pub l_f2: Option<f64>,
    pub l_d: Option<f64>,
    pub l_df: Option<f64>,
    pub trained: Side,
    /// Whether the generator / discriminator parameters changed across the
    /// gradient step (before any discriminator noise).
    pub generator_changed: bool,
    pub discriminator_changed: bool,
    pub d_noise: bool,
    pub ae_noise: bool,
}

impl BatchRecord {
    pub fn losses_finite(&self) -> bool {
        [Some(self.l_c), self.l_f1, self.l_f2, self.l_d, self.l_df].into_iter().flatten().all(f64::is_finite)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub kind: GenKind,
    pub records: Vec<BatchRecord>,
}

/// A breach of the alternation rules found in a log.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleViolation {
    pub index: usize,
    pub reason: String,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    pub fn read_jsonl(kind: GenKind, text: &str) -> Result<Self> {
        let records = text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<std::result::Result<_, _>>()?;
        Ok(Self { kind, records })
    }

    /// Mean `L_C` per epoch.
    pub fn epoch_losses(&self) -> Vec<f64> {
        let epochs = self.records.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
        (0..epochs)
            .map(|e| {
                let v: Vec<f64> = self.records.iter().filter(|r| r.epoch == e).map(|r| r.l_c).collect();
                v.iter().sum::<f64>() / v.len().max(1) as f64
            })
            .collect()
    }

    /// Checks the alternation and noise rules against every record.
    pub fn violations(&self, config: &GenTrainConfig) -> Vec<RuleViolation> {
        let mut out = Vec::new();
        for (index, r) in self.records.iter().enumerate() {
            let mut fail = |reason: String| out.push(RuleViolation { index, reason });
            if !r.losses_finite() {
                fail("non-finite loss".into());
            }
            if r.generator_changed == r.discriminator_changed {
                fail(format!(
                    "exclusivity: generator changed {}, discriminator changed {}",
                    r.generator_changed, r.discriminator_changed
                ));
            }
            let Some(l_d) = r.l_d else {
                if r.trained != Side::Generator || r.discriminator_changed || r.d_noise {
                    fail("discriminator activity without a critic gap".into());
                }
                continue;
            };
            let expected = if l_d < config.d_alt_threshold { Side::Generator } else { Side::Discriminator };
            if r.trained != expected {
                fail(format!("L_D = {l_d} trained {:?}", r.trained));
            }
            let changed = match r.trained {
                Side::Generator => r.generator_changed,
                Side::Discriminator => r.discriminator_changed,
            };
            if !changed {
                fail(format!("{:?} side was selected but did not change", r.trained));
            }
            if (l_d < config.d_noise_threshold) != r.d_noise {
                fail(format!("L_D = {l_d} but d_noise = {}", r.d_noise));
            }
        }
        out
    }
}

/// Models and optimizer state for one adversarial training run.
struct GenRun<'a> {
    kind: GenKind,
    config: &'a GenTrainConfig,
    classifier: Option<&'a ClassifierModel>,
    ae: AutoencoderModel,
    disc: Option<DiscriminatorModel>,
    ae_adam: AdamState,
    d_adam: Option<AdamState>,
    ae_noise_rng: ChaCha8Rng,
    d_noise_rng: ChaCha8Rng,
}

struct GeneratorLosses {
    l_c: f64,
    l_f1: Option<f64>,
    l_f2: Option<f64>,
    grads: Vec<Vec<f64>>,
}

impl GenRun<'_> {
    fn uses_discriminator(&self) -> bool {
        self.disc.is_some()
    }

    /// Loss of the generator on `x` and its gradient with respect to every
    /// autoencoder parameter.
    fn generator_grads(&self, ae: &AutoencoderModel, x: &Tensor, clouds: usize) -> Result<GeneratorLosses> {
        let (w_pw, w_gl) = self.config.feature_weights(self.kind);
        let mut tape = Tape::new();
        let bound = ae.bind(&mut tape, true)?;
        let xv = tape.constant(x)?;
        let z = ae.encode_on(&mut tape, &bound, xv, clouds)?;
        let recon = ae.decode_bound(&mut tape, &bound, z)?;
        let per_cloud = tape.chamfer(recon, xv, clouds, true)?;
        let l_c = tape.mean(per_cloud)?;
        let mut loss = l_c;
        let (mut l_f1, mut l_f2) = (None, None);
        if w_pw > 0.0 || w_gl > 0.0 {
            let cls = self.classifier.ok_or_else(|| Error::Contract("feature losses need a classifier".into()))?;
            let cb = cls.bind(&mut tape, false)?;
            let real = cls.forward_on(&mut tape, &cb, xv, clouds)?;
            let fake = cls.forward_on(&mut tape, &cb, recon, clouds)?;
            if w_pw > 0.0 {
                let l = tape.mean_squared_diff(fake.pointwise, real.pointwise)?;
                l_f1 = Some(tape.scalar(l)?);
                let t = tape.scale(l, w_pw)?;
                loss = tape.add(loss, t)?;
            }
            if w_gl > 0.0 {
                let l = tape.mean_squared_diff(fake.global, real.global)?;
                l_f2 = Some(tape.scalar(l)?);
                let t = tape.scale(l, w_gl)?;
                loss = tape.add(loss, t)?;
            }
        }
        if let Some(d) = &self.disc {
            let db = d.bind(&mut tape, false)?;
            let logits = d.logits_on(&mut tape, &db, recon, clouds)?;
            let sp = tape.softplus(logits)?;
            let l_df = tape.mean(sp)?;
            let t = tape.scale(l_df, -self.config.w_d)?;
            loss = tape.add(loss, t)?;
        }
        let l_c = tape.scalar(l_c)?;
        let grads = tape.backward(loss)?;
        Ok(GeneratorLosses { l_c, l_f1, l_f2, grads: bound.vars().iter().map(|&v| grads.wrt(v)).collect() })
    }

    /// One generator update. For NAED the gradient is taken at noisy encoder
    /// parameters, then applied to the clean ones.
    fn generator_step(&mut self, x: &Tensor, clouds: usize) -> Result<(GeneratorLosses, bool)> {
        let noisy = self.kind == GenKind::Naed && self.config.ae_param_noise_sigma > 0.0;
        let losses = if noisy {
            let mut shadow = self.ae.clone();
            perturb(&mut shadow.encoder.params_mut(), self.config.ae_param_noise_sigma, &mut self.ae_noise_rng);
            self.generator_grads(&shadow, x, clouds)?
        } else {
            self.generator_grads(&self.ae, x, clouds)?
        };
        self.ae_adam.step(&mut self.ae.params_mut(), &losses.grads, Direction::Descend)?;
        Ok((losses, noisy))
    }

    /// Clean forward pass: reconstructions, `L_C`, and the critic gap terms.
    fn evaluate(&self, x: &Tensor, clouds: usize) -> Result<(Tensor, f64, f64, f64)> {
        let d = self.disc.as_ref().expect("evaluate needs a discriminator");
        let mut tape = Tape::new();
        let bound = self.ae.bind(&mut tape, false)?;
        let xv = tape.constant(x)?;
        let z = self.ae.encode_on(&mut tape, &bound, xv, clouds)?;
        let recon = self.ae.decode_bound(&mut tape, &bound, z)?;
        let per_cloud = tape.chamfer(recon, xv, clouds, true)?;
        let l_c = tape.mean(per_cloud)?;
        let db = d.bind(&mut tape, false)?;
        let lf = d.logits_on(&mut tape, &db, recon, clouds)?;
        let lr = d.logits_on(&mut tape, &db, xv, clouds)?;
        let pf = tape.sigmoid(lf)?;
        let pr = tape.sigmoid(lr)?;
        let (l_d, l_df) = discriminator_loss(tape.value(pr), tape.value(pf))?;
        Ok((tape.tensor(recon), tape.scalar(l_c)?, l_d, l_df))
    }

    /// Minimizes the critic gap, with the reconstructions held fixed.
    fn discriminator_step(&mut self, real: &Tensor, fake: &Tensor, clouds: usize) -> Result<()> {
        let d = self.disc.as_mut().expect("discriminator present");
        let mut tape = Tape::new();
        let bound = d.bind(&mut tape, true)?;
        let rv = tape.constant(real)?;
        let fv = tape.constant(fake)?;
        let lr = d.logits_on(&mut tape, &bound, rv, clouds)?;
        let lf = d.logits_on(&mut tape, &bound, fv, clouds)?;
        let pr = tape.sigmoid(lr)?;
        let pf = tape.sigmoid(lf)?;
        let mr = tape.mean(pr)?;
        let mf = tape.mean(pf)?;
        let gap = tape.sub(mf, mr)?;
        let grads = tape.backward(gap)?;
        let g: Vec<Vec<f64>> = flatten_bound(&bound).iter().map(|&v| grads.wrt(v)).collect();
        self.d_adam.as_mut().expect("optimizer present").step(&mut d.params_mut(), &g, Direction::Descend)
    }

    fn batch(&mut self, epoch: usize, batch: usize, clouds: &[&PointCloud]) -> Result<BatchRecord> {
        let x = stack_clouds(clouds)?;
        let n = clouds.len();
        let ae_before = fingerprint(&self.ae.params());
        let d_before = self.disc.as_ref().map(|d| fingerprint(&d.params()));
        let mut rec = BatchRecord {
            epoch,
            batch,
            l_c: 0.0,
            l_f1: None,
            l_f2: None,
            l_d: None,
            l_df: None,
            trained: Side::Generator,
            generator_changed: false,
            discriminator_changed: false,
            d_noise: false,
            ae_noise: false,
        };
        if !self.uses_discriminator() {
            let (l, noisy) = self.generator_step(&x, n)?;
            rec.l_c = l.l_c;
            rec.l_f1 = l.l_f1;
            rec.l_f2 = l.l_f2;
            rec.ae_noise = noisy;
        } else {
            let (fake, l_c, l_d, l_df) = self.evaluate(&x, n)?;
            rec.l_c = l_c;
            rec.l_d = Some(l_d);
            rec.l_df = Some(l_df);
            if l_d < self.config.d_alt_threshold {
                let (l, noisy) = self.generator_step(&x, n)?;
                rec.l_f1 = l.l_f1;
                rec.l_f2 = l.l_f2;
                rec.ae_noise = noisy;
            } else {
                rec.trained = Side::Discriminator;
                self.discriminator_step(&x, &fake, n)?;
            }
        }
        rec.generator_changed = fingerprint(&self.ae.params()) != ae_before;
        if let (Some(d), Some(before)) = (self.disc.as_mut(), d_before) {
            rec.discriminator_changed = fingerprint(&d.params()) != before;
            if rec.l_d.is_some_and(|l| l < self.config.d_noise_threshold) {
                perturb(&mut d.params_mut(), self.config.d_noise_sigma, &mut self.d_noise_rng);
                rec.d_noise = true;
            }
        }
        Ok(rec)
    }
}

/// Trained autoencoder, discriminator (AED/NAED only) and per-batch log.
#[derive(Debug, Clone)]
pub struct GenTrainOutput {
    pub ae: AutoencoderModel,
    pub discriminator: Option<DiscriminatorModel>,
    pub log: TrainLog,
}

fn train_generic(
    kind: GenKind,
    ae: AutoencoderModel,
    disc: Option<DiscriminatorModel>,
    classifier: Option<&ClassifierModel>,
    split: &DatasetSplit,
    config: &GenTrainConfig,
) -> Result<GenTrainOutput> {
    config.validate()?;
    if split.train.is_empty() {
        return contract("training split is empty");
    }
    if split.train.iter().any(|c| c.cloud.len() != ae.points()) {
        return contract(format!("autoencoder expects {} points per cloud", ae.points()));
    }
    let disc = if config.w_d > 0.0 { disc } else { None };
    let ae_adam = AdamState::new(config.lr, &ae.params());
    let d_adam = disc.as_ref().map(|d| AdamState::new(config.lr, &d.params()));
    let mut run = GenRun {
        kind,
        config,
        classifier,
        ae,
        disc,
        ae_adam,
        d_adam,
        ae_noise_rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1)),
        d_noise_rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 2)),
    };
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0));
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut log = TrainLog { kind, records: Vec::new() };
    for epoch in 0..config.epochs {
        order.shuffle(&mut order_rng);
        for (bi, idx) in order.chunks(config.batch).enumerate() {
            let clouds: Vec<&PointCloud> = idx.iter().map(|&i| &split.train[i].cloud).collect();
            let rec = match run.batch(epoch, bi, &clouds) {
                Ok(r) if r.losses_finite() => r,
                Ok(r) => return Err(abort(&log, format!("non-finite loss in {r:?}"))),
                Err(Error::Numeric(m)) => return Err(abort(&log, m)),
                Err(e) => return Err(e),
            };
            log.records.push(rec);
        }
    }
    Ok(GenTrainOutput { ae: run.ae, discriminator: run.disc, log })
}

fn abort(log: &TrainLog, message: String) -> Error {
    let tail = &log.records[log.records.len().saturating_sub(5)..];
    let window = tail.iter().filter_map(|r| serde_json::to_string(r).ok()).collect::<Vec<_>>().join("\n");
    Error::Numeric(format!("generator training diverged: {message}\nlast records:\n{window}"))
}

/// Plain autoencoder on the symmetric Chamfer reconstruction loss.
pub fn train_ae(ae: AutoencoderModel, split: &DatasetSplit, config: &GenTrainConfig) -> Result<GenTrainOutput> {
    train_generic(GenKind::Ae, ae, None, None, split, config)
}

/// Autoencoder with the pointwise feature loss and an alternately trained
/// discriminator. With `w_d = 0` the discriminator is never used.
pub fn train_aed(
    ae: AutoencoderModel,
    discriminator: DiscriminatorModel,
    classifier: &ClassifierModel,
    split: &DatasetSplit,
    config: &GenTrainConfig,
) -> Result<GenTrainOutput> {
    train_generic(GenKind::Aed, ae, Some(discriminator), Some(classifier), split, config)
}

/// AED with encoder parameter noise on every generator step and an extra
/// global feature loss.
pub fn train_naed(
    ae: AutoencoderModel,
    discriminator: DiscriminatorModel,
    classifier: &ClassifierModel,
    split: &DatasetSplit,
    config: &GenTrainConfig,
) -> Result<GenTrainOutput> {
    train_generic(GenKind::Naed, ae, Some(discriminator), Some(classifier), split, config)
}

/// Mean one-directional Chamfer from reconstruction to input.
pub fn reconstruction_chamfer(ae: &AutoencoderModel, clouds: &[&PointCloud]) -> Result<f64> {
    if clouds.is_empty() {
        return contract("no clouds to reconstruct");
    }
    let mut total = 0.0;
    for c in clouds {
        total += chamfer(&ae.reconstruct(c)?, c)?;
    }
    Ok(total / clouds.len() as f64)
}
