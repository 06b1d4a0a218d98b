//! PointNet-style classifier: shared per-point MLP, max-pool, fully connected head.
//!
//! There are no input/feature transform nets and no batch normalization.
//! The three feature taps (pointwise, global, logits) are returned together
//! because the generators and the metrics each need a different one.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Role};
use crate::diffgraph::{softmax, AdamState, Direction, Tape, Tensor, Var};
use crate::error::{contract, Error, Result};
use crate::nn::{flatten_bound, Mlp};
use crate::shapes::{DatasetSplit, PointCloud};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Widths of the shared per-point layers (input width 3 is implicit).
    pub shared: Vec<usize>,
    /// Hidden widths of the head; the output width is `classes`.
    pub head: Vec<usize>,
    pub classes: usize,
}

impl ClassifierConfig {
    pub fn new(classes: usize) -> Self {
        Self { shared: vec![64, 128, 256], head: vec![128], classes }
    }

    fn shared_widths(&self) -> Vec<usize> {
        std::iter::once(3).chain(self.shared.iter().copied()).collect()
    }

    fn head_widths(&self) -> Vec<usize> {
        let mut w = vec![*self.shared.last().expect("validated")];
        w.extend(&self.head);
        w.push(self.classes);
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.shared.is_empty() || self.classes == 0 || self.shared.iter().chain(&self.head).any(|&w| w == 0) {
            return contract(format!("invalid classifier layout {self:?}"));
        }
        Ok(())
    }

    /// Flat descriptor stored in checkpoints: `[classes, n_shared, shared.., n_head, head..]`.
    pub fn descriptor(&self) -> Vec<u32> {
        let mut d = vec![self.classes as u32, self.shared.len() as u32];
        d.extend(self.shared.iter().map(|&w| w as u32));
        d.push(self.head.len() as u32);
        d.extend(self.head.iter().map(|&w| w as u32));
        d
    }

    pub fn from_descriptor(d: &[u32]) -> Result<Self> {
        let bad = || Error::Contract(format!("malformed classifier descriptor {d:?}"));
        let classes = *d.first().ok_or_else(bad)? as usize;
        let ns = *d.get(1).ok_or_else(bad)? as usize;
        let shared: Vec<usize> = d.get(2..2 + ns).ok_or_else(bad)?.iter().map(|&w| w as usize).collect();
        let nh = *d.get(2 + ns).ok_or_else(bad)? as usize;
        let head: Vec<usize> = d.get(3 + ns..3 + ns + nh).ok_or_else(bad)?.iter().map(|&w| w as usize).collect();
        if d.len() != 3 + ns + nh {
            return Err(bad());
        }
        let cfg = Self { shared, head, classes };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    config: ClassifierConfig,
    shared: Mlp,
    head: Mlp,
}

/// Per-cloud outputs of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    /// `n × f` per-point features after the last shared layer, before pooling.
    pub pointwise: Tensor,
    pub global: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Tape handles for the taps of a batched forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierTaps {
    /// `[clouds·n, f]`
    pub pointwise: Var,
    /// `[clouds, f]`
    pub global: Var,
    /// `[clouds, classes]`
    pub logits: Var,
}

/// Classifier parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundClassifier {
    shared: Vec<(Var, Var)>,
    head: Vec<(Var, Var)>,
}

impl BoundClassifier {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = flatten_bound(&self.shared);
        v.extend(flatten_bound(&self.head));
        v
    }
}

/// Stacks clouds into a `[clouds·n, 3]` tensor; all clouds must share `n`.
pub fn stack_clouds(clouds: &[&PointCloud]) -> Result<Tensor> {
    let Some(first) = clouds.first() else {
        return contract("cannot stack an empty batch");
    };
    let n = first.len();
    if n == 0 || clouds.iter().any(|c| c.len() != n) {
        return contract("batched clouds must be nonempty and share a point count");
    }
    let mut flat = Vec::with_capacity(clouds.len() * n * 3);
    for c in clouds {
        flat.extend(c.flat());
    }
    Tensor::new(vec![clouds.len() * n, 3], flat)
}

impl ClassifierModel {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shared = Mlp::init(&config.shared_widths(), &mut rng);
        let head = Mlp::init(&config.head_widths(), &mut rng);
        Ok(Self { config, shared, head })
    }

    pub fn zeros(config: ClassifierConfig) -> Result<Self> {
        config.validate()?;
        let shared = Mlp::zeros(&config.shared_widths());
        let head = Mlp::zeros(&config.head_widths());
        Ok(Self { config, shared, head })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn head(&self) -> &Mlp {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Mlp {
        &mut self.head
    }

    pub fn shared(&self) -> &Mlp {
        &self.shared
    }

    pub fn shared_mut(&mut self) -> &mut Mlp {
        &mut self.shared
    }

    pub fn to_checkpoint(&self, metadata: serde_json::Value) -> Checkpoint {
        Checkpoint::new(Role::Classifier, self.config.descriptor(), metadata, &self.params())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ClassifierConfig::from_descriptor(&ckpt.architecture)?;
        ckpt.expect(Role::Classifier, &config.descriptor())?;
        let mut model = Self::zeros(config)?;
        ckpt.restore_into(&mut model.params_mut())?;
        Ok(model)
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

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundClassifier> {
        Ok(BoundClassifier { shared: self.shared.bind(tape, trainable)?, head: self.head.bind(tape, trainable)? })
    }

    /// Batched forward over `x: [clouds·n, 3]`.
    pub fn forward_on(&self, tape: &mut Tape, bound: &BoundClassifier, x: Var, clouds: usize) -> Result<ClassifierTaps> {
        let rows = tape.shape(x)[0];
        if clouds == 0 || !rows.is_multiple_of(clouds) {
            return contract(format!("{rows} rows do not split into {clouds} clouds"));
        }
        let pointwise = Mlp::forward(tape, &bound.shared, x, true)?;
        let global = tape.max_reduce_segments(pointwise, rows / clouds)?;
        let logits = Mlp::forward(tape, &bound.head, global, false)?;
        Ok(ClassifierTaps { pointwise, global, logits })
    }

    pub fn forward(&self, cloud: &PointCloud) -> Result<FeatureBundle> {
        Ok(self.forward_batch(&[cloud])?.remove(0))
    }

    /// Inference over many clouds, in chunks.
    pub fn forward_batch(&self, clouds: &[&PointCloud]) -> Result<Vec<FeatureBundle>> {
        let mut out = Vec::with_capacity(clouds.len());
        for chunk in clouds.chunks(16) {
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, false)?;
            let x = tape.constant(&stack_clouds(chunk)?)?;
            let taps = self.forward_on(&mut tape, &bound, x, chunk.len())?;
            let f = tape.shape(taps.global)[1];
            let k = self.classes();
            let pw = tape.value(taps.pointwise);
            let gl = tape.value(taps.global);
            let lg = tape.value(taps.logits);
            let mut row = 0;
            for (i, c) in chunk.iter().enumerate() {
                let n = c.len();
                let logits = lg[i * k..(i + 1) * k].to_vec();
                out.push(FeatureBundle {
                    pointwise: Tensor::new(vec![n, f], pw[row * f..(row + n) * f].to_vec())?,
                    global: gl[i * f..(i + 1) * f].to_vec(),
                    probs: softmax(&logits),
                    logits,
                });
                row += n;
            }
        }
        Ok(out)
    }

    pub fn global_features(&self, clouds: &[&PointCloud]) -> Result<Vec<Vec<f64>>> {
        Ok(self.forward_batch(clouds)?.into_iter().map(|b| b.global).collect())
    }

    /// `(argmax class, its probability)`.
    pub fn predict(&self, cloud: &PointCloud) -> Result<(usize, f64)> {
        let b = self.forward(cloud)?;
        Ok(argmax_prob(&b.probs))
    }

    /// Pre-softmax logit of `class` and its gradient with respect to the
    /// flattened `n × 3` coordinates.
    pub fn target_activation(&self, cloud: &PointCloud, class: usize) -> Result<(f64, Vec<f64>)> {
        if class >= self.classes() {
            return contract(format!("target class {class} out of range for {} classes", self.classes()));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let x = tape.variable(&cloud.to_tensor()?)?;
        let taps = self.forward_on(&mut tape, &bound, x, 1)?;
        let logit = tape.pick(taps.logits, class)?;
        let value = tape.scalar(logit)?;
        let grad = tape.backward(logit)?.wrt(x);
        Ok((value, grad))
    }
}

pub(crate) fn argmax_prob(probs: &[f64]) -> (usize, f64) {
    probs
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch: 32, lr: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (highest test accuracy, earliest on ties).
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best_test_accuracy(&self) -> f64 {
        self.epochs.get(self.best_epoch).map_or(0.0, |e| e.test_accuracy)
    }
}

pub fn accuracy(model: &ClassifierModel, items: &[crate::shapes::LabeledCloud]) -> Result<f64> {
    if items.is_empty() {
        return Ok(0.0);
    }
    let clouds: Vec<&PointCloud> = items.iter().map(|c| &c.cloud).collect();
    let bundles = model.forward_batch(&clouds)?;
    let hits = bundles.iter().zip(items).filter(|(b, c)| argmax_prob(&b.probs).0 == c.label).count();
    Ok(hits as f64 / items.len() as f64)
}

/// Minibatch Adam on softmax cross-entropy. Returns the parameters from the
/// epoch with the best test accuracy.
pub fn train_classifier(
    mut model: ClassifierModel,
    split: &DatasetSplit,
    hyper: &ClassifierTrainConfig,
) -> Result<(ClassifierModel, TrainHistory)> {
    if split.train.is_empty() {
        return contract("training split is empty");
    }
    if hyper.batch == 0 || !(hyper.lr > 0.0) {
        return contract("batch must be ≥ 1 and lr > 0");
    }
    if let Some(bad) = split.train.iter().chain(&split.test).find(|c| c.label >= model.classes()) {
        return contract(format!("label {} exceeds classifier width {}", bad.label, model.classes()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut adam = AdamState::new(hyper.lr, &model.params());
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut history = TrainHistory { epochs: Vec::new(), best_epoch: 0 };
    let mut best: Option<(f64, ClassifierModel)> = None;
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        for (bi, idx) in order.chunks(hyper.batch).enumerate() {
            let clouds: Vec<&PointCloud> = idx.iter().map(|&i| &split.train[i].cloud).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| split.train[i].label).collect();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true)?;
            let x = tape.constant(&stack_clouds(&clouds)?)?;
            let taps = model.forward_on(&mut tape, &bound, x, clouds.len()).map_err(|e| diverged(e, epoch, bi))?;
            let loss = tape.softmax_cross_entropy(taps.logits, &labels).map_err(|e| diverged(e, epoch, bi))?;
            let k = model.classes();
            let logits = tape.value(taps.logits);
            hits += labels
                .iter()
                .enumerate()
                .filter(|(i, &l)| argmax_prob(&logits[i * k..(i + 1) * k]).0 == l)
                .count();
            loss_sum += tape.scalar(loss)? * idx.len() as f64;
            let grads = tape.backward(loss).map_err(|e| diverged(e, epoch, bi))?;
            let g: Vec<Vec<f64>> = bound.vars().iter().map(|&v| grads.wrt(v)).collect();
            adam.step(&mut model.params_mut(), &g, Direction::Descend).map_err(|e| diverged(e, epoch, bi))?;
        }
        let test_accuracy = accuracy(&model, &split.test).map_err(|e| diverged(e, epoch, order.len().div_ceil(hyper.batch)))?;
        history.epochs.push(EpochRecord {
            epoch,
            loss: loss_sum / split.train.len() as f64,
            train_accuracy: hits as f64 / split.train.len() as f64,
            test_accuracy,
        });
        if best.as_ref().is_none_or(|(acc, _)| test_accuracy > *acc) {
            best = Some((test_accuracy, model.clone()));
            history.best_epoch = epoch;
        }
    }
    let model = best.map(|(_, m)| m).unwrap_or(model);
    Ok((model, history))
}

fn diverged(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("classifier training diverged at epoch {epoch}, batch {batch}: {msg}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffgraph::finite_difference_gradient;
    use crate::shapes::{dataset_generate, DatasetConfig, ShapeFamily};

    fn tiny_config() -> ClassifierConfig {
        ClassifierConfig { shared: vec![8, 16], head: vec![8], classes: 3 }
    }

    fn cloud(seed: u64, n: usize) -> PointCloud {
        crate::shapes::random_cloud_gaussian(0.5, n, seed).unwrap()
    }

    #[test]
    fn probabilities_sum_to_one_and_global_is_column_max() {
        let m = ClassifierModel::new(ClassifierConfig::new(5), 1).unwrap();
        let b = m.forward(&cloud(2, 40)).unwrap();
        assert!((b.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(b.probs.iter().all(|&p| p >= 0.0));
        let f = b.global.len();
        for j in 0..f {
            let col_max = (0..40).map(|i| b.pointwise.data()[i * f + j]).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(col_max, b.global[j]);
        }
    }

    #[test]
    fn permuting_points_keeps_logits_exact_and_permutes_pointwise() {
        let m = ClassifierModel::new(ClassifierConfig::new(4), 3).unwrap();
        let c = cloud(7, 30);
        let mut pts = c.points().to_vec();
        pts.reverse();
        let p = PointCloud::new(pts);
        let (a, b) = (m.forward(&c).unwrap(), m.forward(&p).unwrap());
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.global, b.global);
        let f = a.global.len();
        for i in 0..30 {
            assert_eq!(&a.pointwise.data()[i * f..(i + 1) * f], &b.pointwise.data()[(29 - i) * f..(30 - i) * f]);
        }
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let mut m = ClassifierModel::new(ClassifierConfig::new(4), 3).unwrap();
        for p in m.head_mut().params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let b = m.forward(&cloud(1, 12)).unwrap();
        assert!(b.probs.iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn changing_one_point_changes_one_pointwise_row() {
        let m = ClassifierModel::new(tiny_config(), 5).unwrap();
        let c = cloud(3, 10);
        let mut pts = c.points().to_vec();
        pts[4] = [0.9, -0.3, 0.2];
        let (a, b) = (m.forward(&c).unwrap(), m.forward(&PointCloud::new(pts)).unwrap());
        let f = a.global.len();
        for i in 0..10 {
            if i != 4 {
                assert_eq!(&a.pointwise.data()[i * f..(i + 1) * f], &b.pointwise.data()[i * f..(i + 1) * f]);
            }
        }
    }

    #[test]
    fn target_activation_matches_forward_and_finite_differences() {
        let m = ClassifierModel::new(ClassifierConfig::new(4), 11).unwrap();
        let c = cloud(5, 5);
        let (value, grad) = m.target_activation(&c, 2).unwrap();
        assert_eq!(value, m.forward(&c).unwrap().logits[2]);
        let fd = finite_difference_gradient(
            |x| m.forward(&PointCloud::from_flat(x).unwrap()).unwrap().logits[2],
            &c.flat(),
            1e-4,
        )
        .unwrap();
        for (a, f) in grad.iter().zip(&fd) {
            assert!((a - f).abs() / a.abs().max(f.abs()).max(1e-3) < 1e-4, "{a} vs {f}");
        }
        assert!(m.target_activation(&c, 4).is_err());
    }

    #[test]
    fn doubling_target_row_doubles_logit_without_bias() {
        let mut m = ClassifierModel::new(tiny_config(), 2).unwrap();
        let c = cloud(9, 6);
        let last = m.head_mut().layers.last_mut().unwrap();
        last.bias.data_mut().iter_mut().for_each(|b| *b = 0.0);
        let before = m.forward(&c).unwrap().logits[1];
        let last = m.head_mut().layers.last_mut().unwrap();
        let k = last.fan_out();
        for (i, w) in last.weight.data_mut().iter_mut().enumerate() {
            if i % k == 1 {
                *w *= 2.0;
            }
        }
        let after = m.forward(&c).unwrap().logits[1];
        assert!((after - 2.0 * before).abs() < 1e-12 * before.abs().max(1.0));
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let m = ClassifierModel::new(tiny_config(), 4).unwrap();
        let bytes = m.to_checkpoint(serde_json::json!({})).to_bytes().unwrap();
        let back = ClassifierModel::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, m);
        let mut ae = m.to_checkpoint(serde_json::json!({}));
        ae.role = Role::Autoencoder;
        assert!(ClassifierModel::from_checkpoint(&ae).is_err());
    }

    #[test]
    fn descriptor_round_trips() {
        let c = ClassifierConfig::new(8);
        assert_eq!(ClassifierConfig::from_descriptor(&c.descriptor()).unwrap(), c);
        assert!(ClassifierConfig::from_descriptor(&[3, 1]).is_err());
    }

    #[test]
    fn single_class_dataset_is_trivially_accurate_and_training_is_deterministic() {
        let cfg = DatasetConfig { families: vec![ShapeFamily::Torus], train_per_class: 4, test_per_class: 2, points: 16, ..DatasetConfig::default() };
        let d = dataset_generate(&cfg).unwrap();
        let m = ClassifierModel::new(ClassifierConfig { classes: 1, ..tiny_config() }, 0).unwrap();
        let hyper = ClassifierTrainConfig { epochs: 1, batch: 2, lr: 1e-3, seed: 3 };
        let (_, h) = train_classifier(m.clone(), &d, &hyper).unwrap();
        assert_eq!(h.epochs[0].test_accuracy, 1.0);
        assert_eq!(h.epochs[0].train_accuracy, 1.0);

        let cfg2 = DatasetConfig { families: vec![ShapeFamily::Torus, ShapeFamily::Cube], ..cfg };
        let d2 = dataset_generate(&cfg2).unwrap();
        let m2 = ClassifierModel::new(ClassifierConfig { classes: 2, ..tiny_config() }, 0).unwrap();
        let hyper = ClassifierTrainConfig { epochs: 3, ..hyper };
        let (a, ha) = train_classifier(m2.clone(), &d2, &hyper).unwrap();
        let (b, hb) = train_classifier(m2, &d2, &hyper).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a, b);
    }
}
