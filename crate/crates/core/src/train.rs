//! Adam, the plain and joint training loops, and evaluation.

use rand::seq::SliceRandom;

use crate::augment::{self, PairSampler};
use crate::autograd::{Gradients, Tape, Var};
use crate::data::{LabeledDataset, SplitDataset};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::losses::{self, ClsLoss, LossConfig, Reduction};
use crate::models::{AugNet, SmallNet};
use crate::seed::{self, RunRng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for one parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor], config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameters, {} gradients, optimizer tracks {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean classification loss over the plain training batches.
    pub train_loss: f64,
    /// Mean augmentation loss over the pair batches, when one is active.
    pub aug_loss: Option<f64>,
    /// Running accuracy over the plain training batches (train mode).
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsHistory {
    pub records: Vec<EpochRecord>,
    pub best_val_acc: f64,
    pub best_epoch: usize,
}

impl MetricsHistory {
    /// Appends a record; returns whether it is a new best (earliest epoch
    /// wins ties).
    pub fn push(&mut self, record: EpochRecord) -> bool {
        let best = self.records.is_empty() || record.val_acc > self.best_val_acc;
        if best {
            self.best_val_acc = record.val_acc;
            self.best_epoch = record.epoch;
        }
        self.records.push(record);
        best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub cls_loss: ClsLoss,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            adam: AdamConfig::default(),
            cls_loss: ClsLoss::SigmoidBce,
            seed: 0,
        }
    }
}

/// Settings of the joint phase that feeds AugNet output to SmallNet.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct NeuralConfig {
    pub loss: LossConfig,
    pub reduction: Reduction,
    /// Feed AugNet the same image twice.
    pub control: bool,
    /// Use running statistics instead of batch statistics for batch
    /// normalization when SmallNet sees augmented images.
    pub bn_eval_on_augmented: bool,
}

/// State handed to the per-epoch callback.
pub struct EpochView<'a> {
    pub record: &'a EpochRecord,
    pub is_best: bool,
    pub smallnet: &'a SmallNet,
    pub augnet: Option<&'a AugNet>,
}

pub type EpochHook<'h> = dyn FnMut(EpochView<'_>) -> Result<()> + 'h;

/// Eval-mode accuracy of `net` on `ds`.
pub fn evaluate(net: &SmallNet, ds: &LabeledDataset, batch_size: usize) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut predicted = Vec::with_capacity(ds.len());
    let order: Vec<usize> = (0..ds.len()).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let scores = net.scores(&ds.batch(chunk)?)?;
        predicted.extend(losses::predict(&scores)?);
    }
    losses::accuracy(&predicted, &ds.labels)
}

fn gradients_of<'g>(grads: &'g Gradients, vars: &[Var<'_>]) -> Result<Vec<&'g Tensor>> {
    vars.iter().map(|&v| grads.get(v)).collect()
}

fn check_loss(value: f64, epoch: usize, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { epoch, step })
    }
}

/// Trains SmallNet alone on the training split.
pub fn train_plain(
    net: &mut SmallNet,
    data: &SplitDataset,
    cfg: &TrainConfig,
    hook: &mut EpochHook<'_>,
) -> Result<MetricsHistory> {
    train(net, None, data, cfg, None, hook)
}

/// Alternates a plain SmallNet step with a joint AugNet + SmallNet step on
/// same-class pairs. One epoch is one pass of the plain loader.
pub fn train_neural(
    net: &mut SmallNet,
    augnet: &mut AugNet,
    data: &SplitDataset,
    cfg: &TrainConfig,
    neural: &NeuralConfig,
    hook: &mut EpochHook<'_>,
) -> Result<MetricsHistory> {
    neural.loss.validate()?;
    if neural.loss.aug_loss == losses::AugLoss::Style && data.train.image_shape()[2] == 1 {
        return Err(Error::Config(
            "style loss is undefined for single-channel images".into(),
        ));
    }
    train(net, Some(augnet), data, cfg, Some(neural), hook)
}

struct JointPhase<'a> {
    augnet: &'a mut AugNet,
    adam: AdamState,
    sampler: PairSampler,
    rng: RunRng,
    cfg: &'a NeuralConfig,
}

fn train(
    net: &mut SmallNet,
    augnet: Option<&mut AugNet>,
    data: &SplitDataset,
    cfg: &TrainConfig,
    neural: Option<&NeuralConfig>,
    hook: &mut EpochHook<'_>,
) -> Result<MetricsHistory> {
    let train_ds = &data.train;
    if train_ds.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut adam = AdamState::new(net.params().values(), cfg.adam);
    let mut joint = match (augnet, neural) {
        (Some(augnet), Some(ncfg)) => Some(JointPhase {
            adam: AdamState::new(augnet.params().values(), cfg.adam),
            augnet,
            sampler: PairSampler::new(train_ds, ncfg.control),
            rng: seed::rng(cfg.seed, seed::stream::PAIRS),
            cfg: ncfg,
        }),
        _ => None,
    };
    let mut dropout_rng = seed::rng(cfg.seed, seed::stream::DROPOUT);
    let mut history = MetricsHistory::default();

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_ds.len()).collect();
        order.shuffle(&mut seed::rng(cfg.seed, seed::stream::SHUFFLE + epoch as u64));
        let (mut loss_sum, mut aug_sum, mut steps, mut hits) = (0.0, 0.0, 0usize, 0usize);

        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let labels = train_ds.batch_labels(chunk);
            let batch = train_ds.batch(chunk)?;
            {
                let tape = Tape::new();
                let vars = net.params().bind(&tape);
                let x = tape.constant(batch);
                let scores = net.forward(&vars, x, Mode::Train, &mut dropout_rng)?;
                let predicted = losses::predict(&scores.value())?;
                hits += predicted.iter().zip(&labels).filter(|(p, l)| p == l).count();
                let loss = losses::classification_loss(scores, &labels, cfg.cls_loss)?;
                let value = loss.value().item();
                check_loss(value, epoch, step)?;
                loss_sum += value;
                let grads = tape.backward(loss)?;
                let g = gradients_of(&grads, &vars)?;
                adam.step(net.params_mut().values_mut(), &g)?;
            }

            if let Some(j) = joint.as_mut() {
                let pairs = j.sampler.sample_batch(&labels, &mut j.rng)?;
                let (inputs, targets) = augment::pair_batch(train_ds, &pairs)?;
                let tape = Tape::new();
                let sv = net.params().bind(&tape);
                let av = j.augnet.params().bind(&tape);
                let augmented = j.augnet.forward(&av, tape.constant(inputs))?;
                let bn_mode = if j.cfg.bn_eval_on_augmented {
                    Mode::Eval
                } else {
                    Mode::Train
                };
                let scores = net.forward_with(&sv, augmented, Mode::Train, bn_mode, &mut dropout_rng)?;
                let lc = losses::classification_loss(scores, &labels, cfg.cls_loss)?;
                let la = losses::augmentation_loss(
                    augmented,
                    tape.constant(targets),
                    j.cfg.loss.aug_loss,
                    j.cfg.reduction,
                )?;
                if let Some(la) = la {
                    let v = la.value().item();
                    check_loss(v, epoch, step)?;
                    aug_sum += v;
                }
                let total = losses::combined_loss(lc, la, &j.cfg.loss)?;
                check_loss(total.value().item(), epoch, step)?;
                let grads = tape.backward(total)?;
                let gs = gradients_of(&grads, &sv)?;
                let ga = gradients_of(&grads, &av)?;
                adam.step(net.params_mut().values_mut(), &gs)?;
                j.adam.step(j.augnet.params_mut().values_mut(), &ga)?;
            }
            steps += 1;
        }

        let val_acc = evaluate(net, &data.val, cfg.batch_size.max(64))?;
        let aug_active = joint
            .as_ref()
            .is_some_and(|j| j.cfg.loss.aug_loss != losses::AugLoss::None);
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / steps as f64,
            aug_loss: aug_active.then(|| aug_sum / steps as f64),
            train_acc: hits as f64 / train_ds.len() as f64,
            val_acc,
        };
        let is_best = history.push(record.clone());
        hook(EpochView {
            record: &record,
            is_best,
            smallnet: net,
            augnet: joint.as_ref().map(|j| &*j.augnet),
        })?;
    }
    Ok(history)
}
