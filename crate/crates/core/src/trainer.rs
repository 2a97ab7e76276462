//! Supervised training: SGD with momentum and weight decay, a per-epoch cosine
//! learning-rate schedule, cross-entropy on accumulated outputs, and
//! per-epoch checkpoints for rewinding.
//!
//! Data order for epoch `e` is drawn from a ChaCha stream keyed by
//! `(seed, e)`, so resuming from any checkpoint replays the same batches.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{log_sum_exp, Tape};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::pruner::BinaryMask;
use crate::snn::network::{bind, check_input, trace_logits, Grads, NetworkSpec, TimestepPrediction};
use crate::tensor::NumArray;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub schedule: Schedule,
    pub seed: u64,
    /// Checkpoint epoch used for late rewinding.
    pub rewind_epoch: usize,
    pub timesteps: usize,
    /// Keeps biases and affine terms fixed; only prunable weights train.
    pub freeze_non_prunable: bool,
    /// Evaluate the test set after every epoch, not only the last one.
    pub eval_every_epoch: bool,
    /// Evaluate the test set after the last epoch.
    pub eval_final: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 128,
            base_lr: 0.3,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: Schedule::Cosine,
            seed: 0,
            rewind_epoch: 20,
            timesteps: 5,
            freeze_non_prunable: false,
            eval_every_epoch: true,
            eval_final: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.epochs > 0 && self.rewind_epoch >= self.epochs {
            return Err(Error::Config(format!(
                "rewind_epoch {} must be below epochs {}",
                self.rewind_epoch, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.timesteps == 0 {
            return Err(Error::Config("timesteps must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f32 {
        match self.schedule {
            Schedule::Cosine => cosine_lr(epoch, self),
            Schedule::Constant => self.base_lr,
        }
    }
}

/// `base_lr * (1 + cos(pi * epoch / epochs)) / 2`.
pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> f32 {
    cosine_lr_at(epoch as f64, cfg)
}

/// [`cosine_lr`] at a fractional epoch.
pub fn cosine_lr_at(epoch: f64, cfg: &TrainConfig) -> f32 {
    let progress = epoch / cfg.epochs.max(1) as f64;
    (cfg.base_lr as f64 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())) as f32
}

/// Position of the data-order generator: the stream for the next epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
}

impl RngState {
    fn generator(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// Full training state after `epoch` completed epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub params: ParameterSet,
    /// Momentum buffers.
    pub velocity: ParameterSet,
    pub rng: RngState,
}

impl Checkpoint {
    /// The state before any training.
    pub fn initial(params: ParameterSet, seed: u64) -> Self {
        Self {
            epoch: 0,
            velocity: params.zeros_like(),
            params,
            rng: RngState { seed, stream: 0 },
        }
    }

    /// Start state for retraining from rewound weights: momentum cleared.
    pub fn rewound(epoch: usize, params: ParameterSet, seed: u64) -> Self {
        Self {
            epoch,
            velocity: params.zeros_like(),
            params,
            rng: RngState {
                seed,
                stream: epoch as u64,
            },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoints {
    by_epoch: BTreeMap<usize, Checkpoint>,
}

impl Checkpoints {
    pub fn insert(&mut self, ckpt: Checkpoint) {
        self.by_epoch.insert(ckpt.epoch, ckpt);
    }

    pub fn get(&self, epoch: usize) -> Option<&Checkpoint> {
        self.by_epoch.get(&epoch)
    }

    pub fn epochs(&self) -> impl Iterator<Item = usize> + '_ {
        self.by_epoch.keys().copied()
    }

    pub fn latest(&self) -> Option<&Checkpoint> {
        self.by_epoch.values().next_back()
    }

    pub fn len(&self) -> usize {
        self.by_epoch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_epoch.is_empty()
    }

    pub fn extend(&mut self, other: Checkpoints) {
        self.by_epoch.extend(other.by_epoch);
    }
}

/// Exact copy of the weights checkpointed at `epoch`.
pub fn rewind(checkpoints: &Checkpoints, epoch: usize) -> Result<ParameterSet> {
    checkpoints
        .get(epoch)
        .map(|c| c.params.clone())
        .ok_or_else(|| Error::Lookup(format!("no checkpoint at epoch {epoch}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// Number of completed epochs.
    pub epoch: usize,
    pub lr: f32,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParameterSet,
    pub checkpoints: Checkpoints,
    pub trajectory: Vec<EpochStats>,
    /// State at the last completed epoch.
    pub last: Checkpoint,
    pub stopped_early: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

/// Mean cross-entropy of `softmax(accumulated logits at T)`.
pub fn loss_ce_accumulated(prediction: &TimestepPrediction, labels: &[usize]) -> Result<f64> {
    ce_from_logits(&prediction.logits, labels)
}

fn ce_from_logits(logits: &NumArray, labels: &[usize]) -> Result<f64> {
    let classes = logits.shape()[1];
    if logits.shape()[0] != labels.len() {
        return Err(Error::Dimension {
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
            context: "logits vs labels",
        });
    }
    let mut total = 0.0f64;
    for (row, &label) in logits.data().chunks(classes).zip(labels) {
        if label >= classes {
            return Err(Error::Data(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        total += (log_sum_exp(row) - row[label]) as f64;
    }
    Ok(total / labels.len().max(1) as f64)
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalStats {
    pub accuracy: f64,
    pub loss: f64,
    /// Mean spike events per example across all spiking layers and timesteps.
    pub spikes_per_example: f64,
}

const EVAL_BATCH: usize = 250;

/// Inference over a whole dataset at `timesteps`.
pub fn evaluate(
    spec: &NetworkSpec,
    params: &ParameterSet,
    mask: Option<&BinaryMask>,
    data: &Dataset,
    timesteps: usize,
) -> Result<EvalStats> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let plan = spec.plan()?;
    spec.check_params(params)?;
    let (mut correct, mut loss, mut spikes) = (0usize, 0.0f64, 0.0f64);
    let mut start = 0;
    while start < data.len() {
        let end = (start + EVAL_BATCH).min(data.len());
        let images = data.images.slice_outer(start, end);
        let labels = &data.labels[start..end];
        check_input(spec, &images)?;
        let mut tape = Tape::new();
        let bound = bind(&mut tape, params, mask, Grads::None)?;
        let x = tape.constant(images);
        let (logits, site_spikes) = trace_logits(&mut tape, spec, &plan, &bound, x, timesteps)?;
        let lv = tape.value(logits);
        let classes = lv.shape()[1];
        correct += lv
            .data()
            .chunks(classes)
            .zip(labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
        loss += ce_from_logits(lv, labels)? * labels.len() as f64;
        spikes += site_spikes.iter().sum::<f64>();
        start = end;
    }
    let n = data.len() as f64;
    Ok(EvalStats {
        accuracy: correct as f64 / n,
        loss: loss / n,
        spikes_per_example: spikes / n,
    })
}

/// Trains from initialisation for `cfg.epochs` epochs.
pub fn train_epochs(
    spec: &NetworkSpec,
    params: ParameterSet,
    mask: &BinaryMask,
    data: &Split,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_from(spec, Checkpoint::initial(params, cfg.seed), mask, data, cfg, cfg.epochs, |_, _| {
        Ok(Flow::Continue)
    })
}

/// Trains from `start` until `end_epoch` epochs have completed, calling
/// `on_epoch` after each epoch with the new checkpoint.
///
/// Masked weights are zeroed on entry and after every optimizer step.
pub fn train_from<F>(
    spec: &NetworkSpec,
    start: Checkpoint,
    mask: &BinaryMask,
    data: &Split,
    cfg: &TrainConfig,
    end_epoch: usize,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&Checkpoint, &EpochStats) -> Result<Flow>,
{
    cfg.validate()?;
    spec.check_params(&start.params)?;
    mask.check_congruent(&start.params)?;
    if data.train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    check_input(spec, &data.train.images.slice_outer(0, 1))?;
    let plan = spec.plan()?;
    let grads_mode = if cfg.freeze_non_prunable {
        Grads::PrunableOnly
    } else {
        Grads::All
    };

    let Checkpoint {
        epoch: start_epoch,
        mut params,
        mut velocity,
        rng,
    } = start;
    mask.apply(&mut params);
    mask.apply(&mut velocity);
    let seed = rng.seed;

    let mut checkpoints = Checkpoints::default();
    checkpoints.insert(Checkpoint {
        epoch: start_epoch,
        params: params.clone(),
        velocity: velocity.clone(),
        rng,
    });
    let mut trajectory = Vec::new();
    let mut stopped_early = false;
    let n = data.train.len();

    for epoch in start_epoch..end_epoch {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut RngState { seed, stream: epoch as u64 }.generator());

        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for rows in order.chunks(cfg.batch_size) {
            let images = data.train.images.gather_outer(rows);
            let labels: Vec<usize> = rows.iter().map(|&r| data.train.labels[r]).collect();

            let mut tape = Tape::new();
            let bound = bind(&mut tape, &params, Some(mask), grads_mode)?;
            let x = tape.constant(images);
            let (logits, _) = trace_logits(&mut tape, spec, &plan, &bound, x, cfg.timesteps)
                .map_err(|e| match e {
                    Error::NumericFault { .. } => Error::TrainingFault {
                        epoch: epoch + 1,
                        reason: e.to_string(),
                    },
                    other => other,
                })?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            let loss_value = tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::TrainingFault {
                    epoch: epoch + 1,
                    reason: format!("loss became {loss_value}"),
                });
            }
            let lv = tape.value(logits);
            let classes = lv.shape()[1];
            correct += lv
                .data()
                .chunks(classes)
                .zip(&labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            loss_sum += loss_value as f64 * rows.len() as f64;
            tape.backward(loss)?;

            for ((p, v), &leaf) in params.iter_mut().zip(velocity.iter_mut()).zip(&bound.leaves) {
                let Some(g) = tape.grad(leaf) else { continue };
                let theta = p.value.data_mut();
                let buf = v.value.data_mut();
                for ((t, b), &gi) in theta.iter_mut().zip(buf.iter_mut()).zip(g) {
                    *b = cfg.momentum * *b + gi + cfg.weight_decay * *t;
                    *t -= lr * *b;
                }
            }
            mask.apply(&mut params);
            mask.apply(&mut velocity);
        }

        let done = epoch + 1;
        let test_accuracy = if (cfg.eval_every_epoch || (cfg.eval_final && done == end_epoch)) && !data.test.is_empty() {
            Some(evaluate(spec, &params, Some(mask), &data.test, cfg.timesteps)?.accuracy)
        } else {
            None
        };
        let stats = EpochStats {
            epoch: done,
            lr,
            train_loss: loss_sum / n as f64,
            train_accuracy: correct as f64 / n as f64,
            test_accuracy,
        };
        log::debug!(
            "epoch {done}: loss {:.4} train {:.3} test {:?}",
            stats.train_loss,
            stats.train_accuracy,
            stats.test_accuracy
        );
        let ckpt = Checkpoint {
            epoch: done,
            params: params.clone(),
            velocity: velocity.clone(),
            rng: RngState {
                seed,
                stream: done as u64,
            },
        };
        let flow = on_epoch(&ckpt, &stats)?;
        checkpoints.insert(ckpt);
        trajectory.push(stats);
        if flow == Flow::Stop {
            stopped_early = done < end_epoch;
            break;
        }
    }

    let last = checkpoints.latest().cloned().expect("start checkpoint is always stored");
    Ok(TrainOutcome {
        params,
        checkpoints,
        trajectory,
        last,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset, DatasetKind, DatasetSource};
    use crate::snn::{LayerSpec, LifParams, NeuronMode};

    fn spec() -> NetworkSpec {
        NetworkSpec {
            input_shape: [1, 4, 4],
            num_classes: 2,
            layers: vec![
                LayerSpec::Dense { out_features: 8, bias: true },
                LayerSpec::Dense { out_features: 2, bias: true },
            ],
            neuron: NeuronMode::Lif,
            timesteps: 4,
            lif: LifParams::default(),
            exempt_first_last: false,
        }
    }

    fn data() -> Split {
        load_dataset(&DatasetSource {
            kind: DatasetKind::SyntheticSeparable,
            classes: 2,
            image_shape: [1, 4, 4],
            train_size: 40,
            test_size: 20,
            seed: 3,
            noise: 0.05,
            ..DatasetSource::default()
        })
        .unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            epochs: 6,
            batch_size: 8,
            base_lr: 0.1,
            rewind_epoch: 2,
            timesteps: 4,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn cosine_endpoints() {
        let c = TrainConfig {
            epochs: 150,
            base_lr: 0.3,
            ..TrainConfig::default()
        };
        assert_eq!(cosine_lr(0, &c), 0.3);
        assert!((cosine_lr(75, &c) - 0.15).abs() < 1e-7);
        for lr in [cosine_lr(149, &c), cosine_lr_at(150.0 - 1e-6, &c)] {
            assert!(lr > 0.0 && lr < 0.01 * 0.3, "{lr}");
        }
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { rewind_epoch: 40, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { base_lr: 0.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_epochs_leave_params_unchanged() {
        let s = spec();
        let p = s.init_params(1, 1.0).unwrap();
        let c = TrainConfig { epochs: 0, ..cfg() };
        let out = train_epochs(&s, p.clone(), &BinaryMask::ones_for(&p), &data(), &c).unwrap();
        assert!(out.params.bitwise_eq(&p));
        assert!(out.trajectory.is_empty());
    }

    #[test]
    fn masked_weights_stay_zero() {
        let s = spec();
        let p = s.init_params(1, 1.0).unwrap();
        let mask = crate::pruner::random_mask(&p, 0.5, 9);
        let out = train_epochs(&s, p, &mask, &data(), &cfg()).unwrap();
        for ckpt in out.checkpoints.epochs().map(|e| out.checkpoints.get(e).unwrap()) {
            for (param, layer) in ckpt.params.prunable().zip(mask.layers()) {
                for (&v, &k) in param.value.data().iter().zip(layer.keep()) {
                    if !k {
                        assert_eq!(v.to_bits(), 0);
                    }
                }
            }
        }
    }

    #[test]
    fn loss_ce_examples() {
        let uniform = TimestepPrediction::from_accumulated(&[
            NumArray::zeros(&[1, 4]),
            NumArray::zeros(&[1, 4]),
        ])
        .unwrap();
        assert!((loss_ce_accumulated(&uniform, &[2]).unwrap() - 4f64.ln()).abs() < 1e-7);

        let confident = NumArray::new(vec![1, 3], vec![0.0, 200.0, 0.0]).unwrap();
        let p = TimestepPrediction::from_accumulated(&[confident.clone(), confident]).unwrap();
        assert!(loss_ce_accumulated(&p, &[1]).unwrap().abs() < 1e-7);
        assert!(matches!(loss_ce_accumulated(&p, &[3]), Err(Error::Data(_))));

        let two = NumArray::new(vec![2, 2], vec![1.0, 0.0, 0.0, 3.0]).unwrap();
        let p = TimestepPrediction::from_accumulated(&[two.clone(), two]).unwrap();
        let l1 = (1f64.exp() + 1.0).ln() - 1.0;
        let l2 = (1.0 + 3f64.exp()).ln();
        assert!((loss_ce_accumulated(&p, &[0, 0]).unwrap() - (l1 + l2) / 2.0).abs() < 1e-6);
    }

    #[test]
    fn rewind_missing_is_lookup_error() {
        assert!(matches!(rewind(&Checkpoints::default(), 3), Err(Error::Lookup(_))));
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
