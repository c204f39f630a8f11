use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{gradients, objective_value, sample_loss, Activation, Loss, Objective, SpectralDataset, SpectralWeights};
use crate::dataset::{LabeledDataset, Labels};
use crate::error::{invalid, Result};
use crate::rng::stream_rng;
use crate::stats::fmt_f64;

const SHUFFLE_STREAM_BASE: u64 = 1 << 48;
/// Relative gain over the best metric that counts as progress.
const PLATEAU_IMPROVEMENT: f64 = 0.01;
const RESYMMETRIZE_ABOVE: f64 = 1e-10;

fn d_momentum() -> f64 {
    0.9
}
fn d_patience() -> usize {
    20
}
fn d_factor() -> f64 {
    0.1
}
fn d_min_lr() -> f64 {
    1e-6
}
fn d_max_epochs() -> usize {
    200
}
fn d_batch() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub weight_decay: f64,
    pub lr: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_patience")]
    pub patience: usize,
    #[serde(default = "d_factor")]
    pub lr_factor: f64,
    #[serde(default = "d_min_lr")]
    pub min_lr: f64,
    #[serde(default = "d_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub loss: Loss,
    /// Defaults to on for relu networks and off for linear ones.
    #[serde(default)]
    pub bias: Option<bool>,
}

impl TrainConfig {
    pub fn new(weight_decay: f64, lr: f64) -> Self {
        Self {
            weight_decay,
            lr,
            momentum: d_momentum(),
            patience: d_patience(),
            lr_factor: d_factor(),
            min_lr: d_min_lr(),
            max_epochs: d_max_epochs(),
            batch_size: d_batch(),
            seed: 0,
            activation: Activation::Linear,
            loss: Loss::SquaredError,
            bias: None,
        }
    }

    pub fn use_bias(&self) -> bool {
        self.bias.unwrap_or(self.activation == Activation::Relu)
    }

    pub fn objective(&self) -> Objective {
        Objective {
            loss: self.loss,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weight_decay >= 0.0) {
            return invalid("weight_decay must be nonnegative");
        }
        if !(self.lr > 0.0) {
            return invalid("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid("momentum must lie in [0, 1)");
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return invalid("lr_factor must lie in (0, 1)");
        }
        if self.batch_size == 0 || self.patience == 0 {
            return invalid("batch_size and patience must be positive");
        }
        if !(self.min_lr > 0.0) {
            return invalid("min_lr must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean minibatch data loss during the epoch.
    pub train_loss: f64,
    /// Penalized objective on the full training set after the epoch.
    pub objective: f64,
    pub val_metric: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub weights: SpectralWeights,
    pub velocity: SpectralWeights,
    pub lr: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
    pub epoch: usize,
    pub finished: bool,
    pub history: Vec<EpochRecord>,
    pub resymmetrized: usize,
}

/// Accuracy for class labels under cross-entropy, otherwise the negative mean loss.
pub fn evaluate_metric(w: &SpectralWeights, data: &SpectralDataset, loss: Loss) -> Result<f64> {
    if loss == Loss::CrossEntropy {
        if let Labels::Classes { classes, .. } = &data.labels {
            let mut hits = 0usize;
            for (x, c) in data.spectra.iter().zip(classes) {
                let out = w.forward_unchecked(x)?;
                let arg = out
                    .iter()
                    .enumerate()
                    .fold(0, |b, (k, v)| if *v > out[b] { k } else { b });
                hits += usize::from(arg == *c);
            }
            return Ok(hits as f64 / data.len() as f64);
        }
    }
    let mut total = 0.0;
    for (n, x) in data.spectra.iter().enumerate() {
        total += sample_loss(loss, &w.forward_unchecked(x)?, &data.labels, n)?.0;
    }
    Ok(-total / data.len() as f64)
}

impl TrainState {
    pub fn new(weights: SpectralWeights, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if weights.activation() != cfg.activation {
            return invalid(format!(
                "weights use {:?} activation but the config asks for {:?}",
                weights.activation(),
                cfg.activation
            ));
        }
        if weights.has_bias() != cfg.use_bias() {
            return invalid("weight biases do not match the config bias setting");
        }
        let velocity = weights.zeros_like();
        Ok(Self {
            weights,
            velocity,
            lr: cfg.lr,
            best: None,
            bad_epochs: 0,
            epoch: 0,
            finished: false,
            history: Vec::new(),
            resymmetrized: 0,
        })
    }

    fn epoch_order(&self, n: usize, cfg: &TrainConfig) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut stream_rng(cfg.seed, SHUFFLE_STREAM_BASE + self.epoch as u64));
        idx
    }

    /// One pass of minibatch SGD with momentum, then the plateau schedule update.
    pub fn step_epoch(&mut self, train: &SpectralDataset, val: &SpectralDataset, cfg: &TrainConfig) -> Result<()> {
        let order = self.epoch_order(train.len(), cfg);
        let lr = self.lr;
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let r = gradients(&self.weights, train, idx, cfg.objective(), b)?;
            loss_sum += r.data_loss;
            batches += 1;
            self.velocity.scale(cfg.momentum);
            self.velocity.axpy(1.0, &r.grads);
            self.weights.axpy(-lr, &self.velocity);
            if self.weights.max_conjugate_asymmetry() > RESYMMETRIZE_ABOVE {
                self.weights.symmetrize();
                self.velocity.symmetrize();
                self.resymmetrized += 1;
            }
        }
        let (objective, _) = objective_value(&self.weights, train, cfg.objective())?;
        let metric = evaluate_metric(&self.weights, val, cfg.loss)?;
        self.epoch += 1;
        self.history.push(EpochRecord {
            epoch: self.epoch,
            train_loss: loss_sum / batches as f64,
            objective,
            val_metric: metric,
            lr,
        });
        let improved = match self.best {
            None => true,
            Some(best) => metric > best + PLATEAU_IMPROVEMENT * best.abs(),
        };
        if improved {
            self.best = Some(metric);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= cfg.patience {
                self.lr *= cfg.lr_factor;
                self.bad_epochs = 0;
                if self.lr <= cfg.min_lr * (1.0 + 1e-9) {
                    self.finished = true;
                }
            }
        }
        if self.epoch >= cfg.max_epochs {
            self.finished = true;
        }
        Ok(())
    }

    /// Trains until finished or `until_epoch` epochs are complete, calling
    /// `observer` after every epoch.
    pub fn run(
        &mut self,
        train: &SpectralDataset,
        val: &SpectralDataset,
        cfg: &TrainConfig,
        until_epoch: Option<usize>,
        observer: &mut dyn FnMut(&TrainState) -> Result<()>,
    ) -> Result<()> {
        while !self.finished && until_epoch.is_none_or(|e| self.epoch < e) {
            self.step_epoch(train, val, cfg)?;
            observer(self)?;
        }
        Ok(())
    }
}

/// Trains `w` on `train_ds` with validation on `val_ds`; returns final weights and history.
pub fn train(
    w: SpectralWeights,
    train_ds: &LabeledDataset,
    val_ds: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(SpectralWeights, Vec<EpochRecord>)> {
    let train = SpectralDataset::from_dataset(train_ds);
    let val = SpectralDataset::from_dataset(val_ds);
    let mut state = TrainState::new(w, cfg)?;
    state.run(&train, &val, cfg, None, &mut |_| Ok(()))?;
    Ok((state.weights, state.history))
}

/// History as CSV `epoch,train_loss,val_metric,lr`.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_metric,lr\n");
    for r in history {
        let _ = writeln!(s, "{},{},{},{}", r.epoch, fmt_f64(r.train_loss), fmt_f64(r.val_metric), fmt_f64(r.lr));
    }
    s
}
