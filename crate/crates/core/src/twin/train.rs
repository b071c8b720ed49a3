//! Mini-batch training with Adam and early stopping on validation loss.

use log::{debug, info};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{self, ArchDescriptor, Mode, RunningStats, Weights};
use super::{evaluate_pairs, OptimizerInfo, TwinError, TwinModel};
use crate::pairing::{ImagePair, PairLabel};
use crate::seed::mix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub margin: f64,
    pub patience: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub arch: ArchDescriptor,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 50,
            max_epochs: 50,
            margin: 1.0,
            patience: 5,
            learning_rate: 1e-3,
            seed: 0,
            arch: ArchDescriptor::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TwinError> {
        if self.batch_size == 0 {
            return Err(TwinError::Config("batch_size must be at least 1".into()));
        }
        if !(self.margin > 0.0) {
            return Err(TwinError::Config("margin must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TwinError::Config("learning_rate must be positive".into()));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(TwinError::Config("max_epochs and patience must be at least 1".into()));
        }
        self.arch.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

/// Adam with the usual moment constants.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    t: i32,
    m: Weights,
    v: Weights,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPSILON: f64 = 1e-8;

    pub fn new(arch: &ArchDescriptor, lr: f64) -> Self {
        Self {
            lr,
            t: 0,
            m: Weights::zeros(arch),
            v: Weights::zeros(arch),
        }
    }

    pub fn info(lr: f64) -> OptimizerInfo {
        OptimizerInfo {
            name: "adam".into(),
            learning_rate: lr,
            beta1: Self::BETA1,
            beta2: Self::BETA2,
            epsilon: Self::EPSILON,
        }
    }

    pub fn step(&mut self, weights: &mut Weights, grads: &Weights) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let lr = self.lr;
        for (((w, g), m), v) in weights
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for i in 0..w.len() {
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPSILON);
            }
        }
    }
}

/// Tracks the best validation loss and decides when to stop.
#[derive(Debug, Clone)]
pub struct EarlyStopping<T> {
    patience: usize,
    wait: usize,
    best: Option<(usize, f64, T)>,
}

impl<T> EarlyStopping<T> {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            wait: 0,
            best: None,
        }
    }

    /// Records an epoch's validation loss; `snapshot` is only taken on
    /// improvement. Returns true when training should stop.
    pub fn observe(&mut self, epoch: usize, loss: f64, snapshot: impl FnOnce() -> T) -> bool {
        let improved = self.best.as_ref().is_none_or(|(_, best, _)| loss < *best);
        if improved {
            self.best = Some((epoch, loss, snapshot()));
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        self.wait >= self.patience
    }

    pub fn best(&self) -> Option<&(usize, f64, T)> {
        self.best.as_ref()
    }

    pub fn into_best(self) -> Option<(usize, f64, T)> {
        self.best
    }
}

fn batch_input(pairs: &[&ImagePair]) -> Vec<f64> {
    let mut input = Vec::with_capacity(pairs.len() * 2 * crate::fingerprint::PIXEL_COUNT);
    for side in 0..2 {
        for p in pairs {
            let img = if side == 0 { &p.left } else { &p.right };
            super::scale_pixels(img.pixels(), &mut input);
        }
    }
    input
}

/// Mean loss of a batch and its gradient w.r.t. the embeddings. Rows
/// `0..b` hold left embeddings, rows `b..2b` the right ones.
fn loss_from_embeddings(emb: &Array2<f64>, pairs: &[&ImagePair], margin: f64) -> (f64, Array2<f64>) {
    let b = pairs.len();
    let scale = 1.0 / b as f64;
    let mut grad = Array2::zeros(emb.raw_dim());
    let mut total = 0.0;
    for (i, p) in pairs.iter().enumerate() {
        let diff = &emb.row(i) - &emb.row(b + i);
        let d = diff.dot(&diff).sqrt();
        let coeff = match p.label {
            PairLabel::Similar => {
                total += d * d;
                2.0
            }
            PairLabel::Dissimilar => {
                let h = (margin - d).max(0.0);
                total += h * h;
                if h > 0.0 && d > 0.0 {
                    -2.0 * h / d
                } else {
                    0.0
                }
            }
        };
        let g = diff * (coeff * scale);
        grad.row_mut(i).assign(&g);
        grad.row_mut(b + i).assign(&(-g));
    }
    (total * scale, grad)
}

/// Training-mode loss of one batch; running statistics are not touched.
pub fn batch_loss(arch: &ArchDescriptor, weights: &Weights, pairs: &[&ImagePair], margin: f64) -> f64 {
    let mut stats = RunningStats::new(arch);
    let (emb, _) = net::forward(arch, weights, &mut stats, &batch_input(pairs), Mode::Train);
    loss_from_embeddings(&emb, pairs, margin).0
}

/// Training-mode loss of one batch plus a hash of its activation pattern
/// (ReLU states and max-pool choices). Finite differences are only exact
/// between weight settings whose patterns agree.
pub fn batch_loss_and_pattern(arch: &ArchDescriptor, weights: &Weights, pairs: &[&ImagePair], margin: f64) -> (f64, u64) {
    let mut stats = RunningStats::new(arch);
    let (emb, cache) = net::forward(arch, weights, &mut stats, &batch_input(pairs), Mode::Train);
    let loss = loss_from_embeddings(&emb, pairs, margin).0;
    (loss, cache.expect("train cache").pattern())
}

/// Training-mode loss of one batch and its gradient w.r.t. every weight.
pub fn batch_loss_and_gradient(
    arch: &ArchDescriptor,
    weights: &Weights,
    pairs: &[&ImagePair],
    margin: f64,
) -> (f64, Weights) {
    let mut stats = RunningStats::new(arch);
    step_gradient(arch, weights, &mut stats, pairs, margin)
}

fn step_gradient(
    arch: &ArchDescriptor,
    weights: &Weights,
    stats: &mut RunningStats,
    pairs: &[&ImagePair],
    margin: f64,
) -> (f64, Weights) {
    let (emb, cache) = net::forward(arch, weights, stats, &batch_input(pairs), Mode::Train);
    let (loss, d_emb) = loss_from_embeddings(&emb, pairs, margin);
    let grads = net::backward(arch, weights, &cache.expect("train cache"), d_emb.view());
    (loss, grads)
}

/// Trains from a seeded init. Pairs are reshuffled every epoch; the
/// weights of the epoch with the lowest validation loss are returned.
pub fn train(config: &TrainConfig, train_pairs: &[ImagePair], validation_pairs: &[ImagePair]) -> Result<TwinModel, TwinError> {
    config.validate()?;
    if train_pairs.is_empty() {
        return Err(TwinError::EmptyPairs("train on"));
    }
    if validation_pairs.is_empty() {
        return Err(TwinError::EmptyPairs("validate on"));
    }
    let arch = config.arch;
    let mut model = TwinModel::new(arch, config.seed)?;
    model.meta.batch_size = config.batch_size;
    model.meta.margin = config.margin;
    model.meta.patience = config.patience;
    model.meta.optimizer = Adam::info(config.learning_rate);
    model.meta.initial_train_loss = Some(evaluate_pairs(&model, train_pairs)?.mean_loss);

    let mut adam = Adam::new(&arch, config.learning_rate);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    let mut epochs_run = 0;
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&ImagePair> = chunk.iter().map(|&i| &train_pairs[i]).collect();
            let (loss, grads) = step_gradient(&arch, &model.weights, &mut model.running, &batch, config.margin);
            if !loss.is_finite() {
                return Err(TwinError::Divergence { epoch, what: "training loss" });
            }
            adam.step(&mut model.weights, &grads);
            loss_sum += loss * batch.len() as f64;
        }
        if !model.weights.all_finite() {
            return Err(TwinError::Divergence { epoch, what: "weights" });
        }
        let train_loss = loss_sum / train_pairs.len() as f64;
        let validation_loss = evaluate_pairs(&model, validation_pairs)?.mean_loss;
        if !validation_loss.is_finite() {
            return Err(TwinError::Divergence { epoch, what: "validation loss" });
        }
        info!("epoch {epoch}: train loss {train_loss:.6}, validation loss {validation_loss:.6}");
        model.meta.history.push(EpochLog {
            epoch,
            train_loss,
            validation_loss,
        });
        epochs_run = epoch;
        let snapshot = || (model.weights.clone(), model.running.clone());
        if stopper.observe(epoch, validation_loss, snapshot) {
            stopped_early = epoch < config.max_epochs;
            debug!("early stop after epoch {epoch}");
            break;
        }
    }

    let (best_epoch, best_loss, (weights, running)) = stopper.into_best().expect("at least one epoch ran");
    model.weights = weights;
    model.running = running;
    model.meta.epochs_run = epochs_run;
    model.meta.best_epoch = best_epoch;
    model.meta.best_validation_loss = Some(best_loss);
    model.meta.stopped_early = stopped_early;
    model.meta.final_train_loss = Some(evaluate_pairs(&model, train_pairs)?.mean_loss);
    Ok(model)
}
