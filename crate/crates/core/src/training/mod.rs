//! Supervised training: cross-entropy, AdamW, plateau scheduling and a
//! best-validation-accuracy checkpointing loop, plus the cross-session
//! evaluation protocol.

pub mod loss;
pub mod optim;
pub mod protocol;
pub mod scheduler;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::TrialSet;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Scalar;

pub use loss::{argmax, cross_entropy, cross_entropy_of};
pub use optim::{AdamW, AdamWConfig};
pub use protocol::{run_protocol, train_subject, ProtocolResult, SessionResult};
pub use scheduler::Plateau;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_lr: f64,
    pub seed: u64,
    pub val_fraction: f64,
    /// Reload the best-validation-accuracy weights after the last epoch.
    pub restore_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 1e-4,
            plateau_factor: 0.5,
            plateau_patience: 5,
            min_lr: 1e-4,
            seed: 42,
            val_fraction: 0.2,
            restore_best: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.min_lr > 0.0 && self.lr >= self.min_lr) {
            return Err(Error::Config(format!(
                "need lr >= min_lr > 0, got lr={} min_lr={}",
                self.lr, self.min_lr
            )));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config(format!(
                "plateau_factor {} outside (0, 1)",
                self.plateau_factor
            )));
        }
        if self.plateau_patience == 0 {
            return Err(Error::Config("plateau_patience must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction {} outside (0, 1)",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

/// One epoch. Training loss/accuracy are running means over the epoch's
/// training-mode batches (dropout active); validation figures come from an
/// inference-mode pass after the epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    /// Rate used during this epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch of the checkpoint; earliest wins ties.
    pub best_epoch: Option<usize>,
    pub best_val_acc: Option<f64>,
    /// Whether the model was left holding the checkpoint weights.
    pub restored: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub correct: usize,
    /// `[n, N]` row-major.
    pub probs: Vec<f64>,
    pub predictions: Vec<usize>,
}

/// Callbacks into the loop. `monitored_loss` may replace the loss fed to the
/// scheduler; `on_epoch` sees each finished record; `should_stop` may end
/// training after any epoch.
pub trait Monitor {
    fn monitored_loss(&mut self, _epoch: usize, loss: f64) -> f64 {
        loss
    }

    fn on_epoch(&mut self, _record: &EpochRecord) {}

    /// Checked after each epoch; `true` ends training early.
    fn should_stop(&mut self, _record: &EpochRecord) -> bool {
        false
    }
}

pub struct Silent;

impl Monitor for Silent {}

fn check_set<F: Scalar>(model: &Model<F>, set: &TrialSet, what: &str) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Training(format!("{what} set is empty")));
    }
    let cfg = model.config();
    if set.channels() != cfg.channels || set.samples() != cfg.samples {
        return Err(Error::Training(format!(
            "{what} trials are {}x{}, model expects {}x{}",
            set.channels(),
            set.samples(),
            cfg.channels,
            cfg.samples
        )));
    }
    if let Some(&l) = set.labels().iter().find(|&&l| l as usize >= cfg.classes) {
        return Err(Error::Training(format!(
            "{what} label {l} outside 0..{}",
            cfg.classes
        )));
    }
    Ok(())
}

/// Inference-mode loss, accuracy and probabilities.
pub fn evaluate<F: Scalar>(
    model: &Model<F>,
    set: &TrialSet,
    batch_size: usize,
) -> Result<Evaluation> {
    check_set(model, set, "evaluation")?;
    let n_classes = model.config().classes;
    let mut probs = Vec::with_capacity(set.len() * n_classes);
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let p = model.predict(&set.batch::<F>(chunk))?;
        probs.extend(p.data().iter().map(|v| v.as_f64()));
    }
    let predictions: Vec<usize> = probs.chunks(n_classes).map(argmax).collect();
    let correct = predictions
        .iter()
        .zip(set.labels())
        .filter(|(p, &l)| **p == l as usize)
        .count();
    let loss = probs
        .chunks(n_classes)
        .zip(set.labels())
        .map(|(row, &l)| -row[l as usize].max(loss::PROB_FLOOR).ln())
        .sum::<f64>()
        / set.len() as f64;
    Ok(Evaluation {
        loss,
        accuracy: correct as f64 / set.len() as f64,
        correct,
        probs,
        predictions,
    })
}

/// One optimizer step on the given trials; returns (loss, correct count).
pub fn train_step<F: Scalar, R: rand::Rng + ?Sized>(
    model: &mut Model<F>,
    opt: &mut AdamW<F>,
    set: &TrialSet,
    indices: &[usize],
    lr: f64,
    rng: &mut R,
) -> Result<(f64, usize)> {
    let labels: Vec<u8> = indices.iter().map(|&i| set.labels()[i]).collect();
    let mut g = Graph::new();
    let x = g.constant(set.batch::<F>(indices));
    let out = model.forward(&mut g, x, Mode::Train, rng)?;
    let loss = cross_entropy(&mut g, out.probs, &labels)?;
    let loss_value = g.value(loss).item().as_f64();
    let n = model.config().classes;
    let correct = g
        .value(out.probs)
        .data()
        .chunks(n)
        .zip(&labels)
        .filter(|(row, &l)| argmax(row) == l as usize)
        .count();
    let grads = g.backward(loss)?;
    model.commit(&out.pending);
    opt.step(model.params_mut(), &grads, lr)?;
    Ok((loss_value, correct))
}

/// Trains with the default (no-op) monitor.
pub fn train<F: Scalar>(
    model: &mut Model<F>,
    train_set: &TrialSet,
    val_set: Option<&TrialSet>,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    train_with(model, train_set, val_set, cfg, &mut Silent)
}

/// The loop: per epoch a seeded reshuffle (the final partial batch is kept),
/// one AdamW step per batch, an inference pass over the validation set, a
/// scheduler update, and a checkpoint whenever validation accuracy strictly
/// improves. Without a validation set the scheduler follows the training
/// loss and nothing is checkpointed.
pub fn train_with<F: Scalar>(
    model: &mut Model<F>,
    train_set: &TrialSet,
    val_set: Option<&TrialSet>,
    cfg: &TrainConfig,
    monitor: &mut dyn Monitor,
) -> Result<TrainHistory> {
    cfg.validate()?;
    check_set(model, train_set, "training")?;
    if let Some(v) = val_set {
        check_set(model, v, "validation")?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut sched = Plateau::new(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr);
    let mut lr = cfg.lr;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory {
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: None,
        best_val_acc: None,
        restored: false,
    };
    let mut best: Option<ParamStore<F>> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (l, c) = train_step(model, &mut opt, train_set, chunk, lr, &mut rng)?;
            loss_sum += l * chunk.len() as f64;
            correct += c;
        }
        let n = train_set.len() as f64;
        let (train_loss, train_acc) = (loss_sum / n, correct as f64 / n);
        let val = val_set
            .map(|v| evaluate(model, v, cfg.batch_size))
            .transpose()?;
        let record = EpochRecord {
            epoch,
            train_loss,
            train_acc,
            val_loss: val.as_ref().map(|e| e.loss),
            val_acc: val.as_ref().map(|e| e.accuracy),
            lr,
        };
        if let Some(e) = &val {
            if history.best_val_acc.is_none_or(|b| e.accuracy > b) {
                history.best_val_acc = Some(e.accuracy);
                history.best_epoch = Some(epoch);
                best = Some(model.params().clone());
            }
        }
        let monitored = monitor.monitored_loss(epoch, record.val_loss.unwrap_or(train_loss));
        lr = sched.step(monitored);
        monitor.on_epoch(&record);
        let stop = monitor.should_stop(&record);
        history.epochs.push(record);
        if stop {
            break;
        }
    }
    if cfg.restore_best {
        if let Some(snapshot) = best {
            model.params_mut().load_values(&snapshot)?;
            history.restored = true;
        }
    }
    Ok(history)
}
