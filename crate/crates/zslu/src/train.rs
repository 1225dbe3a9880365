//! Shared mini-batch CTC training loop: momentum SGD with gradient
//! accumulation over the batch, a held-out tenth of the data for validation,
//! and learning-rate halving when validation stops improving. Single-threaded
//! and fully seeded, so a (data, config, seed) triple reproduces weights
//! bit-exactly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::shuffled_indices;
use crate::ctc::{ctc_loss_grad_logits, min_frames};
use crate::mat::Mat;
use crate::nn::{zero_grads, Adam, ParamRef, SgdMomentum};
use crate::rng::{derive_seed, rng_from, validation_ids};
use crate::scalar::Scalar;
use crate::tags::CodecError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },
    #[error("codec: {0}")]
    Codec(#[from] CodecError),
    #[error("missing features for utterance `{0}`")]
    MissingFeatures(String),
    #[error("empty evaluation set")]
    EmptySet,
    #[error("empty text")]
    EmptyText,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lr_halve_patience: usize,
    pub grad_clip: f64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            epochs: 15,
            batch_size: 16,
            lr: 1e-2,
            momentum: 0.9,
            lr_halve_patience: 2,
            grad_clip: 5.0,
            optimizer: OptimizerKind::SgdMomentum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    /// Mean pre-clip gradient norm over the epoch's steps.
    pub grad_norm: f64,
}

/// Per-epoch record of one training run. Losses are raw per-utterance CTC
/// negative log-likelihoods, averaged over the utterances seen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub model: String,
    pub skipped: usize,
    pub epochs: Vec<EpochLog>,
}

impl TrainingLog {
    pub fn final_val_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.val_loss)
    }
    pub fn first_val_loss(&self) -> f64 {
        self.epochs.first().map_or(f64::NAN, |e| e.val_loss)
    }
    pub fn final_train_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.train_loss)
    }
}


/// Learning-rate schedule shared by the trainers: halve when validation loss
/// has not improved for `lr_halve_patience` epochs, floored at 1e-5.
pub struct EpochDriver {
    lr: f64,
    patience: usize,
    best_val: f64,
    stale: usize,
}

impl EpochDriver {
    pub fn new(hyper: &TrainHyper) -> Self {
        EpochDriver {
            lr: hyper.lr,
            patience: hyper.lr_halve_patience,
            best_val: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn record(&mut self, val_loss: f64) {
        if val_loss + 1e-9 < self.best_val {
            self.best_val = val_loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.lr = (self.lr * 0.5).max(1e-5);
                self.stale = 0;
            }
        }
    }
}

/// A sequence model trained with CTC over its output alphabet.
pub trait CtcTrainModel<F: Scalar> {
    type Input;
    type Cache;
    /// Logits per output frame, plus whatever the backward pass needs.
    fn forward(&self, x: &Self::Input) -> (Mat<F>, Self::Cache);
    fn backward(&mut self, x: &Self::Input, cache: Self::Cache, dlogits: &Mat<F>);
    fn collect_params<'a>(&'a mut self, out: &mut Vec<ParamRef<'a, F>>);
}

pub struct CtcSample<I> {
    pub id: String,
    pub input: I,
    pub target: Vec<usize>,
}

pub(crate) enum Stepper<F: Scalar> {
    Sgd(SgdMomentum<F>),
    Adam(Adam<F>),
}

impl<F: Scalar> Stepper<F> {
    pub(crate) fn for_hyper(hyper: &TrainHyper) -> Self {
        match hyper.optimizer {
            OptimizerKind::SgdMomentum => Stepper::Sgd(SgdMomentum::new(hyper.momentum)),
            OptimizerKind::Adam => Stepper::Adam(Adam::new(0.9, 0.999)),
        }
    }

    pub(crate) fn step(
        &mut self,
        params: &mut [ParamRef<'_, F>],
        lr: f64,
        clip: f64,
        frozen: &dyn Fn(&str) -> bool,
    ) -> f64 {
        match self {
            Stepper::Sgd(s) => s.step(params, lr, Some(clip), frozen),
            Stepper::Adam(a) => a.step(params, lr, Some(clip), frozen),
        }
    }
}

fn eval_loss<F: Scalar, M: CtcTrainModel<F>>(
    model: &M,
    samples: &[&CtcSample<M::Input>],
    blank: usize,
) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for s in samples {
        let (logits, _) = model.forward(&s.input);
        if min_frames(&s.target) > logits.rows() {
            continue;
        }
        let g = ctc_loss_grad_logits(&logits, &s.target, blank);
        if g.loss.is_finite() {
            total += g.loss.as_f64();
            n += 1;
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        total / n as f64
    }
}

/// Train `model` on `samples`. The tenth of the sample ids with the largest
/// hashes is held out for validation; when that set is empty (tiny datasets)
/// the train loss doubles as the validation loss for scheduling.
pub fn train_ctc<F: Scalar, M: CtcTrainModel<F>>(
    model: &mut M,
    samples: &[CtcSample<M::Input>],
    hyper: &TrainHyper,
    blank: usize,
    seed: u64,
    frozen: &dyn Fn(&str) -> bool,
    label: &str,
) -> Result<TrainingLog, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let val_set: std::collections::BTreeSet<String> =
        validation_ids(samples.iter().map(|s| s.id.as_str()), 0.1)
            .into_iter()
            .collect();
    let train: Vec<&CtcSample<M::Input>> = samples
        .iter()
        .filter(|s| !val_set.contains(&s.id))
        .collect();
    let val: Vec<&CtcSample<M::Input>> =
        samples.iter().filter(|s| val_set.contains(&s.id)).collect();
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }

    let mut stepper = Stepper::for_hyper(hyper);
    let mut log = TrainingLog {
        model: label.to_string(),
        skipped: 0,
        epochs: Vec::with_capacity(hyper.epochs),
    };
    let mut driver = EpochDriver::new(hyper);

    for epoch in 0..hyper.epochs {
        let mut rng = rng_from(derive_seed(seed, &format!("{label}-epoch-{epoch}")));
        let order = shuffled_indices(&mut rng, train.len());
        let mut epoch_loss = 0.0;
        let mut counted = 0usize;
        let mut norm_sum = 0.0;
        let mut norm_steps = 0usize;
        for batch in order.chunks(hyper.batch_size.max(1)) {
            let mut params = Vec::new();
            model.collect_params(&mut params);
            zero_grads(&mut params);
            drop(params);
            let mut batch_used = 0usize;
            let mut grads: Vec<(usize, <M as CtcTrainModel<F>>::Cache, Mat<F>)> = Vec::new();
            for &i in batch {
                let s = train[i];
                let (logits, cache) = model.forward(&s.input);
                if min_frames(&s.target) > logits.rows() {
                    log.skipped += 1;
                    continue;
                }
                let g = ctc_loss_grad_logits(&logits, &s.target, blank);
                if !g.loss.is_finite() {
                    return Err(TrainError::Diverged { epoch });
                }
                epoch_loss += g.loss.as_f64();
                counted += 1;
                batch_used += 1;
                grads.push((i, cache, g.dlogits));
            }
            if batch_used == 0 {
                continue;
            }
            let scale = F::from_f64(1.0 / batch_used as f64);
            for (i, cache, mut dlogits) in grads {
                dlogits.data_mut().iter_mut().for_each(|g| *g *= scale);
                model.backward(&train[i].input, cache, &dlogits);
            }
            let mut params = Vec::new();
            model.collect_params(&mut params);
            norm_sum += stepper.step(&mut params, driver.lr(), hyper.grad_clip, frozen);
            norm_steps += 1;
        }
        let train_loss = if counted > 0 {
            epoch_loss / counted as f64
        } else {
            f64::NAN
        };
        if !train_loss.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        let val_loss = if val.is_empty() {
            train_loss
        } else {
            eval_loss(model, &val, blank)
        };
        if !val_loss.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr: driver.lr(),
            grad_norm: norm_sum / norm_steps.max(1) as f64,
        });
        driver.record(val_loss);
    }
    Ok(log)
}
