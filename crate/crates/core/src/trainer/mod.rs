//! Cross-entropy training of ensemble members, the dev split, gradient
//! checks and grid search.

pub mod gradcheck;
mod grid;
mod optim;

pub use grid::{grid_search, grid_search_with, GridOutcome, GridRow, GridSpec, GRID_NAMES};
pub use optim::{Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fusion::{argmax, soft_vote, DropoutRates, Ensemble, Member, MemberSpec, ModelDims, Prediction, Sample};
use crate::metrics;
use crate::nn::Params;
use crate::rng::Rng;
use crate::tensor::softmax_in_place;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub dropout: DropoutRates,
    pub optimizer: OptimizerKind,
    pub dev_fraction: f64,
    /// Per-class loss multipliers; `None` weighs every class 1.
    pub class_weights: Option<Vec<f64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 60,
            epochs: 14,
            learning_rate: 1e-5,
            seed: 0,
            dropout: DropoutRates { text: 0.4, image: 0.2 },
            optimizer: OptimizerKind::Adam,
            dev_fraction: 0.2,
            class_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        for (what, r) in [("text dropout", self.dropout.text), ("image dropout", self.dropout.image)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("{what} must be in [0, 1), got {r}")));
            }
        }
        if !(self.dev_fraction > 0.0 && self.dev_fraction < 1.0) {
            return Err(Error::Config(format!("dev fraction must be in (0, 1), got {}", self.dev_fraction)));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!("learning rate must be finite and nonnegative, got {}", self.learning_rate)));
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::Config("class weights must be finite and nonnegative".into()));
            }
        }
        Ok(())
    }
}

/// Seeded shuffle, then the first `round(n · fraction)` records (at least one,
/// at most `n − 1`) become the dev set. Both halves keep shuffled order.
pub fn split_train_dev<T: Clone>(data: &[T], fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Usage(format!("dev fraction must be in (0, 1), got {fraction}")));
    }
    if data.len() < 2 {
        return Err(Error::Usage(format!("cannot split {} record(s) into train and dev", data.len())));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    Rng::new(seed).shuffle(&mut order);
    let n_dev = ((data.len() as f64 * fraction).round() as usize).clamp(1, data.len() - 1);
    let dev = order[..n_dev].iter().map(|&i| data[i].clone()).collect();
    let train = order[n_dev..].iter().map(|&i| data[i].clone()).collect();
    Ok((train, dev))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_macro_f1: f64,
}

#[derive(Clone, Debug)]
pub struct MemberRun {
    pub member: Member,
    pub history: Vec<EpochRecord>,
    /// Dev-set predictions after each epoch.
    pub dev_predictions: Vec<Vec<Prediction>>,
}

fn labels(samples: &[Sample]) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| s.label.ok_or_else(|| Error::Input(format!("record {} has no label", s.id))))
        .collect()
}

/// `−log softmax(z)[y]` computed stably, with `∂/∂z = softmax(z) − onehot(y)`.
pub fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let mut grad = logits.to_vec();
    softmax_in_place(&mut grad);
    grad[target] -= 1.0;
    (lse - logits[target], grad)
}

fn relabel(err: Error, epoch: usize, batch: usize) -> Error {
    match err {
        Error::Divergence { detail, .. } => Error::Divergence { epoch, batch, detail },
        other => other,
    }
}

pub fn predict_all(member: &Member, samples: &[Sample]) -> Result<Vec<Prediction>> {
    samples.iter().map(|s| member.predict(s)).collect()
}

pub fn macro_f1_of(preds: &[Prediction], truth: &[usize], classes: usize) -> Result<f64> {
    let pred: Vec<usize> = preds.iter().map(Prediction::label).collect();
    Ok(metrics::evaluate(truth, &pred, classes)?.macro_f1)
}

/// Mean (optionally class-weighted) cross-entropy and its gradient over a
/// batch, with dropout drawn from `rng`.
pub fn batch_gradient(
    member: &Member,
    batch: &[&Sample],
    config: &TrainConfig,
    mut rng: Option<&mut Rng>,
) -> Result<(f64, Member)> {
    let mut grads = member.zeros_like();
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for sample in batch {
        let target = sample
            .label
            .ok_or_else(|| Error::Input(format!("record {} has no label", sample.id)))?;
        let (logits, cache) = member.logits(sample, config.dropout, rng.as_deref_mut())?;
        if target >= logits.len() {
            return Err(Error::Input(format!("record {} label {target} exceeds {} classes", sample.id, logits.len())));
        }
        let (l, mut d) = cross_entropy(&logits, target);
        let w = config.class_weights.as_ref().map_or(1.0, |cw| cw.get(target).copied().unwrap_or(1.0));
        loss += w * l * scale;
        d.iter_mut().for_each(|v| *v *= w * scale);
        member.backward(&cache, &d, &mut grads);
    }
    Ok((loss, grads))
}

/// Mini-batch training of one member. Shuffling and dropout draw from `rng`.
pub fn train_member(
    mut member: Member,
    train: &[Sample],
    dev: &[Sample],
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<MemberRun> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    labels(train)?;
    let dev_truth = labels(dev)?;
    let classes = member.classes();
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate);
    let mut history = Vec::with_capacity(config.epochs);
    let mut dev_predictions = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = batch_gradient(&member, &batch, config, Some(rng))?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b + 1,
                    detail: format!("loss is {loss}"),
                });
            }
            optimizer.step(&mut member, &grads).map_err(|e| relabel(e, epoch, b + 1))?;
            if let Some((name, _)) = member.named_tensors("").into_iter().find(|(_, t)| !t.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    batch: b + 1,
                    detail: format!("parameter {name} became non-finite"),
                });
            }
            epoch_loss += loss * chunk.len() as f64;
        }
        let preds = predict_all(&member, dev).map_err(|e| match e {
            Error::Input(detail) => Error::Divergence {
                epoch,
                batch: order.len().div_ceil(config.batch_size),
                detail: format!("dev evaluation failed: {detail}"),
            },
            other => other,
        })?;
        let dev_macro_f1 = if dev.is_empty() { 0.0 } else { macro_f1_of(&preds, &dev_truth, classes)? };
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            dev_macro_f1,
        });
        dev_predictions.push(preds);
    }
    Ok(MemberRun {
        member,
        history,
        dev_predictions,
    })
}

#[derive(Clone, Debug)]
pub struct EnsembleRun {
    pub ensemble: Ensemble,
    pub member_histories: Vec<(MemberSpec, Vec<EpochRecord>)>,
    /// Soft-voted dev macro-F1 after each epoch.
    pub ensemble_dev_f1: Vec<f64>,
}

impl EnsembleRun {
    /// Best ensemble dev macro-F1 and its 1-based epoch (earliest on ties).
    pub fn best_epoch(&self) -> (f64, usize) {
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, &f) in self.ensemble_dev_f1.iter().enumerate() {
            if f > best.0 {
                best = (f, i + 1);
            }
        }
        if best.1 == 0 {
            (0.0, 0)
        } else {
            best
        }
    }

    /// CSV: `epoch,member,train_loss,dev_macro_f1`, with `ensemble` rows.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,member,train_loss,dev_macro_f1\n");
        let epochs = self.ensemble_dev_f1.len();
        for e in 0..epochs {
            for (spec, hist) in &self.member_histories {
                let r = &hist[e];
                out.push_str(&format!("{},{},{},{}\n", r.epoch, spec.label(), r.train_loss, r.dev_macro_f1));
            }
            out.push_str(&format!("{},ensemble,,{}\n", e + 1, self.ensemble_dev_f1[e]));
        }
        out
    }
}

/// Two child streams per member, drawn in member order: one for
/// initialization and one for training.
pub fn member_seeds(seed: u64, members: usize) -> Vec<(Rng, Rng)> {
    let mut root = Rng::new(seed);
    (0..members).map(|_| (root.fork(), root.fork())).collect()
}

/// Builds and trains every member concurrently, then scores the soft vote on
/// the dev set after each epoch.
pub fn train_ensemble(
    specs: &[MemberSpec],
    dims: &ModelDims,
    train: &[Sample],
    dev: &[Sample],
    config: &TrainConfig,
    vote_weights: Option<Vec<f64>>,
) -> Result<EnsembleRun> {
    if specs.is_empty() {
        return Err(Error::Usage("ensemble needs at least one member".into()));
    }
    config.validate()?;
    dims.validate()?;
    let seeds = member_seeds(config.seed, specs.len());
    let runs: Vec<MemberRun> = specs
        .par_iter()
        .zip(seeds)
        .map(|(&spec, (mut init, mut train_rng))| {
            let member = Member::new(spec, dims, &mut init)?;
            train_member(member, train, dev, config, &mut train_rng)
        })
        .collect::<Result<_>>()?;

    let dev_truth = labels(dev)?;
    let mut ensemble_dev_f1 = Vec::with_capacity(config.epochs);
    for e in 0..config.epochs {
        let mut votes = Vec::with_capacity(dev.len());
        for i in 0..dev.len() {
            let preds: Vec<Prediction> = runs.iter().map(|r| r.dev_predictions[e][i].clone()).collect();
            votes.push(soft_vote(&preds, vote_weights.as_deref())?);
        }
        let f1 = if dev.is_empty() { 0.0 } else { macro_f1_of(&votes, &dev_truth, dims.classes)? };
        ensemble_dev_f1.push(f1);
    }
    let member_histories = runs.iter().map(|r| (r.member.spec, r.history.clone())).collect();
    let members = runs.into_iter().map(|r| r.member).collect();
    Ok(EnsembleRun {
        ensemble: Ensemble::new(members, vote_weights)?,
        member_histories,
        ensemble_dev_f1,
    })
}

/// Labels predicted by the ensemble, in sample order.
pub fn ensemble_labels(ensemble: &Ensemble, samples: &[Sample]) -> Result<Vec<usize>> {
    samples.iter().map(|s| Ok(argmax(ensemble.predict(s)?.probs()))).collect()
}
