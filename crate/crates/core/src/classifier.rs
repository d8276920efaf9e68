//! Speaker classifier and the two-stage transfer protocol.
//!
//! A baseline run trains a fresh network on the real data. A transfer run
//! first fits the same network to synthetic positives against real
//! negatives, then continues from those weights on the real data. Both runs
//! share the split, class weights, batch order and hyperparameters; only the
//! initial weights differ.

use std::fmt::Write as _;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{self, ClassWeights, DatasetError, Label, MfccDataset};
use crate::nn::{Activation, Adam, Checkpoint, CheckpointError, Mlp, NnError};
use crate::seed;

/// Input, three hidden layers, output.
pub const TOPOLOGY: [usize; 5] = [26, 30, 7, 29, 1];
pub const DEFAULT_PATIENCE: usize = 25;
pub const DEFAULT_BATCH_SIZE: usize = 128;
pub const DEFAULT_LR: f64 = 1e-3;
pub const THRESHOLD: f64 = 0.5;

#[derive(Error, Debug)]
pub enum ClassifierError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid training options: {0}")]
    Options(String),
    #[error("cannot transfer weights: checkpoint topology {found:?}, expected {expected:?}")]
    Transfer { expected: Vec<usize>, found: Vec<usize> },
    #[error("evaluation needs both classes, got {positives} positives and {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },
    #[error("synthetic set is empty")]
    EmptySynthetic,
    #[error("validation loss became non-finite at epoch {0}")]
    Diverged(usize),
}

pub type Result<T> = std::result::Result<T, ClassifierError>;

pub fn new_classifier(seed: u64) -> Mlp {
    Mlp::new(&TOPOLOGY, Activation::Relu, Activation::Sigmoid, &mut seed::rng(seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// `None` trains until early stopping fires.
    pub max_epochs: Option<usize>,
    /// Drives the per-epoch minibatch order.
    pub shuffle_seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
            lr: DEFAULT_LR,
            patience: DEFAULT_PATIENCE,
            max_epochs: None,
            shuffle_seed: 0,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(ClassifierError::Options("patience must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ClassifierError::Options("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ClassifierError::Options(format!("lr must be positive, got {}", self.lr)));
        }
        if self.max_epochs == Some(0) {
            return Err(ClassifierError::Options("max_epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EarlyStop {
    Improved,
    Waiting,
    Stop,
}

/// Tracks the lowest validation loss; epochs are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_loss: f64,
    pub best_epoch: usize,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Result<Self> {
        if patience == 0 {
            return Err(ClassifierError::Options("patience must be at least 1".into()));
        }
        Ok(Self {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            wait: 0,
        })
    }

    /// Only a strictly lower loss counts as improvement.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> EarlyStop {
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.best_epoch = epoch;
            self.wait = 0;
            EarlyStop::Improved
        } else {
            self.wait += 1;
            if self.wait >= self.patience {
                EarlyStop::Stop
            } else {
                EarlyStop::Waiting
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    EarlyStopping,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub epochs: Vec<EpochStats>,
    /// 1-based.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
    /// Hash of everything that shapes training except the initial weights.
    pub fingerprint: String,
}

impl TrainRecord {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_accuracy,val_loss,val_accuracy\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{:.10},{:.6},{:.10},{:.6}",
                e.epoch, e.train_loss, e.train_accuracy, e.val_loss, e.val_accuracy
            );
        }
        out
    }
}

fn hash_dataset(h: &mut Sha256, ds: &MfccDataset) {
    h.update((ds.len() as u64).to_le_bytes());
    for row in ds.rows() {
        for v in row.coefficients.0 {
            h.update(v.to_le_bytes());
        }
        h.update([row.label.digit() as u8]);
    }
}

/// Digest of the data, class weights and options: the full recipe of a run minus its starting weights.
pub fn training_fingerprint(train: &MfccDataset, val: &MfccDataset, weights: &ClassWeights, opts: &TrainOptions) -> String {
    let mut h = Sha256::new();
    h.update(b"train");
    hash_dataset(&mut h, train);
    h.update(b"val");
    hash_dataset(&mut h, val);
    h.update(weights.w_pos.to_le_bytes());
    h.update(weights.w_neg.to_le_bytes());
    h.update((opts.batch_size as u64).to_le_bytes());
    h.update(opts.lr.to_le_bytes());
    h.update((opts.patience as u64).to_le_bytes());
    h.update(opts.max_epochs.map_or(u64::MAX, |m| m as u64).to_le_bytes());
    h.update(opts.shuffle_seed.to_le_bytes());
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Minibatch order of `epoch`; independent of how many epochs run.
pub fn epoch_order(n: usize, shuffle_seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::derive_seed(shuffle_seed, &["epoch", &epoch.to_string()])));
    order
}

fn accuracy(p: &Array2<f64>, y: &[f64]) -> f64 {
    let hits = p
        .column(0)
        .iter()
        .zip(y)
        .filter(|(&p, &y)| (p >= THRESHOLD) == (y == 1.0))
        .count();
    hits as f64 / y.len() as f64
}

/// Trains until `patience` epochs pass without a lower validation loss, then
/// restores the best weights. Validation loss uses the training class weights.
pub fn train_classifier(
    model: Mlp,
    train: &MfccDataset,
    val: &MfccDataset,
    weights: &ClassWeights,
    opts: &TrainOptions,
) -> Result<(Mlp, TrainRecord)> {
    opts.validate()?;
    train.require_both_classes()?;
    val.require_both_classes()?;
    let fingerprint = training_fingerprint(train, val, weights, opts);
    let (x, y) = (train.features(), train.targets());
    let (xv, yv) = (val.features(), val.targets());
    let mut model = model;
    let mut adam = Adam::new(opts.lr);
    let mut stopper = EarlyStopping::new(opts.patience)?;
    let mut best = model.clone();
    let mut epochs = Vec::new();
    let mut epoch = 0;
    let stop_reason = loop {
        epoch += 1;
        let order = epoch_order(train.len(), opts.shuffle_seed, epoch);
        for batch in order.chunks(opts.batch_size) {
            let xb = x.select(Axis(0), batch);
            let yb: Vec<f64> = batch.iter().map(|&i| y[i]).collect();
            let (_, grads) = model.bce_loss_and_grad(xb.view(), &yb, weights)?;
            adam.step(&mut model, &grads)?;
        }
        let train_loss = model.bce_loss(x.view(), &y, weights)?;
        let val_loss = model.bce_loss(xv.view(), &yv, weights)?;
        if !val_loss.is_finite() {
            return Err(ClassifierError::Diverged(epoch));
        }
        epochs.push(EpochStats {
            epoch,
            train_loss,
            train_accuracy: accuracy(&model.predict(x.view())?, &y),
            val_loss,
            val_accuracy: accuracy(&model.predict(xv.view())?, &yv),
        });
        match stopper.observe(epoch, val_loss) {
            EarlyStop::Improved => best = model.clone(),
            EarlyStop::Stop => break StopReason::EarlyStopping,
            EarlyStop::Waiting => {}
        }
        if opts.max_epochs == Some(epoch) {
            break StopReason::MaxEpochs;
        }
    };
    log::debug!(
        "classifier stopped at epoch {epoch} ({stop_reason:?}), best epoch {} val loss {:.6}",
        stopper.best_epoch,
        stopper.best_loss
    );
    Ok((
        best,
        TrainRecord {
            epochs,
            best_epoch: stopper.best_epoch,
            best_val_loss: stopper.best_loss,
            stop_reason,
            fingerprint,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fn_: usize,
    pub fp: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_predictions(predicted: &[Label], actual: &[Label]) -> Self {
        let mut c = Confusion::default();
        for (&p, &a) in predicted.iter().zip(actual) {
            match (a, p) {
                (Label::Speaker, Label::Speaker) => c.tp += 1,
                (Label::Speaker, Label::Other) => c.fn_ += 1,
                (Label::Other, Label::Speaker) => c.fp += 1,
                (Label::Other, Label::Other) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.fp + self.tn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// `x / y`, or 0 when `y` is 0.
fn ratio(x: f64, y: f64) -> f64 {
    if y == 0.0 {
        0.0
    } else {
        x / y
    }
}

impl ClassMetrics {
    fn new(hits: usize, predicted: usize, support: usize) -> Self {
        let precision = ratio(hits as f64, predicted as f64);
        let recall = ratio(hits as f64, support as f64);
        Self {
            precision,
            recall,
            f1: ratio(2.0 * precision * recall, precision + recall),
            support,
        }
    }
}

/// Accuracy in percent; precision, recall and F1 averaged over both classes
/// weighted by support.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub positive: ClassMetrics,
    pub negative: ClassMetrics,
    pub confusion: Confusion,
}

impl MetricsReport {
    pub fn from_confusion(c: Confusion) -> Result<Self> {
        let (pos, neg) = (c.tp + c.fn_, c.fp + c.tn);
        if pos == 0 || neg == 0 {
            return Err(ClassifierError::SingleClass {
                positives: pos,
                negatives: neg,
            });
        }
        let positive = ClassMetrics::new(c.tp, c.tp + c.fp, pos);
        let negative = ClassMetrics::new(c.tn, c.tn + c.fn_, neg);
        let n = c.total() as f64;
        let avg = |f: fn(&ClassMetrics) -> f64| (f(&positive) * pos as f64 + f(&negative) * neg as f64) / n;
        Ok(Self {
            accuracy: 100.0 * (c.tp + c.tn) as f64 / n,
            f1: avg(|m| m.f1),
            precision: avg(|m| m.precision),
            recall: avg(|m| m.recall),
            positive,
            negative,
            confusion: c,
        })
    }

    pub fn csv_header() -> &'static str {
        "accuracy,f1,precision,recall,tp,fn,fp,tn"
    }

    pub fn csv_row(&self) -> String {
        let c = self.confusion;
        format!(
            "{:.4},{:.6},{:.6},{:.6},{},{},{},{}",
            self.accuracy, self.f1, self.precision, self.recall, c.tp, c.fn_, c.fp, c.tn
        )
    }
}

pub fn predict_labels(model: &Mlp, data: &MfccDataset) -> Result<Vec<Label>> {
    let p = model.predict(data.features().view())?;
    Ok(p.column(0)
        .iter()
        .map(|&p| if p >= THRESHOLD { Label::Speaker } else { Label::Other })
        .collect())
}

pub fn evaluate(model: &Mlp, data: &MfccDataset) -> Result<MetricsReport> {
    let actual: Vec<Label> = data.rows().iter().map(|r| r.label).collect();
    let predicted = predict_labels(model, data)?;
    MetricsReport::from_confusion(Confusion::from_predictions(&predicted, &actual))
}

/// Fits a fresh network to synthetic positives against `negatives` and
/// returns the best-validation weights. Both inputs are relabeled to their class.
pub fn pretrain_on_synthetic(
    synthetic_pos: &MfccDataset,
    negatives: &MfccDataset,
    split_seed: u64,
    init_seed: u64,
    opts: &TrainOptions,
) -> Result<Checkpoint> {
    if synthetic_pos.is_empty() {
        return Err(ClassifierError::EmptySynthetic);
    }
    let mut data = synthetic_pos.clone();
    data.relabel(Label::Speaker);
    let mut neg = negatives.clone();
    neg.relabel(Label::Other);
    data.extend(&neg);
    let (train, val) = dataset::split(&data, dataset::DEFAULT_VAL_FRACTION, split_seed)?;
    let weights = dataset::compute_class_weights(&train)?;
    let (model, _) = train_classifier(new_classifier(init_seed), &train, &val, &weights, opts)?;
    Ok(model.to_checkpoint())
}

/// Starting weights for a real-data run.
#[derive(Debug, Clone)]
pub enum Init {
    Fresh(u64),
    Checkpoint(Checkpoint),
}

impl Init {
    pub fn build(&self) -> Result<Mlp> {
        match self {
            Init::Fresh(seed) => Ok(new_classifier(*seed)),
            Init::Checkpoint(c) => {
                let model = Mlp::from_checkpoint(c)?;
                if model.topology() != TOPOLOGY {
                    return Err(ClassifierError::Transfer {
                        expected: TOPOLOGY.to_vec(),
                        found: model.topology(),
                    });
                }
                Ok(model)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: Mlp,
    pub record: TrainRecord,
    pub metrics: MetricsReport,
}

/// Trains on the training partition of `real` from `init` and evaluates on
/// its validation partition.
pub fn finetune(
    init: &Init,
    real: &MfccDataset,
    split_seed: u64,
    val_fraction: f64,
    opts: &TrainOptions,
) -> Result<FinetuneOutcome> {
    let model = init.build()?;
    real.require_both_classes()?;
    let (train, val) = dataset::split(real, val_fraction, split_seed)?;
    let weights = dataset::compute_class_weights(&train)?;
    let (model, record) = train_classifier(model, &train, &val, &weights, opts)?;
    let metrics = evaluate(&model, &val)?;
    Ok(FinetuneOutcome { model, record, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::GaussianSpeaker;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn hand_confusion_metrics() {
        let m = MetricsReport::from_confusion(Confusion { tp: 8, fn_: 2, fp: 1, tn: 89 }).unwrap();
        assert!(close(m.positive.precision, 8.0 / 9.0));
        assert!(close(m.positive.recall, 0.8));
        let f1 = 2.0 * (8.0 / 9.0) * 0.8 / (8.0 / 9.0 + 0.8);
        assert!(close(m.positive.f1, f1));
        assert!((m.positive.f1 - 0.842).abs() < 5e-4);
        assert!(close(m.accuracy, 97.0));
        assert!(close(m.negative.precision, 89.0 / 91.0));
        assert!(close(m.negative.recall, 89.0 / 90.0));
        assert!(close(m.recall, 0.97));
    }

    #[test]
    fn all_negative_predictor() {
        let m = MetricsReport::from_confusion(Confusion { tp: 0, fn_: 10, fp: 0, tn: 90 }).unwrap();
        assert!(close(m.accuracy, 90.0));
        assert_eq!(m.positive.recall, 0.0);
        assert_eq!(m.positive.precision, 0.0);
        assert!(close(m.recall, 0.9));
    }

    #[test]
    fn perfect_predictions() {
        let m = MetricsReport::from_confusion(Confusion { tp: 5, fn_: 0, fp: 0, tn: 7 }).unwrap();
        assert_eq!((m.accuracy, m.f1, m.precision, m.recall), (100.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn single_class_rejected() {
        assert!(matches!(
            MetricsReport::from_confusion(Confusion { tp: 3, fn_: 1, fp: 0, tn: 0 }),
            Err(ClassifierError::SingleClass { .. })
        ));
    }

    #[test]
    fn stops_patience_epochs_after_last_improvement() {
        let trace: Vec<f64> = (1..=30).map(|e| 1.0 / e as f64).chain(std::iter::repeat(1.0 / 30.0).take(100)).collect();
        let mut es = EarlyStopping::new(25).unwrap();
        let stop = trace
            .iter()
            .enumerate()
            .find_map(|(i, &l)| (es.observe(i + 1, l) == EarlyStop::Stop).then_some(i + 1))
            .unwrap();
        assert_eq!(stop, 55);
        assert_eq!(es.best_epoch, 30);
        assert!(EarlyStopping::new(0).is_err());
    }

    #[test]
    fn zero_patience_rejected_by_options() {
        let opts = TrainOptions { patience: 0, ..Default::default() };
        assert!(opts.validate().is_err());
    }

    fn separable(seed: u64) -> MfccDataset {
        let pos = GaussianSpeaker::random(1, 5.0, 0.3, seed);
        let mut ds = pos.sample(60, Label::Speaker, seed + 1);
        ds.extend(&pos.shifted(3.0).sample(240, Label::Other, seed + 2));
        ds
    }

    #[test]
    fn separable_fixture_fits_and_restores_best() {
        let ds = separable(1);
        let (train, val) = dataset::split(&ds, 0.3, 5).unwrap();
        let w = dataset::compute_class_weights(&train).unwrap();
        let opts = TrainOptions { patience: 10, ..Default::default() };
        let (model, rec) = train_classifier(new_classifier(3), &train, &val, &w, &opts).unwrap();
        assert_eq!(rec.stop_reason, StopReason::EarlyStopping);
        assert_eq!(rec.epochs.len(), rec.best_epoch + 10);
        assert!(rec.epochs.iter().all(|e| rec.best_val_loss <= e.val_loss));
        let again = model.bce_loss(val.features().view(), &val.targets(), &w).unwrap();
        assert!((again - rec.best_val_loss).abs() <= 1e-12);
        assert_eq!(evaluate(&model, &val).unwrap().accuracy, 100.0);
    }

    #[test]
    fn baseline_and_transfer_share_everything_but_weights() {
        let ds = separable(2);
        let opts = TrainOptions { patience: 5, max_epochs: Some(40), ..Default::default() };
        let ckpt = pretrain_on_synthetic(
            &GaussianSpeaker::random(1, 5.0, 0.3, 2).sample(50, Label::Speaker, 9),
            &ds.subset(&(60..300).collect::<Vec<_>>()),
            4,
            7,
            &opts,
        )
        .unwrap();
        let base = finetune(&Init::Fresh(7), &ds, 4, 0.3, &opts).unwrap();
        let tl = finetune(&Init::Checkpoint(ckpt.clone()), &ds, 4, 0.3, &opts).unwrap();
        assert_eq!(base.record.fingerprint, tl.record.fingerprint);
        assert_ne!(base.model.to_checkpoint().digest(), tl.model.to_checkpoint().digest());
        let tl2 = finetune(&Init::Checkpoint(ckpt), &ds, 4, 0.3, &opts).unwrap();
        assert_eq!(tl.metrics, tl2.metrics);
    }

    #[test]
    fn topology_mismatch_is_a_transfer_error() {
        let other = Mlp::new(&[26, 5, 1], Activation::Relu, Activation::Sigmoid, &mut seed::rng(0));
        assert!(matches!(
            Init::Checkpoint(other.to_checkpoint()).build(),
            Err(ClassifierError::Transfer { .. })
        ));
    }

    #[test]
    fn duplicated_positives_match_scaled_weight() {
        let model = new_classifier(4);
        let ds = separable(3);
        let (a, b) = (ds.rows()[0], ds.rows()[100]);
        let k = 3;
        let w = ClassWeights { w_pos: 1.7, w_neg: 0.6 };
        let orig = MfccDataset::from_rows(vec![a, b], dataset::Provenance::RealPositive);
        let dup = MfccDataset::from_rows(
            std::iter::repeat(a).take(k).chain([b]).collect(),
            dataset::Provenance::RealPositive,
        );
        let scaled = ClassWeights { w_pos: w.w_pos * k as f64, ..w };
        let l_dup = model.bce_loss(dup.features().view(), &dup.targets(), &w).unwrap() * (k + 1) as f64;
        let l_orig = model.bce_loss(orig.features().view(), &orig.targets(), &scaled).unwrap() * 2.0;
        assert!((l_dup - l_orig).abs() < 1e-12 * l_orig.abs().max(1.0));
    }
}
