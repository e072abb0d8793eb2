//! Splitting, the training loop, and classification metrics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encode::EncoderState;
use crate::error::{Error, Result};
use crate::eventlog::Dataset;
use crate::graphrep::{build_graph, make_batch, GraphInstance, WeightScaler};
use crate::layers::{Forward, ParamStore};
use crate::models::{Dims, Model};
use crate::optim::{l1_penalty, Optimizer, Scheduler};
use crate::pseudoembed::{BinningConfig, PseudoEmbedder};

/// Minimum decrease of the validation loss that counts as an improvement.
pub const MIN_DELTA: f64 = 1e-6;

const EVAL_BATCH: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// `None` disables early stopping.
    pub patience: Option<usize>,
    pub split_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { max_epochs: 300, patience: Some(30), split_fraction: 0.8, seed: 0 }
    }
}

/// Per class: `⌊fraction·n⌋` (at least one) training members, the rest for
/// validation. Returns sorted dataset indices.
pub fn split_stratified(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} must lie in (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (c, name) in dataset.class_names.iter().enumerate() {
        let mut members: Vec<usize> = (0..dataset.traces.len()).filter(|&i| dataset.traces[i].label == c).collect();
        if members.len() < 2 {
            return Err(Error::Data(format!("class {name} has {} member(s); at least 2 are needed", members.len())));
        }
        members.shuffle(&mut rng);
        let k = ((fraction * members.len() as f64).floor() as usize).clamp(1, members.len() - 1);
        train.extend_from_slice(&members[..k]);
        val.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Everything fitted on the training split, plus the encoded graphs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub encoder: EncoderState,
    pub scaler: WeightScaler,
    pub pseudo: Option<PseudoEmbedder>,
    pub dims: Dims,
    pub train: Vec<GraphInstance>,
    pub val: Vec<GraphInstance>,
}

pub fn prepare_graphs(dataset: &Dataset, train_idx: &[usize], val_idx: &[usize], binning: Option<&BinningConfig>) -> Result<Prepared> {
    let train_traces: Vec<_> = train_idx.iter().map(|&i| dataset.traces[i].clone()).collect();
    let encoder = EncoderState::fit(&train_traces, &dataset.schema)?;
    let scaler = WeightScaler::fit(&train_traces)?;
    let pseudo = binning.map(|b| PseudoEmbedder::fit(&train_traces, b)).transpose()?;
    let build = |idx: &[usize]| -> Result<Vec<GraphInstance>> {
        idx.iter().map(|&i| build_graph(&dataset.traces[i], &encoder, &scaler, pseudo.as_ref())).collect()
    };
    let train = build(train_idx)?;
    let val = build(val_idx)?;
    let dims = Dims::from_encoder(&encoder, pseudo.as_ref().map(|p| p.dim()));
    Ok(Prepared { encoder, scaler, pseudo, dims, train, val })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn classification_report(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<Metrics> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Shape(format!("{} labels vs {} predictions", y_true.len(), y_pred.len())));
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= n_classes || p >= n_classes {
            return Err(Error::Data(format!("label pair ({t}, {p}) outside {n_classes} classes")));
        }
        confusion[t][p] += 1;
    }
    let per_class: Vec<ClassMetrics> = (0..n_classes)
        .map(|c| {
            let tp = confusion[c][c];
            let predicted: usize = (0..n_classes).map(|t| confusion[t][c]).sum();
            let support: usize = confusion[c].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            ClassMetrics { precision, recall, f1: f1_score(precision, recall), support }
        })
        .collect();
    let n = y_true.len();
    let macro_of = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / n_classes.max(1) as f64;
    let weighted_of = |f: fn(&ClassMetrics) -> f64| {
        if n == 0 {
            0.0
        } else {
            per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / n as f64
        }
    };
    Ok(Metrics {
        accuracy: ratio((0..n_classes).map(|c| confusion[c][c]).sum(), n),
        macro_precision: macro_of(|m| m.precision),
        macro_recall: macro_of(|m| m.recall),
        macro_f1: macro_of(|m| m.f1),
        weighted_precision: weighted_of(|m| m.precision),
        weighted_recall: weighted_of(|m| m.recall),
        weighted_f1: weighted_of(|m| m.f1),
        per_class,
        confusion,
    })
}

/// Patience bookkeeping over a validation-loss sequence (epochs are 1-based).
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: Option<usize>,
    pub best: f64,
    pub best_epoch: usize,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: Option<usize>) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: 0, bad_epochs: 0 }
    }

    /// Returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        let improved = loss < self.best - MIN_DELTA;
        if improved {
            self.best = loss;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        (improved, self.patience.is_some_and(|p| self.bad_epochs >= p))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub y_true: Vec<usize>,
    pub y_pred: Vec<usize>,
    pub metrics: Metrics,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode loss (mean over samples) and metrics.
pub fn evaluate(model: &Model, graphs: &[GraphInstance]) -> Result<Evaluation> {
    if graphs.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let mut total = 0.0;
    let (mut y_true, mut y_pred) = (Vec::new(), Vec::new());
    for chunk in graphs.chunks(EVAL_BATCH) {
        let refs: Vec<_> = chunk.iter().collect();
        let batch = make_batch(&refs)?;
        let mut f = Forward::eval(&model.store);
        let logits = model.forward(&mut f, &batch)?;
        let loss = model.loss(&mut f, logits, &batch.labels)?;
        total += f.value(loss).item() * chunk.len() as f64;
        let out = f.value(logits);
        y_pred.extend((0..out.rows).map(|r| argmax(out.row(r))));
        y_true.extend_from_slice(&batch.labels);
    }
    let metrics = classification_report(&y_true, &y_pred, model.n_classes)?;
    Ok(Evaluation { loss: total / graphs.len() as f64, y_true, y_pred, metrics })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub val_weighted_f1: Vec<f64>,
    pub lr: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub best_metrics: Metrics,
    /// Population standard deviation of the validation-loss curve.
    pub val_loss_std: f64,
    pub pruned: bool,
}

impl TrainResult {
    pub fn epochs(&self) -> usize {
        self.val_loss.len()
    }
}

pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Called after every epoch with `(epoch, val_loss)`; returning `true` prunes the run.
pub type PruneHook<'a> = dyn FnMut(usize, f64) -> bool + 'a;

/// Train in place; on return the model holds the best-epoch parameters.
pub fn train(
    model: &mut Model,
    train_graphs: &[GraphInstance],
    val_graphs: &[GraphInstance],
    config: &TrainConfig,
    mut prune_hook: Option<&mut PruneHook>,
) -> Result<TrainResult> {
    if train_graphs.is_empty() || val_graphs.is_empty() {
        return Err(Error::Data("training and validation splits must be non-empty".into()));
    }
    if config.max_epochs == 0 {
        return Err(Error::Config("max_epochs must be positive".into()));
    }
    let hp = model.hp.clone();
    let batch_size = hp.batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = Optimizer::new(hp.optimizer);
    let mut scheduler = Scheduler::new(hp.scheduler, hp.optimizer.lr, train_graphs.len().div_ceil(batch_size));
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best: Option<(ParamStore, Metrics)> = None;
    let mut result = TrainResult {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        val_accuracy: Vec::new(),
        val_weighted_f1: Vec::new(),
        lr: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        best_metrics: classification_report(&[], &[], model.n_classes)?,
        val_loss_std: 0.0,
        pruned: false,
    };
    let mut order: Vec<usize> = (0..train_graphs.len()).collect();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let epoch_lr = scheduler.lr();
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch_size) {
            let refs: Vec<_> = chunk.iter().map(|&i| &train_graphs[i]).collect();
            let batch = make_batch(&refs)?;
            let (grads, updates, loss_value) = {
                let mut f = Forward::train(&model.store, &mut rng);
                let logits = model.forward(&mut f, &batch)?;
                let task = model.loss(&mut f, logits, &batch.labels)?;
                let loss_value = f.value(task).item();
                let loss = match l1_penalty(&mut f, &model.store, hp.l1)? {
                    Some(p) => f.tape.add(task, p)?,
                    None => task,
                };
                let grads = f.backward(loss)?;
                (grads, std::mem::take(&mut f.buffer_updates), loss_value)
            };
            for (id, value) in updates {
                *model.store.get_mut(id) = value;
            }
            optimizer.step(&mut model.store, &grads, scheduler.lr())?;
            scheduler.step_batch();
            epoch_loss += loss_value * chunk.len() as f64;
        }
        let eval = evaluate(model, val_graphs)?;
        if !eval.loss.is_finite() {
            return Err(Error::Numeric(format!("validation loss became {} at epoch {epoch}", eval.loss)));
        }
        scheduler.step_epoch(eval.loss);
        result.train_loss.push(epoch_loss / train_graphs.len() as f64);
        result.val_loss.push(eval.loss);
        result.val_accuracy.push(eval.metrics.accuracy);
        result.val_weighted_f1.push(eval.metrics.weighted_f1);
        result.lr.push(epoch_lr);
        let (improved, stop) = stopper.observe(epoch, eval.loss);
        if improved {
            best = Some((model.store.clone(), eval.metrics));
        }
        if let Some(hook) = prune_hook.as_mut() {
            if hook(epoch, eval.loss) {
                result.pruned = true;
                break;
            }
        }
        if stop {
            break;
        }
    }
    result.best_epoch = stopper.best_epoch;
    result.best_val_loss = stopper.best;
    result.val_loss_std = population_std(&result.val_loss);
    if let Some((store, metrics)) = best {
        model.store = store;
        result.best_metrics = metrics;
    }
    Ok(result)
}

/// Learning curves as CSV.
pub fn write_curves<W: std::io::Write>(result: &TrainResult, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["epoch", "train_loss", "val_loss", "val_accuracy", "val_weighted_f1", "lr"])?;
    for i in 0..result.epochs() {
        w.write_record([
            (i + 1).to_string(),
            result.train_loss[i].to_string(),
            result.val_loss[i].to_string(),
            result.val_accuracy[i].to_string(),
            result.val_weighted_f1[i].to_string(),
            result.lr[i].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
