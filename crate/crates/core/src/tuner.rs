//! Random-search tuning with median pruning and dataset-aware selection.

use std::cmp::Ordering;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Activation;
use crate::error::{Error, Result};
use crate::graphrep::GraphInstance;
use crate::layers::{Aggr, Pool};
use crate::models::{Arch, BatchNormSpec, ConvKind, Dims, HyperParams, LayerSpec, LossKind, Model};
use crate::optim::{OptimizerKind, OptimizerSpec, SchedulerSpec};
use crate::trainer::{train, PruneHook, TrainConfig, TrainResult};

pub const IMBALANCE_THRESHOLD: f64 = 1.5;
pub const PRUNE_MIN_TRIALS: usize = 5;
pub const PRUNE_WARMUP_EPOCHS: usize = 10;

/// Mix a root seed with a named stream and an index (splitmix64 finaliser).
pub fn derive_seed(root: u64, stream: &str, index: u64) -> u64 {
    let mut h = root ^ 0x9E37_79B9_7F4A_7C15;
    for b in stream.bytes().chain(index.to_le_bytes()) {
        h = (h ^ b as u64).wrapping_mul(0x100_0000_01B3);
    }
    let mut z = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Balanced,
    Imbalanced,
}

/// Imbalanced iff the largest class exceeds `threshold ×` the smallest.
pub fn classify_dataset(class_counts: &[usize], threshold: f64) -> DatasetKind {
    let max = class_counts.iter().copied().max().unwrap_or(0) as f64;
    let min = class_counts.iter().copied().min().unwrap_or(0) as f64;
    if min == 0.0 || max / min > threshold {
        DatasetKind::Imbalanced
    } else {
        DatasetKind::Balanced
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Adam,
    Sgd,
    Rmsprop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerName {
    Step,
    Exponential,
    Plateau,
    Polynomial,
    Cosine,
    Cyclic,
    OneCycle,
}

/// Bounds and choices the sampler draws from. Scheduler and optimizer
/// sub-parameters always use the full tuning-table ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub conv_layers: [usize; 2],
    pub dense_layers: [usize; 2],
    pub units: [usize; 2],
    pub dropout: [f64; 2],
    pub bn_momentum: [f64; 2],
    pub bn_eps: [f64; 2],
    pub activations: Vec<Activation>,
    pub aggrs: Vec<Aggr>,
    pub poolings: Vec<Pool>,
    /// Sampled log-uniformly.
    pub lr: [f64; 2],
    pub weight_decay: [f64; 2],
    pub l1: [f64; 2],
    pub optimizers: Vec<OptimizerName>,
    pub schedulers: Vec<SchedulerName>,
    pub losses: Vec<LossKind>,
    pub batch_sizes: Vec<usize>,
    pub embedding_dim: [usize; 2],
}

impl SearchSpace {
    /// The full tuning table.
    pub fn full() -> Self {
        Self {
            conv_layers: [1, 5],
            dense_layers: [1, 3],
            units: [16, 512],
            dropout: [0.2, 0.7],
            bn_momentum: [0.1, 0.999],
            bn_eps: [1e-5, 1e-2],
            activations: Activation::ALL.to_vec(),
            aggrs: vec![Aggr::Add, Aggr::Mean, Aggr::Max],
            poolings: vec![Pool::Mean, Pool::Add, Pool::Max],
            lr: [1e-5, 1e-2],
            weight_decay: [0.0, 1e-3],
            l1: [0.0, 1e-3],
            optimizers: vec![OptimizerName::Adam, OptimizerName::Sgd, OptimizerName::Rmsprop],
            schedulers: vec![
                SchedulerName::Step,
                SchedulerName::Exponential,
                SchedulerName::Plateau,
                SchedulerName::Polynomial,
                SchedulerName::Cosine,
                SchedulerName::Cyclic,
                SchedulerName::OneCycle,
            ],
            losses: vec![LossKind::CrossEntropy, LossKind::MultiMargin],
            batch_sizes: crate::models::BATCH_SIZES.to_vec(),
            embedding_dim: [10, 50],
        }
    }

    /// A narrowed sub-space that keeps single-core runs short: shallow,
    /// narrow stacks and the upper part of the learning-rate range.
    pub fn desk() -> Self {
        Self {
            conv_layers: [1, 2],
            dense_layers: [1, 2],
            units: [16, 64],
            lr: [1e-3, 1e-2],
            batch_sizes: vec![16, 32, 64, 128],
            embedding_dim: [10, 20],
            ..Self::full()
        }
    }

    /// Every bound must sit inside the full table.
    pub fn validate(&self) -> Result<()> {
        let full = Self::full();
        let within_u = |name: &str, v: [usize; 2], f: [usize; 2]| -> Result<()> {
            if v[0] <= v[1] && v[0] >= f[0] && v[1] <= f[1] {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} bounds {v:?} must lie within {f:?}")))
            }
        };
        let within_f = |name: &str, v: [f64; 2], f: [f64; 2]| -> Result<()> {
            if v[0] <= v[1] && v[0] >= f[0] && v[1] <= f[1] {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} bounds {v:?} must lie within {f:?}")))
            }
        };
        within_u("conv_layers", self.conv_layers, full.conv_layers)?;
        within_u("dense_layers", self.dense_layers, full.dense_layers)?;
        within_u("units", self.units, full.units)?;
        within_u("embedding_dim", self.embedding_dim, full.embedding_dim)?;
        within_f("dropout", self.dropout, full.dropout)?;
        within_f("bn_momentum", self.bn_momentum, full.bn_momentum)?;
        within_f("bn_eps", self.bn_eps, full.bn_eps)?;
        within_f("lr", self.lr, full.lr)?;
        within_f("weight_decay", self.weight_decay, full.weight_decay)?;
        within_f("l1", self.l1, full.l1)?;
        let empty = [
            ("activations", self.activations.is_empty()),
            ("aggrs", self.aggrs.is_empty()),
            ("poolings", self.poolings.is_empty()),
            ("optimizers", self.optimizers.is_empty()),
            ("schedulers", self.schedulers.is_empty()),
            ("losses", self.losses.is_empty()),
            ("batch_sizes", self.batch_sizes.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(Error::Config(format!("{name} must offer at least one choice")));
        }
        if let Some(b) = self.batch_sizes.iter().find(|b| !full.batch_sizes.contains(b)) {
            return Err(Error::Config(format!("batch size {b} is not a tuning choice")));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..=r[1])
    }
}

pub fn log_uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    uniform(rng, [r[0].ln(), r[1].ln()]).exp().clamp(r[0], r[1])
}

fn int(rng: &mut ChaCha8Rng, r: [usize; 2]) -> usize {
    rng.gen_range(r[0]..=r[1])
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, items: &[T]) -> T {
    *items.choose(rng).expect("validated non-empty choice list")
}

fn sample_layer(space: &SearchSpace, rng: &mut ChaCha8Rng, graph_conv: bool) -> LayerSpec {
    let units = int(rng, space.units);
    let activation = pick(rng, &space.activations);
    let skip = rng.gen_bool(0.5);
    let batch_norm = rng.gen_bool(0.5).then(|| BatchNormSpec {
        momentum: uniform(rng, space.bn_momentum),
        eps: uniform(rng, space.bn_eps),
    });
    let dropout = rng.gen_bool(0.5).then(|| uniform(rng, space.dropout));
    let aggr = graph_conv.then(|| pick(rng, &space.aggrs));
    LayerSpec { units, activation, skip, batch_norm, dropout, aggr }
}

fn sample_stack(space: &SearchSpace, rng: &mut ChaCha8Rng, depth: [usize; 2], graph_conv: bool) -> Vec<LayerSpec> {
    let n = int(rng, depth);
    (0..n).map(|_| sample_layer(space, rng, graph_conv)).collect()
}

fn sample_scheduler(name: SchedulerName, rng: &mut ChaCha8Rng) -> SchedulerSpec {
    match name {
        SchedulerName::Step => SchedulerSpec::Step { step_size: int(rng, [1, 50]), gamma: uniform(rng, [0.1, 0.9]) },
        SchedulerName::Exponential => SchedulerSpec::Exponential { gamma: uniform(rng, [0.85, 0.99]) },
        SchedulerName::Plateau => SchedulerSpec::Plateau {
            factor: uniform(rng, [0.1, 0.9]),
            patience: int(rng, [1, 50]),
            threshold: uniform(rng, [1e-4, 1e-2]),
            eps: uniform(rng, [1e-8, 1e-4]),
        },
        SchedulerName::Polynomial => {
            SchedulerSpec::Polynomial { power: uniform(rng, [0.1, 2.0]), total_iters: int(rng, [2, 300]) }
        }
        SchedulerName::Cosine => SchedulerSpec::Cosine { t_max: int(rng, [10, 100]), eta_min: uniform(rng, [1e-6, 1e-2]) },
        SchedulerName::Cyclic => {
            let max_lr = log_uniform(rng, [1e-3, 1e-1]);
            // keep base strictly below max
            let base_lr = log_uniform(rng, [1e-5, 1e-2_f64.min(max_lr * 0.999)]);
            SchedulerSpec::Cyclic { base_lr, max_lr, step_size_up: int(rng, [5, 200]) }
        }
        SchedulerName::OneCycle => {
            SchedulerSpec::OneCycle { max_lr: uniform(rng, [1e-3, 1e-1]), pct_start: uniform(rng, [0.1, 0.5]) }
        }
    }
}

/// Uniform random draw; conditional branches are sampled only when active.
pub fn sample(space: &SearchSpace, arch: Arch, conv: ConvKind, rng: &mut ChaCha8Rng) -> HyperParams {
    let gc = conv == ConvKind::GraphConv;
    let gcn_layers = sample_stack(space, rng, space.conv_layers, gc);
    let pseudo_layers = if arch == Arch::TP { sample_stack(space, rng, space.conv_layers, gc) } else { vec![] };
    let embedding_layers = if arch == Arch::TE { sample_stack(space, rng, space.conv_layers, gc) } else { vec![] };
    let concat_conv_layers =
        if matches!(arch, Arch::TP | Arch::TE) { sample_stack(space, rng, space.conv_layers, gc) } else { vec![] };
    let pooling = pick(rng, &space.poolings);
    let graph_dense_layers = if arch == Arch::O { vec![] } else { sample_stack(space, rng, space.dense_layers, false) };
    let concat_dense_layers = sample_stack(space, rng, space.dense_layers, false);
    let embedding_dim = (arch == Arch::TE).then(|| int(rng, space.embedding_dim));
    let lr = log_uniform(rng, space.lr);
    let weight_decay = uniform(rng, space.weight_decay);
    let kind = match pick(rng, &space.optimizers) {
        OptimizerName::Adam => OptimizerKind::Adam { beta1: uniform(rng, [0.85, 0.99]), beta2: uniform(rng, [0.99, 0.999]) },
        OptimizerName::Sgd => OptimizerKind::Sgd { momentum: uniform(rng, [0.0, 0.9]) },
        OptimizerName::Rmsprop => OptimizerKind::Rmsprop {
            alpha: uniform(rng, [0.9, 0.999]),
            momentum: uniform(rng, [0.0, 0.9]),
            eps: uniform(rng, [1e-9, 1e-7]),
        },
    };
    let scheduler = sample_scheduler(pick(rng, &space.schedulers), rng);
    HyperParams {
        conv_kind: conv,
        arch,
        gcn_layers,
        pseudo_layers,
        embedding_layers,
        concat_conv_layers,
        pooling,
        graph_dense_layers,
        concat_dense_layers,
        embedding_dim,
        optimizer: OptimizerSpec { lr, weight_decay, kind },
        scheduler,
        loss: pick(rng, &space.losses),
        batch_size: pick(rng, &space.batch_sizes),
        l1: uniform(rng, space.l1),
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// `true` to prune: the value is strictly worse (higher) than the median of
/// completed trials' values at the same (1-based) epoch.
pub fn prune_decision(completed: &[Vec<f64>], epoch: usize, value: f64) -> bool {
    if completed.len() < PRUNE_MIN_TRIALS || epoch < PRUNE_WARMUP_EPOCHS {
        return false;
    }
    let mut at: Vec<f64> = completed.iter().filter_map(|c| c.get(epoch - 1).copied()).collect();
    if at.is_empty() {
        return false;
    }
    value > median(&mut at)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Complete,
    Pruned,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialKeys {
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub val_loss: f64,
    pub val_loss_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub id: usize,
    pub hp: HyperParams,
    pub status: TrialStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keys: Option<TrialKeys>,
    #[serde(default)]
    pub best_epoch: usize,
    #[serde(default)]
    pub val_loss_curve: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Trial {
    pub fn from_result(id: usize, hp: HyperParams, result: &TrainResult) -> Self {
        Self {
            id,
            hp,
            status: if result.pruned { TrialStatus::Pruned } else { TrialStatus::Complete },
            keys: Some(TrialKeys {
                accuracy: result.best_metrics.accuracy,
                weighted_f1: result.best_metrics.weighted_f1,
                val_loss: result.best_val_loss,
                val_loss_std: result.val_loss_std,
            }),
            best_epoch: result.best_epoch,
            val_loss_curve: result.val_loss.clone(),
            error: None,
        }
    }

    pub fn failed(id: usize, hp: HyperParams, error: &Error) -> Self {
        Self {
            id,
            hp,
            status: TrialStatus::Failed,
            keys: None,
            best_epoch: 0,
            val_loss_curve: Vec::new(),
            error: Some(error.to_string()),
        }
    }
}

/// Lexicographic comparison; `Less` means `a` ranks first.
pub fn compare_keys(a: &TrialKeys, b: &TrialKeys, kind: DatasetKind) -> Ordering {
    match kind {
        DatasetKind::Balanced => b
            .accuracy
            .total_cmp(&a.accuracy)
            .then(a.val_loss_std.total_cmp(&b.val_loss_std))
            .then(a.val_loss.total_cmp(&b.val_loss)),
        DatasetKind::Imbalanced => b
            .weighted_f1
            .total_cmp(&a.weighted_f1)
            .then(a.val_loss.total_cmp(&b.val_loss))
            .then(a.val_loss_std.total_cmp(&b.val_loss_std)),
    }
}

/// Completed trials, best first; full ties fall back to trial id.
pub fn rank_trials(trials: &[Trial], kind: DatasetKind) -> Result<Vec<&Trial>> {
    let mut done: Vec<&Trial> =
        trials.iter().filter(|t| t.status == TrialStatus::Complete && t.keys.is_some()).collect();
    if done.is_empty() {
        return Err(Error::Data("no completed trials to rank".into()));
    }
    done.sort_by(|a, b| compare_keys(a.keys.as_ref().unwrap(), b.keys.as_ref().unwrap(), kind).then(a.id.cmp(&b.id)));
    Ok(done)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub budget: usize,
    pub train: TrainConfig,
    pub kind: DatasetKind,
    pub seed: u64,
    pub jobs: usize,
    pub pruning: bool,
}

#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub best: Trial,
    pub trials: Vec<Trial>,
}

/// Trial execution behind [`tune`]: `(trial id, hp, prune hook) -> result`.
pub trait TrialRunner: Sync {
    fn run(&self, id: usize, hp: &HyperParams, prune: &mut PruneHook) -> Result<TrainResult>;
}

/// The real runner: build a model and train it on prepared graphs.
pub struct GraphTrainer<'a> {
    pub train: &'a [GraphInstance],
    pub val: &'a [GraphInstance],
    pub dims: Dims,
    pub n_classes: usize,
    pub config: TrainConfig,
    pub seed: u64,
}

impl TrialRunner for GraphTrainer<'_> {
    fn run(&self, id: usize, hp: &HyperParams, prune: &mut PruneHook) -> Result<TrainResult> {
        let mut model = Model::build(hp, self.dims, self.n_classes, derive_seed(self.seed, "init", id as u64))?;
        let config = TrainConfig { seed: derive_seed(self.seed, "train", id as u64), ..self.config.clone() };
        train(&mut model, self.train, self.val, &config, Some(prune))
    }
}

/// Run `budget` trials (skipping ids already present in `done`) and pick the
/// winner. `on_trial` sees each new trial as it finishes, serialised.
pub fn tune_with<R: TrialRunner>(
    runner: &R,
    space: &SearchSpace,
    arch: Arch,
    conv: ConvKind,
    config: &TuneConfig,
    done: Vec<Trial>,
    on_trial: &(dyn Fn(&Trial) + Sync),
) -> Result<TuneOutcome> {
    if config.budget == 0 {
        return Err(Error::Config("budget must be at least 1".into()));
    }
    space.validate()?;
    let completed_curves = |trials: &[Trial]| -> Vec<Vec<f64>> {
        trials.iter().filter(|t| t.status == TrialStatus::Complete).map(|t| t.val_loss_curve.clone()).collect()
    };
    let state = Mutex::new((completed_curves(&done), Vec::<Trial>::new()));
    let todo: Vec<usize> = (0..config.budget).filter(|id| !done.iter().any(|t| t.id == *id)).collect();

    let run_one = |id: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "hp", id as u64));
        let hp = sample(space, arch, conv, &mut rng);
        let mut hook = |epoch: usize, value: f64| {
            config.pruning && prune_decision(&state.lock().unwrap().0, epoch, value)
        };
        let trial = match runner.run(id, &hp, &mut hook) {
            Ok(r) => Trial::from_result(id, hp, &r),
            Err(e) => {
                log::warn!("trial {id} failed: {e}");
                Trial::failed(id, hp, &e)
            }
        };
        let mut guard = state.lock().unwrap();
        if trial.status == TrialStatus::Complete {
            guard.0.push(trial.val_loss_curve.clone());
        }
        on_trial(&trial);
        guard.1.push(trial);
    };

    if config.jobs <= 1 {
        todo.iter().for_each(|&id| run_one(id));
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| todo.par_iter().for_each(|&id| run_one(id)));
    }

    let mut trials = done;
    trials.extend(state.into_inner().unwrap().1);
    trials.sort_by_key(|t| t.id);
    let best = match rank_trials(&trials, config.kind) {
        Ok(ranked) => ranked[0].clone(),
        Err(_) => {
            let causes: Vec<String> = trials
                .iter()
                .map(|t| format!("trial {}: {}", t.id, t.error.as_deref().unwrap_or("pruned")))
                .collect();
            return Err(Error::Data(format!("no trial completed ({})", causes.join("; "))));
        }
    };
    Ok(TuneOutcome { best, trials })
}

pub fn tune(
    runner: &GraphTrainer,
    space: &SearchSpace,
    arch: Arch,
    conv: ConvKind,
    config: &TuneConfig,
) -> Result<TuneOutcome> {
    tune_with(runner, space, arch, conv, config, Vec::new(), &|_| {})
}

/// Fresh initialisation with the winning hyperparameters, trained for the
/// full epoch budget without early stopping; the model holds the best epoch.
pub fn retrain_best(
    best: &Trial,
    train_graphs: &[GraphInstance],
    val_graphs: &[GraphInstance],
    dims: Dims,
    n_classes: usize,
    max_epochs: usize,
    seed: u64,
) -> Result<(Model, TrainResult)> {
    if best.status != TrialStatus::Complete {
        return Err(Error::Config(format!("trial {} did not complete", best.id)));
    }
    let mut model = Model::build(&best.hp, dims, n_classes, derive_seed(seed, "retrain-init", best.id as u64))?;
    let config = TrainConfig {
        max_epochs,
        patience: None,
        seed: derive_seed(seed, "retrain", best.id as u64),
        ..TrainConfig::default()
    };
    let result = train(&mut model, train_graphs, val_graphs, &config, None)?;
    Ok((model, result))
}
