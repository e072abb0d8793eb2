//! Optimizers, learning-rate schedules and the L1 penalty.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{Forward, ParamId, ParamKind, ParamStore};

const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64 },
    Sgd { momentum: f64 },
    Rmsprop { alpha: f64, momentum: f64, eps: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub lr: f64,
    pub weight_decay: f64,
    #[serde(flatten)]
    pub kind: OptimizerKind,
}

fn in_range(name: &str, v: f64, lo: f64, hi: f64) -> Result<()> {
    if v.is_finite() && v >= lo && v <= hi {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {v} outside [{lo}, {hi}]")))
    }
}

impl OptimizerSpec {
    pub fn validate(&self) -> Result<()> {
        in_range("lr", self.lr, 1e-5, 1e-2)?;
        in_range("weight_decay", self.weight_decay, 0.0, 1e-3)?;
        match self.kind {
            OptimizerKind::Adam { beta1, beta2 } => {
                in_range("beta1", beta1, 0.85, 0.99)?;
                in_range("beta2", beta2, 0.99, 0.999)
            }
            OptimizerKind::Sgd { momentum } => in_range("momentum", momentum, 0.0, 0.9),
            OptimizerKind::Rmsprop { alpha, momentum, eps } => {
                in_range("alpha", alpha, 0.9, 0.999)?;
                in_range("momentum", momentum, 0.0, 0.9)?;
                in_range("eps", eps, 1e-9, 1e-7)
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Slot {
    steps: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Per-parameter optimizer state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub spec: OptimizerSpec,
    slots: Vec<Option<Slot>>,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec) -> Self {
        Self { spec, slots: Vec::new() }
    }

    /// Apply one update at learning rate `lr`; parameters without a gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        if self.slots.len() < store.len() {
            self.slots.resize(store.len(), None);
        }
        for (id, grad) in grads {
            let param = store.get_mut(*id);
            if param.data.len() != grad.data.len() {
                return Err(Error::Shape(format!("gradient shape {:?} for parameter {:?}", grad.shape(), param.shape())));
            }
            let slot = self.slots[id.0].get_or_insert_with(Slot::default);
            slot.steps += 1;
            let wd = self.spec.weight_decay;
            let g: Vec<f64> = grad.data.iter().zip(&param.data).map(|(g, p)| g + wd * p).collect();
            match self.spec.kind {
                OptimizerKind::Adam { beta1, beta2 } => {
                    if slot.first.is_empty() {
                        slot.first = vec![0.0; g.len()];
                        slot.second = vec![0.0; g.len()];
                    }
                    let c1 = 1.0 - beta1.powi(slot.steps as i32);
                    let c2 = 1.0 - beta2.powi(slot.steps as i32);
                    for i in 0..g.len() {
                        slot.first[i] = beta1 * slot.first[i] + (1.0 - beta1) * g[i];
                        slot.second[i] = beta2 * slot.second[i] + (1.0 - beta2) * g[i] * g[i];
                        let m_hat = slot.first[i] / c1;
                        let v_hat = slot.second[i] / c2;
                        param.data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
                OptimizerKind::Sgd { momentum } => {
                    if momentum > 0.0 {
                        if slot.first.is_empty() {
                            slot.first = g.clone();
                        } else {
                            for (b, gi) in slot.first.iter_mut().zip(&g) {
                                *b = momentum * *b + gi;
                            }
                        }
                        for (p, b) in param.data.iter_mut().zip(&slot.first) {
                            *p -= lr * b;
                        }
                    } else {
                        for (p, gi) in param.data.iter_mut().zip(&g) {
                            *p -= lr * gi;
                        }
                    }
                }
                OptimizerKind::Rmsprop { alpha, momentum, eps } => {
                    if slot.second.is_empty() {
                        slot.second = vec![0.0; g.len()];
                        slot.first = vec![0.0; g.len()];
                    }
                    for i in 0..g.len() {
                        slot.second[i] = alpha * slot.second[i] + (1.0 - alpha) * g[i] * g[i];
                        let step = g[i] / (slot.second[i].sqrt() + eps);
                        if momentum > 0.0 {
                            slot.first[i] = momentum * slot.first[i] + step;
                            param.data[i] -= lr * slot.first[i];
                        } else {
                            param.data[i] -= lr * step;
                        }
                    }
                }
            }
            if !param.is_finite() {
                return Err(Error::Numeric(format!("parameter {} diverged", store.params[id.0].name)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SchedulerSpec {
    Step { step_size: usize, gamma: f64 },
    Exponential { gamma: f64 },
    Plateau { factor: f64, patience: usize, threshold: f64, eps: f64 },
    Polynomial { power: f64, total_iters: usize },
    Cosine { t_max: usize, eta_min: f64 },
    Cyclic { base_lr: f64, max_lr: f64, step_size_up: usize },
    OneCycle { max_lr: f64, pct_start: f64 },
}

impl SchedulerSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SchedulerSpec::Step { step_size, gamma } => {
                in_range("step_size", step_size as f64, 1.0, 50.0)?;
                in_range("gamma", gamma, 0.1, 0.9)
            }
            SchedulerSpec::Exponential { gamma } => in_range("gamma", gamma, 0.85, 0.99),
            SchedulerSpec::Plateau { factor, patience, threshold, eps } => {
                in_range("factor", factor, 0.1, 0.9)?;
                in_range("patience", patience as f64, 1.0, 50.0)?;
                in_range("threshold", threshold, 1e-4, 1e-2)?;
                in_range("eps", eps, 1e-8, 1e-4)
            }
            SchedulerSpec::Polynomial { power, total_iters } => {
                in_range("power", power, 0.1, 2.0)?;
                in_range("total_iters", total_iters as f64, 2.0, 300.0)
            }
            SchedulerSpec::Cosine { t_max, eta_min } => {
                in_range("t_max", t_max as f64, 10.0, 100.0)?;
                in_range("eta_min", eta_min, 1e-6, 1e-2)
            }
            SchedulerSpec::Cyclic { base_lr, max_lr, step_size_up } => {
                in_range("base_lr", base_lr, 1e-5, 1e-2)?;
                in_range("max_lr", max_lr, 1e-3, 1e-1)?;
                in_range("step_size_up", step_size_up as f64, 5.0, 200.0)?;
                if base_lr >= max_lr {
                    return Err(Error::Config("cyclic base_lr must be below max_lr".into()));
                }
                Ok(())
            }
            SchedulerSpec::OneCycle { max_lr, pct_start } => {
                in_range("max_lr", max_lr, 1e-3, 1e-1)?;
                in_range("pct_start", pct_start, 0.1, 0.5)
            }
        }
    }

    /// Cyclic and one-cycle advance per batch; everything else per epoch.
    pub fn per_batch(&self) -> bool {
        matches!(self, SchedulerSpec::Cyclic { .. } | SchedulerSpec::OneCycle { .. })
    }
}

/// Closed-form learning rate after `t` scheduler steps (epochs, or batches
/// for the per-batch kinds). Plateau depends on history and just returns `lr0`.
pub fn lr_at(spec: &SchedulerSpec, lr0: f64, t: usize, total_steps: usize) -> f64 {
    let e = t as f64;
    let lr = match *spec {
        SchedulerSpec::Step { step_size, gamma } => lr0 * gamma.powi((t / step_size.max(1)) as i32),
        SchedulerSpec::Exponential { gamma } => lr0 * gamma.powf(e),
        SchedulerSpec::Plateau { .. } => lr0,
        SchedulerSpec::Polynomial { power, total_iters } => {
            let total = total_iters.max(1) as f64;
            lr0 * (1.0 - e.min(total) / total).powf(power)
        }
        SchedulerSpec::Cosine { t_max, eta_min } => {
            eta_min + (lr0 - eta_min) * (1.0 + (PI * e / t_max.max(1) as f64).cos()) / 2.0
        }
        SchedulerSpec::Cyclic { base_lr, max_lr, step_size_up } => {
            let s = step_size_up.max(1) as f64;
            let cycle = (1.0 + e / (2.0 * s)).floor();
            let x = (e / s - 2.0 * cycle + 1.0).abs();
            base_lr + (max_lr - base_lr) * (1.0 - x).max(0.0)
        }
        SchedulerSpec::OneCycle { max_lr, pct_start } => {
            let initial = max_lr / 25.0;
            let floor = initial * 1e-4;
            let total = total_steps.max(1) as f64;
            let warm = (pct_start * total).max(1.0);
            let e = e.min(total);
            if e < warm {
                initial + (max_lr - initial) * e / warm
            } else {
                let span = (total - warm).max(1.0);
                floor + (max_lr - floor) * (1.0 + (PI * (e - warm) / span).cos()) / 2.0
            }
        }
    };
    lr.max(0.0)
}

/// Stateful wrapper the training loop drives.
#[derive(Debug, Clone)]
pub struct Scheduler {
    pub spec: SchedulerSpec,
    lr0: f64,
    lr: f64,
    counter: usize,
    total_steps: usize,
    best: f64,
    bad_epochs: usize,
}

impl Scheduler {
    /// `batches_per_epoch` sets the one-cycle horizon (`× 1000`).
    pub fn new(spec: SchedulerSpec, lr0: f64, batches_per_epoch: usize) -> Self {
        let total_steps = batches_per_epoch.max(1) * 1000;
        let lr = lr_at(&spec, lr0, 0, total_steps);
        Self { spec, lr0, lr, counter: 0, total_steps, best: f64::INFINITY, bad_epochs: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step_batch(&mut self) {
        if self.spec.per_batch() {
            self.counter += 1;
            self.lr = lr_at(&self.spec, self.lr0, self.counter, self.total_steps);
        }
    }

    pub fn step_epoch(&mut self, val_loss: f64) {
        if self.spec.per_batch() {
            return;
        }
        if let SchedulerSpec::Plateau { factor, patience, threshold, eps } = self.spec {
            if val_loss < self.best * (1.0 - threshold) {
                self.best = val_loss;
                self.bad_epochs = 0;
            } else {
                self.bad_epochs += 1;
            }
            if self.bad_epochs >= patience {
                let reduced = self.lr * factor;
                if self.lr - reduced > eps {
                    self.lr = reduced;
                }
                self.bad_epochs = 0;
            }
        } else {
            self.counter += 1;
            self.lr = lr_at(&self.spec, self.lr0, self.counter, self.total_steps);
        }
    }
}

/// `λ·Σ|w|` over weight matrices, as a value.
pub fn l1_value(store: &ParamStore, lambda: f64) -> f64 {
    lambda
        * store
            .ids()
            .filter(|&id| store.kind(id) == ParamKind::Weight)
            .flat_map(|id| store.get(id).data.iter())
            .map(|w| w.abs())
            .sum::<f64>()
}

/// The same penalty recorded on the tape; `None` when `λ = 0`.
pub fn l1_penalty(f: &mut Forward, store: &ParamStore, lambda: f64) -> Result<Option<Var>> {
    if lambda <= 0.0 {
        return Ok(None);
    }
    let mut total: Option<Var> = None;
    for id in store.ids().filter(|&id| store.kind(id) == ParamKind::Weight) {
        let p = f.param(id);
        let a = f.tape.abs(p)?;
        let s = f.tape.sum(a)?;
        total = Some(match total {
            Some(t) => f.tape.add(t, s)?,
            None => s,
        });
    }
    total.map(|t| f.tape.scale(t, lambda)).transpose()
}
