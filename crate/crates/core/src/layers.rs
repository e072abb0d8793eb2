//! Parameter storage and the network building blocks.
//!
//! Parameters live in a [`ParamStore`]; each forward pass binds the ones it
//! touches onto a fresh [`Tape`] through a [`Forward`] context, which also
//! carries the train/eval flag, the dropout RNG and pending batch-norm
//! running-stat updates.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Reduce, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    /// Batch-norm scale and shift.
    Norm,
    /// Non-trainable state (running statistics).
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        self.params.push(Param { name: name.into(), kind, value });
        ParamId(self.params.len() - 1)
    }

    /// Glorot-uniform `rows × cols` weight.
    pub fn glorot(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let limit = (6.0 / (rows + cols).max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-limit..=limit)).collect();
        self.add(name, ParamKind::Weight, Tensor { rows, cols, data })
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.params[id.0].kind
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.kind(id) != ParamKind::Buffer)
    }

    /// Number of trainable scalars.
    pub fn n_trainable(&self) -> usize {
        self.trainable().map(|id| self.get(id).data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

/// One forward computation over a [`ParamStore`].
pub struct Forward<'a> {
    pub tape: Tape,
    params: &'a ParamStore,
    bound: Vec<Option<Var>>,
    pub training: bool,
    rng: Option<&'a mut ChaCha8Rng>,
    /// `(buffer, new value)` pairs to apply once the step succeeds.
    pub buffer_updates: Vec<(ParamId, Tensor)>,
}

impl<'a> Forward<'a> {
    pub fn train(params: &'a ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self::new(params, true, Some(rng))
    }

    pub fn eval(params: &'a ParamStore) -> Self {
        Self::new(params, false, None)
    }

    fn new(params: &'a ParamStore, training: bool, rng: Option<&'a mut ChaCha8Rng>) -> Self {
        Self { tape: Tape::new(), params, bound: vec![None; params.len()], training, rng, buffer_updates: Vec::new() }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.params.get(id).clone();
        let v = if self.params.kind(id) == ParamKind::Buffer {
            self.tape.constant(value)
        } else {
            self.tape.leaf(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Gradients of every trainable parameter touched by this pass.
    pub fn backward(&mut self, loss: Var) -> Result<Vec<(ParamId, Tensor)>> {
        self.tape.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.filter(|v| self.tape.requires_grad(*v)).map(|v| (ParamId(i), self.tape.grad(v))))
            .collect())
    }

    fn rng(&mut self) -> Result<&mut ChaCha8Rng> {
        self.rng.as_deref_mut().ok_or_else(|| Error::Config("training pass needs an RNG".into()))
    }
}

fn check_edges(edge_index: &[Vec<usize>; 2], weights: &[f64], n: usize) -> Result<()> {
    if edge_index[0].len() != edge_index[1].len() || edge_index[0].len() != weights.len() {
        return Err(Error::Shape("edge index and weights differ in length".into()));
    }
    if let Some(bad) = edge_index.iter().flatten().find(|&&i| i >= n) {
        return Err(Error::Shape(format!("edge endpoint {bad} out of range for {n} nodes")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = store.glorot(format!("{name}.weight"), d_in, d_out, rng);
        let bias = store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(1, d_out));
        Self { weight, bias }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let (w, b) = (f.param(self.weight), f.param(self.bias));
        let xw = f.tape.matmul(x, w)?;
        f.tape.add(xw, b)
    }
}

/// Symmetrically normalised convolution over weighted edges with self-loops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GcnConv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl GcnConv {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let Dense { weight, bias } = Dense::new(store, name, d_in, d_out, rng);
        Self { weight, bias }
    }

    pub fn forward(&self, f: &mut Forward, x: Var, edge_index: &[Vec<usize>; 2], weights: &[f64]) -> Result<Var> {
        let n = f.value(x).rows;
        check_edges(edge_index, weights, n)?;
        let mut deg = vec![1.0; n];
        for (&t, &w) in edge_index[1].iter().zip(weights) {
            deg[t] += w;
        }
        let mut src: Vec<usize> = (0..n).collect();
        let mut dst: Vec<usize> = (0..n).collect();
        let mut coef: Vec<f64> = deg.iter().map(|d| 1.0 / d).collect();
        for ((&s, &t), &w) in edge_index[0].iter().zip(&edge_index[1]).zip(weights) {
            src.push(s);
            dst.push(t);
            coef.push(w / (deg[s] * deg[t]).sqrt());
        }
        let w = f.param(self.weight);
        let xw = f.tape.matmul(x, w)?;
        let agg = f.tape.propagate(xw, &src, &dst, &coef, n)?;
        let b = f.param(self.bias);
        f.tape.add(agg, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggr {
    Add,
    Mean,
    Max,
}

/// Un-normalised convolution: own transform plus aggregated weighted messages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphConv {
    pub weight_self: ParamId,
    pub weight_neigh: ParamId,
    pub bias: ParamId,
    pub aggr: Aggr,
}

impl GraphConv {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, aggr: Aggr, rng: &mut ChaCha8Rng) -> Self {
        let weight_self = store.glorot(format!("{name}.weight_self"), d_in, d_out, rng);
        let weight_neigh = store.glorot(format!("{name}.weight_neigh"), d_in, d_out, rng);
        let bias = store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(1, d_out));
        Self { weight_self, weight_neigh, bias, aggr }
    }

    pub fn forward(&self, f: &mut Forward, x: Var, edge_index: &[Vec<usize>; 2], weights: &[f64]) -> Result<Var> {
        let n = f.value(x).rows;
        check_edges(edge_index, weights, n)?;
        let [src, dst] = edge_index;
        let agg = match self.aggr {
            Aggr::Add => f.tape.propagate(x, src, dst, weights, n)?,
            Aggr::Mean => {
                let mut count = vec![0usize; n];
                for &t in dst {
                    count[t] += 1;
                }
                let coef: Vec<f64> = dst.iter().zip(weights).map(|(&t, w)| w / count[t].max(1) as f64).collect();
                f.tape.propagate(x, src, dst, &coef, n)?
            }
            Aggr::Max => {
                let msgs = f.tape.row_gather(x, src)?;
                let msgs = f.tape.scale_rows(msgs, weights)?;
                f.tape.segment_reduce(msgs, dst, n, Reduce::Max)?
            }
        };
        let ws = f.param(self.weight_self);
        let wn = f.param(self.weight_neigh);
        let own = f.tape.matmul(x, ws)?;
        let neigh = f.tape.matmul(agg, wn)?;
        let out = f.tape.add(own, neigh)?;
        let b = f.param(self.bias);
        f.tape.add(out, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, momentum: f64, eps: f64) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), ParamKind::Norm, Tensor::filled(1, d, 1.0)),
            beta: store.add(format!("{name}.beta"), ParamKind::Norm, Tensor::zeros(1, d)),
            running_mean: store.add(format!("{name}.running_mean"), ParamKind::Buffer, Tensor::zeros(1, d)),
            running_var: store.add(format!("{name}.running_var"), ParamKind::Buffer, Tensor::filled(1, d, 1.0)),
            momentum,
            eps,
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let eps = f.input(Tensor::scalar(self.eps));
        let normed = if f.training {
            let mean = f.tape.mean_rows(x)?;
            let centred = f.tape.sub(x, mean)?;
            let sq = f.tape.mul(centred, centred)?;
            let var = f.tape.mean_rows(sq)?;
            let m = self.momentum;
            let blend = |old: &Tensor, new: &Tensor| Tensor {
                rows: 1,
                cols: old.cols,
                data: old.data.iter().zip(&new.data).map(|(o, b)| (1.0 - m) * o + m * b).collect(),
            };
            let rm = blend(f.params.get(self.running_mean), f.value(mean));
            let rv = blend(f.params.get(self.running_var), f.value(var));
            f.buffer_updates.push((self.running_mean, rm));
            f.buffer_updates.push((self.running_var, rv));
            let shifted = f.tape.add(var, eps)?;
            let inv = f.tape.powf(shifted, -0.5)?;
            f.tape.mul(centred, inv)?
        } else {
            let rm = f.param(self.running_mean);
            let rv = f.param(self.running_var);
            let centred = f.tape.sub(x, rm)?;
            let shifted = f.tape.add(rv, eps)?;
            let inv = f.tape.powf(shifted, -0.5)?;
            f.tape.mul(centred, inv)?
        };
        let g = f.param(self.gamma);
        let b = f.param(self.beta);
        let scaled = f.tape.mul(normed, g)?;
        f.tape.add(scaled, b)
    }
}

/// Inverted dropout; identity outside training or at rate 0.
pub fn dropout(f: &mut Forward, x: Var, rate: f64) -> Result<Var> {
    if !f.training || rate <= 0.0 {
        return Ok(x);
    }
    if rate >= 1.0 {
        return Err(Error::Config(format!("dropout rate {rate} must be below 1")));
    }
    let (rows, cols) = (f.value(x).rows, f.value(x).cols);
    let keep = 1.0 / (1.0 - rate);
    let rng = f.rng()?;
    let data = (0..rows * cols).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
    let mask = f.input(Tensor { rows, cols, data });
    f.tape.mul(x, mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { table: store.glorot(format!("{name}.table"), vocab, dim, rng) }
    }

    pub fn forward(&self, f: &mut Forward, ids: &[usize]) -> Result<Var> {
        let vocab = f.params.get(self.table).rows;
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Data(format!("activity id {bad} outside a vocabulary of {vocab}")));
        }
        let t = f.param(self.table);
        f.tape.row_gather(t, ids)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Mean,
    Add,
    Max,
}

pub fn pool(tape: &mut Tape, x: Var, graph_id: &[usize], n_graphs: usize, method: Pool) -> Result<Var> {
    let mut seen = vec![false; n_graphs];
    for &g in graph_id {
        *seen.get_mut(g).ok_or_else(|| Error::Shape(format!("graph id {g} out of {n_graphs}")))? = true;
    }
    if let Some(empty) = seen.iter().position(|s| !s) {
        return Err(Error::Data(format!("graph {empty} has no nodes to pool")));
    }
    let mode = match method {
        Pool::Mean => Reduce::Mean,
        Pool::Add => Reduce::Sum,
        Pool::Max => Reduce::Max,
    };
    tape.segment_reduce(x, graph_id, n_graphs, mode)
}

fn check_labels(tape: &Tape, logits: Var, labels: &[usize]) -> Result<usize> {
    let t = tape.value(logits);
    if labels.len() != t.rows || t.rows == 0 {
        return Err(Error::Shape(format!("{} labels for {} logit rows", labels.len(), t.rows)));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= t.cols) {
        return Err(Error::Data(format!("label {bad} outside {} classes", t.cols)));
    }
    Ok(t.cols)
}

/// Mean negative log-likelihood of the softmax.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    check_labels(tape, logits, labels)?;
    let ls = tape.log_softmax_rows(logits)?;
    let picked = tape.pick(ls, labels)?;
    let m = tape.mean(picked)?;
    tape.scale(m, -1.0)
}

/// Mean over the batch of `(1/C) Σ_{i≠y} max(0, 1 − x_y + x_i)`.
pub fn multi_margin(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let c = check_labels(tape, logits, labels)?;
    let b = labels.len();
    let picked = tape.pick(logits, labels)?;
    let diff = tape.sub(logits, picked)?;
    let one = tape.constant(Tensor::scalar(1.0));
    let margin = tape.add(diff, one)?;
    let hinge = tape.relu(margin)?;
    let total = tape.sum(hinge)?;
    // each row's i = y term is exactly relu(1) = 1 with zero gradient
    let own = tape.constant(Tensor::scalar(-(b as f64)));
    let total = tape.add(total, own)?;
    tape.scale(total, 1.0 / (b * c) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn set(store: &mut ParamStore, id: ParamId, rows: usize, cols: usize, data: Vec<f64>) {
        *store.get_mut(id) = Tensor::new(rows, cols, data).unwrap();
    }

    fn gcn_out(x: Tensor, edges: [Vec<usize>; 2], w: &[f64], weight: Tensor, bias: Tensor) -> Tensor {
        let mut store = ParamStore::new();
        let layer = GcnConv::new(&mut store, "g", weight.rows, weight.cols, &mut rng());
        *store.get_mut(layer.weight) = weight;
        *store.get_mut(layer.bias) = bias;
        let mut f = Forward::eval(&store);
        let xv = f.input(x);
        let out = layer.forward(&mut f, xv, &edges, w).unwrap();
        f.value(out).clone()
    }

    #[test]
    fn gcn_examples() {
        let one = || Tensor::new(1, 1, vec![1.0]).unwrap();
        let out = gcn_out(Tensor::new(1, 1, vec![2.0]).unwrap(), [vec![], vec![]], &[], one(), Tensor::zeros(1, 1));
        assert_eq!(out.data, vec![2.0]);
        let x = || Tensor::new(2, 1, vec![1.0, 2.0]).unwrap();
        let out = gcn_out(x(), [vec![0], vec![1]], &[1.0], one(), Tensor::zeros(1, 1));
        assert!((out.data[0] - 1.0).abs() < 1e-12);
        assert!((out.data[1] - (1.0 + 1.0 / 2f64.sqrt())).abs() < 1e-12);
        let out = gcn_out(x(), [vec![0], vec![1]], &[0.0], one(), Tensor::zeros(1, 1));
        assert_eq!(out.data, vec![1.0, 2.0]);
    }

    fn graph_conv_out(aggr: Aggr, x: Tensor, edges: [Vec<usize>; 2], w: &[f64], ws: Tensor, wn: Tensor) -> Tensor {
        let mut store = ParamStore::new();
        let layer = GraphConv::new(&mut store, "c", ws.rows, ws.cols, aggr, &mut rng());
        *store.get_mut(layer.weight_self) = ws;
        *store.get_mut(layer.weight_neigh) = wn;
        let mut f = Forward::eval(&store);
        let xv = f.input(x);
        let out = layer.forward(&mut f, xv, &edges, w).unwrap();
        f.value(out).clone()
    }

    #[test]
    fn graph_conv_examples() {
        let one = || Tensor::new(1, 1, vec![1.0]).unwrap();
        let x = || Tensor::new(2, 1, vec![1.0, 2.0]).unwrap();
        let add = graph_conv_out(Aggr::Add, x(), [vec![0], vec![1]], &[0.5], one(), one());
        assert_eq!(add.data, vec![1.0, 2.5]);
        let mean = graph_conv_out(Aggr::Mean, x(), [vec![0], vec![1]], &[0.5], one(), one());
        assert_eq!(mean.data, add.data);
        let max = graph_conv_out(Aggr::Max, x(), [vec![0], vec![1]], &[0.5], one(), one());
        assert_eq!(max.data, add.data);
        for aggr in [Aggr::Add, Aggr::Mean, Aggr::Max] {
            let lonely = graph_conv_out(aggr, x(), [vec![], vec![]], &[], one(), one());
            assert_eq!(lonely.data, vec![1.0, 2.0]);
        }
        // max keeps the largest weighted message per column
        let x3 = Tensor::new(3, 2, vec![1.0, -4.0, 3.0, -1.0, 0.0, 0.0]).unwrap();
        let id = || Tensor::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zero = || Tensor::zeros(2, 2);
        let m = graph_conv_out(Aggr::Max, x3, [vec![0, 1], vec![2, 2]], &[1.0, 0.5], zero(), id());
        assert_eq!(m.row(2), &[1.5, -0.5]);
        assert_eq!(m.row(0), &[0.0, 0.0]);
    }

    fn random_graph() -> impl Strategy<Value = (usize, Vec<(usize, usize, f64)>, Vec<f64>, Vec<f64>, Vec<f64>)> {
        (1usize..=6).prop_flat_map(|n| {
            (
                Just(n),
                prop::collection::vec((0..n, 0..n, 0.0f64..=1.0), 0..10),
                prop::collection::vec(-2.0f64..2.0, n * 3),
                prop::collection::vec(-1.0f64..1.0, 6),
                prop::collection::vec(-1.0f64..1.0, 6),
            )
        })
    }

    fn dense_mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        out
    }

    proptest! {
        #[test]
        fn gcn_matches_dense_oracle((n, edges, x, w, bias) in random_graph()) {
            // Ã[t][s] accumulates incoming weight, plus identity
            let mut a = vec![0.0; n * n];
            for i in 0..n {
                a[i * n + i] = 1.0;
            }
            for &(s, t, wt) in &edges {
                a[t * n + s] += wt;
            }
            let deg: Vec<f64> = (0..n).map(|t| (0..n).map(|s| a[t * n + s]).sum::<f64>()).collect();
            let mut norm = vec![0.0; n * n];
            for t in 0..n {
                for s in 0..n {
                    norm[t * n + s] = a[t * n + s] / (deg[t] * deg[s]).sqrt();
                }
            }
            let ax = dense_mm(&norm, &x, n, n, 3);
            let mut expected = dense_mm(&ax, &w, n, 3, 2);
            for r in 0..n {
                for c in 0..2 {
                    expected[r * 2 + c] += bias[c];
                }
            }
            let src = edges.iter().map(|e| e.0).collect();
            let dst = edges.iter().map(|e| e.1).collect();
            let wts: Vec<f64> = edges.iter().map(|e| e.2).collect();
            let out = gcn_out(
                Tensor::new(n, 3, x).unwrap(),
                [src, dst],
                &wts,
                Tensor::new(3, 2, w).unwrap(),
                Tensor::new(1, 2, bias[..2].to_vec()).unwrap(),
            );
            for (o, e) in out.data.iter().zip(&expected) {
                prop_assert!((o - e).abs() <= 1e-10);
            }
        }

        #[test]
        fn graph_conv_add_matches_dense_oracle((n, edges, x, ws, wn) in random_graph()) {
            let mut a = vec![0.0; n * n];
            for &(s, t, wt) in &edges {
                a[s * n + t] += wt;
            }
            let mut at = vec![0.0; n * n];
            for s in 0..n {
                for t in 0..n {
                    at[t * n + s] = a[s * n + t];
                }
            }
            let own = dense_mm(&x, &ws, n, 3, 2);
            let neigh = dense_mm(&dense_mm(&at, &x, n, n, 3), &wn, n, 3, 2);
            let src = edges.iter().map(|e| e.0).collect();
            let dst = edges.iter().map(|e| e.1).collect();
            let wts: Vec<f64> = edges.iter().map(|e| e.2).collect();
            let out = graph_conv_out(
                Aggr::Add,
                Tensor::new(n, 3, x).unwrap(),
                [src, dst],
                &wts,
                Tensor::new(3, 2, ws).unwrap(),
                Tensor::new(3, 2, wn).unwrap(),
            );
            for i in 0..n * 2 {
                prop_assert!((out.data[i] - own[i] - neigh[i]).abs() <= 1e-10);
            }
        }

        #[test]
        fn logit_shift_leaves_losses_alone(row in prop::collection::vec(-5.0f64..5.0, 2..6), shift in -10.0f64..10.0, y in 0usize..6) {
            let y = y % row.len();
            let c = row.len();
            let eval = |r: &[f64]| {
                let mut tape = Tape::new();
                let l = tape.constant(Tensor::new(1, c, r.to_vec()).unwrap());
                let ce = cross_entropy(&mut tape, l, &[y]).unwrap();
                let mm = multi_margin(&mut tape, l, &[y]).unwrap();
                (tape.value(ce).item(), tape.value(mm).item())
            };
            let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
            let (ce0, mm0) = eval(&row);
            let (ce1, mm1) = eval(&shifted);
            prop_assert!((ce0 - ce1).abs() < 1e-9);
            prop_assert!((mm0 - mm1).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_examples() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::new(1, 2, vec![0.0, 0.0]).unwrap());
        let ce = cross_entropy(&mut tape, l, &[0]).unwrap();
        assert!((tape.value(ce).item() - 2f64.ln()).abs() < 1e-12);
        let l = tape.constant(Tensor::new(1, 2, vec![2.0, 0.5]).unwrap());
        let mm = multi_margin(&mut tape, l, &[0]).unwrap();
        assert_eq!(tape.value(mm).item(), 0.0);
        let l = tape.constant(Tensor::new(1, 2, vec![0.2, 0.5]).unwrap());
        let mm = multi_margin(&mut tape, l, &[0]).unwrap();
        assert!((tape.value(mm).item() - 0.65).abs() < 1e-12);
        assert!(multi_margin(&mut tape, l, &[2]).is_err());
    }

    #[test]
    fn pooling() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let m = pool(&mut tape, x, &[0, 0], 1, Pool::Mean).unwrap();
        assert_eq!(tape.value(m).data, vec![2.0, 3.0]);
        let s = pool(&mut tape, x, &[0, 1], 2, Pool::Add).unwrap();
        assert_eq!(tape.value(s).data, vec![1.0, 2.0, 3.0, 4.0]);
        let y = tape.constant(Tensor::new(3, 1, vec![1.0, 5.0, 2.0]).unwrap());
        let mx = pool(&mut tape, y, &[0, 0, 0], 1, Pool::Max).unwrap();
        assert_eq!(tape.value(mx).data, vec![5.0]);
        assert!(pool(&mut tape, y, &[0, 0, 0], 2, Pool::Mean).is_err());
    }

    #[test]
    fn dropout_modes() {
        let store = ParamStore::new();
        let mut f = Forward::eval(&store);
        let x = f.input(Tensor::filled(2, 2, 3.0));
        assert_eq!(dropout(&mut f, x, 0.5).unwrap(), x);

        let mut r = rng();
        let mut f = Forward::train(&store, &mut r);
        let n = 100_000;
        let x = f.input(Tensor::filled(1, n, 1.0));
        let y = dropout(&mut f, x, 0.5).unwrap();
        let out = f.value(y);
        assert!(out.data.iter().all(|&v| v == 0.0 || v == 2.0));
        let mean = out.data.iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn batch_norm_constant_column_and_running_stats() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2, 0.1, 1e-5);
        set(&mut store, bn.beta, 1, 2, vec![0.5, -0.5]);
        let mut r = rng();
        let mut f = Forward::train(&store, &mut r);
        let x = f.input(Tensor::new(3, 2, vec![4.0, 1.0, 4.0, 2.0, 4.0, 3.0]).unwrap());
        let y = bn.forward(&mut f, x).unwrap();
        let out = f.value(y).clone();
        for r in 0..3 {
            assert!((out.at(r, 0) - 0.5).abs() < 1e-12);
        }
        assert!((out.at(0, 1) + out.at(2, 1) + 1.0).abs() < 1e-9);
        let updates = f.buffer_updates.clone();
        assert_eq!(updates[0].1.data, vec![0.4, 0.2]);
        let var2 = 2.0 / 3.0;
        assert!((updates[1].1.data[1] - (0.9 + 0.1 * var2)).abs() < 1e-12);
        assert!((updates[1].1.data[0] - 0.9).abs() < 1e-12);

        // eval mode uses the running statistics
        for (id, t) in updates {
            *store.get_mut(id) = t;
        }
        let mut f = Forward::eval(&store);
        let x = f.input(Tensor::new(1, 2, vec![0.4, 0.2]).unwrap());
        let y = bn.forward(&mut f, x).unwrap();
        assert!((f.value(y).data[0] - 0.5).abs() < 1e-12);
        assert!((f.value(y).data[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn embedding_lookup() {
        let mut store = ParamStore::new();
        let e = Embedding::new(&mut store, "emb", 3, 4, &mut rng());
        let mut f = Forward::eval(&store);
        let out = e.forward(&mut f, &[0, 0]).unwrap();
        let t = f.value(out);
        assert_eq!(t.row(0), t.row(1));
        assert!(e.forward(&mut f, &[3]).is_err());
    }

    #[test]
    fn gradients_flow_to_touched_params_only() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let d = Dense::new(&mut store, "d", 2, 3, &mut r);
        let unused = Dense::new(&mut store, "u", 2, 3, &mut r);
        let mut f = Forward::eval(&store);
        let x = f.input(Tensor::filled(4, 2, 1.0));
        let y = d.forward(&mut f, x).unwrap();
        let loss = cross_entropy(&mut f.tape, y, &[0, 1, 2, 0]).unwrap();
        let grads = f.backward(loss).unwrap();
        let ids: Vec<_> = grads.iter().map(|g| g.0).collect();
        assert_eq!(ids, vec![d.weight, d.bias]);
        assert!(!ids.contains(&unused.weight));
    }
}
