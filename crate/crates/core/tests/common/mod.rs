//! Independent brute-force oracles shared by the integration and acceptance
//! tests: dense convolution formulas, finite differences, a direct binning
//! and tf-idf recount, and a metric recount.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use hypergcn::autodiff::Tensor;
use hypergcn::eventlog::{CaseTrace, EventRecord};
use hypergcn::layers::Aggr;
use hypergcn::pseudoembed::BinningConfig;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Matrix = Vec<Vec<f64>>;

pub fn to_matrix(t: &Tensor) -> Matrix {
    (0..t.rows).map(|r| t.row(r).to_vec()).collect()
}

pub fn to_tensor(m: &Matrix) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let k = b.len();
    let n = if k == 0 { 0 } else { b[0].len() };
    a.iter()
        .map(|row| (0..n).map(|j| (0..k).map(|i| row[i] * b[i][j]).sum()).collect())
        .collect()
}

fn add_bias(m: &mut Matrix, bias: &[f64]) {
    for row in m {
        for (x, b) in row.iter_mut().zip(bias) {
            *x += b;
        }
    }
}

/// A path graph `0 → 1 → … → n-1` with weights in `[0, 1]`; exact 0 and 1
/// appear now and then.
pub fn random_chain(rng: &mut ChaCha8Rng, max_nodes: usize) -> (usize, [Vec<usize>; 2], Vec<f64>) {
    let n = rng.gen_range(1..=max_nodes);
    let weights = (1..n)
        .map(|_| match rng.gen_range(0..6) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.gen_range(0.0..1.0),
        })
        .collect();
    (n, [(0..n.saturating_sub(1)).collect(), (1..n).collect()], weights)
}

/// `D^{-1/2} (A_wᵀ + I) D^{-1/2} X W + b` with `D = diag(row sums)`.
pub fn dense_gcn(x: &Matrix, edges: &[Vec<usize>; 2], w: &[f64], weight: &Matrix, bias: &[f64]) -> Matrix {
    let n = x.len();
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        a[i][i] = 1.0;
    }
    for ((&s, &t), &wt) in edges[0].iter().zip(&edges[1]).zip(w) {
        a[t][s] += wt;
    }
    let deg: Vec<f64> = (0..n).map(|t| 1.0 + edges[1].iter().zip(w).filter(|(&d, _)| d == t).map(|(_, w)| w).sum::<f64>()).collect();
    let norm: Matrix =
        (0..n).map(|i| (0..n).map(|j| a[i][j] / (deg[i].sqrt() * deg[j].sqrt())).collect()).collect();
    let mut out = matmul(&matmul(&norm, x), weight);
    add_bias(&mut out, bias);
    out
}

/// `X W_self + Aggr_{s→v}(w · X_s) W_neigh + b`.
pub fn dense_graph_conv(
    x: &Matrix,
    edges: &[Vec<usize>; 2],
    w: &[f64],
    w_self: &Matrix,
    w_neigh: &Matrix,
    bias: &[f64],
    aggr: Aggr,
) -> Matrix {
    let n = x.len();
    let d = if n == 0 { 0 } else { x[0].len() };
    let agg: Matrix = (0..n)
        .map(|v| {
            let msgs: Vec<Vec<f64>> = edges[0]
                .iter()
                .zip(&edges[1])
                .zip(w)
                .filter(|((_, &t), _)| t == v)
                .map(|((&s, _), &wt)| x[s].iter().map(|xi| wt * xi).collect())
                .collect();
            if msgs.is_empty() {
                return vec![0.0; d];
            }
            (0..d)
                .map(|k| match aggr {
                    Aggr::Add => msgs.iter().map(|m| m[k]).sum(),
                    Aggr::Mean => msgs.iter().map(|m| m[k]).sum::<f64>() / msgs.len() as f64,
                    Aggr::Max => msgs.iter().map(|m| m[k]).fold(f64::NEG_INFINITY, f64::max),
                })
                .collect()
        })
        .collect();
    let own = matmul(x, w_self);
    let neigh = matmul(&agg, w_neigh);
    let mut out: Matrix = own.iter().zip(&neigh).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect();
    add_bias(&mut out, bias);
    out
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    a.iter().zip(b).flat_map(|(r, s)| {
        assert_eq!(r.len(), s.len(), "column count");
        r.iter().zip(s).map(|(x, y)| (x - y).abs())
    })
    .fold(0.0, f64::max)
}

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// Relative error with the denominator floored so that two gradients that are
/// both essentially zero compare as equal.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central difference of `f` at coordinate `i` of `x`.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += FD_STEP;
    let up = f(&xp);
    xp[i] = x[i] - FD_STEP;
    let down = f(&xp);
    (up - down) / (2.0 * FD_STEP)
}

// ---- binning and tf-idf, recomputed from the definitions ----

fn type7_quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    if lo + 1 >= sorted.len() {
        return sorted[lo];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleBinning {
    pub t_cut: f64,
    pub n_quantile: usize,
    pub unique: Vec<f64>,
    pub edges: Vec<f64>,
    pub has_large: bool,
}

impl OracleBinning {
    fn build(durations: &[f64], t_cut: f64, n_quantile: usize) -> Self {
        let unique: Vec<f64> = durations
            .iter()
            .filter(|&&d| d < t_cut)
            .map(|&d| d.to_bits())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(f64::from_bits)
            .collect::<Vec<_>>();
        let mut unique = unique;
        unique.sort_by(f64::total_cmp);
        let mut large: Vec<f64> = durations.iter().copied().filter(|&d| d >= t_cut).collect();
        large.sort_by(f64::total_cmp);
        let mut edges: Vec<f64> = Vec::new();
        if !large.is_empty() {
            for k in 1..n_quantile {
                let e = type7_quantile(&large, k as f64 / n_quantile as f64);
                let above_min = e > large[0];
                let increasing = edges.last().map_or(true, |&l| e > l);
                if above_min && increasing {
                    edges.push(e);
                }
            }
        }
        Self { t_cut, n_quantile, unique, edges, has_large: !large.is_empty() }
    }

    pub fn n_bins(&self) -> usize {
        self.unique.len() + if self.has_large { self.edges.len() + 1 } else { 0 }
    }

    pub fn bin(&self, d: f64) -> usize {
        if d < self.t_cut || !self.has_large {
            // nearest by absolute distance, first (lowest) on ties
            let mut best = 0;
            for i in 1..self.unique.len() {
                if (self.unique[i] - d).abs() < (self.unique[best] - d).abs() {
                    best = i;
                }
            }
            return best;
        }
        // intervals [t_cut, e1), [e1, e2), …, [ek, ∞)
        let mut k = 0;
        for (i, &e) in self.edges.iter().enumerate() {
            if d >= e {
                k = i + 1;
            }
        }
        self.unique.len() + k
    }

    fn score(&self, durations: &[f64]) -> f64 {
        let nq = if self.has_large { self.edges.len() + 1 } else { 0 };
        if nq <= 1 {
            return 1.0;
        }
        let mut counts = vec![0.0; nq];
        for &d in durations.iter().filter(|&&d| d >= self.t_cut) {
            counts[self.bin(d) - self.unique.len()] += 1.0;
        }
        let max = counts.iter().cloned().fold(0.0, f64::max);
        let min = counts.iter().cloned().fold(f64::INFINITY, f64::min);
        if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }
}

/// Local search over `(t_cut, n_quantile)`: fewer quantiles, more quantiles,
/// cut-off moved up past the smallest long duration, cut-off moved down to
/// the largest short duration — the first best-scoring unvisited candidate wins.
pub fn oracle_binning(durations: &[f64], config: &BinningConfig) -> OracleBinning {
    let mut distinct: Vec<f64> = durations.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let ok = |s: f64| s <= 1.0 + config.balance_tolerance;
    let mut at = (config.t_cut, config.n_quantile);
    let mut seen = vec![at];
    let mut cur = OracleBinning::build(durations, at.0, at.1);
    let mut cur_score = cur.score(durations);
    let mut best = (cur.clone(), cur_score);
    let mut rounds = 0;
    while !ok(cur_score) && rounds < config.max_iterations {
        let mut cands = Vec::new();
        if at.1 > 1 {
            cands.push((at.0, at.1 - 1));
        }
        cands.push((at.0, at.1 + 1));
        let longs: Vec<f64> = distinct.iter().copied().filter(|&d| d >= at.0).collect();
        if longs.len() >= 2 {
            cands.push((longs[1], at.1));
        }
        if let Some(&s) = distinct.iter().filter(|&&d| d < at.0).last() {
            if s > 0.0 {
                cands.push((s, at.1));
            }
        }
        let mut pick: Option<((f64, usize), OracleBinning, f64)> = None;
        for c in cands {
            if seen.contains(&c) {
                continue;
            }
            let b = OracleBinning::build(durations, c.0, c.1);
            let s = b.score(durations);
            if pick.as_ref().map_or(true, |p| s < p.2) {
                pick = Some((c, b, s));
            }
        }
        let Some((c, b, s)) = pick else { break };
        rounds += 1;
        seen.push(c);
        at = c;
        cur = b;
        cur_score = s;
        if s < best.1 {
            best = (cur.clone(), s);
        }
    }
    if ok(cur_score) {
        cur
    } else {
        best.0
    }
}

pub fn rounded_duration(e: &EventRecord, config: &BinningConfig) -> f64 {
    let d = (e.complete_ts - e.start_ts) as f64;
    if config.round_to > 0.0 {
        (d / config.round_to).round() * config.round_to
    } else {
        d
    }
}

/// Per-trace tf-idf matrices (`n × n_bins`), corpus statistics from `train`.
pub fn oracle_tfidf(train: &[CaseTrace], docs: &[CaseTrace], config: &BinningConfig) -> (OracleBinning, Vec<Matrix>) {
    let durations: Vec<f64> = train.iter().flat_map(|t| &t.events).map(|e| rounded_duration(e, config)).collect();
    let binning = oracle_binning(&durations, config);
    let terms = |t: &CaseTrace| -> Vec<(String, usize)> {
        t.events.iter().map(|e| (e.activity.clone(), binning.bin(rounded_duration(e, config)))).collect()
    };
    let mut df: BTreeMap<(String, usize), usize> = BTreeMap::new();
    for t in train {
        for term in terms(t).into_iter().collect::<BTreeSet<_>>() {
            *df.entry(term).or_default() += 1;
        }
    }
    let n_docs = train.len() as f64;
    let width = binning.n_bins();
    let matrices = docs
        .iter()
        .map(|t| {
            let ts = terms(t);
            ts.iter()
                .map(|(act, _)| {
                    (0..width)
                        .map(|b| {
                            let tf = ts.iter().filter(|(a, bb)| a == act && *bb == b).count() as f64;
                            let d = *df.get(&(act.clone(), b)).unwrap_or(&0) as f64;
                            tf * (((1.0 + n_docs) / (1.0 + d)).ln() + 1.0)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    (binning, matrices)
}

/// A small random corpus: activities `a`–`d`, durations mixing short values
/// around the cut-off and long ones.
pub fn random_corpus(rng: &mut ChaCha8Rng, n_docs: usize, t_cut: f64) -> Vec<CaseTrace> {
    let acts = ["a", "b", "c", "d"];
    (0..n_docs)
        .map(|j| {
            let case_id = format!("c{j}");
            let mut ts = 0i64;
            let events = (0..rng.gen_range(1..=6))
                .map(|_| {
                    let dur = if rng.gen_bool(0.5) {
                        rng.gen_range(0..(t_cut as i64 + 3))
                    } else {
                        rng.gen_range(t_cut as i64..(t_cut as i64 * 20))
                    };
                    let e = EventRecord {
                        case_id: case_id.clone(),
                        activity: acts[rng.gen_range(0..acts.len())].into(),
                        start_ts: ts,
                        complete_ts: ts + dur,
                        attrs: BTreeMap::new(),
                    };
                    ts += rng.gen_range(0..100);
                    e
                })
                .collect();
            CaseTrace { case_id, events, graph_attrs: BTreeMap::new(), label: 0 }
        })
        .collect()
}

// ---- classification metrics by direct counting ----

pub struct Recount {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub support: Vec<usize>,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
}

pub fn recount(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Recount {
    let n = y_true.len();
    let mut r = Recount {
        precision: vec![],
        recall: vec![],
        f1: vec![],
        support: vec![],
        accuracy: 0.0,
        macro_f1: 0.0,
        weighted_f1: 0.0,
    };
    let mut correct = 0;
    for i in 0..n {
        if y_true[i] == y_pred[i] {
            correct += 1;
        }
    }
    r.accuracy = if n == 0 { 0.0 } else { correct as f64 / n as f64 };
    for c in 0..n_classes {
        let mut tp = 0;
        let mut fp = 0;
        let mut fn_ = 0;
        for i in 0..n {
            match (y_true[i] == c, y_pred[i] == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
        let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let rc = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f = if p + rc == 0.0 { 0.0 } else { 2.0 * p * rc / (p + rc) };
        r.precision.push(p);
        r.recall.push(rc);
        r.f1.push(f);
        r.support.push(tp + fn_);
    }
    r.macro_f1 = r.f1.iter().sum::<f64>() / n_classes as f64;
    r.weighted_f1 = if n == 0 {
        0.0
    } else {
        r.f1.iter().zip(&r.support).map(|(f, &s)| f * s as f64).sum::<f64>() / n as f64
    };
    r
}

// ---- drivers shared with the acceptance suite ----

use hypergcn::autodiff::{Activation, Reduce, Tape, Var};
use hypergcn::graphrep::{make_batch, GraphInstance};
use hypergcn::layers::{
    cross_entropy, multi_margin, pool, BatchNorm, Dense, Embedding, Forward, GcnConv, GraphConv, ParamKind, ParamStore,
    Pool,
};
use hypergcn::models::{Arch, ConvKind, Dims, Model};
use hypergcn::optim::l1_penalty;
use hypergcn::tuner::{sample, SearchSpace};
use rand::SeedableRng;

/// Largest deviation between the library convolutions and the dense formulas
/// over `n_graphs` random chains (n ≤ 6, widths ≤ 4).
pub fn conv_oracle_max_error(n_graphs: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n_graphs {
        let (n, edges, w) = random_chain(&mut rng, 6);
        let d_in = rng.gen_range(1..=4);
        let d_out = rng.gen_range(1..=4);
        let x = random_matrix(&mut rng, n, d_in);

        let mut store = ParamStore::new();
        let gcn = GcnConv::new(&mut store, "gcn", d_in, d_out, &mut rng);
        let aggr = [Aggr::Add, Aggr::Mean, Aggr::Max];
        let gcs: Vec<GraphConv> =
            aggr.iter().enumerate().map(|(i, &a)| GraphConv::new(&mut store, &format!("gc{i}"), d_in, d_out, a, &mut rng)).collect();
        // non-zero biases so they are exercised too
        for p in &mut store.params {
            if p.kind == ParamKind::Bias {
                p.value.data.iter_mut().for_each(|b| *b = rng.gen_range(-1.0..1.0));
            }
        }
        let mut f = Forward::eval(&store);
        let xv = f.input(to_tensor(&x));
        let got = gcn.forward(&mut f, xv, &edges, &w).unwrap();
        let want = dense_gcn(&x, &edges, &w, &to_matrix(store.get(gcn.weight)), store.get(gcn.bias).row(0));
        worst = worst.max(max_abs_diff(&to_matrix(f.value(got)), &want));
        for gc in &gcs {
            let got = gc.forward(&mut f, xv, &edges, &w).unwrap();
            let want = dense_graph_conv(
                &x,
                &edges,
                &w,
                &to_matrix(store.get(gc.weight_self)),
                &to_matrix(store.get(gc.weight_neigh)),
                store.get(gc.bias).row(0),
                gc.aggr,
            );
            worst = worst.max(max_abs_diff(&to_matrix(f.value(got)), &want));
        }
    }
    worst
}

#[derive(Clone, Copy)]
pub enum Domain {
    Any,
    Positive,
    /// |x| ≥ 0.1, so kinks at zero stay out of finite-difference reach.
    AwayFromZero,
}

fn draw(rng: &mut ChaCha8Rng, domain: Domain) -> f64 {
    match domain {
        Domain::Any => rng.gen_range(-1.0..1.0),
        Domain::Positive => rng.gen_range(0.2..2.0),
        Domain::AwayFromZero => {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        }
    }
}

type OpFn = fn(&mut Tape, &[Var]) -> hypergcn::Result<Var>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<(usize, usize, Domain)>,
    pub op: OpFn,
}

fn case(name: &'static str, inputs: Vec<(usize, usize, Domain)>, op: OpFn) -> OpCase {
    OpCase { name, inputs, op }
}

pub fn op_cases() -> Vec<OpCase> {
    use Domain::*;
    let m = |r, c| (r, c, Any);
    let mut cases = vec![
        case("matmul", vec![m(3, 2), m(2, 4)], |t, v| t.matmul(v[0], v[1])),
        case("add", vec![m(3, 4), m(3, 4)], |t, v| t.add(v[0], v[1])),
        case("add_broadcast", vec![m(3, 4), m(1, 4)], |t, v| t.add(v[0], v[1])),
        case("sub", vec![m(3, 4), m(3, 4)], |t, v| t.sub(v[0], v[1])),
        case("sub_broadcast", vec![m(3, 4), m(1, 4)], |t, v| t.sub(v[0], v[1])),
        case("mul", vec![m(3, 4), m(3, 4)], |t, v| t.mul(v[0], v[1])),
        case("mul_broadcast", vec![m(3, 4), m(1, 4)], |t, v| t.mul(v[0], v[1])),
        case("scale", vec![m(2, 3)], |t, v| t.scale(v[0], -1.7)),
        case("relu", vec![(3, 3, AwayFromZero)], |t, v| t.relu(v[0])),
        case("log", vec![(3, 3, Positive)], |t, v| t.log(v[0])),
        case("exp", vec![m(3, 3)], |t, v| t.exp(v[0])),
        case("abs", vec![(3, 3, AwayFromZero)], |t, v| t.abs(v[0])),
        case("powf", vec![(3, 3, Positive)], |t, v| t.powf(v[0], 2.5)),
        case("row_gather", vec![m(4, 3)], |t, v| t.row_gather(v[0], &[2, 0, 2, 3])),
        case("concat_cols", vec![m(3, 2), m(3, 3)], |t, v| t.concat_cols(v[0], v[1])),
        case("segment_sum", vec![m(5, 2)], |t, v| t.segment_reduce(v[0], &[0, 2, 0, 2, 2], 4, Reduce::Sum)),
        case("segment_mean", vec![m(5, 2)], |t, v| t.segment_reduce(v[0], &[0, 2, 0, 2, 2], 4, Reduce::Mean)),
        case("segment_max", vec![m(5, 2)], |t, v| t.segment_reduce(v[0], &[0, 2, 0, 2, 2], 4, Reduce::Max)),
        case("propagate", vec![m(4, 3)], |t, v| t.propagate(v[0], &[0, 1, 1, 3, 2], &[1, 2, 0, 3, 3], &[0.5, 1.0, 0.2, 0.7, 0.0], 4)),
        case("scale_rows", vec![m(3, 2)], |t, v| t.scale_rows(v[0], &[0.3, -2.0, 1.0])),
        case("softmax_rows", vec![m(3, 4)], |t, v| t.softmax_rows(v[0])),
        case("log_softmax_rows", vec![m(3, 4)], |t, v| t.log_softmax_rows(v[0])),
        case("pick", vec![m(3, 4)], |t, v| t.pick(v[0], &[3, 0, 3])),
        case("sum", vec![m(3, 4)], |t, v| t.sum(v[0])),
        case("mean", vec![m(3, 4)], |t, v| t.mean(v[0])),
        case("mean_rows", vec![m(3, 4)], |t, v| t.mean_rows(v[0])),
    ];
    let acts: [(&'static str, OpFn); 6] = [
        ("act_relu", |t, v| t.activation(v[0], Activation::Relu)),
        ("act_leaky_relu", |t, v| t.activation(v[0], Activation::LeakyRelu)),
        ("act_elu", |t, v| t.activation(v[0], Activation::Elu)),
        ("act_tanh", |t, v| t.activation(v[0], Activation::Tanh)),
        ("act_softplus", |t, v| t.activation(v[0], Activation::Softplus)),
        ("act_gelu", |t, v| t.activation(v[0], Activation::Gelu)),
    ];
    for (name, op) in acts {
        cases.push(case(name, vec![(3, 3, AwayFromZero)], op));
    }
    cases
}

/// Worst relative error of one tape op over `points` random inputs, every
/// input coordinate checked. The scalar probed is `Σ out ⊙ R` for random `R`.
pub fn gradcheck_op(c: &OpCase, points: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let inputs: Vec<Tensor> = c
            .inputs
            .iter()
            .map(|&(r, k, d)| Tensor::new(r, k, (0..r * k).map(|_| draw(&mut rng, d)).collect()).unwrap())
            .collect();
        let shape = {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
            let out = (c.op)(&mut t, &vs).unwrap();
            t.value(out).shape()
        };
        let r = Tensor::new(shape[0], shape[1], (0..shape[0] * shape[1]).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let run = |xs: &[Tensor], grads: bool| -> (f64, Vec<Tensor>) {
            let mut t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
            let out = (c.op)(&mut t, &vs).unwrap();
            let rv = t.constant(r.clone());
            let prod = t.mul(out, rv).unwrap();
            let loss = t.sum(prod).unwrap();
            let value = t.value(loss).item();
            if grads {
                t.backward(loss).unwrap();
                (value, vs.iter().map(|&v| t.grad(v)).collect())
            } else {
                (value, vec![])
            }
        };
        let (_, analytic) = run(&inputs, true);
        for (k, x) in inputs.iter().enumerate() {
            for i in 0..x.data.len() {
                let mut eval = |flat: &[f64]| {
                    let mut xs = inputs.clone();
                    xs[k].data = flat.to_vec();
                    run(&xs, false).0
                };
                let numeric = central_difference(&mut eval, &x.data, i);
                worst = worst.max(rel_error(analytic[k].data[i], numeric));
            }
        }
    }
    worst
}

/// Finite-difference check of every trainable entry (or `max_coords` random
/// ones) of `store` for the scalar built by `loss`.
pub fn gradcheck_store(
    store: &ParamStore,
    training: bool,
    loss: &dyn Fn(&mut Forward) -> hypergcn::Result<Var>,
    max_coords: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let value = |s: &ParamStore| -> f64 {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let mut f = if training { Forward::train(s, &mut r) } else { Forward::eval(s) };
        let l = loss(&mut f).unwrap();
        f.value(l).item()
    };
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let mut f = if training { Forward::train(store, &mut r) } else { Forward::eval(store) };
    let l = loss(&mut f).unwrap();
    let grads = f.backward(l).unwrap();
    let mut coords: Vec<(usize, usize)> = store
        .trainable()
        .flat_map(|id| (0..store.get(id).data.len()).map(move |i| (id.0, i)))
        .collect();
    while coords.len() > max_coords {
        coords.swap_remove(rng.gen_range(0..coords.len()));
    }
    let mut worst: f64 = 0.0;
    for (p, i) in coords {
        let analytic = grads.iter().find(|(id, _)| id.0 == p).map_or(0.0, |(_, g)| g.data[i]);
        let mut eval = |flat: &[f64]| {
            let mut s = store.clone();
            s.params[p].value.data = flat.to_vec();
            value(&s)
        };
        let base = store.params[p].value.data.clone();
        let numeric = central_difference(&mut eval, &base, i);
        worst = worst.max(rel_error(analytic, numeric));
    }
    worst
}

fn weighted_sum(f: &mut Forward, out: Var, seed: u64) -> hypergcn::Result<Var> {
    let [r, c] = f.value(out).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = f.input(Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
    let p = f.tape.mul(out, w)?;
    f.tape.sum(p)
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for p in &mut store.params {
        let var = p.name.ends_with("running_var");
        p.value.data.iter_mut().for_each(|x| *x = if var { rng.gen_range(0.5..1.5) } else { rng.gen_range(-1.0..1.0) });
    }
}

/// Layer-level checks; the layer input is itself a parameter so its gradient
/// is checked too. Returns `(name, worst relative error)`.
pub fn gradcheck_layers(points: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges: [Vec<usize>; 2] = [vec![0, 1, 2, 0, 3], vec![1, 2, 3, 2, 3]];
    let w = vec![0.4, 1.0, 0.0, 0.7, 0.3];
    let mut out = Vec::new();
    let mut track = |name: &'static str, e: f64| match out.iter_mut().find(|(n, _): &&mut (&str, f64)| *n == name) {
        Some(slot) => slot.1 = f64::max(slot.1, e),
        None => out.push((name, e)),
    };
    for point in 0..points {
        let s = seed.wrapping_mul(1000) + point as u64;
        let mut store = ParamStore::new();
        let x = store.add("x", ParamKind::Weight, Tensor::zeros(4, 3));
        let dense = Dense::new(&mut store, "dense", 3, 2, &mut rng);
        let gcn = GcnConv::new(&mut store, "gcn", 3, 2, &mut rng);
        let gcs: Vec<GraphConv> = [Aggr::Add, Aggr::Mean, Aggr::Max]
            .iter()
            .enumerate()
            .map(|(i, &a)| GraphConv::new(&mut store, &format!("gc{i}"), 3, 2, a, &mut rng))
            .collect();
        let bn = BatchNorm::new(&mut store, "bn", 3, 0.9, 1e-3);
        let emb = Embedding::new(&mut store, "emb", 5, 3, &mut rng);
        randomize(&mut store, &mut rng);
        let st = &store;
        let probe = |training: bool, rng: &mut ChaCha8Rng, body: &dyn Fn(&mut Forward, Var) -> hypergcn::Result<Var>| {
            gradcheck_store(st, training, &|f| {
                let xv = f.param(x);
                let o = body(f, xv)?;
                if f.value(o).shape() == [1, 1] {
                    Ok(o)
                } else {
                    weighted_sum(f, o, s)
                }
            }, usize::MAX, rng)
        };
        track("dense", probe(false, &mut rng, &|f, xv| dense.forward(f, xv)));
        track("gcn_conv", probe(false, &mut rng, &|f, xv| gcn.forward(f, xv, &edges, &w)));
        track("graph_conv_add", probe(false, &mut rng, &|f, xv| gcs[0].forward(f, xv, &edges, &w)));
        track("graph_conv_mean", probe(false, &mut rng, &|f, xv| gcs[1].forward(f, xv, &edges, &w)));
        track("graph_conv_max", probe(false, &mut rng, &|f, xv| gcs[2].forward(f, xv, &edges, &w)));
        track("batch_norm_train", probe(true, &mut rng, &|f, xv| bn.forward(f, xv)));
        track("batch_norm_eval", probe(false, &mut rng, &|f, xv| bn.forward(f, xv)));
        track("embedding", probe(false, &mut rng, &|f, _| emb.forward(f, &[4, 0, 4, 2])));
        for (name, m) in [("pool_mean", Pool::Mean), ("pool_add", Pool::Add), ("pool_max", Pool::Max)] {
            track(name, probe(false, &mut rng, &|f, xv| pool(&mut f.tape, xv, &[0, 1, 1, 2], 3, m)));
        }
        track("cross_entropy", probe(false, &mut rng, &|f, xv| cross_entropy(&mut f.tape, xv, &[2, 0, 1, 2])));
        track("multi_margin", probe(false, &mut rng, &|f, xv| multi_margin(&mut f.tape, xv, &[2, 0, 1, 2])));
        track("l1_penalty", probe(false, &mut rng, &|f, xv| {
            let pen = l1_penalty(f, st, 0.37)?.expect("positive lambda");
            let anchor = f.tape.sum(xv)?;
            let anchor = f.tape.scale(anchor, 0.0)?;
            f.tape.add(pen, anchor)
        }));
    }
    out
}

/// Small search space so architecture checks stay quick; sampling outside the
/// full table's widths is fine here because nothing validates these specs.
pub fn tiny_space() -> SearchSpace {
    SearchSpace { conv_layers: [1, 2], dense_layers: [1, 2], units: [2, 4], embedding_dim: [2, 3], ..SearchSpace::full() }
}

pub fn random_graph(rng: &mut ChaCha8Rng, dims: &Dims, n_classes: usize) -> GraphInstance {
    let n = rng.gen_range(1..=5);
    let d = dims.node;
    GraphInstance {
        node_feats: Tensor::new(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        node_mask: (0..n * d).map(|_| rng.gen_bool(0.8)).collect(),
        edge_index: [(0..n - 1).collect(), (1..n).collect()],
        edge_weights: (1..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
        graph_vec: (0..dims.graph).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        label: rng.gen_range(0..n_classes),
        activity_ids: (0..n).map(|_| rng.gen_range(0..dims.activity_vocab.unwrap())).collect(),
        pseudo_feats: Some(Tensor::new(n, dims.pseudo.unwrap(), (0..n * dims.pseudo.unwrap()).map(|_| rng.gen_range(0.0..2.0)).collect()).unwrap()),
    }
}

/// Whole-model check in eval mode (running BN statistics, no dropout) over
/// `points` random hyperparameter draws, `coords` random parameters each.
pub fn gradcheck_architecture(arch: Arch, conv: ConvKind, points: usize, coords: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = Dims { node: 6, graph: 2, activity_width: 3, pseudo: Some(3), activity_vocab: Some(4) };
    let space = tiny_space();
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let mut hp = sample(&space, arch, conv, &mut rng);
        hp.l1 = 0.0;
        let mut model = Model::build(&hp, dims, 3, rng.gen()).unwrap();
        randomize(&mut model.store, &mut rng);
        let graphs: Vec<GraphInstance> = (0..3).map(|_| random_graph(&mut rng, &dims, 3)).collect();
        let refs: Vec<&GraphInstance> = graphs.iter().collect();
        let batch = make_batch(&refs).unwrap();
        let m = &model;
        let err = gradcheck_store(&model.store, false, &|f| {
            let logits = m.forward(f, &batch)?;
            m.loss(f, logits, &batch.labels)
        }, coords, &mut rng);
        worst = worst.max(err);
    }
    worst
}

/// Worst entry deviation between the library's pseudo-embedding matrices and
/// the brute-force recount over `n_corpora` random corpora of ≤ 10 graphs;
/// also asserts the fitted bin layouts agree.
pub fn pseudo_oracle_max_error(n_corpora: usize, seed: u64) -> f64 {
    use hypergcn::pseudoembed::PseudoEmbedder;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n_corpora {
        let t_cut = [3.0, 5.0, 10.0, 30.0][rng.gen_range(0..4)];
        let config = BinningConfig {
            t_cut,
            n_quantile: rng.gen_range(1..=6),
            max_iterations: rng.gen_range(0..=8),
            balance_tolerance: rng.gen_range(0.05..=1.0),
            round_to: if rng.gen_bool(0.3) { 2.0 } else { 0.0 },
        };
        let n_docs = rng.gen_range(1..=10);
        let docs = random_corpus(&mut rng, n_docs, t_cut);
        let n_train = rng.gen_range(1..=docs.len());
        let train = &docs[..n_train];
        let embedder = PseudoEmbedder::fit(train, &config).unwrap();
        let (binning, expected) = oracle_tfidf(train, &docs, &config);
        assert_eq!(embedder.binning.unique_bins, binning.unique, "unique bins");
        assert_eq!(embedder.binning.quantile_edges, binning.edges, "quantile edges");
        assert_eq!(embedder.dim(), binning.n_bins(), "bin count");
        for (doc, want) in docs.iter().zip(&expected) {
            let got = to_matrix(&embedder.matrix(doc).unwrap());
            worst = worst.max(max_abs_diff(&got, want));
        }
    }
    worst
}
