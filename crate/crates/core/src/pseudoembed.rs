//! Duration-bin pseudo-embeddings.
//!
//! Short durations (below the cut-off) each get their own bin; longer ones are
//! split into empirical quantile intervals. The cut-off and quantile count are
//! adjusted by a small local search until the quantile bins hold roughly equal
//! counts. Each graph is then treated as a document whose terms are
//! `(activity, bin)` pairs, and node `i` receives the TF-IDF row of its
//! activity across all bin columns.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::encode::duration;
use crate::error::{Error, Result};
use crate::eventlog::CaseTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinningConfig {
    /// Cut-off in seconds; durations below it get individual bins.
    pub t_cut: f64,
    pub n_quantile: usize,
    pub max_iterations: usize,
    /// Quantile bins count as balanced when `max / min <= 1 + tolerance`.
    pub balance_tolerance: f64,
    /// Durations are rounded to a multiple of this many seconds first (0 = off).
    pub round_to: f64,
}

impl Default for BinningConfig {
    fn default() -> Self {
        Self { t_cut: 300.0, n_quantile: 24, max_iterations: 20, balance_tolerance: 0.25, round_to: 60.0 }
    }
}

impl BinningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_cut > 0.0) {
            return Err(Error::Config("t_cut must be positive".into()));
        }
        if self.n_quantile < 1 {
            return Err(Error::Config("n_quantile must be at least 1".into()));
        }
        if !(self.balance_tolerance > 0.0 && self.balance_tolerance <= 1.0) {
            return Err(Error::Config("balance_tolerance must lie in (0, 1]".into()));
        }
        if self.round_to < 0.0 {
            return Err(Error::Config("round_to must be non-negative".into()));
        }
        Ok(())
    }

    pub fn round(&self, seconds: f64) -> f64 {
        if self.round_to > 0.0 {
            (seconds / self.round_to).round() * self.round_to
        } else {
            seconds
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationBinning {
    pub t_cut: f64,
    pub n_quantile: usize,
    /// Distinct training durations below `t_cut`, ascending.
    pub unique_bins: Vec<f64>,
    /// Interior boundaries of the quantile intervals
    /// `[t_cut, e1), [e1, e2), ..., [ek, inf)`.
    pub quantile_edges: Vec<f64>,
    /// Zero when no training duration reached the cut-off.
    pub n_quantile_bins: usize,
    pub n_bins: usize,
    /// Adjustment rounds the search performed.
    pub iterations: usize,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn layout(sorted: &[f64], t_cut: f64, n_quantile: usize) -> DurationBinning {
    let mut unique_bins: Vec<f64> = Vec::new();
    for &d in sorted.iter().take_while(|&&d| d < t_cut) {
        if unique_bins.last() != Some(&d) {
            unique_bins.push(d);
        }
    }
    let large = &sorted[sorted.partition_point(|&d| d < t_cut)..];
    let mut quantile_edges: Vec<f64> = Vec::new();
    let n_quantile_bins = if large.is_empty() {
        0
    } else {
        for k in 1..n_quantile {
            let e = quantile(large, k as f64 / n_quantile as f64);
            if e > large[0] && quantile_edges.last().is_none_or(|&last| e > last) {
                quantile_edges.push(e);
            }
        }
        quantile_edges.len() + 1
    };
    let n_bins = unique_bins.len() + n_quantile_bins;
    DurationBinning { t_cut, n_quantile, unique_bins, quantile_edges, n_quantile_bins, n_bins, iterations: 0 }
}

/// `max / min` of the quantile-bin frequencies; 1 when there is at most one bin.
fn imbalance(binning: &DurationBinning, sorted: &[f64]) -> f64 {
    if binning.n_quantile_bins <= 1 {
        return 1.0;
    }
    let mut freq = vec![0usize; binning.n_quantile_bins];
    let u = binning.unique_bins.len();
    for &d in sorted.iter().filter(|&&d| d >= binning.t_cut) {
        freq[assign_bin(d, binning) - u] += 1;
    }
    let max = *freq.iter().max().unwrap() as f64;
    let min = *freq.iter().min().unwrap() as f64;
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn fit_binning(durations: &[f64], config: &BinningConfig) -> Result<DurationBinning> {
    config.validate()?;
    if durations.is_empty() {
        return Err(Error::Data("no durations to bin".into()));
    }
    if durations.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
        return Err(Error::Data("durations must be finite and non-negative".into()));
    }
    let mut sorted = durations.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();

    let balanced = |score: f64| score <= 1.0 + config.balance_tolerance;
    let mut current = (config.t_cut, config.n_quantile);
    let mut visited = vec![current];
    let first = layout(&sorted, current.0, current.1);
    let mut current_score = imbalance(&first, &sorted);
    let mut best = (first, current_score);
    let mut iterations = 0;

    while !balanced(current_score) && iterations < config.max_iterations {
        let (t_cut, nq) = current;
        let mut candidates = Vec::new();
        if nq > 1 {
            candidates.push((t_cut, nq - 1));
        }
        candidates.push((t_cut, nq + 1));
        // raise the cut-off past the smallest long duration
        let first_large = distinct.partition_point(|&d| d < t_cut);
        if first_large + 1 < distinct.len() {
            candidates.push((distinct[first_large + 1], nq));
        }
        // lower it so the largest short duration becomes long
        if first_large > 0 && distinct[first_large - 1] > 0.0 {
            candidates.push((distinct[first_large - 1], nq));
        }
        let next = candidates
            .into_iter()
            .filter(|c| !visited.contains(c))
            .map(|c| {
                let b = layout(&sorted, c.0, c.1);
                let s = imbalance(&b, &sorted);
                (c, b, s)
            })
            .min_by(|a, b| a.2.total_cmp(&b.2));
        let Some((c, b, s)) = next else { break };
        iterations += 1;
        visited.push(c);
        current = c;
        current_score = s;
        if s < best.1 {
            best = (b, s);
        }
    }
    let mut result = if balanced(current_score) { layout(&sorted, current.0, current.1) } else { best.0 };
    result.iterations = iterations;
    Ok(result)
}

/// Bin id of a (rounded) duration; total over non-negative inputs.
pub fn assign_bin(duration: f64, binning: &DurationBinning) -> usize {
    let u = binning.unique_bins.len();
    if duration < binning.t_cut || binning.n_quantile_bins == 0 {
        if u == 0 {
            return 0;
        }
        if let Ok(i) = binning.unique_bins.binary_search_by(|b| b.total_cmp(&duration)) {
            return i;
        }
        // nearest unique bin, ties to the lower one
        let mut best = 0;
        for (i, b) in binning.unique_bins.iter().enumerate() {
            if (b - duration).abs() < (binning.unique_bins[best] - duration).abs() {
                best = i;
            }
        }
        return best;
    }
    u + binning.quantile_edges.partition_point(|&e| e <= duration)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocFrequency {
    pub activity: String,
    pub bin: usize,
    pub docs: usize,
}

/// Fitted binning plus the training-corpus document frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoEmbedder {
    pub config: BinningConfig,
    pub binning: DurationBinning,
    pub n_docs: usize,
    /// Sorted by `(activity, bin)`.
    pub df: Vec<DocFrequency>,
}

impl PseudoEmbedder {
    pub fn fit(train: &[CaseTrace], config: &BinningConfig) -> Result<Self> {
        let mut durations = Vec::new();
        for t in train {
            for e in &t.events {
                durations.push(config.round(duration(e)? as f64));
            }
        }
        let binning = fit_binning(&durations, config)?;
        let mut df: Vec<DocFrequency> = Vec::new();
        for t in train {
            let mut terms = Self::terms(t, config, &binning)?;
            terms.sort();
            terms.dedup();
            for (activity, bin) in terms {
                match df.binary_search_by(|d| (d.activity.as_str(), d.bin).cmp(&(activity.as_str(), bin))) {
                    Ok(i) => df[i].docs += 1,
                    Err(i) => df.insert(i, DocFrequency { activity, bin, docs: 1 }),
                }
            }
        }
        Ok(Self { config: config.clone(), binning, n_docs: train.len(), df })
    }

    fn terms(trace: &CaseTrace, config: &BinningConfig, binning: &DurationBinning) -> Result<Vec<(String, usize)>> {
        trace
            .events
            .iter()
            .map(|e| Ok((e.activity.clone(), assign_bin(config.round(duration(e)? as f64), binning))))
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.binning.n_bins
    }

    pub fn doc_frequency(&self, activity: &str, bin: usize) -> usize {
        self.df
            .binary_search_by(|d| (d.activity.as_str(), d.bin).cmp(&(activity, bin)))
            .map_or(0, |i| self.df[i].docs)
    }

    /// Smoothed inverse document frequency `ln((1 + N) / (1 + df)) + 1`.
    pub fn idf(&self, activity: &str, bin: usize) -> f64 {
        let df = self.doc_frequency(activity, bin) as f64;
        ((1.0 + self.n_docs as f64) / (1.0 + df)).ln() + 1.0
    }

    /// `n × n_bins` matrix whose row `i` holds the tf-idf of node `i`'s
    /// activity paired with every bin, within this trace.
    pub fn matrix(&self, trace: &CaseTrace) -> Result<Tensor> {
        let terms = Self::terms(trace, &self.config, &self.binning)?;
        let width = self.dim();
        let mut out = Tensor::zeros(terms.len(), width);
        for (i, (activity, _)) in terms.iter().enumerate() {
            for bin in 0..width {
                let tf = terms.iter().filter(|(a, b)| a == activity && *b == bin).count();
                if tf > 0 {
                    out.data[i * width + bin] = tf as f64 * self.idf(activity, bin);
                }
            }
        }
        Ok(out)
    }
}

pub fn build_pseudo_matrices(traces: &[CaseTrace], embedder: &PseudoEmbedder) -> Result<Vec<Tensor>> {
    traces.iter().map(|t| embedder.matrix(t)).collect()
}
