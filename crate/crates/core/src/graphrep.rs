//! Trace graphs and disjoint-union batching.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::encode::EncoderState;
use crate::error::{Error, Result};
use crate::eventlog::CaseTrace;
use crate::pseudoembed::PseudoEmbedder;

/// Start-time gaps (seconds) between consecutive events.
pub fn raw_edge_weights(trace: &CaseTrace) -> Result<Vec<f64>> {
    trace
        .events
        .windows(2)
        .map(|w| {
            let diff = w[1].start_ts - w[0].start_ts;
            if diff < 0 {
                Err(Error::Data(format!("case {}: events are not sorted by start time", trace.case_id)))
            } else {
                Ok(diff as f64)
            }
        })
        .collect()
}

/// Global min-max scaler over training edge weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightScaler {
    pub min: f64,
    pub max: f64,
}

impl WeightScaler {
    pub fn fit(train: &[CaseTrace]) -> Result<Self> {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for t in train {
            for w in raw_edge_weights(t)? {
                min = min.min(w);
                max = max.max(w);
            }
        }
        if min > max {
            // no edges at all
            return Ok(Self { min: 0.0, max: 0.0 });
        }
        Ok(Self { min, max })
    }

    pub fn scale(&self, raw: &[f64]) -> Vec<f64> {
        if self.max <= self.min {
            return vec![0.0; raw.len()];
        }
        raw.iter().map(|w| ((w - self.min) / (self.max - self.min)).clamp(0.0, 1.0)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphInstance {
    pub node_feats: Tensor,
    /// Row-major, same shape as `node_feats`.
    pub node_mask: Vec<bool>,
    /// `[sources, targets]`.
    pub edge_index: [Vec<usize>; 2],
    pub edge_weights: Vec<f64>,
    pub graph_vec: Vec<f64>,
    pub label: usize,
    pub activity_ids: Vec<usize>,
    pub pseudo_feats: Option<Tensor>,
}

impl GraphInstance {
    pub fn n_nodes(&self) -> usize {
        self.node_feats.rows
    }
}

pub fn build_graph(
    trace: &CaseTrace,
    encoder: &EncoderState,
    scaler: &WeightScaler,
    pseudo: Option<&PseudoEmbedder>,
) -> Result<GraphInstance> {
    let n = trace.events.len();
    if n == 0 {
        return Err(Error::Data(format!("case {} has no events", trace.case_id)));
    }
    let width = encoder.node_width();
    let mut data = Vec::with_capacity(n * width);
    let mut node_mask = Vec::with_capacity(n * width);
    for e in &trace.events {
        let enc = encoder.encode_node(e);
        data.extend(enc.vector);
        node_mask.extend(enc.mask);
    }
    let weights = scaler.scale(&raw_edge_weights(trace)?);
    Ok(GraphInstance {
        node_feats: Tensor::new(n, width, data)?,
        node_mask,
        edge_index: [(0..n - 1).collect(), (1..n).collect()],
        edge_weights: weights,
        graph_vec: encoder.encode_graph_attrs(trace),
        label: trace.label,
        activity_ids: trace.events.iter().map(|e| encoder.activity_id(&e.activity)).collect(),
        pseudo_feats: pseudo.map(|p| p.matrix(trace)).transpose()?,
    })
}

/// Disjoint union of several graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub node_feats: Tensor,
    pub node_mask: Vec<bool>,
    pub edge_index: [Vec<usize>; 2],
    pub edge_weights: Vec<f64>,
    /// Node -> position of its graph in the batch.
    pub graph_id: Vec<usize>,
    pub graph_vecs: Tensor,
    pub labels: Vec<usize>,
    pub activity_ids: Vec<usize>,
    pub pseudo_feats: Option<Tensor>,
}

impl Batch {
    pub fn n_graphs(&self) -> usize {
        self.labels.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.graph_id.len()
    }

    /// Incoming edge count of each node.
    pub fn in_degree(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_nodes()];
        for &t in &self.edge_index[1] {
            deg[t] += 1;
        }
        deg
    }
}

pub fn make_batch(graphs: &[&GraphInstance]) -> Result<Batch> {
    let first = graphs.first().ok_or_else(|| Error::Data("cannot batch an empty list of graphs".into()))?;
    let d = first.node_feats.cols;
    let dg = first.graph_vec.len();
    let dp = first.pseudo_feats.as_ref().map(|p| p.cols);
    let mut b = Batch {
        node_feats: Tensor::zeros(0, d),
        node_mask: Vec::new(),
        edge_index: [Vec::new(), Vec::new()],
        edge_weights: Vec::new(),
        graph_id: Vec::new(),
        graph_vecs: Tensor::zeros(0, dg),
        labels: Vec::new(),
        activity_ids: Vec::new(),
        pseudo_feats: dp.map(|c| Tensor::zeros(0, c)),
    };
    for (gi, g) in graphs.iter().enumerate() {
        if g.node_feats.cols != d || g.graph_vec.len() != dg || g.pseudo_feats.as_ref().map(|p| p.cols) != dp {
            return Err(Error::Shape(format!("graph {gi} does not share the batch feature dimensions")));
        }
        let offset = b.graph_id.len();
        let n = g.n_nodes();
        b.node_feats.data.extend_from_slice(&g.node_feats.data);
        b.node_feats.rows += n;
        b.node_mask.extend_from_slice(&g.node_mask);
        for side in 0..2 {
            b.edge_index[side].extend(g.edge_index[side].iter().map(|i| i + offset));
        }
        b.edge_weights.extend_from_slice(&g.edge_weights);
        b.graph_id.extend(std::iter::repeat_n(gi, n));
        b.graph_vecs.data.extend_from_slice(&g.graph_vec);
        b.graph_vecs.rows += 1;
        b.labels.push(g.label);
        b.activity_ids.extend_from_slice(&g.activity_ids);
        if let (Some(dst), Some(src)) = (b.pseudo_feats.as_mut(), g.pseudo_feats.as_ref()) {
            dst.data.extend_from_slice(&src.data);
            dst.rows += src.rows;
        }
    }
    Ok(b)
}

/// Inverse of [`make_batch`].
pub fn unbatch(batch: &Batch) -> Vec<GraphInstance> {
    let d = batch.node_feats.cols;
    let mut out = Vec::with_capacity(batch.n_graphs());
    let mut start = 0;
    let mut edge = 0;
    for gi in 0..batch.n_graphs() {
        let end = start + batch.graph_id[start..].iter().take_while(|&&g| g == gi).count();
        let n = end - start;
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut weights = Vec::new();
        while edge < batch.edge_weights.len() && batch.edge_index[0][edge] < end {
            src.push(batch.edge_index[0][edge] - start);
            dst.push(batch.edge_index[1][edge] - start);
            weights.push(batch.edge_weights[edge]);
            edge += 1;
        }
        out.push(GraphInstance {
            node_feats: Tensor { rows: n, cols: d, data: batch.node_feats.data[start * d..end * d].to_vec() },
            node_mask: batch.node_mask[start * d..end * d].to_vec(),
            edge_index: [src, dst],
            edge_weights: weights,
            graph_vec: batch.graph_vecs.row(gi).to_vec(),
            label: batch.labels[gi],
            activity_ids: batch.activity_ids[start..end].to_vec(),
            pseudo_feats: batch.pseudo_feats.as_ref().map(|p| Tensor {
                rows: n,
                cols: p.cols,
                data: p.data[start * p.cols..end * p.cols].to_vec(),
            }),
        });
        start = end;
    }
    out
}
