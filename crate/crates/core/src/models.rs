//! The four architectures and their hyperparameter record.
//!
//! * `O`  – graph attributes are broadcast to every node and concatenated
//!   with the node features before the convolution stack.
//! * `T`  – node convolutions and a separate dense path for graph attributes.
//! * `TP` – like `T`, with a second convolution stack over pseudo-embeddings.
//! * `TE` – like `T`, with the activity one-hot replaced by a learned embedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Tensor, Var};
use crate::encode::EncoderState;
use crate::error::{Error, Result};
use crate::graphrep::Batch;
use crate::layers::{
    cross_entropy, dropout, multi_margin, pool, Aggr, BatchNorm, Dense, Embedding, Forward, GcnConv, GraphConv,
    ParamStore, Pool,
};
use crate::optim::{OptimizerSpec, SchedulerSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConvKind {
    #[serde(rename = "gcnconv")]
    GcnConv,
    #[serde(rename = "graphconv")]
    GraphConv,
}

impl ConvKind {
    pub const ALL: [ConvKind; 2] = [ConvKind::GcnConv, ConvKind::GraphConv];

    pub fn name(self) -> &'static str {
        match self {
            ConvKind::GcnConv => "GCNConv",
            ConvKind::GraphConv => "GraphConv",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    O,
    T,
    TP,
    TE,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::O, Arch::T, Arch::TP, Arch::TE];

    pub fn name(self) -> &'static str {
        match self {
            Arch::O => "O",
            Arch::T => "T",
            Arch::TP => "TP",
            Arch::TE => "TE",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    MultiMargin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchNormSpec {
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub units: usize,
    pub activation: Activation,
    pub skip: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_norm: Option<BatchNormSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    /// Neighbour aggregation; graphconv layers only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggr: Option<Aggr>,
}

impl LayerSpec {
    pub fn plain(units: usize, activation: Activation) -> Self {
        Self { units, activation, skip: false, batch_norm: None, dropout: None, aggr: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub conv_kind: ConvKind,
    pub arch: Arch,
    /// Node stack (N).
    pub gcn_layers: Vec<LayerSpec>,
    /// Pseudo-embedding stack (P); TP only.
    #[serde(default)]
    pub pseudo_layers: Vec<LayerSpec>,
    /// Activity-embedding stack (E); TE only.
    #[serde(default)]
    pub embedding_layers: Vec<LayerSpec>,
    /// Convolutions over the node-wise concatenation (C); TP and TE only.
    #[serde(default)]
    pub concat_conv_layers: Vec<LayerSpec>,
    pub pooling: Pool,
    /// Dense path for graph attributes (S); absent for O.
    #[serde(default)]
    pub graph_dense_layers: Vec<LayerSpec>,
    pub concat_dense_layers: Vec<LayerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_dim: Option<usize>,
    pub optimizer: OptimizerSpec,
    pub scheduler: SchedulerSpec,
    pub loss: LossKind,
    pub batch_size: usize,
    pub l1: f64,
}

pub const BATCH_SIZES: [usize; 5] = [16, 32, 64, 128, 512];

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl HyperParams {
    /// Stack presence, depths and conditional fields; no numeric ranges.
    pub fn validate_structure(&self) -> Result<()> {
        let a = self.arch;
        let conv_stacks = [
            ("gcn_layers", &self.gcn_layers, true),
            ("pseudo_layers", &self.pseudo_layers, a == Arch::TP),
            ("embedding_layers", &self.embedding_layers, a == Arch::TE),
            ("concat_conv_layers", &self.concat_conv_layers, matches!(a, Arch::TP | Arch::TE)),
        ];
        for (name, stack, wanted) in conv_stacks {
            if wanted {
                check((1..=5).contains(&stack.len()), || format!("{name} needs 1-5 layers, got {}", stack.len()))?;
            } else {
                check(stack.is_empty(), || format!("{name} is not used by the {} architecture", a.name()))?;
            }
            for l in stack {
                check(l.aggr.is_some() == (self.conv_kind == ConvKind::GraphConv), || {
                    format!("{name}: aggr must be set exactly for graphconv layers")
                })?;
            }
        }
        let dense_stacks = [
            ("graph_dense_layers", &self.graph_dense_layers, a != Arch::O),
            ("concat_dense_layers", &self.concat_dense_layers, true),
        ];
        for (name, stack, wanted) in dense_stacks {
            if wanted {
                check((1..=3).contains(&stack.len()), || format!("{name} needs 1-3 layers, got {}", stack.len()))?;
            } else {
                check(stack.is_empty(), || format!("{name} is not used by the {} architecture", a.name()))?;
            }
            check(stack.iter().all(|l| l.aggr.is_none()), || format!("{name}: dense layers take no aggr"))?;
        }
        for l in self.all_layers() {
            check(l.units >= 1, || "layer units must be positive".into())?;
            if let Some(r) = l.dropout {
                check((0.0..1.0).contains(&r), || format!("dropout rate {r} must lie in [0, 1)"))?;
            }
            if let Some(bn) = l.batch_norm {
                check(bn.eps > 0.0 && (0.0..=1.0).contains(&bn.momentum), || "invalid batch norm settings".into())?;
            }
        }
        check(self.embedding_dim.is_some() == (a == Arch::TE), || "embedding_dim is required exactly for TE".into())?;
        check(self.embedding_dim != Some(0), || "embedding_dim must be positive".into())?;
        check(self.batch_size >= 1, || "batch_size must be positive".into())?;
        check(self.l1 >= 0.0 && self.l1.is_finite(), || "l1 must be non-negative".into())
    }

    /// Structure plus every numeric range of the tuning table.
    pub fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        for l in self.all_layers() {
            check((16..=512).contains(&l.units), || format!("units {} outside 16-512", l.units))?;
            if let Some(r) = l.dropout {
                check((0.2..=0.7).contains(&r), || format!("dropout {r} outside 0.2-0.7"))?;
            }
            if let Some(bn) = l.batch_norm {
                check((0.1..=0.999).contains(&bn.momentum), || format!("bn momentum {} outside 0.1-0.999", bn.momentum))?;
                check((1e-5..=1e-2).contains(&bn.eps), || format!("bn eps {} outside 1e-5-1e-2", bn.eps))?;
            }
        }
        if let Some(d) = self.embedding_dim {
            check((10..=50).contains(&d), || format!("embedding_dim {d} outside 10-50"))?;
        }
        check(BATCH_SIZES.contains(&self.batch_size), || format!("batch_size {} not in {BATCH_SIZES:?}", self.batch_size))?;
        check(self.l1 <= 1e-3, || format!("l1 {} above 1e-3", self.l1))?;
        self.optimizer.validate()?;
        self.scheduler.validate()
    }

    pub fn all_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.gcn_layers
            .iter()
            .chain(&self.pseudo_layers)
            .chain(&self.embedding_layers)
            .chain(&self.concat_conv_layers)
            .chain(&self.graph_dense_layers)
            .chain(&self.concat_dense_layers)
    }
}

/// Input widths a model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub node: usize,
    pub graph: usize,
    /// Width of the leading activity one-hot block inside node features.
    pub activity_width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activity_vocab: Option<usize>,
}

impl Dims {
    pub fn from_encoder(encoder: &EncoderState, pseudo: Option<usize>) -> Self {
        Self {
            node: encoder.node_width(),
            graph: encoder.graph_width(),
            activity_width: encoder.activity_width(),
            pseudo,
            activity_vocab: Some(encoder.activity_vocab_size()),
        }
    }
}

/// Zero every position whose mask entry is false.
pub fn apply_input_mask(feats: &Tensor, mask: &[bool]) -> Result<Tensor> {
    if mask.len() != feats.data.len() {
        return Err(Error::Shape(format!("mask of {} for a {:?} matrix", mask.len(), feats.shape())));
    }
    let data = feats.data.iter().zip(mask).map(|(v, &m)| if m { *v } else { 0.0 }).collect();
    Ok(Tensor { rows: feats.rows, cols: feats.cols, data })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Core {
    Gcn(GcnConv),
    Graph(GraphConv),
    Dense(Dense),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Skip {
    Identity,
    Projection(Dense),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Block {
    core: Core,
    bn: Option<BatchNorm>,
    activation: Activation,
    dropout: Option<f64>,
    skip: Option<Skip>,
}

impl Block {
    fn forward(&self, f: &mut Forward, x: Var, batch: &Batch) -> Result<Var> {
        let mut h = match &self.core {
            Core::Gcn(c) => c.forward(f, x, &batch.edge_index, &batch.edge_weights)?,
            Core::Graph(c) => c.forward(f, x, &batch.edge_index, &batch.edge_weights)?,
            Core::Dense(d) => d.forward(f, x)?,
        };
        if let Some(bn) = &self.bn {
            h = bn.forward(f, h)?;
        }
        h = f.tape.activation(h, self.activation)?;
        if let Some(rate) = self.dropout {
            h = dropout(f, h, rate)?;
        }
        match &self.skip {
            None => Ok(h),
            Some(Skip::Identity) => f.tape.add(h, x),
            Some(Skip::Projection(p)) => {
                let s = p.forward(f, x)?;
                f.tape.add(h, s)
            }
        }
    }
}

fn run_stack(stack: &[Block], f: &mut Forward, mut x: Var, batch: &Batch) -> Result<Var> {
    for b in stack {
        x = b.forward(f, x, batch)?;
    }
    Ok(x)
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    conv: ConvKind,
}

impl Builder<'_> {
    /// Returns the stack and its output width.
    fn stack(&mut self, name: &str, specs: &[LayerSpec], mut d_in: usize, conv: bool) -> (Vec<Block>, usize) {
        let mut blocks = Vec::new();
        for (i, s) in specs.iter().enumerate() {
            let lname = format!("{name}.{i}");
            let core = if !conv {
                Core::Dense(Dense::new(self.store, &lname, d_in, s.units, &mut self.rng))
            } else if self.conv == ConvKind::GcnConv {
                Core::Gcn(GcnConv::new(self.store, &lname, d_in, s.units, &mut self.rng))
            } else {
                let aggr = s.aggr.unwrap_or(Aggr::Add);
                Core::Graph(GraphConv::new(self.store, &lname, d_in, s.units, aggr, &mut self.rng))
            };
            let bn = s.batch_norm.map(|b| BatchNorm::new(self.store, &format!("{lname}.bn"), s.units, b.momentum, b.eps));
            let skip = s.skip.then(|| {
                if d_in == s.units {
                    Skip::Identity
                } else {
                    Skip::Projection(Dense::new(self.store, &format!("{lname}.skip"), d_in, s.units, &mut self.rng))
                }
            });
            blocks.push(Block { core, bn, activation: s.activation, dropout: s.dropout, skip });
            d_in = s.units;
        }
        (blocks, d_in)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub hp: HyperParams,
    pub dims: Dims,
    pub n_classes: usize,
    pub store: ParamStore,
    node_stack: Vec<Block>,
    pseudo_stack: Vec<Block>,
    embedding: Option<Embedding>,
    embedding_stack: Vec<Block>,
    concat_conv_stack: Vec<Block>,
    graph_dense_stack: Vec<Block>,
    concat_dense_stack: Vec<Block>,
    classifier: Dense,
}

impl Model {
    pub fn build(hp: &HyperParams, dims: Dims, n_classes: usize, seed: u64) -> Result<Self> {
        hp.validate_structure()?;
        if n_classes < 2 {
            return Err(Error::Config("a classifier needs at least two classes".into()));
        }
        let mut store = ParamStore::new();
        let mut b = Builder { store: &mut store, rng: ChaCha8Rng::seed_from_u64(seed), conv: hp.conv_kind };
        let mut pseudo_stack = Vec::new();
        let mut embedding = None;
        let mut embedding_stack = Vec::new();
        let mut concat_conv_stack = Vec::new();
        let mut graph_dense_stack = Vec::new();

        let node_in = match hp.arch {
            Arch::O => dims.node + dims.graph,
            Arch::TE => dims.node.checked_sub(dims.activity_width).ok_or_else(|| {
                Error::Config(format!("activity block {} wider than node features {}", dims.activity_width, dims.node))
            })?,
            _ => dims.node,
        };
        let (node_stack, mut node_out) = b.stack("node", &hp.gcn_layers, node_in, true);
        match hp.arch {
            Arch::TP => {
                let d_p = dims.pseudo.ok_or_else(|| Error::Config("TP needs a pseudo-embedding width".into()))?;
                let (p, p_out) = b.stack("pseudo", &hp.pseudo_layers, d_p, true);
                let (c, c_out) = b.stack("concat_conv", &hp.concat_conv_layers, node_out + p_out, true);
                pseudo_stack = p;
                concat_conv_stack = c;
                node_out = c_out;
            }
            Arch::TE => {
                let vocab = dims.activity_vocab.ok_or_else(|| Error::Config("TE needs an activity vocabulary".into()))?;
                let dim = hp.embedding_dim.unwrap_or(1);
                embedding = Some(Embedding::new(b.store, "embedding", vocab, dim, &mut b.rng));
                let (e, e_out) = b.stack("embedding_conv", &hp.embedding_layers, dim, true);
                let (c, c_out) = b.stack("concat_conv", &hp.concat_conv_layers, node_out + e_out, true);
                embedding_stack = e;
                concat_conv_stack = c;
                node_out = c_out;
            }
            _ => {}
        }
        let mut head_in = node_out;
        if hp.arch != Arch::O {
            let (g, g_out) = b.stack("graph_dense", &hp.graph_dense_layers, dims.graph, false);
            graph_dense_stack = g;
            head_in += g_out;
        }
        let (concat_dense_stack, d_out) = b.stack("concat_dense", &hp.concat_dense_layers, head_in, false);
        let classifier = Dense::new(b.store, "classifier", d_out, n_classes, &mut b.rng);
        Ok(Self {
            hp: hp.clone(),
            dims,
            n_classes,
            store,
            node_stack,
            pseudo_stack,
            embedding,
            embedding_stack,
            concat_conv_stack,
            graph_dense_stack,
            concat_dense_stack,
            classifier,
        })
    }

    /// Logits `B × C` for a batch.
    pub fn forward(&self, f: &mut Forward, batch: &Batch) -> Result<Var> {
        if batch.node_feats.cols != self.dims.node || batch.graph_vecs.cols != self.dims.graph {
            return Err(Error::Shape(format!(
                "batch widths ({}, {}) do not match the model ({}, {})",
                batch.node_feats.cols, batch.graph_vecs.cols, self.dims.node, self.dims.graph
            )));
        }
        let masked = apply_input_mask(&batch.node_feats, &batch.node_mask)?;
        let n_graphs = batch.n_graphs();
        let x = match self.hp.arch {
            Arch::O => {
                let nodes = f.input(masked);
                let g = f.input(batch.graph_vecs.clone());
                let spread = f.tape.row_gather(g, &batch.graph_id)?;
                f.tape.concat_cols(nodes, spread)?
            }
            Arch::TE => {
                let skip = self.dims.activity_width;
                let w = masked.cols - skip;
                let data = (0..masked.rows).flat_map(|r| masked.row(r)[skip..].to_vec()).collect();
                f.input(Tensor { rows: masked.rows, cols: w, data })
            }
            _ => f.input(masked),
        };
        let mut h = run_stack(&self.node_stack, f, x, batch)?;
        match self.hp.arch {
            Arch::TP => {
                let p = batch
                    .pseudo_feats
                    .as_ref()
                    .ok_or_else(|| Error::Shape("TP model needs pseudo-embeddings in the batch".into()))?;
                if Some(p.cols) != self.dims.pseudo {
                    return Err(Error::Shape(format!("pseudo width {} does not match the model", p.cols)));
                }
                let pv = f.input(p.clone());
                let ph = run_stack(&self.pseudo_stack, f, pv, batch)?;
                let joined = f.tape.concat_cols(h, ph)?;
                h = run_stack(&self.concat_conv_stack, f, joined, batch)?;
            }
            Arch::TE => {
                let emb = self.embedding.as_ref().expect("TE model has an embedding");
                let e = emb.forward(f, &batch.activity_ids)?;
                let eh = run_stack(&self.embedding_stack, f, e, batch)?;
                let joined = f.tape.concat_cols(h, eh)?;
                h = run_stack(&self.concat_conv_stack, f, joined, batch)?;
            }
            _ => {}
        }
        let mut z = pool(&mut f.tape, h, &batch.graph_id, n_graphs, self.hp.pooling)?;
        if self.hp.arch != Arch::O {
            let g = f.input(batch.graph_vecs.clone());
            let vd = run_stack(&self.graph_dense_stack, f, g, batch)?;
            z = f.tape.concat_cols(z, vd)?;
        }
        let z = run_stack(&self.concat_dense_stack, f, z, batch)?;
        self.classifier.forward(f, z)
    }

    pub fn loss(&self, f: &mut Forward, logits: Var, labels: &[usize]) -> Result<Var> {
        match self.hp.loss {
            LossKind::CrossEntropy => cross_entropy(&mut f.tape, logits, labels),
            LossKind::MultiMargin => multi_margin(&mut f.tape, logits, labels),
        }
    }

    /// Replace parameter values from a stored set, matching by name and shape.
    pub fn load_params(&mut self, params: &ParamStore) -> Result<()> {
        if params.len() != self.store.len() {
            return Err(Error::Config(format!("{} stored parameters for a model with {}", params.len(), self.store.len())));
        }
        for (dst, src) in self.store.params.iter_mut().zip(&params.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() || dst.kind != src.kind {
                return Err(Error::Config(format!("stored parameter {} does not fit {}", src.name, dst.name)));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}
