//! On-disk layout and file formats shared by the subcommands.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use hypergcn::encode::EncoderState;
use hypergcn::eventlog::{load_csv, Dataset};
use hypergcn::graphrep::{build_graph, GraphInstance, WeightScaler};
use hypergcn::layers::ParamStore;
use hypergcn::models::{Dims, HyperParams, Model};
use hypergcn::pseudoembed::PseudoEmbedder;
use hypergcn::trainer::{Evaluation, Metrics};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{ModelId, RunConfig};

pub const ENCODER: &str = "encoder.json";
pub const SCALER: &str = "scaler.json";
pub const BINNING: &str = "binning.json";
pub const SPLIT: &str = "split.json";

pub fn prepare_dir(out: &Path) -> PathBuf {
    out.join("prepare")
}

pub fn model_dir(out: &Path, stage: &str, model: ModelId) -> PathBuf {
    out.join(stage).join(model.to_string())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn load_dataset(path: &Path, config: &RunConfig) -> anyhow::Result<Dataset> {
    let ds = load_csv(path, &config.schema, &config.label_column)
        .with_context(|| format!("loading dataset {}", path.display()))?;
    ds.validate().with_context(|| format!("validating dataset {}", path.display()))?;
    for w in &ds.warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(ds)
}

/// Case ids per split; written by `prepare`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub fraction: f64,
    pub class_names: Vec<String>,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

impl SplitManifest {
    pub fn indices(&self, dataset: &Dataset) -> anyhow::Result<(Vec<usize>, Vec<usize>)> {
        let by_id: HashMap<&str, usize> =
            dataset.traces.iter().enumerate().map(|(i, t)| (t.case_id.as_str(), i)).collect();
        let look = |ids: &[String]| -> anyhow::Result<Vec<usize>> {
            ids.iter()
                .map(|id| by_id.get(id.as_str()).copied().ok_or_else(|| anyhow!("split case `{id}` not in dataset")))
                .collect()
        };
        Ok((look(&self.train)?, look(&self.val)?))
    }
}

/// Encoder, scaler and (optional) pseudo-embedding fitted on the training split.
pub struct FittedState {
    pub encoder: EncoderState,
    pub scaler: WeightScaler,
    pub pseudo: Option<PseudoEmbedder>,
}

impl FittedState {
    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        if !dir.join(ENCODER).exists() {
            bail!("no prepared artifacts in {}; run `prepare` first", dir.display());
        }
        let text = fs::read_to_string(dir.join(ENCODER))?;
        let encoder = EncoderState::from_json(&text).with_context(|| format!("parsing {}", dir.join(ENCODER).display()))?;
        let scaler = read_json(&dir.join(SCALER))?;
        let binning = dir.join(BINNING);
        let pseudo = if binning.exists() { Some(read_json(&binning)?) } else { None };
        Ok(Self { encoder, scaler, pseudo })
    }

    pub fn dims(&self) -> Dims {
        Dims::from_encoder(&self.encoder, self.pseudo.as_ref().map(|p| p.dim()))
    }

    pub fn graphs(&self, dataset: &Dataset, idx: &[usize]) -> anyhow::Result<Vec<GraphInstance>> {
        idx.iter()
            .map(|&i| {
                let t = &dataset.traces[i];
                build_graph(t, &self.encoder, &self.scaler, self.pseudo.as_ref())
                    .with_context(|| format!("encoding case `{}`", t.case_id))
            })
            .collect()
    }
}

/// A trained model. `encoder`, `scaler` and `binning` point at the fitted
/// state, relative to the checkpoint's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub spec: HyperParams,
    pub dims: Dims,
    pub class_names: Vec<String>,
    pub params: ParamStore,
    pub encoder: PathBuf,
    pub scaler: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binning: Option<PathBuf>,
    pub best_epoch: usize,
}

impl Checkpoint {
    /// Refs assume the standard `<out>/<stage>/<model>/` placement.
    pub fn new(model: &Model, class_names: &[String], has_binning: bool, best_epoch: usize) -> Self {
        let up = Path::new("..").join("..").join("prepare");
        Self {
            spec: model.hp.clone(),
            dims: model.dims,
            class_names: class_names.to_vec(),
            params: model.store.clone(),
            encoder: up.join(ENCODER),
            scaler: up.join(SCALER),
            binning: has_binning.then(|| up.join(BINNING)),
            best_epoch,
        }
    }

    pub fn model(&self) -> anyhow::Result<Model> {
        let mut model = Model::build(&self.spec, self.dims, self.class_names.len(), 0)?;
        model.load_params(&self.params)?;
        Ok(model)
    }

    pub fn fitted_state(&self, checkpoint_path: &Path) -> anyhow::Result<FittedState> {
        let base = checkpoint_path.parent().unwrap_or(Path::new("."));
        let text = fs::read_to_string(base.join(&self.encoder))
            .with_context(|| format!("reading encoder {}", base.join(&self.encoder).display()))?;
        let encoder = EncoderState::from_json(&text)?;
        let scaler = read_json(&base.join(&self.scaler))?;
        let pseudo = self.binning.as_ref().map(|b| read_json(&base.join(b))).transpose()?;
        let state = FittedState { encoder, scaler, pseudo };
        if state.dims() != self.dims {
            bail!("fitted state does not match the checkpoint's input dimensions");
        }
        Ok(state)
    }
}

/// Evaluation outcome as written to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub model: String,
    pub split: String,
    pub n_samples: usize,
    pub loss: f64,
    pub class_names: Vec<String>,
    pub metrics: Metrics,
}

impl MetricsFile {
    pub fn new(model: ModelId, split: &str, class_names: &[String], eval: &Evaluation) -> Self {
        Self {
            model: model.to_string(),
            split: split.into(),
            n_samples: eval.y_true.len(),
            loss: eval.loss,
            class_names: class_names.to_vec(),
            metrics: eval.metrics.clone(),
        }
    }
}

pub fn append_line(file: &mut fs::File, value: &impl Serialize) -> anyhow::Result<()> {
    let mut line = serde_json::to_string(value)?;
    line.push('\n');
    file.write_all(line.as_bytes())?;
    file.flush()?;
    Ok(())
}
