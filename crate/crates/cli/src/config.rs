use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use hypergcn::eventlog::AttributeSchema;
use hypergcn::models::{Arch, ConvKind};
use hypergcn::pseudoembed::BinningConfig;
use hypergcn::trainer::TrainConfig;
use hypergcn::tuner::{DatasetKind, SearchSpace, IMBALANCE_THRESHOLD};
use serde::{Deserialize, Serialize};

/// One hypermodel, written `T-gcnconv`, `TE-graphconv`, ...
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ModelId {
    pub arch: Arch,
    pub conv: ConvKind,
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.arch.name(), self.conv.name().to_lowercase())
    }
}

impl FromStr for ModelId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, c) = s.split_once('-').ok_or_else(|| format!("model `{s}` should look like `T-gcnconv`"))?;
        let arch = Arch::ALL
            .into_iter()
            .find(|x| x.name().eq_ignore_ascii_case(a))
            .ok_or_else(|| format!("unknown architecture `{a}` (expected O, T, TP or TE)"))?;
        let conv = ConvKind::ALL
            .into_iter()
            .find(|x| x.name().eq_ignore_ascii_case(c))
            .ok_or_else(|| format!("unknown convolution `{c}` (expected gcnconv or graphconv)"))?;
        Ok(Self { arch, conv })
    }
}

impl TryFrom<String> for ModelId {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<ModelId> for String {
    fn from(m: ModelId) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpaceChoice {
    Preset(String),
    Custom(Box<SearchSpace>),
}

impl Default for SpaceChoice {
    fn default() -> Self {
        SpaceChoice::Preset("full".into())
    }
}

impl SpaceChoice {
    pub fn resolve(&self) -> anyhow::Result<SearchSpace> {
        match self {
            SpaceChoice::Preset(p) if p == "full" => Ok(SearchSpace::full()),
            SpaceChoice::Preset(p) if p == "desk" => Ok(SearchSpace::desk()),
            SpaceChoice::Preset(p) => bail!("unknown search space preset `{p}` (expected full or desk)"),
            SpaceChoice::Custom(s) => {
                s.validate()?;
                Ok((**s).clone())
            }
        }
    }
}

/// Overrides applied on top of the default training settings.
/// `patience: 0` disables early stopping.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub split_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Relative paths resolve against the config file's directory.
    pub dataset: PathBuf,
    pub schema: Vec<AttributeSchema>,
    pub label_column: String,
    #[serde(default = "all_models")]
    pub models: Vec<ModelId>,
    #[serde(default = "default_budget")]
    pub budget: usize,
    #[serde(default)]
    pub train: TrainOverrides,
    #[serde(default = "default_retrain")]
    pub retrain_epochs: usize,
    #[serde(default)]
    pub binning: Option<BinningConfig>,
    #[serde(default)]
    pub dataset_kind: Option<DatasetKind>,
    #[serde(default = "default_threshold")]
    pub imbalance_threshold: f64,
    #[serde(default)]
    pub search_space: SpaceChoice,
    #[serde(default = "yes")]
    pub pruning: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

fn all_models() -> Vec<ModelId> {
    Arch::ALL.iter().flat_map(|&arch| ConvKind::ALL.map(|conv| ModelId { arch, conv })).collect()
}

fn default_budget() -> usize {
    200
}

fn default_retrain() -> usize {
    300
}

fn default_threshold() -> f64 {
    IMBALANCE_THRESHOLD
}

fn yes() -> bool {
    true
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn new(dataset: PathBuf, schema: Vec<AttributeSchema>, label_column: &str) -> Self {
        Self {
            dataset,
            schema,
            label_column: label_column.into(),
            models: all_models(),
            budget: default_budget(),
            train: TrainOverrides::default(),
            retrain_epochs: default_retrain(),
            binning: None,
            dataset_kind: None,
            imbalance_threshold: IMBALANCE_THRESHOLD,
            search_space: SpaceChoice::default(),
            pruning: true,
            seed: 0,
            out_dir: default_out(),
        }
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut config: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if config.dataset.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            config.dataset = base.join(&config.dataset);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.models.is_empty() {
            bail!("config lists no models");
        }
        if self.budget == 0 {
            bail!("budget must be at least 1");
        }
        if self.retrain_epochs == 0 {
            bail!("retrain_epochs must be at least 1");
        }
        if !(self.imbalance_threshold >= 1.0) {
            bail!("imbalance_threshold must be >= 1");
        }
        if let Some(f) = self.train.split_fraction {
            if !(f > 0.0 && f < 1.0) {
                bail!("split_fraction must lie in (0, 1)");
            }
        }
        if let Some(b) = &self.binning {
            b.validate()?;
        }
        self.search_space.resolve()?;
        Ok(())
    }

    pub fn wants_pseudo(&self) -> bool {
        self.models.iter().any(|m| m.arch == Arch::TP)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            max_epochs: self.train.max_epochs.unwrap_or(d.max_epochs),
            patience: match self.train.patience {
                Some(0) => None,
                Some(p) => Some(p),
                None => d.patience,
            },
            split_fraction: self.train.split_fraction.unwrap_or(d.split_fraction),
            seed,
        }
    }
}
