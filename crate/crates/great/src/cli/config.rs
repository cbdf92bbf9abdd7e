//! Run configuration: the TOML file every subcommand consumes.
//!
//! A [`RunConfig`] fully describes a run: dataset, model, training knobs,
//! attack, graph, and the eval/sweep grids. Loading goes through a raw
//! [`toml::Table`] so `--set key=value` overrides can be spliced in before
//! deserialization; unknown keys then fail with a message naming the key
//! instead of being ignored.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackConfig, AttackMethod};
use crate::data::{
    load_csv, load_idx, make_blobs, make_two_moons, subsample_labels, Dataset,
};
use crate::error::{Error, Result};
use crate::graph::GraphConfig;
use crate::great::{Alphas, DistanceKind, SplitData, TrainConfig, TrainMode};
use crate::nn::{LayerSpec, ModelSpec, OptimizerSpec};

/// Everything a run needs, as read from one TOML file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every random stream in a run is derived from it.
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Output directory. `--out` wins over this, this wins over
    /// `$GREAT_OUT_DIR`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    /// Attack used for training twins, robustness metrics, and `attack`.
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub graph: GraphConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub inputs: InputsSection,
}

fn default_seed() -> u64 {
    7
}

impl RunConfig {
    /// Parses TOML text, then applies `key.path=value` overrides and an
    /// optional seed override on the raw table before deserializing, so
    /// overrides get the same unknown-key and type checking as the file.
    pub fn from_toml(text: &str, overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        for spec in overrides {
            apply_override(&mut table, spec)?;
        }
        if let Some(seed) = seed {
            let seed = i64::try_from(seed)
                .map_err(|_| Error::Config(format!("seed {seed} does not fit a TOML integer")))?;
            table.insert("seed".into(), toml::Value::Integer(seed));
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    /// The resolved file content a run freezes next to its artifacts.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config not serializable: {e}")))
    }

    /// Assembles the library-level [`TrainConfig`] and validates it.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            mode: self.train.mode,
            model: self.model.resolve()?,
            optimizer: self.optimizer,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed: self.seed,
            lambda: self.train.lambda,
            alphas: self.train.alphas,
            distance: self.train.distance,
            attack: self.attack,
            graph: self.graph,
            propagate_labels: self.train.propagate_labels,
            propagation_passes: self.train.propagation_passes,
            warmup_epochs: self.train.warmup_epochs,
            rebuild_graph_every: self.train.rebuild_graph_every,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sets one `a.b.c = value` path in a raw TOML table, creating intermediate
/// tables as needed. Values parse as TOML first (`50`, `true`, `[0.1, 0.2]`),
/// falling back to a string so `--set train.mode=great` needs no quoting.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override \"{spec}\" is not of the form KEY=VALUE")))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key \"{key}\" has an empty segment")));
    }
    let mut cursor = table;
    for part in &parts[..parts.len() - 1] {
        cursor = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                Error::Config(format!("override key \"{key}\": \"{part}\" is not a table"))
            })?;
    }
    cursor.insert(parts[parts.len() - 1].to_string(), parse_override_value(raw.trim()));
    Ok(())
}

fn parse_override_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed table has the key it was built from"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Where samples come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Two interleaved half circles, scaled to the unit square.
    TwoMoons,
    /// Isotropic Gaussian clusters.
    Blobs,
    /// Delimited text with one label column.
    Csv,
    /// IDX image and label files.
    Idx,
}

/// The `[dataset]` section. Keys that do not apply to the chosen `kind`
/// (for example `noise` under `kind = "csv"`) are simply unused.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    /// Sample count for synthetic datasets.
    #[serde(default = "default_n")]
    pub n: usize,
    /// Gaussian jitter for `two_moons`.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Cluster count for `blobs`.
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    /// Feature dimension for `blobs`.
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Cluster spread for `blobs`.
    #[serde(default = "default_std_dev")]
    pub std_dev: f64,
    /// Input file for `csv`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Label column name for `csv`.
    #[serde(default = "default_label_column")]
    pub label_column: String,
    /// Image file for `idx`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    /// Label file for `idx`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Fraction of training samples whose labels stay visible.
    #[serde(default = "default_label_fraction")]
    pub label_fraction: f64,
}

fn default_n() -> usize {
    1000
}

fn default_noise() -> f64 {
    0.1
}

fn default_num_classes() -> usize {
    3
}

fn default_dim() -> usize {
    2
}

fn default_std_dev() -> f64 {
    0.5
}

fn default_label_column() -> String {
    "label".into()
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_val_fraction() -> f64 {
    0.1
}

fn default_label_fraction() -> f64 {
    1.0
}

impl DatasetSection {
    /// Materializes the dataset. Synthetic kinds draw from the given seed.
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        match self.kind {
            DatasetKind::TwoMoons => make_two_moons(self.n, self.noise, seed),
            DatasetKind::Blobs => {
                make_blobs(self.n, self.num_classes, self.dim, self.std_dev, seed)
            }
            DatasetKind::Csv => {
                let path = self.path.as_ref().ok_or_else(|| {
                    Error::Config("dataset.path is required when dataset.kind is \"csv\"".into())
                })?;
                load_csv(path, &self.label_column)
            }
            DatasetKind::Idx => {
                let images = self.images.as_ref().ok_or_else(|| {
                    Error::Config("dataset.images is required when dataset.kind is \"idx\"".into())
                })?;
                let labels = self.labels.as_ref().ok_or_else(|| {
                    Error::Config("dataset.labels is required when dataset.kind is \"idx\"".into())
                })?;
                load_idx(images, labels)
            }
        }
    }

    /// Stratified split, then hides train labels down to `label_fraction`.
    /// The fraction is a parameter because `sweep` varies it per cell.
    pub fn split(&self, data: &Dataset, label_fraction: f64, seed: u64) -> Result<SplitData> {
        let mut splits =
            SplitData::from_dataset(data, self.train_fraction, self.val_fraction, seed)?;
        if label_fraction < 1.0 {
            splits.train = subsample_labels(&splits.train, label_fraction, seed)?;
        }
        Ok(splits)
    }
}

/// The `[model]` section: either the `mlp` shorthand or an explicit layer
/// stack, never both.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Dense stack widths, input first, e.g. `[2, 32, 32, 2]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp: Option<Vec<usize>>,
    /// Per-sample input shape for the explicit form.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layers: Vec<LayerSpec>,
    /// Index into `layers` whose output is the embedding.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_layer: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            mlp: Some(vec![2, 32, 32, 2]),
            input_shape: None,
            layers: Vec::new(),
            embedding_layer: None,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self) -> Result<ModelSpec> {
        match (&self.mlp, &self.input_shape) {
            (Some(dims), None) if self.layers.is_empty() && self.embedding_layer.is_none() => {
                ModelSpec::mlp(dims)
            }
            (Some(_), None) => Err(Error::Config(
                "model.mlp cannot be combined with model.layers or model.embedding_layer".into(),
            )),
            (None, Some(shape)) => {
                let embedding_layer = self.embedding_layer.ok_or_else(|| {
                    Error::Config(
                        "model.embedding_layer is required with an explicit model.layers stack"
                            .into(),
                    )
                })?;
                let spec = ModelSpec {
                    input_shape: shape.clone(),
                    layers: self.layers.clone(),
                    embedding_layer,
                };
                spec.validate()?;
                Ok(spec)
            }
            (Some(_), Some(_)) => Err(Error::Config(
                "model.mlp and model.input_shape are mutually exclusive".into(),
            )),
            (None, None) => Err(Error::Config(
                "model needs either model.mlp or model.input_shape with model.layers".into(),
            )),
        }
    }
}

/// The `[train]` section: objective and schedule knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_mode")]
    pub mode: TrainMode,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Global regularizer strength.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub alphas: Alphas,
    #[serde(default = "default_distance")]
    pub distance: DistanceKind,
    /// Copy labels onto unlabeled samples along strongest graph edges
    /// before training.
    #[serde(default)]
    pub propagate_labels: bool,
    #[serde(default = "default_propagation_passes")]
    pub propagation_passes: usize,
    /// Length of the base stage regularized modes copy from; `epochs` when
    /// absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_epochs: Option<usize>,
    /// Rebuild the graph from current parameters every this many epochs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rebuild_graph_every: Option<usize>,
}

fn default_mode() -> TrainMode {
    TrainMode::Great
}

fn default_epochs() -> usize {
    200
}

fn default_batch_size() -> usize {
    64
}

fn default_lambda() -> f64 {
    1.0
}

fn default_distance() -> DistanceKind {
    DistanceKind::L2Squared
}

fn default_propagation_passes() -> usize {
    1
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            mode: default_mode(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            lambda: default_lambda(),
            alphas: Alphas::default(),
            distance: default_distance(),
            propagate_labels: false,
            propagation_passes: default_propagation_passes(),
            warmup_epochs: None,
            rebuild_graph_every: None,
        }
    }
}

/// The `[eval]` section: attack grid for `eval`; `attack` uses the first
/// method.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_methods")]
    pub methods: Vec<AttackMethod>,
    #[serde(default = "default_eval_epsilons")]
    pub epsilons: Vec<f64>,
}

fn default_methods() -> Vec<AttackMethod> {
    vec![AttackMethod::Fgsm]
}

fn default_eval_epsilons() -> Vec<f64> {
    vec![0.2]
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            methods: default_methods(),
            epsilons: default_eval_epsilons(),
        }
    }
}

/// The `[sweep]` section: grids for the mode comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Label fractions; each gets its own column of runs.
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    /// Seeds to aggregate over; the run seed when empty.
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Regularizer strengths for the lambda curve, run at the first
    /// fraction. Empty skips the curve.
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    /// Attack radii for the accuracy curves.
    #[serde(default = "default_sweep_epsilons")]
    pub epsilons: Vec<f64>,
}

fn default_fractions() -> Vec<f64> {
    vec![0.2, 0.5, 0.8]
}

fn default_lambdas() -> Vec<f64> {
    vec![0.0, 0.5, 1.0]
}

fn default_sweep_epsilons() -> Vec<f64> {
    (0..=8).map(|i| i as f64 * 0.05).collect()
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            fractions: default_fractions(),
            seeds: Vec::new(),
            lambdas: default_lambdas(),
            epsilons: default_sweep_epsilons(),
        }
    }
}

/// The `[inputs]` section: artifacts from earlier runs.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputsSection {
    /// Checkpoint consumed by `graph`, `eval`, and `attack`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl InputsSection {
    /// The checkpoint path, or a config error telling the user how to get
    /// one.
    pub fn require_checkpoint(&self) -> Result<&PathBuf> {
        self.checkpoint.as_ref().ok_or_else(|| {
            Error::Config(
                "inputs.checkpoint is required for this command (train one with `great train`)"
                    .into(),
            )
        })
    }
}
