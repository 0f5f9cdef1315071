//! Run configuration: dataset description, metapaths, and hyperparameters.
//!
//! Configs are JSON documents parsed strictly (unknown keys are rejected so a
//! typo cannot silently fall back to a default) and then cross-validated:
//! relation files must name declared relations, metapaths must parse against
//! the schema and run from the user type to the item type, split fractions
//! must sum to one, and numeric hyperparameters must be in range.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nirec_tensor::ConvBackend;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hin::{Metapath, NetworkSchema, NodeTypeDef, SchemaError};

/// Errors from loading or validating a [`RunConfig`].
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("failed to parse config {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("relation file entry references unknown relation {relation:?}")]
    UnknownRelationFile { relation: String },
    #[error("rating relation {relation:?} is not declared in the schema")]
    UnknownRatingRelation { relation: String },
    #[error("file {path:?} feeds rating relation {relation:?} but sets no rating_col")]
    MissingRatingColumn { relation: String, path: String },
    #[error("file {path:?} sets rating_col but relation {relation:?} is not the rating relation")]
    UnexpectedRatingColumn { relation: String, path: String },
    #[error("rating relation {relation:?} has no relation file")]
    RatingFileMissing { relation: String },
    #[error("at least one metapath is required")]
    NoMetapaths,
    #[error(
        "metapath {path:?} must start at the rating source type {expected_start:?} \
         and end at the rating target type {expected_end:?}"
    )]
    MetapathEndpoints {
        path: String,
        expected_start: char,
        expected_end: char,
    },
    #[error("metapath {0:?} is listed twice")]
    DuplicateMetapath(String),
    #[error(
        "split fractions must be positive and sum to 1, \
         got train={train} valid={valid} test={test}"
    )]
    BadSplit { train: f64, valid: f64, test: f64 },
    #[error("invalid hyperparameter: {0}")]
    BadHyper(String),
}

/// Node type entry inside [`SchemaConfig`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeTypeConfig {
    pub symbol: char,
    pub name: String,
}

/// Relation entry inside [`SchemaConfig`]: endpoint types by symbol.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationConfig {
    pub name: String,
    pub src: char,
    pub dst: char,
}

/// The typed-graph shape: node types and the relations connecting them.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaConfig {
    pub node_types: Vec<NodeTypeConfig>,
    pub relations: Vec<RelationConfig>,
}

impl SchemaConfig {
    /// Builds the validated runtime schema.
    pub fn build(&self) -> Result<NetworkSchema, SchemaError> {
        NetworkSchema::new(
            self.node_types
                .iter()
                .map(|t| NodeTypeDef {
                    symbol: t.symbol,
                    name: t.name.clone(),
                })
                .collect(),
            self.relations
                .iter()
                .map(|r| (r.name.clone(), r.src, r.dst))
                .collect(),
        )
    }
}

/// Field separator for a relation file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Delimiter {
    #[default]
    Tab,
    Comma,
    Pipe,
    Space,
}

impl Delimiter {
    pub fn as_char(self) -> char {
        match self {
            Delimiter::Tab => '\t',
            Delimiter::Comma => ',',
            Delimiter::Pipe => '|',
            Delimiter::Space => ' ',
        }
    }
}

/// One edge-list file: which relation it feeds and how to read its columns.
/// `path` is resolved relative to the config file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationFileConfig {
    pub relation: String,
    pub path: String,
    #[serde(default)]
    pub delimiter: Delimiter,
    #[serde(default)]
    pub src_col: usize,
    #[serde(default = "default_dst_col")]
    pub dst_col: usize,
    #[serde(default)]
    pub rating_col: Option<usize>,
}

fn default_dst_col() -> usize {
    1
}

/// Which relation carries ratings and where the positive/negative cut sits.
/// Ratings at or above the threshold become label 1; every other observed
/// rating becomes label 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatingConfig {
    pub relation: String,
    #[serde(default = "default_positive_threshold")]
    pub positive_threshold: f64,
}

fn default_positive_threshold() -> f64 {
    4.0
}

/// Train/valid/test fractions.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train: 0.6,
            valid: 0.2,
            test: 0.2,
        }
    }
}

/// How source walks pair with target walks inside the interaction step:
/// `aligned` convolves walk `l` with walk `l`; `all_pairs` convolves every
/// source walk with every target walk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingMode {
    #[default]
    Aligned,
    AllPairs,
}

impl fmt::Display for PairingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairingMode::Aligned => "aligned",
            PairingMode::AllPairs => "all_pairs",
        })
    }
}

/// Convolution backend selector, serializable twin of
/// [`nirec_tensor::ConvBackend`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendChoice {
    Naive,
    #[default]
    Fft,
}

impl BackendChoice {
    pub fn to_backend(self) -> ConvBackend {
        match self {
            BackendChoice::Naive => ConvBackend::Naive,
            BackendChoice::Fft => ConvBackend::Fft,
        }
    }
}

impl FromStr for BackendChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive" => Ok(BackendChoice::Naive),
            "fft" => Ok(BackendChoice::Fft),
            other => Err(format!("unknown conv backend {other:?} (naive|fft)")),
        }
    }
}

/// Gradient update rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
    Sgd,
}

/// Model and training hyperparameters. Every field has a default so a config
/// may specify only what it changes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// Shared embedding width after per-type projection.
    pub embed_dim: usize,
    /// Width of the stored per-type embeddings; defaults to `embed_dim`.
    pub raw_dim: Option<usize>,
    /// Walks drawn per (anchor, metapath).
    pub walks: usize,
    /// Attention heads in the node-level aggregator.
    pub heads: usize,
    /// Softmax temperature for node-level attention.
    pub node_temperature: f64,
    /// Softmax temperature for path-level attention.
    pub path_temperature: f64,
    /// Hidden widths of the prediction head; the final sigmoid output is
    /// appended automatically.
    pub mlp_hidden: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many epochs without validation-AUC improvement.
    pub patience: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub pairing: PairingMode,
    pub conv_backend: BackendChoice,
    /// Redraw training walks each epoch instead of reusing the prepared ones.
    pub resample_walks: bool,
    /// Share the query projection between node- and path-level attention.
    pub tie_path_projection: bool,
    /// Worker threads for batch evaluation; 0 means all available cores.
    pub workers: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            embed_dim: 128,
            raw_dim: None,
            walks: 20,
            heads: 4,
            node_temperature: 1.0,
            path_temperature: 1.0,
            mlp_hidden: vec![64],
            learning_rate: 1e-3,
            batch_size: 128,
            epochs: 30,
            patience: 5,
            seed: 42,
            optimizer: Optimizer::Adam,
            pairing: PairingMode::Aligned,
            conv_backend: BackendChoice::Fft,
            resample_walks: false,
            tie_path_projection: true,
            workers: 0,
        }
    }
}

impl HyperParams {
    /// Stored embedding width, falling back to the shared width.
    pub fn raw_dim_or_default(&self) -> usize {
        self.raw_dim.unwrap_or(self.embed_dim)
    }
}

/// Published metrics to compare a run against.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceMetrics {
    pub auc: f64,
    pub acc: f64,
}

/// Top-level run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: SchemaConfig,
    pub relation_files: Vec<RelationFileConfig>,
    pub rating: RatingConfig,
    pub metapaths: Vec<String>,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub hyper: HyperParams,
    #[serde(default)]
    pub reference: Option<ReferenceMetrics>,
}

impl RunConfig {
    /// Reads and validates a JSON config file.
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: RunConfig =
            serde_json::from_str(&text).map_err(|source| ConfigError::Json {
                path: path.to_path_buf(),
                source,
            })?;
        config.validate()?;
        Ok(config)
    }

    /// Cross-checks every section; called by [`RunConfig::load`] and again by
    /// consumers that build configs in code.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let schema = self.schema.build()?;

        let rating_rel = schema.relation_by_name(&self.rating.relation).ok_or_else(|| {
            ConfigError::UnknownRatingRelation {
                relation: self.rating.relation.clone(),
            }
        })?;

        let mut rating_has_file = false;
        for file in &self.relation_files {
            let rel = schema.relation_by_name(&file.relation).ok_or_else(|| {
                ConfigError::UnknownRelationFile {
                    relation: file.relation.clone(),
                }
            })?;
            let is_rating = rel == rating_rel;
            match (is_rating, file.rating_col) {
                (true, None) => {
                    return Err(ConfigError::MissingRatingColumn {
                        relation: file.relation.clone(),
                        path: file.path.clone(),
                    })
                }
                (false, Some(_)) => {
                    return Err(ConfigError::UnexpectedRatingColumn {
                        relation: file.relation.clone(),
                        path: file.path.clone(),
                    })
                }
                _ => {}
            }
            rating_has_file |= is_rating;
        }
        if !rating_has_file {
            return Err(ConfigError::RatingFileMissing {
                relation: self.rating.relation.clone(),
            });
        }

        if self.metapaths.is_empty() {
            return Err(ConfigError::NoMetapaths);
        }
        let rating_def = &schema.relations()[rating_rel];
        let start = schema.symbol(rating_def.src);
        let end = schema.symbol(rating_def.dst);
        for (i, label) in self.metapaths.iter().enumerate() {
            if self.metapaths[..i].contains(label) {
                return Err(ConfigError::DuplicateMetapath(label.clone()));
            }
            let path = Metapath::parse(label, &schema)?;
            let types = path.types();
            if types[0] != rating_def.src || types[types.len() - 1] != rating_def.dst {
                return Err(ConfigError::MetapathEndpoints {
                    path: label.clone(),
                    expected_start: start,
                    expected_end: end,
                });
            }
        }

        let s = self.split;
        let sum = s.train + s.valid + s.test;
        if !(s.train > 0.0 && s.valid > 0.0 && s.test > 0.0 && (sum - 1.0).abs() < 1e-9) {
            return Err(ConfigError::BadSplit {
                train: s.train,
                valid: s.valid,
                test: s.test,
            });
        }

        if !self.rating.positive_threshold.is_finite() {
            return Err(ConfigError::BadHyper(format!(
                "positive_threshold must be finite, got {}",
                self.rating.positive_threshold
            )));
        }

        let h = &self.hyper;
        let positive = [
            ("embed_dim", h.embed_dim),
            ("walks", h.walks),
            ("heads", h.heads),
            ("batch_size", h.batch_size),
            ("epochs", h.epochs),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(ConfigError::BadHyper(format!("{name} must be at least 1")));
            }
        }
        if h.raw_dim == Some(0) {
            return Err(ConfigError::BadHyper("raw_dim must be at least 1".into()));
        }
        if h.mlp_hidden.iter().any(|&w| w == 0) {
            return Err(ConfigError::BadHyper(
                "mlp_hidden widths must be at least 1".into(),
            ));
        }
        let positive_f = [
            ("learning_rate", h.learning_rate),
            ("node_temperature", h.node_temperature),
            ("path_temperature", h.path_temperature),
        ];
        for (name, value) in positive_f {
            if !(value.is_finite() && value > 0.0) {
                return Err(ConfigError::BadHyper(format!(
                    "{name} must be positive and finite, got {value}"
                )));
            }
        }
        Ok(())
    }

    /// The validated runtime schema.
    pub fn build_schema(&self) -> Result<NetworkSchema, ConfigError> {
        Ok(self.schema.build()?)
    }

    /// Metapath objects in config order.
    pub fn build_metapaths(&self, schema: &NetworkSchema) -> Result<Vec<Metapath>, ConfigError> {
        self.metapaths
            .iter()
            .map(|label| Ok(Metapath::parse(label, schema)?))
            .collect()
    }
}

/// The parsed test fixture, shared with other modules' tests.
#[cfg(test)]
pub(crate) fn example_config() -> RunConfig {
    serde_json::from_str(&tests::example_json()).expect("fixture parses")
}
