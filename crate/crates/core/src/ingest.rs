//! Dataset ingestion: relation files in, graph plus labeled instances out.
//!
//! Raw node identifiers are interned into dense per-type indices in file
//! order, so the same inputs always produce the same index assignment.
//! Rating records are binarized against the configured threshold and split
//! into train/valid/test by a seeded shuffle. Only *train-split positive*
//! ratings become graph edges: validation and test interactions must stay
//! invisible to the walk sampler or evaluation would leak.

use std::collections::HashMap;
use std::fmt;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig, SplitConfig};
use crate::hin::{GraphError, HinGraph, HinGraphBuilder, TypeId};
use crate::sampler::mix_seed;

/// Errors from reading relation files or assembling the dataset.
#[derive(Debug, Error)]
pub enum IngestError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected at least {needed} fields, found {found}")]
    MissingColumn {
        path: PathBuf,
        line: usize,
        needed: usize,
        found: usize,
    },
    #[error("{path}:{line}: field {column} is empty")]
    EmptyField {
        path: PathBuf,
        line: usize,
        column: usize,
    },
    #[error("{path}:{line}: cannot parse rating {value:?}")]
    BadRating {
        path: PathBuf,
        line: usize,
        value: String,
    },
    #[error("no rating records found")]
    NoInstances,
    #[error(
        "all {total} rating records fall on one side of threshold {threshold} \
         ({positives} positives); both classes are required"
    )]
    SingleClass {
        total: usize,
        positives: usize,
        threshold: f64,
    },
}

/// Bidirectional map between raw string identifiers and dense indices for
/// one node type. Serialized as the name list alone; the reverse map is
/// rebuilt on deserialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct IdMap {
    names: Vec<String>,
    forward: HashMap<String, u32>,
}

impl IdMap {
    pub fn new() -> Self {
        IdMap {
            names: Vec::new(),
            forward: HashMap::new(),
        }
    }

    pub fn get(&self, raw: &str) -> Option<u32> {
        self.forward.get(raw).copied()
    }

    /// Records `raw` at index `idx`, which must be the next free slot.
    fn insert(&mut self, raw: &str, idx: u32) {
        debug_assert_eq!(idx as usize, self.names.len());
        self.names.push(raw.to_string());
        self.forward.insert(raw.to_string(), idx);
    }

    pub fn name(&self, idx: u32) -> Option<&str> {
        self.names.get(idx as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

impl Default for IdMap {
    fn default() -> Self {
        Self::new()
    }
}

impl From<Vec<String>> for IdMap {
    fn from(names: Vec<String>) -> Self {
        let forward = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i as u32))
            .collect();
        IdMap { names, forward }
    }
}

impl From<IdMap> for Vec<String> {
    fn from(map: IdMap) -> Vec<String> {
        map.names
    }
}

/// One labeled user/item pair. `label` is 1.0 for a positive rating and 0.0
/// otherwise; indices are dense per-type node indices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub user: u32,
    pub item: u32,
    pub label: f64,
}

/// Train/valid/test partition of the instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<Instance>,
    pub valid: Vec<Instance>,
    pub test: Vec<Instance>,
}

impl DatasetSplit {
    pub fn total(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn by_name(&self, name: &str) -> Option<&[Instance]> {
        match name {
            "train" => Some(&self.train),
            "valid" => Some(&self.valid),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Summary counts for logging and manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub type_counts: Vec<(String, u32)>,
    pub relation_edges: Vec<(String, u64)>,
    pub instances: usize,
    pub positives: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "nodes:")?;
        for (name, count) in &self.type_counts {
            write!(f, " {name}={count}")?;
        }
        write!(f, "\nedges:")?;
        for (name, count) in &self.relation_edges {
            write!(f, " {name}={count}")?;
        }
        write!(
            f,
            "\ninstances: {} ({} positive) split {}:{}:{}",
            self.instances, self.positives, self.train, self.valid, self.test
        )
    }
}

/// A fully ingested dataset: the graph, the labeled split, and the raw-id
/// maps needed to report results in input terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub graph: HinGraph,
    pub user_type: TypeId,
    pub item_type: TypeId,
    pub split: DatasetSplit,
    pub id_maps: Vec<IdMap>,
    pub stats: DatasetStats,
}

/// Shuffles `items` with a seed derived from `seed` and slices it into
/// train/valid/test. Boundary indices are the rounded cumulative fractions,
/// so each part's size is within one element of its exact share.
pub fn shuffle_split<T>(mut items: Vec<T>, split: SplitConfig, seed: u64) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, "split"));
    items.shuffle(&mut rng);
    let n = items.len();
    let bound = |fraction: f64| ((fraction * n as f64).round() as usize).min(n);
    let b1 = bound(split.train);
    let b2 = bound(split.train + split.valid).max(b1);
    let test = items.split_off(b2);
    let valid = items.split_off(b1);
    (items, valid, test)
}

struct ParsedLine<'a> {
    fields: Vec<&'a str>,
    path: &'a Path,
    line: usize,
}

impl<'a> ParsedLine<'a> {
    fn field(&self, column: usize) -> Result<&'a str, IngestError> {
        if column >= self.fields.len() {
            return Err(IngestError::MissingColumn {
                path: self.path.to_path_buf(),
                line: self.line,
                needed: column + 1,
                found: self.fields.len(),
            });
        }
        let value = self.fields[column];
        if value.is_empty() {
            return Err(IngestError::EmptyField {
                path: self.path.to_path_buf(),
                line: self.line,
                column,
            });
        }
        Ok(value)
    }
}

/// Reads the relation files named by `config` (paths resolved against
/// `base_dir`) and assembles the dataset. The config must already have
/// passed [`RunConfig::validate`].
pub fn ingest(config: &RunConfig, base_dir: &Path) -> Result<Dataset, IngestError> {
    let schema = config.build_schema()?;
    let rating_rel = schema
        .relation_by_name(&config.rating.relation)
        .expect("validated config has a rating relation");
    let rating_def = schema.relations()[rating_rel].clone();
    let user_type = rating_def.src;
    let item_type = rating_def.dst;

    let mut builder = HinGraphBuilder::new(schema.clone());
    let mut id_maps: Vec<IdMap> = vec![IdMap::new(); schema.type_count()];
    let mut ratings: Vec<(u32, u32, f64)> = Vec::new();

    for file in &config.relation_files {
        let rel = schema
            .relation_by_name(&file.relation)
            .expect("validated config references known relations");
        let def = schema.relations()[rel].clone();
        let path = base_dir.join(&file.path);
        let reader = std::fs::File::open(&path).map_err(|source| IngestError::Io {
            path: path.clone(),
            source,
        })?;
        let reader = std::io::BufReader::new(reader);
        let delim = file.delimiter.as_char();
        for (line_idx, line) in reader.lines().enumerate() {
            let line = line.map_err(|source| IngestError::Io {
                path: path.clone(),
                source,
            })?;
            let trimmed = line.trim_end_matches(['\r', '\n']);
            if trimmed.is_empty() {
                continue;
            }
            let parsed = ParsedLine {
                fields: trimmed.split(delim).collect(),
                path: &path,
                line: line_idx + 1,
            };
            let src_raw = parsed.field(file.src_col)?;
            let dst_raw = parsed.field(file.dst_col)?;
            let src_idx = intern(&mut builder, &mut id_maps, def.src, src_raw)?;
            let dst_idx = intern(&mut builder, &mut id_maps, def.dst, dst_raw)?;
            if rel == rating_rel {
                let col = file.rating_col.expect("validated rating file has a column");
                let raw = parsed.field(col)?;
                let value: f64 = raw.parse().map_err(|_| IngestError::BadRating {
                    path: path.clone(),
                    line: line_idx + 1,
                    value: raw.to_string(),
                })?;
                if !value.is_finite() {
                    return Err(IngestError::BadRating {
                        path: path.clone(),
                        line: line_idx + 1,
                        value: raw.to_string(),
                    });
                }
                ratings.push((src_idx, dst_idx, value));
            } else {
                builder.add_edge(rel, src_idx, dst_idx)?;
            }
        }
    }

    if ratings.is_empty() {
        return Err(IngestError::NoInstances);
    }
    let threshold = config.rating.positive_threshold;
    let instances: Vec<Instance> = ratings
        .iter()
        .map(|&(user, item, rating)| Instance {
            user,
            item,
            label: if rating >= threshold { 1.0 } else { 0.0 },
        })
        .collect();
    let positives = instances.iter().filter(|i| i.label == 1.0).count();
    if positives == 0 || positives == instances.len() {
        return Err(IngestError::SingleClass {
            total: instances.len(),
            positives,
            threshold,
        });
    }

    let total = instances.len();
    let (train, valid, test) = shuffle_split(instances, config.split, config.hyper.seed);

    // Leakage guard: the graph only ever sees train-split positives.
    for inst in &train {
        if inst.label == 1.0 {
            builder.add_edge(rating_rel, inst.user, inst.item)?;
        }
    }
    let graph = builder.finalize();

    let stats = DatasetStats {
        type_counts: schema
            .node_types()
            .iter()
            .enumerate()
            .map(|(i, t)| (t.name.clone(), graph.node_count(TypeId(i as u8))))
            .collect(),
        relation_edges: schema
            .relations()
            .iter()
            .enumerate()
            .map(|(i, r)| (r.name.clone(), graph.edge_count(i)))
            .collect(),
        instances: total,
        positives,
        train: train.len(),
        valid: valid.len(),
        test: test.len(),
    };
    log::info!("ingested dataset: {stats}");

    Ok(Dataset {
        graph,
        user_type,
        item_type,
        split: DatasetSplit { train, valid, test },
        id_maps,
        stats,
    })
}

fn intern(
    builder: &mut HinGraphBuilder,
    maps: &mut [IdMap],
    ty: TypeId,
    raw: &str,
) -> Result<u32, IngestError> {
    let map = &mut maps[ty.0 as usize];
    if let Some(idx) = map.get(raw) {
        return Ok(idx);
    }
    let idx = builder.add_node(ty)?;
    map.insert(raw, idx);
    Ok(idx)
}
