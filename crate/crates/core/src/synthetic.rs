//! Generated datasets with a planted, learnable signal.
//!
//! The planted-tags network has three node types: users, items, and tags.
//! Every user and every item carries exactly one tag (round-robin by
//! index), and an instance's label is 1 exactly when user and item share a
//! tag. The signal is reachable through the metapath `UAI`: the interaction
//! of a user neighborhood with an item neighborhood multiplies tag
//! embeddings together, so shared tags produce systematically different
//! interaction elements than mismatched ones. A second metapath `UAUAI`
//! runs through a longer loop and exercises path attention.
//!
//! These bundles feed the training tests, the end-to-end gradient check,
//! and the learnability acceptance gate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{HyperParams, SplitConfig};
use crate::hin::{
    HinGraph, HinGraphBuilder, Metapath, NetworkSchema, NodeTypeDef, SchemaError, TypeId,
};
use crate::ingest::{shuffle_split, Dataset, DatasetSplit, DatasetStats, IdMap, Instance};
use crate::model::ModelConfig;
use crate::sampler::{anchor_sets, mix_seed, prepare_samples, SampleError, SampleStore};

/// Errors from synthetic dataset construction.
#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("planted tags needs at least 2 tags, got {0}")]
    TooFewTags(u32),
    #[error("planted tags needs users >= tags and items >= tags ({users} users, {items} items, {tags} tags)")]
    TooFewNodes { users: u32, items: u32, tags: u32 },
    #[error("planted tags needs at least 4 instances, got {0}")]
    TooFewInstances(usize),
    #[error("could not split {0} instances so that every part keeps both classes")]
    UnsplittableLabels(usize),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Sample(#[from] SampleError),
}

/// A synthetic dataset plus its prepared walk samples.
#[derive(Debug, Clone)]
pub struct SyntheticBundle {
    pub dataset: Dataset,
    pub store: SampleStore,
}

impl SyntheticBundle {
    /// Model config for this bundle under the given hyperparameters.
    pub fn model_config(&self, hyper: &HyperParams) -> ModelConfig {
        let schema = self.dataset.graph.schema();
        ModelConfig {
            type_symbols: schema.node_types().iter().map(|t| t.symbol).collect(),
            type_counts: self.dataset.graph.type_counts().to_vec(),
            metapath_labels: self
                .store
                .metapaths
                .iter()
                .map(|m| m.label().to_string())
                .collect(),
            metapath_types: self
                .store
                .metapaths
                .iter()
                .map(|m| m.types().iter().map(|t| t.0).collect())
                .collect(),
            embed_dim: hyper.embed_dim,
            raw_dim: hyper.raw_dim_or_default(),
            heads: hyper.heads,
            walks: hyper.walks,
            mlp_hidden: hyper.mlp_hidden.clone(),
            node_temperature: hyper.node_temperature,
            path_temperature: hyper.path_temperature,
            tie_path_projection: hyper.tie_path_projection,
            pairing: hyper.pairing,
            conv_backend: hyper.conv_backend,
        }
    }
}

fn planted_schema() -> Result<NetworkSchema, SchemaError> {
    NetworkSchema::new(
        vec![
            NodeTypeDef {
                symbol: 'U',
                name: "user".into(),
            },
            NodeTypeDef {
                symbol: 'A',
                name: "tag".into(),
            },
            NodeTypeDef {
                symbol: 'I',
                name: "item".into(),
            },
        ],
        vec![
            ("user_tag".into(), 'U', 'A'),
            ("item_tag".into(), 'I', 'A'),
        ],
    )
}

fn planted_graph(users: u32, items: u32, tags: u32) -> Result<HinGraph, SchemaError> {
    let schema = planted_schema()?;
    let mut b = HinGraphBuilder::new(schema);
    let (u_ty, a_ty, i_ty) = (TypeId(0), TypeId(1), TypeId(2));
    for _ in 0..tags {
        b.add_node(a_ty).expect("tag type exists");
    }
    for u in 0..users {
        let idx = b.add_node(u_ty).expect("user type exists");
        debug_assert_eq!(idx, u);
        b.add_edge(0, u, u % tags).expect("valid user/tag edge");
    }
    for i in 0..items {
        let idx = b.add_node(i_ty).expect("item type exists");
        debug_assert_eq!(idx, i);
        b.add_edge(1, i, i % tags).expect("valid item/tag edge");
    }
    Ok(b.finalize())
}

/// Builds a planted-tags bundle: `instances` labeled pairs (alternating
/// positive/negative, so the classes are balanced), split 6:2:2, with walk
/// samples prepared for every referenced anchor. Fully determined by the
/// sizes and `hyper` (seed, walk count, split handling).
pub fn planted_tags(
    users: u32,
    items: u32,
    tags: u32,
    instances: usize,
    hyper: &HyperParams,
) -> Result<SyntheticBundle, SyntheticError> {
    if tags < 2 {
        return Err(SyntheticError::TooFewTags(tags));
    }
    if users < tags || items < tags {
        return Err(SyntheticError::TooFewNodes { users, items, tags });
    }
    if instances < 4 {
        return Err(SyntheticError::TooFewInstances(instances));
    }
    let graph = planted_graph(users, items, tags)?;
    let schema = graph.schema().clone();

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(hyper.seed, "planted"));
    let mut list = Vec::with_capacity(instances);
    for k in 0..instances {
        let user = rng.gen_range(0..users);
        let want_positive = k % 2 == 0;
        let item = loop {
            let i = rng.gen_range(0..items);
            if ((i % tags) == (user % tags)) == want_positive {
                break i;
            }
        };
        list.push(Instance {
            user,
            item,
            label: if want_positive { 1.0 } else { 0.0 },
        });
    }

    // Retry the shuffle with a bumped salt until every part keeps both
    // classes; deterministic in the inputs.
    let split_cfg = SplitConfig::default();
    let mut split = None;
    for salt in 0..32u64 {
        let (train, valid, test) =
            shuffle_split(list.clone(), split_cfg, hyper.seed.wrapping_add(salt));
        let mixed = |part: &[Instance]| {
            let pos = part.iter().filter(|i| i.label == 1.0).count();
            pos > 0 && pos < part.len()
        };
        if mixed(&train) && mixed(&valid) && mixed(&test) {
            split = Some(DatasetSplit { train, valid, test });
            break;
        }
    }
    let split = split.ok_or(SyntheticError::UnsplittableLabels(instances))?;

    let metapaths = vec![
        Metapath::parse("UAI", &schema)?,
        Metapath::parse("UAUAI", &schema)?,
    ];
    let (user_set, item_set) = anchor_sets(&[&split.train, &split.valid, &split.test]);
    let store = prepare_samples(
        &graph,
        &metapaths,
        TypeId(0),
        TypeId(2),
        &user_set,
        &item_set,
        hyper.walks,
        hyper.seed,
    )?;

    let positives = instances.div_ceil(2);
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
        instances,
        positives,
        train: split.train.len(),
        valid: split.valid.len(),
        test: split.test.len(),
    };
    let id_maps = vec![
        IdMap::from((0..users).map(|u| format!("u{u}")).collect::<Vec<_>>()),
        IdMap::from((0..tags).map(|t| format!("a{t}")).collect::<Vec<_>>()),
        IdMap::from((0..items).map(|i| format!("i{i}")).collect::<Vec<_>>()),
    ];

    Ok(SyntheticBundle {
        dataset: Dataset {
            graph,
            user_type: TypeId(0),
            item_type: TypeId(2),
            split,
            id_maps,
            stats,
        },
        store,
    })
}
