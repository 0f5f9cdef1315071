//! The NIRec model: parameters, initialization, and the forward pass.
//!
//! A forward pass for one (user, item) instance runs, per metapath:
//! project the user's sampled walks and the item's reversed-path walks into
//! the shared space ([`interaction::build_matrix`]), convolve the paired
//! walks channel-wise ([`Tape::interact`]), and condense the interaction
//! elements with node-level attention. Path-level attention then fuses the
//! per-metapath summaries, and a small MLP with a sigmoid head turns the
//! fused vector into a click probability.
//!
//! Parameters live in a [`ParamStore`] whose order is fixed by
//! [`ModelConfig`]; every forward pass re-registers them as tape leaves so
//! gradients come back keyed by parameter index. The attention width equals
//! the shared embedding width throughout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use nirec_tensor::{Tape, Tensor, TensorError, Var};

use crate::aggregation::{
    node_attention, path_attention, AggregationError, NodeAttention, NodeAttnVars, PathAttnVars,
    PathSummary,
};
use crate::config::{BackendChoice, ConfigError, PairingMode, RunConfig};
use crate::hin::{HinGraph, TypeId};
use crate::interaction::{build_matrix, element_mask, pairs_for, InteractionError};
use crate::sampler::{mix_seed, NeighborhoodSample, SampleError, SampleStore};

/// Errors from model construction or the forward pass.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Interaction(#[from] InteractionError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error("instance provides {got} path samples, model expects {expected}")]
    PathCount { expected: usize, got: usize },
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("parameter {index} ({name:?}): expected shape {expected:?}, got {got:?}")]
    ParamShape {
        index: usize,
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("parameter {index}: expected name {expected:?}, got {got:?}")]
    ParamName {
        index: usize,
        expected: String,
        got: String,
    },
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
}

/// Everything needed to lay out and run a model, independent of the graph
/// the parameters were trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Node type symbols in schema order; parameter names use them.
    pub type_symbols: Vec<char>,
    /// Nodes per type; each embedding table has one extra padding row.
    pub type_counts: Vec<u32>,
    /// Metapath labels, source side, in config order.
    pub metapath_labels: Vec<String>,
    /// Type index sequence of each metapath.
    pub metapath_types: Vec<Vec<u8>>,
    /// Shared embedding width after projection; also the attention width.
    pub embed_dim: usize,
    /// Stored per-type embedding width.
    pub raw_dim: usize,
    pub heads: usize,
    /// Walks drawn per (anchor, metapath).
    pub walks: usize,
    pub mlp_hidden: Vec<usize>,
    pub node_temperature: f64,
    pub path_temperature: f64,
    pub tie_path_projection: bool,
    pub pairing: PairingMode,
    pub conv_backend: BackendChoice,
}

impl ModelConfig {
    /// Distills a run config plus the ingested graph into a model config.
    pub fn from_run(config: &RunConfig, graph: &HinGraph) -> Result<Self, ConfigError> {
        let schema = graph.schema();
        let metapaths = config.build_metapaths(schema)?;
        let h = &config.hyper;
        Ok(ModelConfig {
            type_symbols: schema.node_types().iter().map(|t| t.symbol).collect(),
            type_counts: graph.type_counts().to_vec(),
            metapath_labels: metapaths.iter().map(|m| m.label().to_string()).collect(),
            metapath_types: metapaths
                .iter()
                .map(|m| m.types().iter().map(|t| t.0).collect())
                .collect(),
            embed_dim: h.embed_dim,
            raw_dim: h.raw_dim_or_default(),
            heads: h.heads,
            walks: h.walks,
            mlp_hidden: h.mlp_hidden.clone(),
            node_temperature: h.node_temperature,
            path_temperature: h.path_temperature,
            tie_path_projection: h.tie_path_projection,
            pairing: h.pairing,
            conv_backend: h.conv_backend,
        })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::BadConfig(msg));
        if self.type_symbols.is_empty() {
            return fail("no node types".into());
        }
        if self.type_symbols.len() != self.type_counts.len() {
            return fail(format!(
                "{} type symbols but {} type counts",
                self.type_symbols.len(),
                self.type_counts.len()
            ));
        }
        if self.metapath_labels.is_empty() {
            return fail("no metapaths".into());
        }
        if self.metapath_labels.len() != self.metapath_types.len() {
            return fail("metapath labels and type sequences differ in length".into());
        }
        for (label, types) in self.metapath_labels.iter().zip(&self.metapath_types) {
            if types.len() < 2 {
                return fail(format!("metapath {label:?} has fewer than two steps"));
            }
            if types.len() != label.chars().count() {
                return fail(format!(
                    "metapath {label:?} label length does not match its type sequence"
                ));
            }
            if let Some(&bad) = types.iter().find(|&&t| t as usize >= self.type_symbols.len()) {
                return fail(format!("metapath {label:?} uses unknown type index {bad}"));
            }
        }
        for (name, value) in [
            ("embed_dim", self.embed_dim),
            ("raw_dim", self.raw_dim),
            ("heads", self.heads),
            ("walks", self.walks),
        ] {
            if value == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        if self.mlp_hidden.iter().any(|&w| w == 0) {
            return fail("mlp_hidden widths must be at least 1".into());
        }
        for (name, value) in [
            ("node_temperature", self.node_temperature),
            ("path_temperature", self.path_temperature),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return fail(format!("{name} must be positive and finite"));
            }
        }
        Ok(())
    }

    fn source_types(&self, path: usize) -> Vec<TypeId> {
        self.metapath_types[path].iter().map(|&t| TypeId(t)).collect()
    }

    fn target_types(&self, path: usize) -> Vec<TypeId> {
        self.metapath_types[path]
            .iter()
            .rev()
            .map(|&t| TypeId(t))
            .collect()
    }
}

/// How a parameter is filled at initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParamKind {
    /// Uniform in [-0.05, 0.05], except the final row (padding) stays zero.
    Embedding { live_rows: usize },
    /// Uniform in +/- sqrt(6 / (fan_in + fan_out)).
    Xavier,
    Zero,
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    kind: ParamKind,
}

/// Indices of every named parameter inside the store.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub embed: Vec<usize>,
    pub proj: Vec<usize>,
    pub node_w_t: usize,
    pub node_w_s: usize,
    pub node_w_c: Vec<usize>,
    pub node_w_q: usize,
    pub node_b_q: usize,
    /// Tied configs point these at `node_w_q` / `node_b_q`.
    pub path_w_q: usize,
    pub path_b_q: usize,
    pub path_score: usize,
    pub mlp: Vec<(usize, usize)>,
}

fn build_plan(config: &ModelConfig) -> (Vec<ParamSpec>, ParamLayout) {
    let types = config.type_symbols.len();
    let e = config.embed_dim;
    let raw = config.raw_dim;
    let mut specs: Vec<ParamSpec> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, kind: ParamKind| -> usize {
        specs.push(ParamSpec { name, shape, kind });
        specs.len() - 1
    };

    let mut embed = Vec::with_capacity(types);
    for t in 0..types {
        let count = config.type_counts[t] as usize;
        embed.push(push(
            format!("embed.{}", config.type_symbols[t]),
            vec![count + 1, raw],
            ParamKind::Embedding { live_rows: count },
        ));
    }
    let mut proj = Vec::with_capacity(types);
    for t in 0..types {
        proj.push(push(
            format!("proj.{}", config.type_symbols[t]),
            vec![e, raw],
            ParamKind::Xavier,
        ));
    }
    let node_w_t = push("node.w_t".into(), vec![e, e], ParamKind::Xavier);
    let node_w_s = push("node.w_s".into(), vec![e, e], ParamKind::Xavier);
    let node_w_c = (0..config.heads)
        .map(|h| push(format!("node.w_c.{h}"), vec![e, e], ParamKind::Xavier))
        .collect();
    let node_w_q = push("node.w_q".into(), vec![e, e], ParamKind::Xavier);
    let node_b_q = push("node.b_q".into(), vec![e], ParamKind::Zero);
    let (path_w_q, path_b_q) = if config.tie_path_projection {
        (node_w_q, node_b_q)
    } else {
        (
            push("path.w_q".into(), vec![e, e], ParamKind::Xavier),
            push("path.b_q".into(), vec![e], ParamKind::Zero),
        )
    };
    let path_score = push("path.score".into(), vec![e], ParamKind::Xavier);
    let mut mlp = Vec::new();
    let mut fan_in = e;
    for (i, &width) in config.mlp_hidden.iter().enumerate() {
        let w = push(format!("mlp.{i}.weight"), vec![width, fan_in], ParamKind::Xavier);
        let b = push(format!("mlp.{i}.bias"), vec![width], ParamKind::Zero);
        mlp.push((w, b));
        fan_in = width;
    }
    let out_index = config.mlp_hidden.len();
    let w = push(
        format!("mlp.{out_index}.weight"),
        vec![1, fan_in],
        ParamKind::Xavier,
    );
    let b = push(format!("mlp.{out_index}.bias"), vec![1], ParamKind::Zero);
    mlp.push((w, b));

    (
        specs,
        ParamLayout {
            embed,
            proj,
            node_w_t,
            node_w_s,
            node_w_c,
            node_w_q,
            node_b_q,
            path_w_q,
            path_b_q,
            path_score,
            mlp,
        },
    )
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
}

/// The model's parameters. Order is fixed by the config's parameter plan;
/// gradients, optimizer state, and checkpoints all index into it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    /// Builds a store from named tensors. [`Model::from_params`] checks the
    /// result against a config's parameter plan.
    pub fn from_entries(entries: Vec<ParamEntry>) -> ParamStore {
        ParamStore { entries }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, index: usize) -> &Tensor {
        &self.entries[index].value
    }

    pub fn name(&self, index: usize) -> &str {
        &self.entries[index].name
    }

    pub fn set_value(&mut self, index: usize, value: Tensor) {
        debug_assert_eq!(value.shape(), self.entries[index].value.shape());
        self.entries[index].value = value;
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Registers every parameter as a leaf on `tape`, in store order.
    pub fn leaves(&self, tape: &Tape) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| tape.leaf(e.value.clone()))
            .collect()
    }
}

/// Per-metapath samples for one instance: `source[j]` is the user's
/// neighborhood under metapath `j`, `target[j]` the item's under the
/// reversed path.
#[derive(Debug)]
pub struct InstancePaths<'a> {
    pub source: Vec<&'a NeighborhoodSample>,
    pub target: Vec<&'a NeighborhoodSample>,
}

impl<'a> InstancePaths<'a> {
    /// Looks up all per-metapath samples for a (user, item) pair.
    pub fn from_store(
        store: &'a SampleStore,
        user: u32,
        item: u32,
    ) -> Result<Self, SampleError> {
        let paths = store.metapaths.len();
        let mut source = Vec::with_capacity(paths);
        let mut target = Vec::with_capacity(paths);
        for j in 0..paths {
            source.push(store.source_sample(j, user)?);
            target.push(store.target_sample(j, item)?);
        }
        Ok(InstancePaths { source, target })
    }
}

/// Everything the forward pass exposes for training and inspection.
#[derive(Debug)]
pub struct ForwardTrace {
    /// Predicted click probability, shape [1].
    pub pred: Var,
    /// Path weights, shape [P].
    pub beta: Var,
    /// Weighted combination of the path summaries, shape [1, D].
    pub fused: Var,
    /// Per-path node attention (z, pooled, alpha).
    pub node: Vec<NodeAttention>,
    /// Per-path element validity masks (pair-major, then slot).
    pub element_masks: Vec<Vec<bool>>,
    /// Per-path walk pair lists.
    pub pairs: Vec<Vec<(u32, u32)>>,
    /// Tape leaves for every parameter, in store order.
    pub leaves: Vec<Var>,
}

/// A configured model with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layout: ParamLayout,
}

impl Model {
    /// Initializes parameters from a seed: embeddings uniform in +/- 0.05
    /// with a zero padding row, matrices Xavier-uniform, biases zero. Draws
    /// happen in parameter order from one stream, so a config and a seed
    /// fully determine every weight.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model, ModelError> {
        config.validate()?;
        let (specs, layout) = build_plan(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, "init"));
        let mut uniform = move |lo: f64, hi: f64| lo + (hi - lo) * rng.gen::<f64>();
        let mut entries = Vec::with_capacity(specs.len());
        for spec in specs {
            let len: usize = spec.shape.iter().product();
            let data = match spec.kind {
                ParamKind::Embedding { live_rows } => {
                    let cols = spec.shape[1];
                    let mut data = vec![0.0; len];
                    for slot in data.iter_mut().take(live_rows * cols) {
                        *slot = uniform(-0.05, 0.05);
                    }
                    data
                }
                ParamKind::Xavier => {
                    let fan_sum = (spec.shape[0] + spec.shape.get(1).copied().unwrap_or(1)) as f64;
                    let limit = (6.0 / fan_sum).sqrt();
                    (0..len).map(|_| uniform(-limit, limit)).collect()
                }
                ParamKind::Zero => vec![0.0; len],
            };
            entries.push(ParamEntry {
                name: spec.name,
                value: Tensor::new(&spec.shape, data).expect("initializer values are finite"),
            });
        }
        Ok(Model {
            config,
            params: ParamStore { entries },
            layout,
        })
    }

    /// Rebuilds a model from stored parameters, verifying that names and
    /// shapes match the config's parameter plan exactly.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Model, ModelError> {
        config.validate()?;
        let (specs, layout) = build_plan(&config);
        if specs.len() != params.len() {
            return Err(ModelError::ParamCount {
                expected: specs.len(),
                got: params.len(),
            });
        }
        for (i, (spec, entry)) in specs.iter().zip(params.entries()).enumerate() {
            if spec.name != entry.name {
                return Err(ModelError::ParamName {
                    index: i,
                    expected: spec.name.clone(),
                    got: entry.name.clone(),
                });
            }
            if spec.shape != entry.value.shape() {
                return Err(ModelError::ParamShape {
                    index: i,
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    got: entry.value.shape().to_vec(),
                });
            }
        }
        Ok(Model {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// Runs the full forward pass for one instance on `tape`.
    pub fn forward(&self, tape: &Tape, inst: &InstancePaths<'_>) -> Result<ForwardTrace, ModelError> {
        let paths = self.config.metapath_labels.len();
        if inst.source.len() != paths || inst.target.len() != paths {
            return Err(ModelError::PathCount {
                expected: paths,
                got: inst.source.len().min(inst.target.len()),
            });
        }
        let leaves = self.params.leaves(tape);
        let layout = &self.layout;

        let tables: Vec<Var> = layout.embed.iter().map(|&i| leaves[i].clone()).collect();
        let proj_t: Vec<Var> = layout
            .proj
            .iter()
            .map(|&i| leaves[i].transpose())
            .collect::<Result<_, _>>()?;
        let node_vars = NodeAttnVars {
            w_t: leaves[layout.node_w_t].clone(),
            w_s: leaves[layout.node_w_s].clone(),
            w_c: layout.node_w_c.iter().map(|&i| leaves[i].clone()).collect(),
            w_q: leaves[layout.node_w_q].clone(),
            b_q: leaves[layout.node_b_q].clone(),
        };
        let path_vars = PathAttnVars {
            score: leaves[layout.path_score].clone(),
            w_q: leaves[layout.path_w_q].clone(),
            b_q: leaves[layout.path_b_q].clone(),
        };

        let mut node_outs = Vec::with_capacity(paths);
        let mut element_masks = Vec::with_capacity(paths);
        let mut pair_lists = Vec::with_capacity(paths);
        for j in 0..paths {
            let src_types = self.config.source_types(j);
            let tgt_types = self.config.target_types(j);
            let hs = build_matrix(tape, inst.source[j], &src_types, &tables, &proj_t)?;
            let ht = build_matrix(tape, inst.target[j], &tgt_types, &tables, &proj_t)?;
            let pairs = pairs_for(
                self.config.pairing,
                inst.source[j].walks.len(),
                inst.target[j].walks.len(),
            )?;
            let interacted =
                tape.interact(&hs, &ht, &pairs, self.config.conv_backend.to_backend())?;
            let mask = element_mask(inst.source[j], inst.target[j], &pairs);
            let shape = interacted.shape();
            let elements = interacted.reshape(&[shape[0] * shape[1], shape[2]])?;
            let node = node_attention(&elements, &mask, &node_vars, self.config.node_temperature)?;
            node_outs.push(node);
            element_masks.push(mask);
            pair_lists.push(pairs);
        }

        let summaries: Vec<PathSummary<'_>> = node_outs
            .iter()
            .zip(&element_masks)
            .map(|(node, mask)| PathSummary {
                z: &node.z,
                mask,
                pooled: &node.pooled,
            })
            .collect();
        let fused = path_attention(tape, &summaries, &path_vars, self.config.path_temperature)?;

        let mut x = fused.fused.clone();
        for &(w, b) in &layout.mlp[..layout.mlp.len() - 1] {
            x = x
                .matmul(&leaves[w].transpose()?)?
                .add_row_broadcast(&leaves[b])?
                .relu();
        }
        let (w, b) = layout.mlp[layout.mlp.len() - 1];
        let logits = x
            .matmul(&leaves[w].transpose()?)?
            .add_row_broadcast(&leaves[b])?;
        let pred = logits.sigmoid().reshape(&[1])?;

        Ok(ForwardTrace {
            pred,
            beta: fused.beta,
            fused: fused.fused,
            node: node_outs,
            element_masks,
            pairs: pair_lists,
            leaves,
        })
    }

    /// Forward plus binary cross-entropy against `label`.
    pub fn loss(
        &self,
        tape: &Tape,
        inst: &InstancePaths<'_>,
        label: f64,
    ) -> Result<(ForwardTrace, Var), ModelError> {
        let trace = self.forward(tape, inst)?;
        let loss = trace.pred.bce(label)?;
        Ok((trace, loss))
    }

    /// Predicted probability on a fresh tape.
    pub fn predict(&self, inst: &InstancePaths<'_>) -> Result<f64, ModelError> {
        let tape = Tape::new();
        let trace = self.forward(&tape, inst)?;
        Ok(trace.pred.value().item()?)
    }
}
