//! Metapath-guided neighborhood sampling.
//!
//! A walk follows its metapath's type sequence, choosing uniformly among the
//! current node's neighbors of the next type. When no such neighbor exists
//! the walk stops and the remaining slots are padded: the padded positions
//! carry `mask = false` and contribute nothing downstream.
//!
//! Every walk owns its RNG, seeded from the run seed, the anchor, the
//! metapath label, and the walk index. This makes each walk reproducible in
//! isolation: samples do not depend on the order anchors are visited, so
//! parallel and sequential preparation agree bit for bit.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hin::{HinGraph, Metapath, NodeId, TypeId};
use crate::ingest::Instance;

/// Errors from neighborhood sampling.
#[derive(Debug, Error)]
pub enum SampleError {
    #[error("anchor type {anchor:?} does not match the metapath start {start:?}")]
    AnchorTypeMismatch { anchor: u8, start: u8 },
    #[error("metapath {path:?} has no sample for anchor index {anchor}")]
    MissingSample { path: String, anchor: u32 },
    #[error("metapath index {index} is out of range ({count} metapaths)")]
    MetapathOutOfRange { index: usize, count: usize },
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over a byte stream; the basis for all derived seeds.
fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut hash = FNV_OFFSET;
    for b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Derives an independent seed for a named purpose (e.g. "split", "init").
pub fn mix_seed(seed: u64, tag: &str) -> u64 {
    fnv1a(
        seed.to_le_bytes()
            .into_iter()
            .chain(tag.bytes()),
    )
}

/// Derives a seed for a named purpose plus a counter (e.g. per-epoch).
pub fn mix_seed_indexed(seed: u64, tag: &str, index: u64) -> u64 {
    fnv1a(
        seed.to_le_bytes()
            .into_iter()
            .chain(tag.bytes())
            .chain(index.to_le_bytes()),
    )
}

/// Seed of one walk, determined by run seed, anchor, metapath, and walk
/// index alone.
pub fn walk_seed(run_seed: u64, anchor: NodeId, metapath_label: &str, walk: u32) -> u64 {
    fnv1a(
        run_seed
            .to_le_bytes()
            .into_iter()
            .chain([anchor.ty.0])
            .chain(anchor.idx.to_le_bytes())
            .chain(metapath_label.bytes())
            .chain(walk.to_le_bytes()),
    )
}

/// One walk: `nodes[i]` is a node index of the metapath's `i`-th type, valid
/// only where `mask[i]` is true. Padded slots store index 0 with mask false.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Walk {
    pub nodes: Vec<u32>,
    pub mask: Vec<bool>,
}

impl Walk {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of real (unpadded) steps.
    pub fn live_steps(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// All walks drawn for one (anchor, metapath) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborhoodSample {
    pub walks: Vec<Walk>,
}

impl NeighborhoodSample {
    /// Per-walk validity masks, as used by the interaction step.
    pub fn masks(&self) -> Vec<&[bool]> {
        self.walks.iter().map(|w| w.mask.as_slice()).collect()
    }

    pub fn steps(&self) -> usize {
        self.walks.first().map_or(0, Walk::len)
    }
}

/// Draws one walk from `anchor` along `types`, using `rng` for every
/// neighbor choice. `types[0]` must be the anchor's type.
pub fn sample_walk(
    graph: &HinGraph,
    anchor: NodeId,
    types: &[TypeId],
    rng: &mut impl Rng,
) -> Result<Walk, SampleError> {
    if types[0] != anchor.ty {
        return Err(SampleError::AnchorTypeMismatch {
            anchor: anchor.ty.0,
            start: types[0].0,
        });
    }
    let steps = types.len();
    let mut nodes = vec![0u32; steps];
    let mut mask = vec![false; steps];
    nodes[0] = anchor.idx;
    mask[0] = true;
    let mut current = anchor;
    for i in 1..steps {
        let candidates = graph.neighbors(current, types[i]);
        if candidates.is_empty() {
            break;
        }
        let next = candidates[rng.gen_range(0..candidates.len())];
        nodes[i] = next;
        mask[i] = true;
        current = NodeId::new(types[i], next);
    }
    Ok(Walk { nodes, mask })
}

/// Draws `walks` independent walks for `(anchor, metapath)`, each from its
/// own [`walk_seed`]-derived RNG.
pub fn sample_neighborhood(
    graph: &HinGraph,
    anchor: NodeId,
    metapath: &Metapath,
    walks: usize,
    run_seed: u64,
) -> Result<NeighborhoodSample, SampleError> {
    let mut out = Vec::with_capacity(walks);
    for w in 0..walks {
        let seed = walk_seed(run_seed, anchor, metapath.label(), w as u32);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        out.push(sample_walk(graph, anchor, metapath.types(), &mut rng)?);
    }
    Ok(NeighborhoodSample { walks: out })
}

/// Prepared neighborhoods for every anchor that any instance references.
///
/// Source neighborhoods start at users and follow each metapath forward;
/// target neighborhoods start at items and follow the reversed metapath.
/// Maps are keyed by anchor index and ordered, so serialization is
/// deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleStore {
    pub metapaths: Vec<Metapath>,
    pub reversed: Vec<Metapath>,
    pub walks_per_anchor: usize,
    source: Vec<BTreeMap<u32, NeighborhoodSample>>,
    target: Vec<BTreeMap<u32, NeighborhoodSample>>,
}

impl SampleStore {
    pub fn source_sample(
        &self,
        metapath: usize,
        user: u32,
    ) -> Result<&NeighborhoodSample, SampleError> {
        let map = self.source.get(metapath).ok_or(SampleError::MetapathOutOfRange {
            index: metapath,
            count: self.source.len(),
        })?;
        map.get(&user).ok_or_else(|| SampleError::MissingSample {
            path: self.metapaths[metapath].label().to_string(),
            anchor: user,
        })
    }

    pub fn target_sample(
        &self,
        metapath: usize,
        item: u32,
    ) -> Result<&NeighborhoodSample, SampleError> {
        let map = self.target.get(metapath).ok_or(SampleError::MetapathOutOfRange {
            index: metapath,
            count: self.target.len(),
        })?;
        map.get(&item).ok_or_else(|| SampleError::MissingSample {
            path: self.reversed[metapath].label().to_string(),
            anchor: item,
        })
    }

    /// Iterates (metapath index, anchor index, sample) over one side;
    /// `source` selects user-side samples, otherwise item-side.
    pub fn iter_side(
        &self,
        source: bool,
    ) -> impl Iterator<Item = (usize, u32, &NeighborhoodSample)> {
        let side = if source { &self.source } else { &self.target };
        side.iter()
            .enumerate()
            .flat_map(|(mp, map)| map.iter().map(move |(&idx, s)| (mp, idx, s)))
    }
}

/// Collects the distinct users and items referenced by `instances`.
pub fn anchor_sets(instances: &[&[Instance]]) -> (BTreeSet<u32>, BTreeSet<u32>) {
    let mut users = BTreeSet::new();
    let mut items = BTreeSet::new();
    for slice in instances {
        for inst in *slice {
            users.insert(inst.user);
            items.insert(inst.item);
        }
    }
    (users, items)
}

/// Samples neighborhoods for every anchor in `users`/`items` under every
/// metapath. Each walk's seed is independent of iteration order.
pub fn prepare_samples(
    graph: &HinGraph,
    metapaths: &[Metapath],
    user_type: TypeId,
    item_type: TypeId,
    users: &BTreeSet<u32>,
    items: &BTreeSet<u32>,
    walks: usize,
    run_seed: u64,
) -> Result<SampleStore, SampleError> {
    let reversed: Vec<Metapath> = metapaths.iter().map(Metapath::reversed).collect();
    let mut source = Vec::with_capacity(metapaths.len());
    let mut target = Vec::with_capacity(metapaths.len());
    for (mp, rev) in metapaths.iter().zip(&reversed) {
        let mut src_map = BTreeMap::new();
        for &u in users {
            let anchor = NodeId::new(user_type, u);
            src_map.insert(u, sample_neighborhood(graph, anchor, mp, walks, run_seed)?);
        }
        source.push(src_map);
        let mut tgt_map = BTreeMap::new();
        for &i in items {
            let anchor = NodeId::new(item_type, i);
            tgt_map.insert(i, sample_neighborhood(graph, anchor, rev, walks, run_seed)?);
        }
        target.push(tgt_map);
    }
    Ok(SampleStore {
        metapaths: metapaths.to_vec(),
        reversed,
        walks_per_anchor: walks,
        source,
        target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hin::{HinGraphBuilder, NetworkSchema, NodeTypeDef};

    /// U-M bipartite graph: user 0 rates movies 0..deg, movie 0 is rated by
    /// users 0 and 1.
    fn bipartite(deg: u32) -> HinGraph {
        let schema = NetworkSchema::new(
            vec![
                NodeTypeDef {
                    symbol: 'U',
                    name: "user".into(),
                },
                NodeTypeDef {
                    symbol: 'M',
                    name: "movie".into(),
                },
            ],
            vec![("rates".into(), 'U', 'M')],
        )
        .unwrap();
        let mut b = HinGraphBuilder::new(schema);
        let u0 = b.add_node(TypeId(0)).unwrap();
        let u1 = b.add_node(TypeId(0)).unwrap();
        for m in 0..deg {
            let mi = b.add_node(TypeId(1)).unwrap();
            b.add_edge(0, u0, mi).unwrap();
            if m == 0 {
                b.add_edge(0, u1, mi).unwrap();
            }
        }
        b.finalize()
    }

    fn um_path(graph: &HinGraph) -> Metapath {
        Metapath::parse("UMUM", graph.schema()).unwrap()
    }

    #[test]
    fn walk_starts_at_anchor_and_respects_types() {
        let g = bipartite(3);
        let mp = um_path(&g);
        let sample =
            sample_neighborhood(&g, NodeId::new(TypeId(0), 0), &mp, 10, 7).unwrap();
        for walk in &sample.walks {
            assert_eq!(walk.len(), 4);
            assert_eq!(walk.nodes[0], 0);
            assert!(walk.mask[0]);
            // Step 1 must be one of user 0's movies.
            if walk.mask[1] {
                assert!(walk.nodes[1] < 3);
            }
        }
    }

    #[test]
    fn dead_end_pads_remaining_steps() {
        // User 1 only rated movie 0; movie 0's raters are users {0, 1}; if
        // the walk reaches user 0 it can continue, but a lone movie with no
        // second rater stops it. Build a graph where movie 1 has one rater.
        let g = bipartite(2);
        let mp = um_path(&g);
        // Anchor at user 1: the only first step is movie 0.
        let sample =
            sample_neighborhood(&g, NodeId::new(TypeId(0), 1), &mp, 50, 3).unwrap();
        for walk in &sample.walks {
            assert_eq!(walk.nodes[1], 0, "user 1 rated only movie 0");
            // Masks are monotone: once padding starts it never stops.
            let mut seen_pad = false;
            for &m in &walk.mask {
                if seen_pad {
                    assert!(!m);
                }
                seen_pad |= !m;
            }
            // Padded slots store index 0.
            for (i, &m) in walk.mask.iter().enumerate() {
                if !m {
                    assert_eq!(walk.nodes[i], 0);
                }
            }
        }
    }

    #[test]
    fn isolated_anchor_is_fully_padded_after_slot_zero() {
        let schema = NetworkSchema::new(
            vec![
                NodeTypeDef {
                    symbol: 'U',
                    name: "user".into(),
                },
                NodeTypeDef {
                    symbol: 'M',
                    name: "movie".into(),
                },
            ],
            vec![("rates".into(), 'U', 'M')],
        )
        .unwrap();
        let mut b = HinGraphBuilder::new(schema);
        b.add_node(TypeId(0)).unwrap();
        b.add_node(TypeId(1)).unwrap();
        let g = b.finalize();
        let mp = Metapath::parse("UM", g.schema()).unwrap();
        let s = sample_neighborhood(&g, NodeId::new(TypeId(0), 0), &mp, 3, 1).unwrap();
        for walk in &s.walks {
            assert_eq!(walk.mask, vec![true, false]);
            assert_eq!(walk.live_steps(), 1);
        }
    }

    #[test]
    fn anchor_type_is_checked() {
        let g = bipartite(2);
        let mp = um_path(&g);
        let err = sample_neighborhood(&g, NodeId::new(TypeId(1), 0), &mp, 1, 0).unwrap_err();
        assert!(matches!(err, SampleError::AnchorTypeMismatch { .. }));
    }

    #[test]
    fn walks_are_reproducible_and_distinct_per_index() {
        let g = bipartite(10);
        let mp = um_path(&g);
        let anchor = NodeId::new(TypeId(0), 0);
        let a = sample_neighborhood(&g, anchor, &mp, 20, 99).unwrap();
        let b = sample_neighborhood(&g, anchor, &mp, 20, 99).unwrap();
        assert_eq!(a, b);
        // Different run seed changes the draw.
        let c = sample_neighborhood(&g, anchor, &mp, 20, 100).unwrap();
        assert_ne!(a, c);
        // Walks with different indices are not all identical.
        assert!(a.walks.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn walk_seed_separates_every_input() {
        let anchor = NodeId::new(TypeId(0), 5);
        let base = walk_seed(1, anchor, "UMUM", 0);
        assert_ne!(base, walk_seed(2, anchor, "UMUM", 0));
        assert_ne!(base, walk_seed(1, NodeId::new(TypeId(0), 6), "UMUM", 0));
        assert_ne!(base, walk_seed(1, NodeId::new(TypeId(1), 5), "UMUM", 0));
        assert_ne!(base, walk_seed(1, anchor, "UMMM", 0));
        assert_ne!(base, walk_seed(1, anchor, "UMUM", 1));
    }

    #[test]
    fn store_lookup_round_trips() {
        let g = bipartite(4);
        let mp = vec![um_path(&g)];
        let users: BTreeSet<u32> = [0, 1].into();
        let items: BTreeSet<u32> = [0, 2].into();
        let store =
            prepare_samples(&g, &mp, TypeId(0), TypeId(1), &users, &items, 5, 11).unwrap();
        assert_eq!(store.walks_per_anchor, 5);
        assert_eq!(store.reversed[0].label(), "MUMU");
        let s = store.source_sample(0, 1).unwrap();
        assert_eq!(s.walks.len(), 5);
        let t = store.target_sample(0, 2).unwrap();
        assert_eq!(t.steps(), 4);
        assert!(matches!(
            store.source_sample(0, 3),
            Err(SampleError::MissingSample { .. })
        ));
        assert!(matches!(
            store.source_sample(1, 0),
            Err(SampleError::MetapathOutOfRange { .. })
        ));
    }

    #[test]
    fn mix_seed_distinguishes_tags_and_indices() {
        assert_ne!(mix_seed(1, "split"), mix_seed(1, "init"));
        assert_ne!(mix_seed(1, "split"), mix_seed(2, "split"));
        assert_ne!(mix_seed_indexed(1, "batch", 0), mix_seed_indexed(1, "batch", 1));
    }
}
