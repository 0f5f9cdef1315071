//! Typed multigraph for heterogeneous information networks.
//!
//! A network is described by a [`NetworkSchema`] (node types plus the
//! relations that may connect them) and populated through a
//! [`HinGraphBuilder`]. Finalizing the builder sorts and deduplicates every
//! adjacency list, so parallel edges in the input collapse to one and
//! neighbor enumeration is deterministic. All relations are undirected:
//! adding an edge makes each endpoint visible from the other.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index of a node type within its [`NetworkSchema`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TypeId(pub u8);

/// A node, addressed by its type and its dense index within that type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId {
    pub ty: TypeId,
    pub idx: u32,
}

impl NodeId {
    pub fn new(ty: TypeId, idx: u32) -> Self {
        NodeId { ty, idx }
    }
}

/// One node type: a single-character symbol (used in metapath strings) and a
/// human-readable name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeTypeDef {
    pub symbol: char,
    pub name: String,
}

/// An undirected relation between two node types. `src`/`dst` only fix which
/// column is which in input files; traversal works in both directions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationDef {
    pub name: String,
    pub src: TypeId,
    pub dst: TypeId,
}

/// Errors from schema construction and metapath parsing.
#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("schema needs at least one node type")]
    NoTypes,
    #[error("node type symbol {0:?} is declared twice")]
    DuplicateSymbol(char),
    #[error("relation name {0:?} is declared twice")]
    DuplicateRelation(String),
    #[error("relation {relation:?} references unknown type symbol {symbol:?}")]
    UnknownTypeSymbol { relation: String, symbol: char },
    #[error("schema supports at most 255 node types, got {0}")]
    TooManyTypes(usize),
    #[error("metapath {path:?} is shorter than two steps")]
    MetapathTooShort { path: String },
    #[error("metapath {path:?} uses unknown type symbol {symbol:?}")]
    MetapathUnknownSymbol { path: String, symbol: char },
    #[error(
        "metapath {path:?} steps from {from:?} to {to:?} at position {position}, \
         but no relation connects those types"
    )]
    MetapathNoRelation {
        path: String,
        from: char,
        to: char,
        position: usize,
    },
}

/// The node types and relations a graph may contain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSchema {
    node_types: Vec<NodeTypeDef>,
    relations: Vec<RelationDef>,
}

impl NetworkSchema {
    /// Builds a schema, checking that symbols and relation names are unique
    /// and every relation endpoint names a declared type.
    pub fn new(
        node_types: Vec<NodeTypeDef>,
        relations: Vec<(String, char, char)>,
    ) -> Result<Self, SchemaError> {
        if node_types.is_empty() {
            return Err(SchemaError::NoTypes);
        }
        if node_types.len() > u8::MAX as usize {
            return Err(SchemaError::TooManyTypes(node_types.len()));
        }
        for (i, def) in node_types.iter().enumerate() {
            if node_types[..i].iter().any(|d| d.symbol == def.symbol) {
                return Err(SchemaError::DuplicateSymbol(def.symbol));
            }
        }
        let mut schema = NetworkSchema {
            node_types,
            relations: Vec::new(),
        };
        for (name, src, dst) in relations {
            if schema.relations.iter().any(|r| r.name == name) {
                return Err(SchemaError::DuplicateRelation(name));
            }
            let lookup = |symbol: char| {
                schema
                    .type_by_symbol(symbol)
                    .ok_or_else(|| SchemaError::UnknownTypeSymbol {
                        relation: name.clone(),
                        symbol,
                    })
            };
            let src = lookup(src)?;
            let dst = lookup(dst)?;
            schema.relations.push(RelationDef { name, src, dst });
        }
        Ok(schema)
    }

    pub fn node_types(&self) -> &[NodeTypeDef] {
        &self.node_types
    }

    pub fn relations(&self) -> &[RelationDef] {
        &self.relations
    }

    pub fn type_count(&self) -> usize {
        self.node_types.len()
    }

    pub fn type_by_symbol(&self, symbol: char) -> Option<TypeId> {
        self.node_types
            .iter()
            .position(|d| d.symbol == symbol)
            .map(|i| TypeId(i as u8))
    }

    pub fn relation_by_name(&self, name: &str) -> Option<usize> {
        self.relations.iter().position(|r| r.name == name)
    }

    pub fn symbol(&self, ty: TypeId) -> char {
        self.node_types[ty.0 as usize].symbol
    }

    /// Relations that connect `a` and `b` in either orientation.
    pub fn relations_between(&self, a: TypeId, b: TypeId) -> Vec<usize> {
        self.relations
            .iter()
            .enumerate()
            .filter(|(_, r)| (r.src == a && r.dst == b) || (r.src == b && r.dst == a))
            .map(|(i, _)| i)
            .collect()
    }
}

/// A typed node sequence such as `UMUM`, validated against a schema: every
/// consecutive pair of types must be connected by at least one relation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metapath {
    label: String,
    types: Vec<TypeId>,
}

impl Metapath {
    pub fn parse(path: &str, schema: &NetworkSchema) -> Result<Self, SchemaError> {
        let symbols: Vec<char> = path.chars().collect();
        if symbols.len() < 2 {
            return Err(SchemaError::MetapathTooShort {
                path: path.to_string(),
            });
        }
        let mut types = Vec::with_capacity(symbols.len());
        for &symbol in &symbols {
            let ty = schema.type_by_symbol(symbol).ok_or_else(|| {
                SchemaError::MetapathUnknownSymbol {
                    path: path.to_string(),
                    symbol,
                }
            })?;
            types.push(ty);
        }
        for (pos, pair) in types.windows(2).enumerate() {
            if schema.relations_between(pair[0], pair[1]).is_empty() {
                return Err(SchemaError::MetapathNoRelation {
                    path: path.to_string(),
                    from: symbols[pos],
                    to: symbols[pos + 1],
                    position: pos,
                });
            }
        }
        Ok(Metapath {
            label: path.to_string(),
            types,
        })
    }

    /// The same path walked from the far end, e.g. `UMGM` becomes `MGMU`.
    /// Every consecutive pair stays connected, so the result needs no
    /// revalidation.
    pub fn reversed(&self) -> Metapath {
        Metapath {
            label: self.label.chars().rev().collect(),
            types: self.types.iter().rev().copied().collect(),
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn types(&self) -> &[TypeId] {
        &self.types
    }

    /// Number of steps, counting the anchor.
    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }
}

/// Errors from graph population.
#[derive(Debug, Error)]
pub enum GraphError {
    #[error("relation index {0} is out of range")]
    UnknownRelation(usize),
    #[error("type index {0} is out of range")]
    UnknownType(u8),
    #[error(
        "relation {relation:?} expects a {expected:?} endpoint, \
         got node index {index} of type {got:?}"
    )]
    EndpointOutOfRange {
        relation: String,
        expected: String,
        got: String,
        index: u32,
    },
}

/// Per-relation adjacency. `forward[i]` lists dst indices adjacent to src
/// node `i`; `reverse[j]` lists src indices adjacent to dst node `j`. For a
/// self-relation (src type == dst type) both views are kept in `forward`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RelationAdjacency {
    forward: Vec<Vec<u32>>,
    reverse: Vec<Vec<u32>>,
    edge_count: u64,
}

/// Accumulates nodes and edges, then [`HinGraphBuilder::finalize`]s into an
/// immutable [`HinGraph`].
#[derive(Debug)]
pub struct HinGraphBuilder {
    schema: NetworkSchema,
    counts: Vec<u32>,
    edges: Vec<Vec<(u32, u32)>>,
}

impl HinGraphBuilder {
    pub fn new(schema: NetworkSchema) -> Self {
        let types = schema.type_count();
        let relations = schema.relations().len();
        HinGraphBuilder {
            schema,
            counts: vec![0; types],
            edges: vec![Vec::new(); relations],
        }
    }

    pub fn schema(&self) -> &NetworkSchema {
        &self.schema
    }

    /// Mints the next dense index for a node of type `ty`.
    pub fn add_node(&mut self, ty: TypeId) -> Result<u32, GraphError> {
        let slot = self
            .counts
            .get_mut(ty.0 as usize)
            .ok_or(GraphError::UnknownType(ty.0))?;
        let idx = *slot;
        *slot += 1;
        Ok(idx)
    }

    pub fn node_count(&self, ty: TypeId) -> u32 {
        self.counts.get(ty.0 as usize).copied().unwrap_or(0)
    }

    /// Records an undirected edge under relation `relation`. Endpoints are
    /// indices into the relation's src and dst types respectively and must
    /// already have been minted by [`HinGraphBuilder::add_node`].
    pub fn add_edge(&mut self, relation: usize, src: u32, dst: u32) -> Result<(), GraphError> {
        let def = self
            .schema
            .relations()
            .get(relation)
            .ok_or(GraphError::UnknownRelation(relation))?;
        let check = |ty: TypeId, index: u32, role: TypeId| -> Result<(), GraphError> {
            if index >= self.counts[ty.0 as usize] {
                return Err(GraphError::EndpointOutOfRange {
                    relation: def.name.clone(),
                    expected: self.schema.node_types()[role.0 as usize].name.clone(),
                    got: self.schema.node_types()[ty.0 as usize].name.clone(),
                    index,
                });
            }
            Ok(())
        };
        check(def.src, src, def.src)?;
        check(def.dst, dst, def.dst)?;
        self.edges[relation].push((src, dst));
        Ok(())
    }

    /// Sorts and deduplicates adjacency, producing the immutable graph.
    pub fn finalize(self) -> HinGraph {
        let mut adjacency = Vec::with_capacity(self.edges.len());
        for (rel, pairs) in self.edges.into_iter().enumerate() {
            let def = &self.schema.relations()[rel];
            let src_n = self.counts[def.src.0 as usize] as usize;
            let dst_n = self.counts[def.dst.0 as usize] as usize;
            let self_relation = def.src == def.dst;
            let mut forward: Vec<Vec<u32>> = vec![Vec::new(); src_n];
            let mut reverse: Vec<Vec<u32>> = if self_relation {
                Vec::new()
            } else {
                vec![Vec::new(); dst_n]
            };
            for (s, d) in pairs {
                if self_relation {
                    forward[s as usize].push(d);
                    if s != d {
                        forward[d as usize].push(s);
                    }
                } else {
                    forward[s as usize].push(d);
                    reverse[d as usize].push(s);
                }
            }
            let mut edge_count = 0u64;
            for list in forward.iter_mut().chain(reverse.iter_mut()) {
                list.sort_unstable();
                list.dedup();
            }
            // Count undirected edges once after deduplication.
            for (s, list) in forward.iter().enumerate() {
                if self_relation {
                    edge_count += list.iter().filter(|&&d| d as usize >= s).count() as u64;
                } else {
                    edge_count += list.len() as u64;
                }
            }
            adjacency.push(RelationAdjacency {
                forward,
                reverse,
                edge_count,
            });
        }
        HinGraph {
            schema: self.schema,
            counts: self.counts,
            adjacency,
        }
    }
}

/// An immutable heterogeneous graph with sorted, deduplicated adjacency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HinGraph {
    schema: NetworkSchema,
    counts: Vec<u32>,
    adjacency: Vec<RelationAdjacency>,
}

impl HinGraph {
    pub fn schema(&self) -> &NetworkSchema {
        &self.schema
    }

    pub fn node_count(&self, ty: TypeId) -> u32 {
        self.counts.get(ty.0 as usize).copied().unwrap_or(0)
    }

    pub fn type_counts(&self) -> &[u32] {
        &self.counts
    }

    /// Distinct undirected edges recorded under one relation.
    pub fn edge_count(&self, relation: usize) -> u64 {
        self.adjacency.get(relation).map_or(0, |a| a.edge_count)
    }

    /// Neighbors of `node` that have type `ty`, merged over every relation
    /// connecting the two types (in either orientation), sorted and distinct.
    pub fn neighbors(&self, node: NodeId, ty: TypeId) -> Vec<u32> {
        let mut merged: Vec<u32> = Vec::new();
        for rel in self.schema.relations_between(node.ty, ty) {
            let def = &self.schema.relations()[rel];
            let adj = &self.adjacency[rel];
            let list: &[u32] = if def.src == def.dst {
                // Self-relation: both directions already merged in forward.
                &adj.forward[node.idx as usize]
            } else if def.src == node.ty {
                &adj.forward[node.idx as usize]
            } else {
                &adj.reverse[node.idx as usize]
            };
            merged.extend_from_slice(list);
        }
        merged.sort_unstable();
        merged.dedup();
        merged
    }

    /// Number of distinct neighbors of `node` of type `ty`.
    pub fn degree(&self, node: NodeId, ty: TypeId) -> usize {
        self.neighbors(node, ty).len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn movie_schema() -> NetworkSchema {
        NetworkSchema::new(
            vec![
                NodeTypeDef {
                    symbol: 'U',
                    name: "user".into(),
                },
                NodeTypeDef {
                    symbol: 'M',
                    name: "movie".into(),
                },
                NodeTypeDef {
                    symbol: 'G',
                    name: "genre".into(),
                },
            ],
            vec![
                ("rates".into(), 'U', 'M'),
                ("similar".into(), 'M', 'M'),
                ("has_genre".into(), 'M', 'G'),
            ],
        )
        .unwrap()
    }

    #[test]
    fn schema_rejects_duplicates_and_unknown_symbols() {
        let dup = NetworkSchema::new(
            vec![
                NodeTypeDef {
                    symbol: 'U',
                    name: "a".into(),
                },
                NodeTypeDef {
                    symbol: 'U',
                    name: "b".into(),
                },
            ],
            vec![],
        );
        assert!(matches!(dup, Err(SchemaError::DuplicateSymbol('U'))));

        let unknown = NetworkSchema::new(
            vec![NodeTypeDef {
                symbol: 'U',
                name: "user".into(),
            }],
            vec![("rates".into(), 'U', 'M')],
        );
        assert!(matches!(
            unknown,
            Err(SchemaError::UnknownTypeSymbol { symbol: 'M', .. })
        ));
    }

    #[test]
    fn metapath_validates_consecutive_relations() {
        let schema = movie_schema();
        let ok = Metapath::parse("UMGM", &schema).unwrap();
        assert_eq!(ok.label(), "UMGM");
        assert_eq!(ok.len(), 4);

        // U and G share no relation.
        let err = Metapath::parse("UGM", &schema).unwrap_err();
        assert!(matches!(
            err,
            SchemaError::MetapathNoRelation {
                from: 'U',
                to: 'G',
                position: 0,
                ..
            }
        ));

        assert!(matches!(
            Metapath::parse("U", &schema),
            Err(SchemaError::MetapathTooShort { .. })
        ));
    }

    #[test]
    fn metapath_reversal_flips_label_and_types() {
        let schema = movie_schema();
        let path = Metapath::parse("UMGM", &schema).unwrap();
        let rev = path.reversed();
        assert_eq!(rev.label(), "MGMU");
        assert_eq!(
            rev.types().iter().rev().copied().collect::<Vec<_>>(),
            path.types()
        );
    }

    #[test]
    fn parallel_edges_collapse() {
        let schema = movie_schema();
        let mut b = HinGraphBuilder::new(schema);
        let u = TypeId(0);
        let m = TypeId(1);
        let u0 = b.add_node(u).unwrap();
        let m0 = b.add_node(m).unwrap();
        let m1 = b.add_node(m).unwrap();
        b.add_edge(0, u0, m0).unwrap();
        b.add_edge(0, u0, m0).unwrap();
        b.add_edge(0, u0, m1).unwrap();
        let g = b.finalize();
        assert_eq!(g.neighbors(NodeId::new(u, u0), m), vec![m0, m1]);
        assert_eq!(g.edge_count(0), 2);
    }

    #[test]
    fn neighbors_work_in_both_directions() {
        let schema = movie_schema();
        let mut b = HinGraphBuilder::new(schema);
        let u = TypeId(0);
        let m = TypeId(1);
        let u0 = b.add_node(u).unwrap();
        let u1 = b.add_node(u).unwrap();
        let m0 = b.add_node(m).unwrap();
        b.add_edge(0, u0, m0).unwrap();
        b.add_edge(0, u1, m0).unwrap();
        let g = b.finalize();
        // Movie m0 sees both raters through the reverse direction.
        assert_eq!(g.neighbors(NodeId::new(m, m0), u), vec![u0, u1]);
        assert_eq!(g.degree(NodeId::new(m, m0), u), 2);
    }

    #[test]
    fn self_relation_is_symmetric() {
        let schema = movie_schema();
        let mut b = HinGraphBuilder::new(schema);
        let m = TypeId(1);
        let m0 = b.add_node(m).unwrap();
        let m1 = b.add_node(m).unwrap();
        let m2 = b.add_node(m).unwrap();
        b.add_edge(1, m0, m1).unwrap();
        b.add_edge(1, m2, m0).unwrap();
        let g = b.finalize();
        assert_eq!(g.neighbors(NodeId::new(m, m0), m), vec![m1, m2]);
        assert_eq!(g.neighbors(NodeId::new(m, m1), m), vec![m0]);
        assert_eq!(g.edge_count(1), 2);
    }

    #[test]
    fn edge_endpoints_are_type_checked() {
        let schema = movie_schema();
        let mut b = HinGraphBuilder::new(schema);
        let u0 = b.add_node(TypeId(0)).unwrap();
        // No movie nodes exist yet, so dst index 0 is out of range.
        let err = b.add_edge(0, u0, 0).unwrap_err();
        assert!(matches!(err, GraphError::EndpointOutOfRange { .. }));
    }

    #[test]
    fn neighbors_merge_multiple_relations() {
        let schema = NetworkSchema::new(
            vec![
                NodeTypeDef {
                    symbol: 'A',
                    name: "a".into(),
                },
                NodeTypeDef {
                    symbol: 'B',
                    name: "b".into(),
                },
            ],
            vec![("r1".into(), 'A', 'B'), ("r2".into(), 'B', 'A')],
        )
        .unwrap();
        let mut b = HinGraphBuilder::new(schema);
        let a = TypeId(0);
        let bt = TypeId(1);
        let a0 = b.add_node(a).unwrap();
        let b0 = b.add_node(bt).unwrap();
        let b1 = b.add_node(bt).unwrap();
        b.add_edge(0, a0, b0).unwrap();
        // r2 is oriented B -> A but still connects the same node pair.
        b.add_edge(1, b1, a0).unwrap();
        let g = b.finalize();
        assert_eq!(g.neighbors(NodeId::new(a, a0), bt), vec![b0, b1]);
    }
}
