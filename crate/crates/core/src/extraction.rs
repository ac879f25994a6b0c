//! Boundary-prompted token-set extraction, proximity augmentation and degree
//! sequences.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::graph::{GraphIndexRTree, SpatialVirtualIndex, TokenGraph, TokenRef};
use crate::prompt::BoundaryPrompt;
use crate::rtree::{Entry, RTree, DEFAULT_BRANCHING};

/// An edge of the token graph, oriented as stored in its relation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SubEdge {
    pub relation: u16,
    pub src: TokenRef,
    pub dst: TokenRef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSubgraph {
    pub spatial_tokens: Vec<TokenRef>,
    pub virtual_tokens: Vec<TokenRef>,
    /// Sorted.
    pub induced_edges: Vec<SubEdge>,
    /// Sorted pairs with `a < b`.
    pub augmented_edges: Vec<(TokenRef, TokenRef)>,
    pub center: Point,
}

impl RegionSubgraph {
    fn assemble(graph: &TokenGraph, spatial_tokens: Vec<TokenRef>, virtual_tokens: Vec<TokenRef>, mut induced_edges: Vec<SubEdge>) -> Self {
        induced_edges.sort_unstable();
        let (mut sx, mut sy) = (0.0, 0.0);
        for &t in &spatial_tokens {
            let p = graph.coord(t).expect("spatial token");
            sx += p.x;
            sy += p.y;
        }
        let n = spatial_tokens.len().max(1) as f64;
        Self {
            spatial_tokens,
            virtual_tokens,
            induced_edges,
            augmented_edges: Vec::new(),
            center: Point::new(sx / n, sy / n),
        }
    }

    pub fn token_count(&self) -> usize {
        self.spatial_tokens.len() + self.virtual_tokens.len()
    }

    /// Spatial tokens followed by virtual tokens; the node order used by the encoder.
    pub fn nodes(&self) -> impl Iterator<Item = TokenRef> + '_ {
        self.spatial_tokens.iter().chain(&self.virtual_tokens).copied()
    }

    /// Position of `t` in [`Self::nodes`].
    pub fn node_index(&self, t: TokenRef) -> Option<usize> {
        if let Ok(i) = self.spatial_tokens.binary_search(&t) {
            return Some(i);
        }
        self.virtual_tokens
            .binary_search(&t)
            .ok()
            .map(|i| i + self.spatial_tokens.len())
    }

    pub fn token_counts(&self, n_types: usize) -> Vec<usize> {
        let mut counts = vec![0; n_types];
        for t in self.nodes() {
            counts[t.type_index as usize] += 1;
        }
        counts
    }

    /// Add proximity edges: each spatial token links to its `k_aug` nearest
    /// subgraph-internal spatial tokens lying within `d_max`. Replaces any
    /// previous augmentation.
    pub fn augment(&mut self, graph: &TokenGraph, k_aug: usize, d_max: f64) {
        self.augmented_edges.clear();
        if k_aug == 0 || self.spatial_tokens.len() < 2 {
            return;
        }
        let coords: Vec<Point> = self.spatial_tokens.iter().map(|&t| graph.coord(t).expect("spatial")).collect();
        let entries = coords
            .iter()
            .enumerate()
            .map(|(i, &p)| Entry { point: p, item: i as u32 })
            .collect();
        let local = RTree::bulk_load(entries, DEFAULT_BRANCHING);
        let mut edges = Vec::new();
        for (i, &p) in coords.iter().enumerate() {
            let found = local.nearest_k(p, k_aug + 1);
            for (d, e) in found.into_iter().filter(|(_, e)| e.item as usize != i).take(k_aug) {
                if d <= d_max {
                    let (a, b) = (self.spatial_tokens[i], self.spatial_tokens[e.item as usize]);
                    edges.push((a.min(b), a.max(b)));
                }
            }
        }
        edges.sort_unstable();
        edges.dedup();
        self.augmented_edges = edges;
    }

    /// Per type, the degrees (induced plus augmented edges) of the subgraph's
    /// tokens of that type, sorted descending.
    pub fn degree_sequences(&self, n_types: usize) -> Vec<Vec<u32>> {
        let mut degree = vec![0u32; self.token_count()];
        let mut bump = |t: TokenRef| {
            if let Some(i) = self.node_index(t) {
                degree[i] += 1;
            }
        };
        for e in &self.induced_edges {
            bump(e.src);
            bump(e.dst);
        }
        for &(a, b) in &self.augmented_edges {
            bump(a);
            bump(b);
        }
        let mut seqs = vec![Vec::new(); n_types];
        for (t, d) in self.nodes().zip(degree) {
            seqs[t.type_index as usize].push(d);
        }
        for s in &mut seqs {
            s.sort_unstable_by(|a, b| b.cmp(a));
        }
        seqs
    }
}

/// One bit per virtual token (dense virtual ordering) with a touched list so
/// a reset costs only what was set.
#[derive(Clone, Debug)]
pub struct VirtualBitmap {
    words: Vec<u64>,
    touched: Vec<u32>,
}

impl VirtualBitmap {
    pub fn new(n: usize) -> Self {
        Self {
            words: vec![0; n.div_ceil(64)],
            touched: Vec::new(),
        }
    }

    pub fn for_graph(graph: &TokenGraph) -> Self {
        Self::new(graph.virtual_count())
    }

    /// Sets bit `i`; returns true if it was previously clear.
    pub fn insert(&mut self, i: u32) -> bool {
        let (w, b) = ((i / 64) as usize, i % 64);
        let mask = 1u64 << b;
        if self.words[w] & mask != 0 {
            return false;
        }
        self.words[w] |= mask;
        self.touched.push(i);
        true
    }

    pub fn contains(&self, i: u32) -> bool {
        self.words[(i / 64) as usize] & (1u64 << (i % 64)) != 0
    }

    pub fn touched(&self) -> &[u32] {
        &self.touched
    }

    pub fn reset(&mut self) {
        for &i in &self.touched {
            self.words[(i / 64) as usize] = 0;
        }
        self.touched.clear();
    }

    pub fn is_clear(&self) -> bool {
        self.touched.is_empty() && self.words.iter().all(|&w| w == 0)
    }
}

/// Indexed extraction: R-tree polygon query, virtual expansion through the
/// spatial-virtual index with bitmap deduplication, then induced edges.
/// The bitmap is left clear on return.
pub fn extract_token_set(
    prompt: &BoundaryPrompt,
    graph: &TokenGraph,
    gir: &GraphIndexRTree,
    svindex: &SpatialVirtualIndex,
    bitmap: &mut VirtualBitmap,
) -> Result<RegionSubgraph> {
    debug_assert!(bitmap.is_clear());
    let spatial = gir.query_prompt(prompt);
    if spatial.is_empty() {
        return Err(Error::EmptyRegion);
    }
    for &s in &spatial {
        let dense = graph.spatial_dense(s).expect("spatial");
        for &v in svindex.get(dense) {
            bitmap.insert(v);
        }
    }

    let mut edges = Vec::new();
    for &s in &spatial {
        for adj in graph.neighbors(s) {
            let nb = adj.neighbor;
            let keep = if graph.is_spatial_type(nb.type_index) {
                adj.forward && spatial.binary_search(&nb).is_ok()
            } else {
                true
            };
            if keep {
                edges.push(oriented(s, adj.neighbor, adj.relation, adj.forward));
            }
        }
    }
    for &v in bitmap.touched() {
        let vt = graph.virtual_ref(v as usize);
        for adj in graph.virtual_neighbors(v as usize) {
            if adj.forward && bitmap.contains(graph.virtual_dense(adj.neighbor).expect("virtual") as u32) {
                edges.push(oriented(vt, adj.neighbor, adj.relation, true));
            }
        }
    }
    let mut virtuals: Vec<TokenRef> = bitmap.touched().iter().map(|&v| graph.virtual_ref(v as usize)).collect();
    virtuals.sort_unstable();
    bitmap.reset();
    Ok(RegionSubgraph::assemble(graph, spatial, virtuals, edges))
}

/// Reference extraction: linear scan with point-in-polygon and full edge scans.
pub fn brute_force_extract(prompt: &BoundaryPrompt, graph: &TokenGraph) -> Result<RegionSubgraph> {
    let spatial: BTreeSet<TokenRef> = graph
        .spatial_tokens()
        .filter(|&t| prompt.contains(graph.coord(t).expect("spatial")))
        .collect();
    if spatial.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let mut virtuals = BTreeSet::new();
    for (ri, r) in graph.relations().iter().enumerate() {
        let (ss, ds) = (graph.is_spatial_type(r.src_type), graph.is_spatial_type(r.dst_type));
        for &(a, b) in graph.edges(ri) {
            let (ta, tb) = (TokenRef::new(r.src_type, a), TokenRef::new(r.dst_type, b));
            if ss && !ds && spatial.contains(&ta) {
                virtuals.insert(tb);
            }
            if ds && !ss && spatial.contains(&tb) {
                virtuals.insert(ta);
            }
        }
    }
    let inside = |t: &TokenRef| spatial.contains(t) || virtuals.contains(t);
    let mut edges = Vec::new();
    for (ri, r) in graph.relations().iter().enumerate() {
        for &(a, b) in graph.edges(ri) {
            let (ta, tb) = (TokenRef::new(r.src_type, a), TokenRef::new(r.dst_type, b));
            if inside(&ta) && inside(&tb) {
                edges.push(SubEdge {
                    relation: ri as u16,
                    src: ta,
                    dst: tb,
                });
            }
        }
    }
    Ok(RegionSubgraph::assemble(
        graph,
        spatial.into_iter().collect(),
        virtuals.into_iter().collect(),
        edges,
    ))
}

fn oriented(own: TokenRef, other: TokenRef, relation: u16, forward: bool) -> SubEdge {
    let (src, dst) = if forward { (own, other) } else { (other, own) };
    SubEdge { relation, src, dst }
}
