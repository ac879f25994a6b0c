//! The spatial token graph: typed nodes (spatial and virtual tokens), typed
//! undirected edges, the R-tree over spatial tokens, and the spatial-virtual
//! adjacency index.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, Polygon, Rect};
use crate::prompt::BoundaryPrompt;
use crate::rtree::{Entry, RTree, DEFAULT_BRANCHING};
use crate::schema::CityData;

pub const MAGIC: &[u8; 4] = b"BPRF";
pub const GRAPH_FORMAT_VERSION: u32 = 1;

/// A token identified by its type and a dense per-type id assigned in arrival order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenRef {
    pub type_index: u16,
    pub local_id: u32,
}

impl TokenRef {
    pub const fn new(type_index: u16, local_id: u32) -> Self {
        Self { type_index, local_id }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenType {
    pub name: String,
    pub spatial: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenTable {
    pub external_ids: Vec<String>,
    /// Empty for virtual types.
    pub coords: Vec<Point>,
}

impl TokenTable {
    pub fn len(&self) -> usize {
        self.external_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.external_ids.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationType {
    pub src_type: u16,
    pub dst_type: u16,
}

/// One adjacency record. `forward` is true when the owning node is the
/// relation's source endpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Adjacent {
    pub neighbor: TokenRef,
    pub relation: u16,
    pub forward: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenGraph {
    types: Vec<TokenType>,
    tables: Vec<TokenTable>,
    relations: Vec<RelationType>,
    edges: Vec<Vec<(u32, u32)>>,

    type_offsets: Vec<usize>,
    spatial_offsets: Vec<Option<usize>>,
    virtual_offsets: Vec<Option<usize>>,
    n_spatial: usize,
    n_virtual: usize,
    adj_offsets: Vec<usize>,
    adj: Vec<Adjacent>,
    vv_offsets: Vec<usize>,
    vv_adj: Vec<Adjacent>,
}

impl TokenGraph {
    /// Assemble a graph from its primary parts, validating every invariant and
    /// deriving the adjacency structures.
    pub fn from_parts(
        types: Vec<TokenType>,
        tables: Vec<TokenTable>,
        relations: Vec<RelationType>,
        edges: Vec<Vec<(u32, u32)>>,
    ) -> Result<Self> {
        let bad = |d: String| Error::MalformedData {
            file: "<graph>".into(),
            detail: d,
        };
        if types.len() != tables.len() || relations.len() != edges.len() {
            return Err(bad("part counts disagree".into()));
        }
        if types.len() > u16::MAX as usize {
            return Err(bad("too many token types".into()));
        }
        for (t, table) in types.iter().zip(&tables) {
            let want = if t.spatial { table.len() } else { 0 };
            if table.coords.len() != want {
                return Err(bad(format!("type `{}` has {} coordinates for {} tokens", t.name, table.coords.len(), table.len())));
            }
            if table.coords.iter().any(|p| !p.is_finite()) {
                return Err(bad(format!("type `{}` has non-finite coordinates", t.name)));
            }
        }
        for (r, list) in relations.iter().zip(&edges) {
            let (s, d) = (r.src_type as usize, r.dst_type as usize);
            if s >= types.len() || d >= types.len() {
                return Err(bad("relation references unknown type".into()));
            }
            if list.iter().any(|&(a, b)| a as usize >= tables[s].len() || b as usize >= tables[d].len()) {
                return Err(bad("edge endpoint out of range".into()));
            }
        }

        let mut type_offsets = Vec::with_capacity(types.len() + 1);
        let mut spatial_offsets = Vec::with_capacity(types.len());
        let mut virtual_offsets = Vec::with_capacity(types.len());
        let (mut g, mut ns, mut nv) = (0usize, 0usize, 0usize);
        for (t, table) in types.iter().zip(&tables) {
            type_offsets.push(g);
            g += table.len();
            if t.spatial {
                spatial_offsets.push(Some(ns));
                virtual_offsets.push(None);
                ns += table.len();
            } else {
                spatial_offsets.push(None);
                virtual_offsets.push(Some(nv));
                nv += table.len();
            }
        }
        type_offsets.push(g);

        let mut graph = Self {
            types,
            tables,
            relations,
            edges,
            type_offsets,
            spatial_offsets,
            virtual_offsets,
            n_spatial: ns,
            n_virtual: nv,
            adj_offsets: Vec::new(),
            adj: Vec::new(),
            vv_offsets: Vec::new(),
            vv_adj: Vec::new(),
        };
        graph.derive_adjacency();
        Ok(graph)
    }

    fn derive_adjacency(&mut self) {
        let n = self.node_count();
        let mut degree = vec![0usize; n];
        let mut vv_degree = vec![0usize; self.n_virtual];
        for (r, list) in self.relations.iter().zip(&self.edges) {
            let vv = !self.types[r.src_type as usize].spatial && !self.types[r.dst_type as usize].spatial;
            for &(a, b) in list {
                let ga = self.global(TokenRef::new(r.src_type, a));
                let gb = self.global(TokenRef::new(r.dst_type, b));
                degree[ga] += 1;
                degree[gb] += 1;
                if vv {
                    vv_degree[self.virtual_dense(TokenRef::new(r.src_type, a)).unwrap()] += 1;
                    vv_degree[self.virtual_dense(TokenRef::new(r.dst_type, b)).unwrap()] += 1;
                }
            }
        }
        let prefix = |deg: &[usize]| {
            let mut off = Vec::with_capacity(deg.len() + 1);
            let mut acc = 0;
            off.push(0);
            for d in deg {
                acc += d;
                off.push(acc);
            }
            off
        };
        self.adj_offsets = prefix(&degree);
        self.vv_offsets = prefix(&vv_degree);
        let placeholder = Adjacent {
            neighbor: TokenRef::new(0, 0),
            relation: 0,
            forward: false,
        };
        self.adj = vec![placeholder; *self.adj_offsets.last().unwrap()];
        self.vv_adj = vec![placeholder; *self.vv_offsets.last().unwrap()];
        let mut fill = self.adj_offsets[..n].to_vec();
        let mut vv_fill = self.vv_offsets[..self.n_virtual].to_vec();
        for (ri, (r, list)) in self.relations.iter().zip(&self.edges).enumerate() {
            let vv = !self.types[r.src_type as usize].spatial && !self.types[r.dst_type as usize].spatial;
            for &(a, b) in list {
                let ta = TokenRef::new(r.src_type, a);
                let tb = TokenRef::new(r.dst_type, b);
                let (ga, gb) = (self.global(ta), self.global(tb));
                let fwd = Adjacent {
                    neighbor: tb,
                    relation: ri as u16,
                    forward: true,
                };
                let bwd = Adjacent {
                    neighbor: ta,
                    relation: ri as u16,
                    forward: false,
                };
                self.adj[fill[ga]] = fwd;
                fill[ga] += 1;
                self.adj[fill[gb]] = bwd;
                fill[gb] += 1;
                if vv {
                    let (va, vb) = (self.virtual_dense(ta).unwrap(), self.virtual_dense(tb).unwrap());
                    self.vv_adj[vv_fill[va]] = fwd;
                    vv_fill[va] += 1;
                    self.vv_adj[vv_fill[vb]] = bwd;
                    vv_fill[vb] += 1;
                }
            }
        }
    }

    pub fn types(&self) -> &[TokenType] {
        &self.types
    }

    pub fn type_index(&self, name: &str) -> Option<u16> {
        self.types.iter().position(|t| t.name == name).map(|i| i as u16)
    }

    pub fn is_spatial_type(&self, type_index: u16) -> bool {
        self.types[type_index as usize].spatial
    }

    pub fn tables(&self) -> &[TokenTable] {
        &self.tables
    }

    pub fn relations(&self) -> &[RelationType] {
        &self.relations
    }

    pub fn edges(&self, relation: usize) -> &[(u32, u32)] {
        &self.edges[relation]
    }

    pub fn relation_name(&self, relation: usize) -> String {
        let r = self.relations[relation];
        format!(
            "{}__{}",
            self.types[r.src_type as usize].name, self.types[r.dst_type as usize].name
        )
    }

    pub fn type_count(&self, type_index: u16) -> usize {
        self.tables[type_index as usize].len()
    }

    pub fn node_count(&self) -> usize {
        *self.type_offsets.last().unwrap_or(&0)
    }

    pub fn edge_count(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    pub fn spatial_count(&self) -> usize {
        self.n_spatial
    }

    pub fn virtual_count(&self) -> usize {
        self.n_virtual
    }

    pub fn global(&self, t: TokenRef) -> usize {
        self.type_offsets[t.type_index as usize] + t.local_id as usize
    }

    pub fn from_global(&self, g: usize) -> TokenRef {
        let ty = self.type_offsets.partition_point(|&o| o <= g) - 1;
        TokenRef::new(ty as u16, (g - self.type_offsets[ty]) as u32)
    }

    pub fn spatial_dense(&self, t: TokenRef) -> Option<usize> {
        self.spatial_offsets[t.type_index as usize].map(|o| o + t.local_id as usize)
    }

    pub fn virtual_dense(&self, t: TokenRef) -> Option<usize> {
        self.virtual_offsets[t.type_index as usize].map(|o| o + t.local_id as usize)
    }

    pub fn virtual_ref(&self, dense: usize) -> TokenRef {
        Self::dense_ref(&self.virtual_offsets, &self.tables, dense)
    }

    pub fn spatial_ref(&self, dense: usize) -> TokenRef {
        Self::dense_ref(&self.spatial_offsets, &self.tables, dense)
    }

    fn dense_ref(offsets: &[Option<usize>], tables: &[TokenTable], dense: usize) -> TokenRef {
        for (ty, off) in offsets.iter().enumerate() {
            if let Some(o) = *off {
                if dense >= o && dense < o + tables[ty].len() {
                    return TokenRef::new(ty as u16, (dense - o) as u32);
                }
            }
        }
        panic!("dense id {dense} out of range");
    }

    /// Coordinates of a spatial token; `None` for virtual tokens.
    pub fn coord(&self, t: TokenRef) -> Option<Point> {
        self.tables[t.type_index as usize].coords.get(t.local_id as usize).copied()
    }

    pub fn external_id(&self, t: TokenRef) -> &str {
        &self.tables[t.type_index as usize].external_ids[t.local_id as usize]
    }

    pub fn neighbors(&self, t: TokenRef) -> &[Adjacent] {
        let g = self.global(t);
        &self.adj[self.adj_offsets[g]..self.adj_offsets[g + 1]]
    }

    /// Virtual-virtual adjacency of a virtual token (dense id).
    pub fn virtual_neighbors(&self, virtual_dense: usize) -> &[Adjacent] {
        &self.vv_adj[self.vv_offsets[virtual_dense]..self.vv_offsets[virtual_dense + 1]]
    }

    pub fn spatial_tokens(&self) -> impl Iterator<Item = TokenRef> + '_ {
        self.types.iter().enumerate().filter(|(_, t)| t.spatial).flat_map(move |(i, _)| {
            (0..self.tables[i].len() as u32).map(move |l| TokenRef::new(i as u16, l))
        })
    }

    pub fn bbox(&self) -> Option<Rect> {
        Rect::from_points(self.tables.iter().flat_map(|t| t.coords.iter().copied()))
    }
}

/// R-tree over every spatial token.
#[derive(Clone, Debug)]
pub struct GraphIndexRTree {
    tree: RTree<TokenRef>,
}

impl PartialEq for GraphIndexRTree {
    fn eq(&self, other: &Self) -> bool {
        self.tree.branching() == other.tree.branching() && self.tree.entries() == other.tree.entries()
    }
}

impl GraphIndexRTree {
    fn graph_entries(graph: &TokenGraph) -> Vec<Entry<TokenRef>> {
        graph
            .spatial_tokens()
            .map(|t| Entry {
                point: graph.coord(t).expect("spatial"),
                item: t,
            })
            .collect()
    }

    pub fn bulk_load(graph: &TokenGraph, branching: usize) -> Self {
        Self::from_entries(Self::graph_entries(graph), branching)
    }

    /// Per-entry insertion in token arrival order.
    pub fn build_incremental(graph: &TokenGraph, branching: usize) -> Self {
        let mut tree = RTree::new(branching);
        for e in Self::graph_entries(graph) {
            tree.insert(e.point, e.item);
        }
        Self { tree }
    }

    pub fn from_entries(entries: Vec<Entry<TokenRef>>, branching: usize) -> Self {
        Self {
            tree: RTree::bulk_load(entries, branching),
        }
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    pub fn tree(&self) -> &RTree<TokenRef> {
        &self.tree
    }

    /// Tokens inside `rect` (inclusive), sorted.
    pub fn query_rect(&self, rect: &Rect) -> Vec<TokenRef> {
        let mut out: Vec<TokenRef> = self.tree.query_rect(rect).into_iter().map(|e| e.item).collect();
        out.sort_unstable();
        out
    }

    /// MBR filter followed by exact point-in-polygon refinement; sorted.
    pub fn query_polygon(&self, polygon: &Polygon) -> Vec<TokenRef> {
        let mut out = Vec::new();
        self.tree.visit_rect(&polygon.mbr(), |e| {
            if polygon.contains(e.point) {
                out.push(e.item);
            }
        });
        out.sort_unstable();
        out
    }

    /// Union over the prompt's polygons, sorted and deduplicated.
    pub fn query_prompt(&self, prompt: &BoundaryPrompt) -> Vec<TokenRef> {
        if let [only] = prompt.polygons() {
            return self.query_polygon(only);
        }
        let mut out = Vec::new();
        let mbr = prompt.mbr();
        self.tree.visit_rect(&mbr, |e| {
            if prompt.contains(e.point) {
                out.push(e.item);
            }
        });
        out.sort_unstable();
        out
    }

    pub fn knn(&self, p: Point, k: usize) -> Vec<(TokenRef, f64)> {
        self.tree.nearest_k(p, k).into_iter().map(|(d, e)| (e.item, d)).collect()
    }
}

/// Map from each spatial token (dense id) to its adjacent virtual tokens
/// (dense virtual ids), deduplicated and sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpatialVirtualIndex {
    offsets: Vec<usize>,
    ids: Vec<u32>,
}

impl SpatialVirtualIndex {
    pub fn build(graph: &TokenGraph) -> Self {
        let mut offsets = Vec::with_capacity(graph.spatial_count() + 1);
        let mut ids = Vec::new();
        offsets.push(0);
        let mut scratch = Vec::new();
        for t in graph.spatial_tokens() {
            scratch.clear();
            scratch.extend(
                graph
                    .neighbors(t)
                    .iter()
                    .filter_map(|a| graph.virtual_dense(a.neighbor).map(|v| v as u32)),
            );
            scratch.sort_unstable();
            scratch.dedup();
            ids.extend_from_slice(&scratch);
            offsets.push(ids.len());
        }
        Self { offsets, ids }
    }

    pub fn get(&self, spatial_dense: usize) -> &[u32] {
        &self.ids[self.offsets[spatial_dense]..self.offsets[spatial_dense + 1]]
    }

    pub fn spatial_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total_links(&self) -> usize {
        self.ids.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphBundle {
    pub graph: TokenGraph,
    pub gir: GraphIndexRTree,
    pub svindex: SpatialVirtualIndex,
}

/// Build the token graph and its indexes from loaded city data.
///
/// Tokens are created in relation arrival order (source endpoint before
/// destination); entity-file rows never referenced by a relation are appended
/// afterwards in file order. Relations over the same unordered type pair are
/// merged into one edge set, and for same-type relations `(a, b)` and `(b, a)`
/// denote one undirected edge.
pub fn build_graph(city: &CityData) -> Result<GraphBundle> {
    build_graph_with(city, DEFAULT_BRANCHING)
}

pub fn build_graph_with(city: &CityData, branching: usize) -> Result<GraphBundle> {
    let schema = &city.schema;
    let types: Vec<TokenType> = schema
        .entity_types
        .iter()
        .map(|t| TokenType {
            name: t.name.clone(),
            spatial: t.spatial,
        })
        .collect();
    let type_of: HashMap<&str, u16> = types.iter().enumerate().map(|(i, t)| (t.name.as_str(), i as u16)).collect();

    let mut coord_maps: Vec<HashMap<&str, Point>> = vec![HashMap::new(); types.len()];
    for table in &city.entities {
        if let Some(&ti) = type_of.get(table.type_name.as_str()) {
            coord_maps[ti as usize] = table.coordinate_map();
        }
    }

    let mut tables: Vec<TokenTable> = vec![TokenTable::default(); types.len()];
    let mut id_maps: Vec<HashMap<String, u32>> = vec![HashMap::new(); types.len()];
    let mut relations: Vec<RelationType> = Vec::new();
    let mut edges: Vec<Vec<(u32, u32)>> = Vec::new();
    let mut edge_sets: Vec<HashSet<(u32, u32)>> = Vec::new();

    let mut intern = |ti: u16, ext: &str, tables: &mut Vec<TokenTable>| -> Result<u32> {
        let map = &mut id_maps[ti as usize];
        if let Some(&id) = map.get(ext) {
            return Ok(id);
        }
        let table = &mut tables[ti as usize];
        if types[ti as usize].spatial {
            let p = coord_maps[ti as usize].get(ext).copied().ok_or_else(|| Error::DanglingSpatialToken {
                type_name: types[ti as usize].name.clone(),
                id: ext.to_string(),
            })?;
            table.coords.push(p);
        }
        let id = table.external_ids.len() as u32;
        table.external_ids.push(ext.to_string());
        map.insert(ext.to_string(), id);
        Ok(id)
    };

    for ds in &city.datasets {
        let lookup = |name: &str| {
            type_of.get(name).copied().ok_or_else(|| Error::UnknownTypeReference {
                relation: ds.spec.name(),
                type_name: name.to_string(),
            })
        };
        let t1 = lookup(&ds.spec.src_type)?;
        let t2 = lookup(&ds.spec.dst_type)?;
        let (rel, flipped) = match relations.iter().position(|r| r.src_type == t1 && r.dst_type == t2) {
            Some(i) => (i, false),
            None => match relations.iter().position(|r| r.src_type == t2 && r.dst_type == t1) {
                Some(i) => (i, true),
                None => {
                    relations.push(RelationType {
                        src_type: t1,
                        dst_type: t2,
                    });
                    edges.push(Vec::new());
                    edge_sets.push(HashSet::new());
                    (relations.len() - 1, false)
                }
            },
        };
        for (e1, e2) in &ds.pairs {
            let id1 = intern(t1, e1, &mut tables)?;
            let id2 = intern(t2, e2, &mut tables)?;
            let mut edge = if flipped { (id2, id1) } else { (id1, id2) };
            if t1 == t2 {
                if id1 == id2 {
                    continue;
                }
                edge = (edge.0.min(edge.1), edge.0.max(edge.1));
            }
            if edge_sets[rel].insert(edge) {
                edges[rel].push(edge);
            }
        }
    }
    for table in &city.entities {
        let Some(&ti) = type_of.get(table.type_name.as_str()) else { continue };
        for ext in &table.ids {
            intern(ti, ext, &mut tables)?;
        }
    }

    let graph = TokenGraph::from_parts(types, tables, relations, edges)?;
    let gir = GraphIndexRTree::bulk_load(&graph, branching);
    let svindex = SpatialVirtualIndex::build(&graph);
    Ok(GraphBundle { graph, gir, svindex })
}

#[derive(Serialize, Deserialize)]
struct MetaType {
    name: String,
    spatial: bool,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct MetaRelation {
    src_type: String,
    dst_type: String,
    file: String,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    magic: String,
    version: u32,
    branching: usize,
    types: Vec<MetaType>,
    relations: Vec<MetaRelation>,
}

fn check_magic(r: &mut impl Read, what: &str) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != MAGIC {
        return Err(Error::VersionMismatch {
            what: what.into(),
            expected: "BPRF".into(),
            found: String::from_utf8_lossy(&m).into_owned(),
        });
    }
    let v = r.read_u32::<LittleEndian>()?;
    if v != GRAPH_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            what: what.into(),
            expected: GRAPH_FORMAT_VERSION.to_string(),
            found: v.to_string(),
        });
    }
    Ok(())
}

impl GraphBundle {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let g = &self.graph;
        let meta = Meta {
            magic: "BPRF".into(),
            version: GRAPH_FORMAT_VERSION,
            branching: self.gir.tree.branching(),
            types: g
                .types
                .iter()
                .zip(&g.tables)
                .map(|(t, tab)| MetaType {
                    name: t.name.clone(),
                    spatial: t.spatial,
                    count: tab.len(),
                })
                .collect(),
            relations: (0..g.relations.len())
                .map(|i| MetaRelation {
                    src_type: g.types[g.relations[i].src_type as usize].name.clone(),
                    dst_type: g.types[g.relations[i].dst_type as usize].name.clone(),
                    file: format!("edges_{}.csv", g.relation_name(i)),
                    count: g.edges[i].len(),
                })
                .collect(),
        };
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;

        for (t, table) in g.types.iter().zip(&g.tables) {
            let mut w = csv::Writer::from_path(dir.join(format!("nodes_{}.csv", t.name)))?;
            w.write_record(["local_id", "external_id", "x", "y"])?;
            for (i, ext) in table.external_ids.iter().enumerate() {
                let (x, y) = match table.coords.get(i) {
                    Some(p) => (format!("{:?}", p.x), format!("{:?}", p.y)),
                    None => (String::new(), String::new()),
                };
                w.write_record([i.to_string().as_str(), ext, &x, &y])?;
            }
            w.flush()?;
        }
        for (i, rel) in meta.relations.iter().enumerate() {
            let mut w = csv::Writer::from_path(dir.join(&rel.file))?;
            w.write_record(["src_local_id", "dst_local_id"])?;
            for &(a, b) in &g.edges[i] {
                w.write_record([a.to_string(), b.to_string()])?;
            }
            w.flush()?;
        }

        let mut w = BufWriter::new(fs::File::create(dir.join("rtree.bin"))?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(GRAPH_FORMAT_VERSION)?;
        w.write_u64::<LittleEndian>(self.gir.len() as u64)?;
        for e in self.gir.tree.entries() {
            w.write_f64::<LittleEndian>(e.point.x)?;
            w.write_f64::<LittleEndian>(e.point.y)?;
            w.write_u16::<LittleEndian>(e.item.type_index)?;
            w.write_u32::<LittleEndian>(e.item.local_id)?;
        }
        w.flush()?;

        let mut w = BufWriter::new(fs::File::create(dir.join("svindex.bin"))?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(GRAPH_FORMAT_VERSION)?;
        w.write_u64::<LittleEndian>(self.svindex.spatial_count() as u64)?;
        w.write_u64::<LittleEndian>(self.svindex.ids.len() as u64)?;
        for &o in &self.svindex.offsets {
            w.write_u64::<LittleEndian>(o as u64)?;
        }
        for &id in &self.svindex.ids {
            w.write_u32::<LittleEndian>(id)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        if !meta_path.exists() {
            return Err(Error::MissingFile(meta_path));
        }
        let meta: Meta = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
        if meta.magic != "BPRF" || meta.version != GRAPH_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                what: "meta.json".into(),
                expected: format!("BPRF v{GRAPH_FORMAT_VERSION}"),
                found: format!("{} v{}", meta.magic, meta.version),
            });
        }
        let types: Vec<TokenType> = meta
            .types
            .iter()
            .map(|t| TokenType {
                name: t.name.clone(),
                spatial: t.spatial,
            })
            .collect();
        let mut tables = Vec::with_capacity(types.len());
        for mt in &meta.types {
            let path = dir.join(format!("nodes_{}.csv", mt.name));
            let mut rdr = csv::Reader::from_path(&path)?;
            let mut table = TokenTable::default();
            for rec in rdr.records() {
                let rec = rec?;
                table.external_ids.push(rec.get(1).unwrap_or("").to_string());
                if mt.spatial {
                    let parse = |s: Option<&str>| -> Result<f64> {
                        s.unwrap_or("").parse().map_err(|_| Error::MalformedData {
                            file: path.clone(),
                            detail: "bad coordinate".into(),
                        })
                    };
                    table.coords.push(Point::new(parse(rec.get(2))?, parse(rec.get(3))?));
                }
            }
            if table.len() != mt.count {
                return Err(Error::MalformedData {
                    file: path,
                    detail: format!("expected {} rows, found {}", mt.count, table.len()),
                });
            }
            tables.push(table);
        }
        let mut relations = Vec::new();
        let mut edges = Vec::new();
        for mr in &meta.relations {
            let idx = |n: &str| {
                types.iter().position(|t| t.name == n).map(|i| i as u16).ok_or_else(|| Error::UnknownTypeReference {
                    relation: mr.file.clone(),
                    type_name: n.to_string(),
                })
            };
            relations.push(RelationType {
                src_type: idx(&mr.src_type)?,
                dst_type: idx(&mr.dst_type)?,
            });
            let path = dir.join(&mr.file);
            let mut rdr = csv::Reader::from_path(&path)?;
            let mut list = Vec::with_capacity(mr.count);
            for rec in rdr.records() {
                let rec = rec?;
                let p = |s: Option<&str>| -> Result<u32> {
                    s.unwrap_or("").parse().map_err(|_| Error::MalformedData {
                        file: path.clone(),
                        detail: "bad local id".into(),
                    })
                };
                list.push((p(rec.get(0))?, p(rec.get(1))?));
            }
            edges.push(list);
        }
        let graph = TokenGraph::from_parts(types, tables, relations, edges)?;

        let mut r = BufReader::new(fs::File::open(dir.join("rtree.bin"))?);
        check_magic(&mut r, "rtree.bin")?;
        let n = r.read_u64::<LittleEndian>()? as usize;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let x = r.read_f64::<LittleEndian>()?;
            let y = r.read_f64::<LittleEndian>()?;
            let ty = r.read_u16::<LittleEndian>()?;
            let id = r.read_u32::<LittleEndian>()?;
            entries.push(Entry {
                point: Point::new(x, y),
                item: TokenRef::new(ty, id),
            });
        }
        if n != graph.spatial_count() {
            return Err(Error::MalformedData {
                file: dir.join("rtree.bin"),
                detail: format!("{n} entries for {} spatial tokens", graph.spatial_count()),
            });
        }
        let gir = GraphIndexRTree::from_entries(entries, meta.branching);

        let mut r = BufReader::new(fs::File::open(dir.join("svindex.bin"))?);
        check_magic(&mut r, "svindex.bin")?;
        let ns = r.read_u64::<LittleEndian>()? as usize;
        let nids = r.read_u64::<LittleEndian>()? as usize;
        let offsets = (0..=ns)
            .map(|_| r.read_u64::<LittleEndian>().map(|v| v as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        let ids = (0..nids)
            .map(|_| r.read_u32::<LittleEndian>())
            .collect::<std::io::Result<Vec<_>>>()?;
        if ns != graph.spatial_count() || offsets.last() != Some(&nids) {
            return Err(Error::MalformedData {
                file: dir.join("svindex.bin"),
                detail: "index does not match graph".into(),
            });
        }
        Ok(Self {
            graph,
            gir,
            svindex: SpatialVirtualIndex { offsets, ids },
        })
    }
}
