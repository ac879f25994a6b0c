//! Relation-typed mean-aggregation node encoder and per-type SUM region
//! aggregation, batched over several subgraphs on one tape.
//!
//! One layer computes, for every node `v` of type `φ(v)`,
//!
//! ```text
//! h'_v = relu(h_v W_self[φ(v)] + b[φ(v)] + (1/c_v) Σ_r mean_{u ∈ N_r(v)} h_u W_rel[r])
//! ```
//!
//! where `r` ranges over the relation slots in which `v` has neighbours
//! inside its subgraph and `c_v` is how many such slots there are. The last
//! slot holds proximity (augmented) edges.

use std::sync::Arc;

use rand::Rng;

use super::transr::TokenEmbeddingTable;
use crate::error::{Error, Result};
use crate::extraction::RegionSubgraph;
use crate::graph::TokenRef;
use crate::numeric::{Matrix, SparseMatrix, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub w_self: Vec<Matrix>,
    pub bias: Vec<Matrix>,
    pub w_rel: Vec<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub dim: usize,
    pub n_types: usize,
    /// Graph relation types plus one slot for augmented edges.
    pub n_rel_slots: usize,
    pub layers: Vec<EncoderLayer>,
}

impl EncoderParams {
    pub fn init(n_types: usize, n_relations: usize, dim: usize, n_layers: usize, rng: &mut impl Rng) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::InvalidConfig("encoder needs at least one layer".into()));
        }
        let n_rel_slots = n_relations + 1;
        let layers = (0..n_layers)
            .map(|_| EncoderLayer {
                w_self: (0..n_types).map(|_| Matrix::glorot(dim, dim, rng)).collect(),
                bias: (0..n_types).map(|_| Matrix::zeros(1, dim)).collect(),
                w_rel: (0..n_rel_slots).map(|_| Matrix::glorot(dim, dim, rng)).collect(),
            })
            .collect();
        Ok(Self {
            dim,
            n_types,
            n_rel_slots,
            layers,
        })
    }

    /// Identity transforms and zero biases.
    pub fn identity(n_types: usize, n_relations: usize, dim: usize, n_layers: usize) -> Self {
        let n_rel_slots = n_relations + 1;
        Self {
            dim,
            n_types,
            n_rel_slots,
            layers: (0..n_layers)
                .map(|_| EncoderLayer {
                    w_self: vec![Matrix::identity(dim); n_types],
                    bias: vec![Matrix::zeros(1, dim); n_types],
                    w_rel: vec![Matrix::identity(dim); n_rel_slots],
                })
                .collect(),
        }
    }

    pub fn matrices(&self) -> Vec<&Matrix> {
        self.layers
            .iter()
            .flat_map(|l| l.w_self.iter().chain(&l.bias).chain(&l.w_rel))
            .collect()
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.w_self.iter_mut().chain(l.bias.iter_mut()).chain(l.w_rel.iter_mut()))
            .collect()
    }

    /// Rebuild from a flat list in [`Self::matrices`] order.
    pub fn from_matrices(dim: usize, n_types: usize, n_rel_slots: usize, mut flat: Vec<Matrix>) -> Result<Self> {
        let per_layer = 2 * n_types + n_rel_slots;
        if per_layer == 0 || flat.len() % per_layer != 0 || flat.is_empty() {
            return Err(Error::shape("encoder", format!("{} matrices for layers of {per_layer}", flat.len())));
        }
        let mut layers = Vec::new();
        while !flat.is_empty() {
            let rest = flat.split_off(per_layer);
            let mut it = flat.into_iter();
            let w_self: Vec<Matrix> = it.by_ref().take(n_types).collect();
            let bias: Vec<Matrix> = it.by_ref().take(n_types).collect();
            let w_rel: Vec<Matrix> = it.collect();
            layers.push(EncoderLayer { w_self, bias, w_rel });
            flat = rest;
        }
        Ok(Self {
            dim,
            n_types,
            n_rel_slots,
            layers,
        })
    }

    /// Push every matrix onto the tape, in [`Self::matrices`] order.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<Var>> {
        self.matrices()
            .into_iter()
            .map(|m| if trainable { tape.param(m.clone()) } else { tape.constant(m.clone()) })
            .collect()
    }
}

/// Node rows, per-type row groups, per-relation neighbour-mean operators and
/// the per-type selector for a batch of subgraphs.
#[derive(Clone, Debug)]
pub struct NodeBatch {
    pub n_subgraphs: usize,
    pub n_types: usize,
    pub dim: usize,
    pub offsets: Vec<usize>,
    pub tokens: Vec<TokenRef>,
    x0: Matrix,
    type_rows: Vec<Vec<usize>>,
    rel_ops: Vec<Option<Arc<SparseMatrix>>>,
    selector: Arc<SparseMatrix>,
}

impl NodeBatch {
    pub fn build(
        subgraphs: &[&RegionSubgraph],
        table: &TokenEmbeddingTable,
        n_rel_slots: usize,
        spatial_only_aggregation: bool,
    ) -> Result<Self> {
        let n_types = table.types.len();
        let dim = table.dim;
        let mut offsets = Vec::with_capacity(subgraphs.len() + 1);
        let mut tokens = Vec::new();
        offsets.push(0);
        for s in subgraphs {
            tokens.extend(s.nodes());
            offsets.push(tokens.len());
        }
        let n = tokens.len();
        let mut data = Vec::with_capacity(n * dim);
        let mut type_rows = vec![Vec::new(); n_types];
        for (i, &t) in tokens.iter().enumerate() {
            data.extend_from_slice(table.row(t));
            type_rows[t.type_index as usize].push(i);
        }
        let x0 = Matrix::new(n, dim, data)?;

        // Per relation slot, the (node, neighbour) incidences.
        let aug = n_rel_slots - 1;
        let mut incid: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_rel_slots];
        for (g, s) in subgraphs.iter().enumerate() {
            let off = offsets[g];
            let idx = |t: TokenRef| s.node_index(t).expect("edge endpoint in subgraph") + off;
            for e in &s.induced_edges {
                let slot = e.relation as usize;
                if slot >= aug {
                    return Err(Error::shape("encoder", "relation index beyond encoder slots"));
                }
                let (a, b) = (idx(e.src), idx(e.dst));
                incid[slot].push((a, b));
                incid[slot].push((b, a));
            }
            for &(a, b) in &s.augmented_edges {
                let (a, b) = (idx(a), idx(b));
                incid[aug].push((a, b));
                incid[aug].push((b, a));
            }
        }
        let mut count = vec![vec![0usize; n_rel_slots]; n];
        for (slot, list) in incid.iter().enumerate() {
            for &(v, _) in list {
                count[v][slot] += 1;
            }
        }
        let active: Vec<usize> = count.iter().map(|c| c.iter().filter(|&&k| k > 0).count()).collect();
        let rel_ops = incid
            .into_iter()
            .enumerate()
            .map(|(slot, list)| {
                if list.is_empty() {
                    return Ok(None);
                }
                let trip = list
                    .into_iter()
                    .map(|(v, u)| (v, u, 1.0 / (count[v][slot] * active[v]) as f64))
                    .collect();
                SparseMatrix::from_triplets(n, n, trip).map(|m| Some(Arc::new(m)))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut trip = Vec::new();
        for (g, s) in subgraphs.iter().enumerate() {
            let end = if spatial_only_aggregation {
                offsets[g] + s.spatial_tokens.len()
            } else {
                offsets[g + 1]
            };
            for (i, t) in tokens.iter().enumerate().take(end).skip(offsets[g]) {
                trip.push((g * n_types + t.type_index as usize, i, 1.0));
            }
        }
        let selector = Arc::new(SparseMatrix::from_triplets(subgraphs.len() * n_types, n, trip)?);
        Ok(Self {
            n_subgraphs: subgraphs.len(),
            n_types,
            dim,
            offsets,
            tokens,
            x0,
            type_rows,
            rel_ops,
            selector,
        })
    }

    pub fn node_count(&self) -> usize {
        self.tokens.len()
    }

    pub fn node_types(&self) -> Vec<u16> {
        self.tokens.iter().map(|t| t.type_index).collect()
    }

    /// Encode all nodes: returns an `N x d` variable.
    pub fn encode(&self, tape: &mut Tape, params: &EncoderParams, vars: &[Var]) -> Result<Var> {
        let per_layer = 2 * params.n_types + params.n_rel_slots;
        if vars.len() != per_layer * params.layers.len() || params.n_types != self.n_types || params.dim != self.dim {
            return Err(Error::shape("encode_nodes", "encoder parameters do not match the batch"));
        }
        let n = self.node_count();
        let mut x = tape.constant(self.x0.clone())?;
        if n == 0 {
            return Ok(x);
        }
        for layer in vars.chunks(per_layer) {
            let (w_self, rest) = layer.split_at(params.n_types);
            let (bias, w_rel) = rest.split_at(params.n_types);
            let mut acc: Option<Var> = None;
            let mut add = |tape: &mut Tape, v: Var| -> Result<()> {
                acc = Some(match acc {
                    Some(a) => tape.add(a, v)?,
                    None => v,
                });
                Ok(())
            };
            for (t, rows) in self.type_rows.iter().enumerate() {
                if rows.is_empty() {
                    continue;
                }
                let g = tape.gather_rows(x, rows)?;
                let y = tape.matmul(g, w_self[t])?;
                let y = tape.add_row(y, bias[t])?;
                let s = tape.scatter_add_rows(y, rows, n)?;
                add(tape, s)?;
            }
            for (slot, op) in self.rel_ops.iter().enumerate() {
                if let Some(op) = op {
                    let m = tape.sparse_matmul(op.clone(), x)?;
                    let y = tape.matmul(m, w_rel[slot])?;
                    add(tape, y)?;
                }
            }
            x = tape.relu(acc.expect("non-empty batch"))?;
        }
        Ok(x)
    }

    /// Per-type SUM then CONCAT in type order: `B x (k·d)`.
    pub fn aggregate(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let s = tape.sparse_matmul(self.selector.clone(), h)?;
        tape.reshape(s, self.n_subgraphs, self.n_types * self.dim)
    }
}

/// Plain per-type SUM + CONCAT of node embeddings (rows of `h`).
pub fn aggregate_region(h: &Matrix, node_types: &[u16], n_types: usize) -> Vec<f64> {
    let d = h.cols();
    let mut out = vec![0.0; n_types * d];
    for (r, &t) in node_types.iter().enumerate() {
        let dst = &mut out[t as usize * d..(t as usize + 1) * d];
        for (o, v) in dst.iter_mut().zip(h.row(r)) {
            *o += v;
        }
    }
    out
}

/// Encode and aggregate a batch of subgraphs without gradients.
pub fn embed_subgraphs(
    subgraphs: &[&RegionSubgraph],
    table: &TokenEmbeddingTable,
    params: &EncoderParams,
    spatial_only_aggregation: bool,
) -> Result<Matrix> {
    let batch = NodeBatch::build(subgraphs, table, params.n_rel_slots, spatial_only_aggregation)?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false)?;
    let h = batch.encode(&mut tape, params, &vars)?;
    let hs = batch.aggregate(&mut tape, h)?;
    Ok(tape.value(hs).clone())
}
