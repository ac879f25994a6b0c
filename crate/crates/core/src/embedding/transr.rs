//! TransR token initialisation trained by margin ranking over graph edges.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{TokenGraph, TokenRef};
use crate::numeric::{load_matrix, read_matrix, save_matrix, write_matrix, Adam, AdamConfig, Matrix, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransrConfig {
    pub dim: usize,
    pub epochs: usize,
    pub margin: f64,
    pub neg_per_pos: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TransrConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            epochs: 50,
            margin: 1.0,
            neg_per_pos: 4,
            lr: 1e-2,
            batch_size: 256,
            seed: 7,
        }
    }
}

/// Per-type token embeddings plus the TransR relation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenEmbeddingTable {
    pub dim: usize,
    pub type_names: Vec<String>,
    pub types: Vec<Matrix>,
    pub relation_vectors: Vec<Matrix>,
    pub relation_matrices: Vec<Matrix>,
}

#[derive(Serialize, Deserialize)]
struct TableManifest {
    dim: usize,
    types: Vec<String>,
    relations: usize,
}

fn clip_rows_to_unit_ball(m: &mut Matrix) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1.0 {
            for x in row {
                *x /= n;
            }
        }
    }
}

impl TokenEmbeddingTable {
    pub fn row(&self, t: TokenRef) -> &[f64] {
        self.types[t.type_index as usize].row(t.local_id as usize)
    }

    /// `‖e_h M_r + r − e_t M_r‖₂` with row-vector embeddings.
    pub fn score(&self, h: TokenRef, relation: usize, t: TokenRef) -> f64 {
        let m = &self.relation_matrices[relation];
        let r = self.relation_vectors[relation].data();
        let (eh, et) = (self.row(h), self.row(t));
        (0..self.dim)
            .map(|j| {
                let proj: f64 = (0..self.dim).map(|i| (eh[i] - et[i]) * m.get(i, j)).sum();
                let v = proj + r[j];
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn check_against(&self, graph: &TokenGraph) -> Result<()> {
        let ok = self.types.len() == graph.types().len()
            && self.types.iter().enumerate().all(|(i, m)| m.rows() == graph.type_count(i as u16) && m.cols() == self.dim)
            && self.type_names.iter().zip(graph.types()).all(|(a, b)| *a == b.name);
        if ok {
            Ok(())
        } else {
            Err(Error::shape("token_table", "embedding table does not match the graph"))
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = TableManifest {
            dim: self.dim,
            types: self.type_names.clone(),
            relations: self.relation_vectors.len(),
        };
        fs::write(dir.join("table.json"), serde_json::to_string_pretty(&manifest)?)?;
        for (name, m) in self.type_names.iter().zip(&self.types) {
            save_matrix(&dir.join(format!("emb_{name}.bin")), m)?;
        }
        let mut w = BufWriter::new(fs::File::create(dir.join("relations.bin"))?);
        w.write_u32::<LittleEndian>(self.relation_vectors.len() as u32)?;
        for (v, m) in self.relation_vectors.iter().zip(&self.relation_matrices) {
            write_matrix(&mut w, v)?;
            write_matrix(&mut w, m)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("table.json");
        if !mpath.exists() {
            return Err(Error::MissingFile(mpath));
        }
        let manifest: TableManifest = serde_json::from_str(&fs::read_to_string(&mpath)?)?;
        let types = manifest
            .types
            .iter()
            .map(|n| load_matrix(&dir.join(format!("emb_{n}.bin"))))
            .collect::<Result<Vec<_>>>()?;
        let mut r = BufReader::new(fs::File::open(dir.join("relations.bin"))?);
        let n = r.read_u32::<LittleEndian>()? as usize;
        let mut relation_vectors = Vec::with_capacity(n);
        let mut relation_matrices = Vec::with_capacity(n);
        for _ in 0..n {
            relation_vectors.push(read_matrix(&mut r)?);
            relation_matrices.push(read_matrix(&mut r)?);
        }
        Ok(Self {
            dim: manifest.dim,
            type_names: manifest.types,
            types,
            relation_vectors,
            relation_matrices,
        })
    }
}

/// Random initial table: rows drawn from N(0, 1/d) and clipped to the unit ball;
/// relation projections start at the identity.
pub fn init_table(graph: &TokenGraph, dim: usize, rng: &mut impl Rng) -> TokenEmbeddingTable {
    let sd = 1.0 / (dim as f64).sqrt();
    let types = graph
        .tables()
        .iter()
        .map(|t| {
            let mut m = Matrix::random_normal(t.len(), dim, sd, rng);
            clip_rows_to_unit_ball(&mut m);
            m
        })
        .collect();
    let relation_vectors = graph
        .relations()
        .iter()
        .map(|_| Matrix::random_normal(1, dim, 0.1 * sd, rng))
        .collect();
    let relation_matrices = graph.relations().iter().map(|_| Matrix::identity(dim)).collect();
    let mut table = TokenEmbeddingTable {
        dim,
        type_names: graph.types().iter().map(|t| t.name.clone()).collect(),
        types,
        relation_vectors,
        relation_matrices,
    };
    quantize(&mut table);
    table
}

fn quantize(t: &mut TokenEmbeddingTable) {
    for m in t.types.iter_mut().chain(&mut t.relation_vectors).chain(&mut t.relation_matrices) {
        m.quantize_f32();
    }
}

/// Corrupt tail for `tail`: uniform within its type when that type has at
/// least two tokens, otherwise uniform over all other tokens.
pub fn corrupt_tail(graph: &TokenGraph, tail: TokenRef, rng: &mut impl Rng) -> TokenRef {
    let n_type = graph.type_count(tail.type_index) as u32;
    if n_type >= 2 {
        let mut l = rng.random_range(0..n_type - 1);
        if l >= tail.local_id {
            l += 1;
        }
        return TokenRef::new(tail.type_index, l);
    }
    let n = graph.node_count();
    let skip = graph.global(tail);
    let mut g = rng.random_range(0..n - 1);
    if g >= skip {
        g += 1;
    }
    graph.from_global(g)
}

/// Train a TransR table by minibatched margin ranking with Adam.
pub fn init_transr(graph: &TokenGraph, config: &TransrConfig) -> Result<TokenEmbeddingTable> {
    if graph.node_count() == 0 {
        return Err(Error::EmptyGraph);
    }
    if config.dim < 2 {
        return Err(Error::InvalidConfig("embedding dimension must be at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut table = init_table(graph, config.dim, &mut rng);
    if graph.edge_count() == 0 || config.epochs == 0 {
        return Ok(table);
    }
    let n_rel = graph.relations().len();
    let adam_cfg = AdamConfig {
        lr: config.lr,
        ..Default::default()
    };
    let type_shapes: Vec<(usize, usize)> = table.types.iter().map(Matrix::shape).collect();
    let mut adam_types = Adam::new(adam_cfg, &type_shapes);
    // One optimizer per relation so idle relations are not moved by momentum.
    let mut adam_rel: Vec<Adam> = (0..n_rel)
        .map(|_| Adam::new(adam_cfg, &[(1, config.dim), (config.dim, config.dim)]))
        .collect();
    let batch = config.batch_size.max(1);
    let negs = config.neg_per_pos.max(1);

    for _ in 0..config.epochs {
        for rel in 0..n_rel {
            let r = graph.relations()[rel];
            let mut order: Vec<usize> = (0..graph.edges(rel).len()).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch) {
                let mut heads = Vec::with_capacity(chunk.len());
                let mut tails = Vec::with_capacity(chunk.len());
                for &e in chunk {
                    let (a, b) = graph.edges(rel)[e];
                    heads.push(TokenRef::new(r.src_type, a));
                    tails.push(TokenRef::new(r.dst_type, b));
                }
                let mut neg_heads = Vec::with_capacity(chunk.len() * negs);
                let mut neg_tails = Vec::with_capacity(chunk.len() * negs);
                let mut pos_of_neg = Vec::with_capacity(chunk.len() * negs);
                for (i, (&h, &t)) in heads.iter().zip(&tails).enumerate() {
                    for _ in 0..negs {
                        neg_heads.push(h);
                        neg_tails.push(corrupt_tail(graph, t, &mut rng));
                        pos_of_neg.push(i);
                    }
                }

                let mut tape = Tape::new();
                let type_vars = table
                    .types
                    .iter()
                    .map(|m| tape.param(m.clone()))
                    .collect::<Result<Vec<_>>>()?;
                let rv = tape.param(table.relation_vectors[rel].clone())?;
                let rm = tape.param(table.relation_matrices[rel].clone())?;
                let lookup = |tape: &mut Tape, toks: &[TokenRef]| -> Result<_> {
                    // Gather per type and stitch rows back into request order.
                    let mut parts = Vec::new();
                    for (ty, &var) in type_vars.iter().enumerate() {
                        let (pos, ids): (Vec<usize>, Vec<usize>) = toks
                            .iter()
                            .enumerate()
                            .filter(|(_, t)| t.type_index as usize == ty)
                            .map(|(i, t)| (i, t.local_id as usize))
                            .unzip();
                        if ids.is_empty() {
                            continue;
                        }
                        let g = tape.gather_rows(var, &ids)?;
                        parts.push(tape.scatter_add_rows(g, &pos, toks.len())?);
                    }
                    let mut acc = parts[0];
                    for &p in &parts[1..] {
                        acc = tape.add(acc, p)?;
                    }
                    Ok(acc)
                };
                let score = |tape: &mut Tape, hs: &[TokenRef], ts: &[TokenRef]| -> Result<_> {
                    let eh = lookup(tape, hs)?;
                    let et = lookup(tape, ts)?;
                    let diff = tape.sub(eh, et)?;
                    let proj = tape.matmul(diff, rm)?;
                    let shifted = tape.add_row(proj, rv)?;
                    tape.row_l2_norms(shifted)
                };
                let pos = score(&mut tape, &heads, &tails)?;
                let neg = score(&mut tape, &neg_heads, &neg_tails)?;
                let pos_rep = tape.gather_rows(pos, &pos_of_neg)?;
                let gap = tape.sub(pos_rep, neg)?;
                let margin = tape.constant(Matrix::filled(pos_of_neg.len(), 1, config.margin))?;
                let hinge_in = tape.add(gap, margin)?;
                let hinge = tape.relu(hinge_in)?;
                let loss = tape.sum(hinge)?;
                let mut grads = tape.backward(loss)?;

                let gtypes: Vec<Matrix> = type_vars.iter().map(|&v| grads.take(v)).collect();
                let mut params: Vec<&mut Matrix> = table.types.iter_mut().collect();
                adam_types.step(&mut params, &gtypes)?;
                adam_rel[rel].step(
                    &mut [&mut table.relation_vectors[rel], &mut table.relation_matrices[rel]],
                    &[grads.take(rv), grads.take(rm)],
                )?;
            }
        }
        for m in &mut table.types {
            clip_rows_to_unit_ball(m);
        }
    }
    quantize(&mut table);
    Ok(table)
}
