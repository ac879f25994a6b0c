//! Inter-subgraph message passing, its parameters, and the end-to-end
//! boundary-to-embedding pipeline over a persisted model directory.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::channels::{channel_operators, ChannelConfig};
use super::pool::ContextPool;
use crate::embedding::{embed_subgraphs, EncoderParams, TokenEmbeddingTable};
use crate::error::{Error, Result};
use crate::extraction::{extract_token_set, RegionSubgraph, VirtualBitmap};
use crate::geometry::Point;
use crate::graph::GraphBundle;
use crate::numeric::{load_matrix_list, save_matrix_list, Matrix, Tape, Var};
use crate::prompt::BoundaryPrompt;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SubLayer {
    pub w: Matrix,
    pub b: Matrix,
}

/// `W`/bias per inter-subgraph layer, the flow bilinear form `M_f` and the
/// two-output prediction head `W_p`. Matrices act on row vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionModelParams {
    pub layers: Vec<SubLayer>,
    pub m_f: Matrix,
    pub w_p: Matrix,
}

pub struct RegionVars {
    pub layers: Vec<(Var, Var)>,
    pub m_f: Var,
    pub w_p: Var,
}

impl RegionModelParams {
    pub fn init(in_dim: usize, d_region: usize, n_channels: usize, l_sub: usize, rng: &mut impl Rng) -> Result<Self> {
        if l_sub == 0 || d_region == 0 {
            return Err(Error::InvalidConfig("region model needs l_sub >= 1 and d_region >= 1".into()));
        }
        let layers = (0..l_sub)
            .map(|l| {
                let fan_in = if l == 0 { in_dim } else { d_region } * (1 + n_channels);
                SubLayer {
                    w: Matrix::glorot(fan_in, d_region, rng),
                    b: Matrix::zeros(1, d_region),
                }
            })
            .collect();
        Ok(Self {
            layers,
            m_f: Matrix::glorot(d_region, d_region, rng),
            w_p: Matrix::glorot(d_region, 2, rng),
        })
    }

    pub fn d_region(&self) -> usize {
        self.m_f.rows()
    }

    pub fn matrices(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect();
        out.push(&self.m_f);
        out.push(&self.w_p);
        out
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect();
        out.push(&mut self.m_f);
        out.push(&mut self.w_p);
        out
    }

    pub fn from_matrices(flat: Vec<Matrix>) -> Result<Self> {
        if flat.len() < 4 || flat.len() % 2 != 0 {
            return Err(Error::shape("region_params", format!("{} matrices", flat.len())));
        }
        let mut it = flat.into_iter();
        let n_layers = (it.len() - 2) / 2;
        let layers = (0..n_layers)
            .map(|_| SubLayer {
                w: it.next().expect("counted"),
                b: it.next().expect("counted"),
            })
            .collect();
        Ok(Self {
            layers,
            m_f: it.next().expect("counted"),
            w_p: it.next().expect("counted"),
        })
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Result<RegionVars> {
        let mut push = |m: &Matrix| if trainable { tape.param(m.clone()) } else { tape.constant(m.clone()) };
        let layers = self
            .layers
            .iter()
            .map(|l| Ok((push(&l.w)?, push(&l.b)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(RegionVars {
            layers,
            m_f: push(&self.m_f)?,
            w_p: push(&self.w_p)?,
        })
    }
}

/// `h <- relu([h; A_1 h; ...; A_c h] W + b)` for each layer, where `A_x` is
/// the message operator of channel `x`.
pub fn message_pass(tape: &mut Tape, h: Var, ops: &[Matrix], layers: &[(Var, Var)]) -> Result<Var> {
    let op_vars = ops.iter().map(|a| tape.constant(a.clone())).collect::<Result<Vec<_>>>()?;
    let mut h = h;
    for &(w, b) in layers {
        let mut parts = vec![h];
        for &a in &op_vars {
            parts.push(tape.matmul(a, h)?);
        }
        let x = if parts.len() == 1 { h } else { tape.concat_cols(&parts)? };
        let y = tape.matmul(x, w)?;
        let y = tape.add_row(y, b)?;
        h = tape.relu(y)?;
    }
    Ok(h)
}

/// Message passing without gradients.
pub fn message_pass_values(h: &Matrix, ops: &[Matrix], params: &RegionModelParams) -> Result<Matrix> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone())?;
    let vars = params.register(&mut tape, false)?;
    let out = message_pass(&mut tape, hv, ops, &vars.layers)?;
    Ok(tape.value(out).clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    pub token_dim: usize,
    pub type_names: Vec<String>,
    pub n_relations: usize,
    pub encoder_layers: usize,
    pub d_region: usize,
    pub l_sub: usize,
    pub channels: ChannelConfig,
    pub spatial_only_aggregation: bool,
    pub k_aug: usize,
    pub d_max: f64,
    /// Fixed multiplier applied to aggregated vectors before message passing.
    pub input_scale: f64,
    pub graph_dir: Option<PathBuf>,
    pub seed: u64,
    pub steps: usize,
    #[serde(default)]
    pub training: serde_json::Value,
}

/// A region that went through the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedRegion {
    pub embedding: Vec<f64>,
    pub token_counts: Vec<usize>,
    pub center: Point,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionModel {
    pub manifest: ModelManifest,
    pub table: TokenEmbeddingTable,
    pub encoder: EncoderParams,
    pub params: RegionModelParams,
    pub pool: ContextPool,
}

impl RegionModel {
    pub fn n_types(&self) -> usize {
        self.manifest.type_names.len()
    }

    pub fn d_region(&self) -> usize {
        self.params.d_region()
    }

    /// Extract and augment the subgraph for one boundary.
    pub fn prepare(&self, prompt: &BoundaryPrompt, bundle: &GraphBundle, bitmap: &mut VirtualBitmap) -> Result<RegionSubgraph> {
        let mut sub = extract_token_set(prompt, &bundle.graph, &bundle.gir, &bundle.svindex, bitmap)?;
        sub.augment(&bundle.graph, self.manifest.k_aug, self.manifest.d_max);
        Ok(sub)
    }

    /// Prepare many boundaries in parallel, one bitmap per worker.
    pub fn prepare_all(&self, prompts: &[BoundaryPrompt], bundle: &GraphBundle) -> Vec<Result<RegionSubgraph>> {
        prompts
            .par_iter()
            .map_init(|| VirtualBitmap::for_graph(&bundle.graph), |bm, p| self.prepare(p, bundle, bm))
            .collect()
    }

    /// Aggregated (pre message passing) vectors, one row per subgraph.
    pub fn aggregate(&self, subs: &[&RegionSubgraph]) -> Result<Matrix> {
        embed_subgraphs(subs, &self.table, &self.encoder, self.manifest.spatial_only_aggregation)
    }

    /// Message passing over the given rows together with the context pool;
    /// returns embeddings for the given rows only.
    pub fn forward_with_context(&self, h_s: &Matrix, degrees: &[Vec<Vec<u32>>], centers: &[Point]) -> Result<Matrix> {
        let b = h_s.rows();
        if b == 0 {
            return Ok(Matrix::zeros(0, self.d_region()));
        }
        let mut rows: Vec<Vec<f64>> = (0..b).map(|i| h_s.row(i).to_vec()).collect();
        let mut degs = degrees.to_vec();
        let mut cents = centers.to_vec();
        if !self.manifest.channels.enabled().is_empty() {
            for e in &self.pool.entries {
                rows.push(e.h_s.clone());
                degs.push(e.degrees.clone());
                cents.push(e.center);
            }
        }
        let n = rows.len();
        let d_in = h_s.cols();
        let mut all = Matrix::new(n, d_in, rows.concat())?;
        all.scale_in_place(self.manifest.input_scale);
        let ops = channel_operators(&self.manifest.channels, &degs, &cents)?;
        let out = message_pass_values(&all, &ops, &self.params)?;
        let d = out.cols();
        Matrix::new(b, d, out.data()[..b * d].to_vec())
    }

    /// Embeddings of the context pool regions, with the pool as their batch.
    pub fn pool_embeddings(&self) -> Result<Matrix> {
        let d_in = self.n_types() * self.manifest.token_dim;
        let n = self.pool.len();
        if n == 0 {
            return Ok(Matrix::zeros(0, self.d_region()));
        }
        let rows: Vec<f64> = self.pool.entries.iter().flat_map(|e| e.h_s.iter().copied()).collect();
        let mut h = Matrix::new(n, d_in, rows)?;
        h.scale_in_place(self.manifest.input_scale);
        let degs: Vec<Vec<Vec<u32>>> = self.pool.entries.iter().map(|e| e.degrees.clone()).collect();
        let cents: Vec<Point> = self.pool.entries.iter().map(|e| e.center).collect();
        let ops = channel_operators(&self.manifest.channels, &degs, &cents)?;
        message_pass_values(&h, &ops, &self.params)
    }

    pub fn embed_subgraphs(&self, subs: &[&RegionSubgraph]) -> Result<Matrix> {
        let n_types = self.n_types();
        let h_s = self.aggregate(subs)?;
        let degrees: Vec<Vec<Vec<u32>>> = subs.iter().map(|s| s.degree_sequences(n_types)).collect();
        let centers: Vec<Point> = subs.iter().map(|s| s.center).collect();
        self.forward_with_context(&h_s, &degrees, &centers)
    }

    /// Full pipeline. Boundaries that fail (for example with no tokens)
    /// report their own error; the rest are embedded together.
    pub fn embed_regions(&self, prompts: &[BoundaryPrompt], bundle: &GraphBundle) -> Result<Vec<Result<EmbeddedRegion>>> {
        self.embed_prepared(self.prepare_all(prompts, bundle))
    }

    /// Embed already prepared subgraphs together, passing failures through.
    pub fn embed_prepared(&self, prepared: Vec<Result<RegionSubgraph>>) -> Result<Vec<Result<EmbeddedRegion>>> {
        let ok: Vec<&RegionSubgraph> = prepared.iter().filter_map(|r| r.as_ref().ok()).collect();
        let emb = self.embed_subgraphs(&ok)?;
        let n_types = self.n_types();
        let mut row = 0;
        Ok(prepared
            .into_iter()
            .map(|r| {
                r.map(|sub| {
                    let e = EmbeddedRegion {
                        embedding: emb.row(row).to_vec(),
                        token_counts: sub.token_counts(n_types),
                        center: sub.center,
                    };
                    row += 1;
                    e
                })
            })
            .collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        self.table.save(&dir.join("tokens"))?;
        save_matrix_list(&dir.join("encoder.bin"), &self.encoder.matrices())?;
        save_matrix_list(&dir.join("region.bin"), &self.params.matrices())?;
        self.pool.save(&dir.join("context_pool.bin"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        if !mpath.exists() {
            return Err(Error::MissingFile(mpath));
        }
        let manifest: ModelManifest = serde_json::from_str(&fs::read_to_string(&mpath)?)?;
        if manifest.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                what: "model manifest".into(),
                expected: MODEL_FORMAT_VERSION.to_string(),
                found: manifest.format_version.to_string(),
            });
        }
        let table = TokenEmbeddingTable::load(&dir.join("tokens"))?;
        let encoder = EncoderParams::from_matrices(
            manifest.token_dim,
            manifest.type_names.len(),
            manifest.n_relations + 1,
            load_matrix_list(&dir.join("encoder.bin"))?,
        )?;
        let params = RegionModelParams::from_matrices(load_matrix_list(&dir.join("region.bin"))?)?;
        let pool = ContextPool::load(&dir.join("context_pool.bin"))?;
        Ok(Self {
            manifest,
            table,
            encoder,
            params,
            pool,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_block_passes_input_through() {
        let d = 3;
        let mut w = Matrix::zeros(4 * d, d);
        for i in 0..d {
            w.set(i, i, 1.0);
        }
        let params = RegionModelParams {
            layers: vec![SubLayer {
                w,
                b: Matrix::zeros(1, d),
            }],
            m_f: Matrix::identity(d),
            w_p: Matrix::zeros(d, 2),
        };
        let h = Matrix::from_rows(&[vec![1.0, 2.0, 0.5]]).unwrap();
        let zero = Matrix::zeros(1, 1);
        let out = message_pass_values(&h, &[zero.clone(), zero.clone(), zero], &params).unwrap();
        assert_eq!(out, h);
    }

    #[test]
    fn empty_relevance_gives_bias_only_messages() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = RegionModelParams::init(2, 4, 3, 1, &mut rng).unwrap();
        let h = Matrix::from_rows(&[vec![0.3, -0.7]]).unwrap();
        let zero = Matrix::zeros(1, 1);
        let out = message_pass_values(&h, &[zero.clone(), zero.clone(), zero], &params).unwrap();
        let mut tape = Tape::new();
        let x = tape
            .constant(Matrix::from_rows(&[vec![0.3, -0.7, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]]).unwrap())
            .unwrap();
        let w = tape.constant(params.layers[0].w.clone()).unwrap();
        let y = tape.matmul(x, w).unwrap();
        let y = tape.relu(y).unwrap();
        assert_eq!(&out, tape.value(y));
    }

    #[test]
    fn params_flat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = RegionModelParams::init(6, 5, 2, 2, &mut rng).unwrap();
        let flat = p.matrices().into_iter().cloned().collect();
        assert_eq!(RegionModelParams::from_matrices(flat).unwrap(), p);
    }
}
