//! Online region sampling, the three losses and the training loop.

pub mod flows;
pub mod losses;
pub mod sampler;

use std::collections::VecDeque;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use flows::{FlowMatrix, TripIndex};
pub use losses::{info_nce, mobility_loss, mobility_target, pred_loss, pred_targets};
pub use sampler::{make_positive, overlap_area, sample_region_boundary, SamplerConfig};

use crate::embedding::{embed_subgraphs, EncoderParams, NodeBatch, TokenEmbeddingTable};
use crate::error::{Error, Result};
use crate::extraction::{extract_token_set, RegionSubgraph, VirtualBitmap};
use crate::geometry::Rect;
use crate::graph::GraphBundle;
use crate::numeric::{Adam, AdamConfig, Matrix, Tape, Var};
use crate::prompt::BoundaryPrompt;
use crate::region::{
    channel_operators, message_pass, ChannelConfig, ContextPool, ModelManifest, PoolEntry, RegionModel,
    RegionModelParams, RegionVars, MODEL_FORMAT_VERSION,
};
use crate::trips::Trip;

/// RNG streams derived from the configured seed.
pub const STREAM_INIT: u64 = 0;
pub const STREAM_TRAIN: u64 = 1;
pub const STREAM_EVAL: u64 = 2;

pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    #[serde(alias = "epochs")]
    pub steps: usize,
    pub tau: f64,
    pub lambda_nce: f64,
    pub lambda_mob: f64,
    pub lambda_pred: f64,
    pub sampler: SamplerConfig,
    /// Positive jitter as a fraction of the boundary extent.
    pub rho: f64,
    pub mini_mode: bool,
    pub n_batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub d_region: usize,
    pub l_sub: usize,
    pub encoder_layers: usize,
    pub channels: ChannelConfig,
    pub spatial_only_aggregation: bool,
    pub k_aug: usize,
    /// Augmentation distance threshold as a fraction of the graph bbox diagonal.
    pub d_max_frac: f64,
    pub pool_size: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            steps: 200,
            tau: 0.1,
            lambda_nce: 1.0,
            lambda_mob: 1.0,
            lambda_pred: 0.5,
            sampler: SamplerConfig::default(),
            rho: 0.1,
            mini_mode: false,
            n_batch: 8,
            adam: AdamConfig::default(),
            seed: 17,
            d_region: 144,
            l_sub: 1,
            encoder_layers: 2,
            channels: ChannelConfig::default(),
            spatial_only_aggregation: false,
            k_aug: 3,
            d_max_frac: 0.02,
            pool_size: 64,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be at least 2".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidConfig("tau must be positive".into()));
        }
        if !(self.rho > 0.0 && self.rho <= 0.5) {
            return Err(Error::InvalidConfig("rho must lie in (0, 0.5]".into()));
        }
        if self.mini_mode && self.n_batch == 0 {
            return Err(Error::InvalidConfig("mini mode needs n_batch >= 1".into()));
        }
        self.sampler.validate()?;
        self.channels.validate()
    }
}

/// Extract and augment a list of boundaries in parallel.
pub fn prepare_subgraphs(
    prompts: &[BoundaryPrompt],
    bundle: &GraphBundle,
    k_aug: usize,
    d_max: f64,
) -> Vec<Result<RegionSubgraph>> {
    use rayon::prelude::*;
    prompts
        .par_iter()
        .map_init(
            || VirtualBitmap::for_graph(&bundle.graph),
            |bm, p| {
                let mut s = extract_token_set(p, &bundle.graph, &bundle.gir, &bundle.svindex, bm)?;
                s.augment(&bundle.graph, k_aug, d_max);
                Ok(s)
            },
        )
        .collect()
}

/// Everything about a batch that does not depend on trainable parameters:
/// anchors are rows `0..B`, positives rows `B..2B`.
pub struct PreparedBatch {
    pub anchors: Vec<BoundaryPrompt>,
    pub subgraphs: Vec<RegionSubgraph>,
    pub nodes: NodeBatch,
    pub ops: Vec<Matrix>,
    pub flows: FlowMatrix,
    pub mob_target: Matrix,
    pub pred_target: Matrix,
}

impl PreparedBatch {
    pub fn new(
        anchors: Vec<BoundaryPrompt>,
        subgraphs: Vec<RegionSubgraph>,
        flows: FlowMatrix,
        table: &TokenEmbeddingTable,
        config: &TrainingConfig,
        n_rel_slots: usize,
    ) -> Result<Self> {
        let b = anchors.len();
        if subgraphs.len() != 2 * b || flows.outflow.len() != b {
            return Err(Error::shape("prepared_batch", "need B anchors, 2B subgraphs and B flow rows"));
        }
        let refs: Vec<&RegionSubgraph> = subgraphs.iter().collect();
        let nodes = NodeBatch::build(&refs, table, n_rel_slots, config.spatial_only_aggregation)?;
        let n_types = table.types.len();
        let degrees: Vec<Vec<Vec<u32>>> = subgraphs.iter().map(|s| s.degree_sequences(n_types)).collect();
        let centers: Vec<_> = subgraphs.iter().map(|s| s.center).collect();
        let ops = channel_operators(&config.channels, &degrees, &centers)?;
        let mob_target = mobility_target(&flows.flow);
        let pred_target = pred_targets(&flows);
        Ok(Self {
            anchors,
            subgraphs,
            nodes,
            ops,
            flows,
            mob_target,
            pred_target,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.anchors.len()
    }
}

pub struct LossOutput {
    pub total: Var,
    pub nce: Var,
    pub mob: Var,
    pub pred: Var,
    pub encoder_vars: Vec<Var>,
    pub region_vars: RegionVars,
}

/// Weights applied to the three loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub tau: f64,
    pub nce: f64,
    pub mob: f64,
    pub pred: f64,
}

impl From<&TrainingConfig> for LossWeights {
    fn from(c: &TrainingConfig) -> Self {
        Self {
            tau: c.tau,
            nce: c.lambda_nce,
            mob: c.lambda_mob,
            pred: c.lambda_pred,
        }
    }
}

/// Full forward pass from token rows to `L_total` for one prepared batch.
pub fn forward_loss(
    tape: &mut Tape,
    batch: &PreparedBatch,
    encoder: &EncoderParams,
    params: &RegionModelParams,
    input_scale: f64,
    weights: LossWeights,
    trainable: bool,
) -> Result<LossOutput> {
    let b = batch.batch_size();
    let encoder_vars = encoder.register(tape, trainable)?;
    let region_vars = params.register(tape, trainable)?;
    let h = batch.nodes.encode(tape, encoder, &encoder_vars)?;
    let hs = batch.nodes.aggregate(tape, h)?;
    let hs = tape.scale(hs, input_scale)?;
    let out = message_pass(tape, hs, &batch.ops, &region_vars.layers)?;
    let idx_a: Vec<usize> = (0..b).collect();
    let idx_p: Vec<usize> = (b..2 * b).collect();
    let r = tape.gather_rows(out, &idx_a)?;
    let p = tape.gather_rows(out, &idx_p)?;
    let nce = info_nce(tape, r, p, weights.tau)?;
    let mob = mobility_loss(tape, r, &batch.mob_target, region_vars.m_f)?;
    let pred = pred_loss(tape, r, &batch.pred_target, region_vars.w_p)?;
    let a = tape.scale(nce, weights.nce)?;
    let m = tape.scale(mob, weights.mob)?;
    let q = tape.scale(pred, weights.pred)?;
    let total = tape.add(a, m)?;
    let total = tape.add(total, q)?;
    Ok(LossOutput {
        total,
        nce,
        mob,
        pred,
        encoder_vars,
        region_vars,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub l_nce: f64,
    pub l_mob: f64,
    pub l_pred: f64,
    pub l_total: f64,
    pub batch_signature: String,
    pub boundary_hashes: Vec<String>,
}

pub fn batch_signature(anchors: &[BoundaryPrompt]) -> String {
    let mut h = Sha256::new();
    for a in anchors {
        h.update(a.hash_hex().as_bytes());
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub struct TrainOutcome {
    pub model: RegionModel,
    pub log: Vec<StepLog>,
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFiniteValue(d) => Error::TrainingDiverged { step, detail: d },
        other => other,
    }
}

/// Build anchors and positives for one step and extract their subgraphs.
/// A positive that falls on no tokens is replaced by its anchor.
fn build_step_batch(
    anchors: Vec<BoundaryPrompt>,
    rng: &mut ChaCha8Rng,
    bundle: &GraphBundle,
    trip_index: &TripIndex,
    table: &TokenEmbeddingTable,
    config: &TrainingConfig,
    d_max: f64,
    n_rel_slots: usize,
) -> Result<PreparedBatch> {
    let positives: Vec<BoundaryPrompt> = anchors.iter().map(|a| make_positive(a, rng, config.rho)).collect();
    let mut prompts = anchors.clone();
    prompts.extend(positives);
    let mut subs = Vec::with_capacity(prompts.len());
    let b = anchors.len();
    for (i, r) in prepare_subgraphs(&prompts, bundle, config.k_aug, d_max).into_iter().enumerate() {
        match r {
            Ok(s) => subs.push(s),
            Err(Error::EmptyRegion) if i >= b => subs.push(subs[i - b].clone()),
            Err(e) => return Err(e),
        }
    }
    let flows = trip_index.flows(&anchors);
    PreparedBatch::new(anchors, subs, flows, table, config, n_rel_slots)
}

fn sample_batch(rng: &mut ChaCha8Rng, bbox: &Rect, bundle: &GraphBundle, config: &TrainingConfig) -> Result<Vec<BoundaryPrompt>> {
    (0..config.batch_size)
        .map(|_| sample_region_boundary(rng, bbox, &config.sampler, &bundle.gir))
        .collect()
}

/// Train the encoder and region model. The token table is kept fixed.
/// Every step is written to `sink` as one JSON line when given.
pub fn train(
    bundle: &GraphBundle,
    table: TokenEmbeddingTable,
    trips: &[Trip],
    config: &TrainingConfig,
    mut sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let graph = &bundle.graph;
    table.check_against(graph)?;
    let bbox = graph.bbox().ok_or(Error::EmptyGraph)?;
    let n_types = graph.types().len();
    let n_rel = graph.relations().len();
    let d_max = config.d_max_frac * bbox.diagonal();

    let mut init_rng = seeded_stream(config.seed, STREAM_INIT);
    let mut rng = seeded_stream(config.seed, STREAM_TRAIN);
    let mut encoder = EncoderParams::init(n_types, n_rel, table.dim, config.encoder_layers, &mut init_rng)?;
    let mut params = RegionModelParams::init(
        n_types * table.dim,
        config.d_region,
        config.channels.enabled().len(),
        config.l_sub,
        &mut init_rng,
    )?;
    for m in encoder.matrices_mut().into_iter().chain(params.matrices_mut()) {
        m.quantize_f32();
    }

    let trip_index = TripIndex::new(trips);
    let presampled: Vec<Vec<BoundaryPrompt>> = if config.mini_mode && config.steps > 0 {
        (0..config.n_batch)
            .map(|_| sample_batch(&mut rng, &bbox, bundle, config))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let shapes: Vec<(usize, usize)> = encoder
        .matrices()
        .into_iter()
        .chain(params.matrices())
        .map(Matrix::shape)
        .collect();
    let mut adam = Adam::new(config.adam, &shapes);
    let weights = LossWeights::from(config);
    let mut input_scale = 1.0;
    let mut recent: VecDeque<(BoundaryPrompt, RegionSubgraph)> = VecDeque::with_capacity(config.pool_size);
    let mut log = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let anchors = if config.mini_mode {
            presampled[step % config.n_batch].clone()
        } else {
            sample_batch(&mut rng, &bbox, bundle, config)?
        };
        let batch = build_step_batch(anchors, &mut rng, bundle, &trip_index, &table, config, d_max, n_rel + 1)?;
        if step == 0 {
            let b = batch.batch_size();
            let refs: Vec<&RegionSubgraph> = batch.subgraphs[..b].iter().collect();
            let hs = embed_subgraphs(&refs, &table, &encoder, config.spatial_only_aggregation)?;
            let mean_norm = (0..b)
                .map(|i| hs.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
                .sum::<f64>()
                / b as f64;
            // Scale so entries are of unit size on average.
            if mean_norm > 1e-12 {
                input_scale = f64::from(((hs.cols() as f64).sqrt() / mean_norm) as f32);
            }
        }

        let mut tape = Tape::new();
        let out = forward_loss(&mut tape, &batch, &encoder, &params, input_scale, weights, true)
            .map_err(|e| diverged(step, e))?;
        let mut grads = tape.backward(out.total).map_err(|e| diverged(step, e))?;
        let g: Vec<Matrix> = out
            .encoder_vars
            .iter()
            .copied()
            .chain(out.region_vars.layers.iter().flat_map(|&(w, b)| [w, b]))
            .chain([out.region_vars.m_f, out.region_vars.w_p])
            .map(|v| grads.take(v))
            .collect();
        if let Some(bad) = g.iter().position(|m| !m.is_finite()) {
            return Err(Error::TrainingDiverged {
                step,
                detail: format!("non-finite gradient in parameter {bad}"),
            });
        }
        let mut ps: Vec<&mut Matrix> = encoder.matrices_mut();
        ps.extend(params.matrices_mut());
        adam.step(&mut ps, &g)?;

        let rec = StepLog {
            step,
            l_nce: tape.value(out.nce).item(),
            l_mob: tape.value(out.mob).item(),
            l_pred: tape.value(out.pred).item(),
            l_total: tape.value(out.total).item(),
            batch_signature: batch_signature(&batch.anchors),
            boundary_hashes: batch.anchors.iter().map(BoundaryPrompt::hash_hex).collect(),
        };
        if let Some(w) = sink.as_mut() {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
        }
        log::debug!("step {step} total {:.5}", rec.l_total);
        log.push(rec);

        let b = batch.batch_size();
        for (a, s) in batch.anchors.into_iter().zip(batch.subgraphs.into_iter().take(b)) {
            if config.pool_size == 0 {
                break;
            }
            if recent.iter().any(|(x, _)| *x == a) {
                continue;
            }
            if recent.len() == config.pool_size {
                recent.pop_front();
            }
            recent.push_back((a, s));
        }
    }

    for m in encoder.matrices_mut().into_iter().chain(params.matrices_mut()) {
        m.quantize_f32();
    }

    let refs: Vec<&RegionSubgraph> = recent.iter().map(|(_, s)| s).collect();
    let hs = embed_subgraphs(&refs, &table, &encoder, config.spatial_only_aggregation)?;
    let pool = ContextPool {
        entries: recent
            .iter()
            .enumerate()
            .map(|(i, (b, s))| PoolEntry::new(b.clone(), s, n_types, hs.row(i).to_vec()))
            .collect(),
    };

    let manifest = ModelManifest {
        format_version: MODEL_FORMAT_VERSION,
        token_dim: table.dim,
        type_names: table.type_names.clone(),
        n_relations: n_rel,
        encoder_layers: config.encoder_layers,
        d_region: config.d_region,
        l_sub: config.l_sub,
        channels: config.channels.clone(),
        spatial_only_aggregation: config.spatial_only_aggregation,
        k_aug: config.k_aug,
        d_max,
        input_scale,
        graph_dir: None,
        seed: config.seed,
        steps: config.steps,
        training: serde_json::to_value(config)?,
    };
    Ok(TrainOutcome {
        model: RegionModel {
            manifest,
            table,
            encoder,
            params,
            pool,
        },
        log,
    })
}
