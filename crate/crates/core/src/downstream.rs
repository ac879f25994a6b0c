//! Region-level labels from point events, ridge regression on region
//! embeddings, and batch-wise evaluation.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::graph::GraphBundle;
use crate::numeric::Matrix;
use crate::prompt::BoundaryPrompt;
use crate::region::RegionModel;
use crate::rtree::{Entry, RTree, DEFAULT_BRANCHING};
use crate::synth::Event;
use crate::trainer::{sample_region_boundary, seeded_stream, SamplerConfig, STREAM_EVAL};

/// Point events with values; a count task has every value equal to 1.
#[derive(Clone, Debug)]
pub struct TaskDataset {
    pub name: String,
    pub events: Vec<Event>,
    index: RTree<u32>,
}

impl TaskDataset {
    pub fn new(name: impl Into<String>, events: Vec<Event>) -> Result<Self> {
        if let Some(e) = events.iter().find(|e| !(e.x.is_finite() && e.y.is_finite() && e.value.is_finite())) {
            return Err(Error::MalformedData {
                file: "events".into(),
                detail: format!("non-finite event {e:?}"),
            });
        }
        let index = RTree::bulk_load(
            events
                .iter()
                .enumerate()
                .map(|(i, e)| Entry {
                    point: Point::new(e.x, e.y),
                    item: i as u32,
                })
                .collect(),
            DEFAULT_BRANCHING,
        );
        Ok(Self {
            name: name.into(),
            events,
            index,
        })
    }

    /// Read an `x,y,value` CSV. The task name defaults to the file stem.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut rdr = csv::Reader::from_path(path)?;
        let mut events = Vec::new();
        for rec in rdr.deserialize() {
            let e: Event = rec.map_err(|e| Error::MalformedData {
                file: path.to_path_buf(),
                detail: e.to_string(),
            })?;
            events.push(e);
        }
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::new(name, events)
    }

    /// Sum of event values inside each boundary.
    pub fn aggregate_labels(&self, boundaries: &[BoundaryPrompt]) -> Vec<f64> {
        boundaries
            .iter()
            .map(|b| {
                let mut hits: Vec<u32> = Vec::new();
                self.index.visit_rect(&b.mbr(), |e| {
                    if b.contains(e.point) {
                        hits.push(e.item);
                    }
                });
                hits.sort_unstable();
                hits.iter().map(|&i| self.events[i as usize].value).sum()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardized {
    pub z: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    pub degenerate: bool,
}

/// z-scores with the population standard deviation.
pub fn standardize(y: &[f64]) -> Result<Standardized> {
    if y.len() < 2 {
        return Err(Error::BatchTooSmall { needed: 2, got: y.len() });
    }
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let degenerate = !(sd > 1e-12 * mean.abs().max(1.0));
    let z = y.iter().map(|v| if degenerate { 0.0 } else { (v - mean) / sd }).collect();
    Ok(Standardized { z, mean, sd, degenerate })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub beta: Vec<f64>,
    pub intercept: f64,
    pub x_mean: Vec<f64>,
    pub lambda: f64,
}

impl RidgeModel {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.intercept + x.iter().zip(&self.x_mean).zip(&self.beta).map(|((a, m), b)| (a - m) * b).sum::<f64>()
    }

    pub fn predict(&self, x: &Matrix) -> Vec<f64> {
        (0..x.rows()).map(|i| self.predict_row(x.row(i))).collect()
    }
}

/// `β = (XcᵀXc + λI)⁻¹ Xcᵀ yc` on column-centered data via Cholesky;
/// the intercept is `mean(y)`.
pub fn ridge_fit(x: &Matrix, y: &[f64], lambda: f64) -> Result<RidgeModel> {
    let (n, d) = x.shape();
    if n != y.len() {
        return Err(Error::shape("ridge_fit", format!("{n} rows for {} targets", y.len())));
    }
    if n < 2 {
        return Err(Error::BatchTooSmall { needed: 2, got: n });
    }
    if lambda < 0.0 {
        return Err(Error::InvalidConfig("ridge lambda must be non-negative".into()));
    }
    let x_mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64).collect();
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let xc = DMatrix::from_fn(n, d, |i, j| x.get(i, j) - x_mean[j]);
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
    let mut a = xc.transpose() * &xc;
    for j in 0..d {
        a[(j, j)] += lambda;
    }
    let rhs = xc.transpose() * yc;
    let chol = a.cholesky().ok_or(Error::SingularSystem)?;
    // Rounding can leave a tiny positive pivot on an exactly singular system.
    let pivots: Vec<f64> = chol.l_dirty().diagonal().iter().map(|v| v * v).collect();
    let max_pivot = pivots.iter().copied().fold(0.0, f64::max);
    if pivots.iter().any(|&p| p <= 1e-14 * max_pivot) {
        return Err(Error::SingularSystem);
    }
    let beta = chol.solve(&rhs);
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem);
    }
    Ok(RidgeModel {
        beta: beta.iter().copied().collect(),
        intercept: y_mean,
        x_mean,
        lambda,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub r2: f64,
}

/// MAE, RMSE and `1 - SS_res / SS_tot` (with `SS_tot` about the mean of
/// `y_true`; a constant `y_true` gives R² of 1 for a perfect fit, else 0).
pub fn metrics(y_true: &[f64], y_pred: &[f64]) -> Metrics {
    let n = y_true.len().max(1) as f64;
    let mae = y_true.iter().zip(y_pred).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let ss_res: f64 = y_true.iter().zip(y_pred).map(|(a, b)| (a - b).powi(2)).sum();
    let mean = y_true.iter().sum::<f64>() / n;
    let ss_tot: f64 = y_true.iter().map(|a| (a - mean).powi(2)).sum();
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };
    Metrics {
        mae,
        rmse: (ss_res / n).sqrt(),
        r2,
    }
}

/// Anything that turns boundaries into fixed-length vectors.
pub trait RegionEmbedder {
    fn dim(&self) -> usize;
    /// One row per boundary, in order; failing boundaries report their error.
    fn embed_batch(&self, boundaries: &[BoundaryPrompt]) -> Result<Vec<Result<Vec<f64>>>>;
}

pub struct ModelEmbedder<'a> {
    pub model: &'a RegionModel,
    pub bundle: &'a GraphBundle,
}

impl RegionEmbedder for ModelEmbedder<'_> {
    fn dim(&self) -> usize {
        self.model.d_region()
    }

    fn embed_batch(&self, boundaries: &[BoundaryPrompt]) -> Result<Vec<Result<Vec<f64>>>> {
        Ok(self
            .model
            .embed_regions(boundaries, self.bundle)?
            .into_iter()
            .map(|r| r.map(|e| e.embedding))
            .collect())
    }
}

/// Gaussian vectors seeded by the boundary hash: a negative control.
pub struct NoiseEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl RegionEmbedder for NoiseEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, boundaries: &[BoundaryPrompt]) -> Result<Vec<Result<Vec<f64>>>> {
        Ok(boundaries
            .iter()
            .map(|b| {
                let h = u64::from_str_radix(&b.hash_hex(), 16).unwrap_or(0);
                let mut rng = ChaCha8Rng::seed_from_u64(h ^ self.seed);
                Ok((0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            })
            .collect())
    }
}

/// The task label itself as a one-dimensional embedding.
pub struct LabelEmbedder<'a> {
    pub task: &'a TaskDataset,
}

impl RegionEmbedder for LabelEmbedder<'_> {
    fn dim(&self) -> usize {
        1
    }

    fn embed_batch(&self, boundaries: &[BoundaryPrompt]) -> Result<Vec<Result<Vec<f64>>>> {
        Ok(self.task.aggregate_labels(boundaries).into_iter().map(|y| Ok(vec![y])).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_batches: usize,
    pub batch_size: usize,
    pub train_fraction: f64,
    pub lambda: f64,
    pub seed: u64,
    pub sampler: SamplerConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_batches: 5,
            batch_size: 40,
            train_fraction: 0.7,
            lambda: 1.0,
            seed: 17,
            sampler: SamplerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub batch: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub mae: f64,
    pub rmse: f64,
    pub r2: f64,
    pub label_mean: f64,
    pub label_sd: f64,
    pub boundary_hashes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub batches: Vec<BatchReport>,
    pub mean_mae: f64,
    pub mean_rmse: f64,
    pub mean_r2: f64,
    pub n_regions: usize,
    pub seed: u64,
    pub config: EvalConfig,
}

/// Sample `n` evaluation boundaries from the evaluation RNG stream.
pub fn sample_eval_boundaries(rng: &mut ChaCha8Rng, bundle: &GraphBundle, sampler: &SamplerConfig, n: usize) -> Result<Vec<BoundaryPrompt>> {
    let bbox = bundle.graph.bbox().ok_or(Error::EmptyGraph)?;
    (0..n).map(|_| sample_region_boundary(rng, &bbox, sampler, &bundle.gir)).collect()
}

fn embed_all(embedder: &dyn RegionEmbedder, boundaries: &[BoundaryPrompt]) -> Result<Matrix> {
    let rows = embedder
        .embed_batch(boundaries)?
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Matrix::new(rows.len(), embedder.dim(), rows.concat())
}

/// Per batch: sample regions, embed them, standardize their labels, split
/// 70/30 at random, fit ridge on the first part and score the second.
pub fn evaluate(embedder: &dyn RegionEmbedder, bundle: &GraphBundle, task: &TaskDataset, config: &EvalConfig) -> Result<EvalReport> {
    if config.batch_size < 4 {
        return Err(Error::BatchTooSmall {
            needed: 4,
            got: config.batch_size,
        });
    }
    let mut rng = seeded_stream(config.seed, STREAM_EVAL);
    let mut batches = Vec::with_capacity(config.n_batches);
    for bi in 0..config.n_batches {
        let boundaries = sample_eval_boundaries(&mut rng, bundle, &config.sampler, config.batch_size)?;
        let x = embed_all(embedder, &boundaries)?;
        let y = standardize(&task.aggregate_labels(&boundaries))?;
        let mut order: Vec<usize> = (0..boundaries.len()).collect();
        order.shuffle(&mut rng);
        let n_train = ((config.batch_size as f64 * config.train_fraction).round() as usize).clamp(2, config.batch_size - 1);
        let (tr, te) = order.split_at(n_train);
        let pick = |idx: &[usize]| -> Result<(Matrix, Vec<f64>)> {
            let rows: Vec<f64> = idx.iter().flat_map(|&i| x.row(i).to_vec()).collect();
            Ok((Matrix::new(idx.len(), x.cols(), rows)?, idx.iter().map(|&i| y.z[i]).collect()))
        };
        let (xtr, ytr) = pick(tr)?;
        let (xte, yte) = pick(te)?;
        let model = ridge_fit(&xtr, &ytr, config.lambda)?;
        let m = metrics(&yte, &model.predict(&xte));
        batches.push(BatchReport {
            batch: bi,
            n_train: tr.len(),
            n_test: te.len(),
            mae: m.mae,
            rmse: m.rmse,
            r2: m.r2,
            label_mean: y.mean,
            label_sd: y.sd,
            boundary_hashes: boundaries.iter().map(BoundaryPrompt::hash_hex).collect(),
        });
    }
    let k = batches.len().max(1) as f64;
    Ok(EvalReport {
        task: task.name.clone(),
        mean_mae: batches.iter().map(|b| b.mae).sum::<f64>() / k,
        mean_rmse: batches.iter().map(|b| b.rmse).sum::<f64>() / k,
        mean_r2: batches.iter().map(|b| b.r2).sum::<f64>() / k,
        n_regions: batches.len() * config.batch_size,
        seed: config.seed,
        config: config.clone(),
        batches,
    })
}

/// A ridge head with the label statistics of the batch it was fitted on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskHead {
    pub task: String,
    pub ridge: RidgeModel,
    pub label_mean: f64,
    pub label_sd: f64,
    pub batch_size: usize,
}

impl TaskHead {
    /// Fit on one evaluation-stream batch using every region.
    pub fn fit(embedder: &dyn RegionEmbedder, bundle: &GraphBundle, task: &TaskDataset, config: &EvalConfig) -> Result<Self> {
        let mut rng = seeded_stream(config.seed, STREAM_EVAL);
        let boundaries = sample_eval_boundaries(&mut rng, bundle, &config.sampler, config.batch_size)?;
        let x = embed_all(embedder, &boundaries)?;
        let y = standardize(&task.aggregate_labels(&boundaries))?;
        Ok(Self {
            task: task.name.clone(),
            ridge: ridge_fit(&x, &y.z, config.lambda)?,
            label_mean: y.mean,
            label_sd: y.sd,
            batch_size: config.batch_size,
        })
    }

    pub fn predict(&self, embedding: &[f64]) -> f64 {
        self.ridge.predict_row(embedding)
    }
}
