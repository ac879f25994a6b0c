//! Indexed versus brute-force extraction timings on random boundaries.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::{brute_force_extract, extract_token_set, VirtualBitmap};
use crate::geometry::Rect;
use crate::graph::GraphBundle;
use crate::prompt::BoundaryPrompt;
use crate::synth::SynthConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub n_queries: usize,
    /// Query areas are uniform in this range, as fractions of the bbox area.
    pub min_area_frac: f64,
    pub max_area_frac: f64,
    pub seed: u64,
    /// Also run the brute-force path and check both agree.
    pub brute_force: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_queries: 200,
            min_area_frac: 0.005,
            max_area_frac: 0.05,
            seed: 17,
            brute_force: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n_spatial: usize,
    pub n_virtual: usize,
    pub n_edges: usize,
    pub n_queries: usize,
    pub empty_queries: usize,
    pub indexed_mean_us: f64,
    pub brute_mean_us: Option<f64>,
    pub speedup: Option<f64>,
    /// Mean spatial tokens per query, empty queries counted as zero.
    pub mean_m_q: f64,
    /// Mean virtual tokens linked to a spatial token, over the whole graph.
    pub mean_d_v: f64,
    pub mismatches: usize,
}

/// Axis-aligned rectangles inside `bbox` with area fraction uniform in
/// `[min_frac, max_frac]` and aspect ratio in `[0.5, 2]`.
pub fn sample_query_rects(rng: &mut impl Rng, bbox: &Rect, n: usize, min_frac: f64, max_frac: f64) -> Vec<Rect> {
    (0..n)
        .map(|_| {
            let frac = if max_frac > min_frac {
                rng.random_range(min_frac..=max_frac)
            } else {
                min_frac
            };
            let aspect: f64 = rng.random_range(0.5..=2.0);
            let fw = (frac * aspect).sqrt().min(1.0);
            let fh = (frac / aspect).sqrt().min(1.0);
            let (w, h) = (fw * bbox.width(), fh * bbox.height());
            let x0 = bbox.min_x + rng.random_range(0.0..=1.0) * (bbox.width() - w);
            let y0 = bbox.min_y + rng.random_range(0.0..=1.0) * (bbox.height() - h);
            Rect::new(x0, y0, x0 + w, y0 + h)
        })
        .collect()
}

pub fn run_bench(bundle: &GraphBundle, config: &BenchConfig) -> Result<BenchReport> {
    if !(config.min_area_frac > 0.0 && config.min_area_frac <= config.max_area_frac && config.max_area_frac <= 1.0) {
        return Err(Error::InvalidConfig("bench area fractions need 0 < min <= max <= 1".into()));
    }
    let graph = &bundle.graph;
    let bbox = graph.bbox().ok_or(Error::DegenerateBbox)?;
    let mut rng = crate::trainer::seeded_stream(config.seed, crate::trainer::STREAM_EVAL);
    let rects = sample_query_rects(&mut rng, &bbox, config.n_queries, config.min_area_frac, config.max_area_frac);
    let prompts = rects.into_iter().map(BoundaryPrompt::rect).collect::<Result<Vec<_>>>()?;

    let mut bitmap = VirtualBitmap::for_graph(graph);
    let mut indexed = Vec::with_capacity(prompts.len());
    let t0 = Instant::now();
    for p in &prompts {
        indexed.push(extract_token_set(p, graph, &bundle.gir, &bundle.svindex, &mut bitmap));
    }
    let indexed_total = t0.elapsed().as_secs_f64();

    let mut brute_total = None;
    let mut mismatches = 0;
    if config.brute_force {
        let t1 = Instant::now();
        let brute: Vec<_> = prompts.iter().map(|p| brute_force_extract(p, graph)).collect();
        brute_total = Some(t1.elapsed().as_secs_f64());
        for (a, b) in indexed.iter().zip(&brute) {
            let same = match (a, b) {
                (Ok(a), Ok(b)) => a == b,
                (Err(Error::EmptyRegion), Err(Error::EmptyRegion)) => true,
                _ => false,
            };
            if !same {
                mismatches += 1;
            }
        }
    }

    let n = prompts.len().max(1) as f64;
    let m_q: usize = indexed.iter().map(|r| r.as_ref().map_or(0, |s| s.spatial_tokens.len())).sum();
    let empty = indexed.iter().filter(|r| r.is_err()).count();
    let indexed_mean_us = indexed_total * 1e6 / n;
    let brute_mean_us = brute_total.map(|t| t * 1e6 / n);
    Ok(BenchReport {
        n_spatial: graph.spatial_count(),
        n_virtual: graph.virtual_count(),
        n_edges: graph.edge_count(),
        n_queries: prompts.len(),
        empty_queries: empty,
        indexed_mean_us,
        brute_mean_us,
        speedup: brute_mean_us.map(|b| b / indexed_mean_us.max(1e-9)),
        mean_m_q: m_q as f64 / n,
        mean_d_v: bundle.svindex.total_links() as f64 / bundle.svindex.spatial_count().max(1) as f64,
        mismatches,
    })
}

/// Synthetic city sizing with roughly `m` tokens in total, keeping the
/// default layout and category counts. Trips are left out.
pub fn scaled_city_config(m: usize, seed: u64) -> SynthConfig {
    let base = SynthConfig::default();
    let n_virtual = base.n_categories + base.n_road_categories;
    let spatial = m.saturating_sub(n_virtual);
    let n_road = spatial * 2 / 10;
    let n_junction = spatial / 10;
    SynthConfig {
        n_poi: spatial - n_road - n_junction,
        n_road,
        n_junction: n_junction.max(2),
        trip_count: 0,
        seed,
        ..base
    }
}
