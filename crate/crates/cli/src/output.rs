//! JSON shape shared by the `embed` command and `/v1/embed`.

use std::collections::BTreeMap;

use bpurf_core::graph::TokenGraph;
use bpurf_core::region::EmbeddedRegion;
use bpurf_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub dim: usize,
    /// f32-rounded; `null` for boundaries that failed.
    pub embeddings: Vec<Option<Vec<f32>>>,
    /// Spatial token counts per type.
    pub token_counts: Vec<Option<BTreeMap<String, usize>>>,
    pub virtual_counts: Vec<Option<BTreeMap<String, usize>>>,
    pub errors: Vec<Option<String>>,
}

pub fn error_label(e: &Error) -> String {
    match e {
        Error::EmptyRegion => "empty_region".into(),
        other => other.to_string(),
    }
}

/// Split per-type counts into spatial and virtual maps keyed by type name.
pub fn count_maps(graph: &TokenGraph, counts: &[usize]) -> (BTreeMap<String, usize>, BTreeMap<String, usize>) {
    let mut spatial = BTreeMap::new();
    let mut virt = BTreeMap::new();
    for (i, (t, &c)) in graph.types().iter().zip(counts).enumerate() {
        if graph.is_spatial_type(i as u16) {
            spatial.insert(t.name.clone(), c);
        } else {
            virt.insert(t.name.clone(), c);
        }
    }
    (spatial, virt)
}

pub fn f32_row(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

impl EmbedResponse {
    pub fn new(dim: usize, graph: &TokenGraph, results: &[Result<EmbeddedRegion>]) -> Self {
        let mut out = Self {
            dim,
            embeddings: Vec::with_capacity(results.len()),
            token_counts: Vec::with_capacity(results.len()),
            virtual_counts: Vec::with_capacity(results.len()),
            errors: Vec::with_capacity(results.len()),
        };
        for r in results {
            match r {
                Ok(e) => {
                    let (s, v) = count_maps(graph, &e.token_counts);
                    out.embeddings.push(Some(f32_row(&e.embedding)));
                    out.token_counts.push(Some(s));
                    out.virtual_counts.push(Some(v));
                    out.errors.push(None);
                }
                Err(e) => {
                    out.embeddings.push(None);
                    out.token_counts.push(None);
                    out.virtual_counts.push(None);
                    out.errors.push(Some(error_label(e)));
                }
            }
        }
        out
    }
}
