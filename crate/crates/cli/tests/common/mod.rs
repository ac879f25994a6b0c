#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use bpurf_core::downstream::TaskHead;
use bpurf_core::embedding::{init_transr, TransrConfig};
use bpurf_core::graph::{build_graph, GraphBundle};
use bpurf_core::region::RegionModel;
use bpurf_core::synth::{generate_city, SynthCity, SynthConfig};
use bpurf_core::trainer::{train, TrainingConfig};
use bpurf_cli::commands::fit_heads;

pub fn small_city(seed: u64) -> SynthConfig {
    SynthConfig {
        n_poi: 600,
        n_road: 150,
        n_junction: 60,
        trip_count: 800,
        seed,
        ..Default::default()
    }
}

pub fn tiny_training(steps: usize, seed: u64) -> TrainingConfig {
    TrainingConfig {
        batch_size: 8,
        steps,
        seed,
        d_region: 16,
        pool_size: 16,
        ..Default::default()
    }
}

pub struct Built {
    pub city: SynthCity,
    pub bundle: GraphBundle,
    pub model: RegionModel,
    pub heads: BTreeMap<String, TaskHead>,
}

/// City, graph, a briefly trained model and an `intensity` task head.
pub fn build(seed: u64, steps: usize, dir: &Path) -> Built {
    let city = generate_city(&small_city(seed)).unwrap();
    city.write_bundle(dir).unwrap();
    let bundle = build_graph(&city.to_city_data()).unwrap();
    let table = init_transr(
        &bundle.graph,
        &TransrConfig {
            dim: 8,
            epochs: 10,
            ..Default::default()
        },
    )
    .unwrap();
    let model = train(&bundle, table, &city.trips, &tiny_training(steps, seed), None).unwrap().model;
    let spec = format!("intensity={}", dir.join("events_intensity.csv").display());
    let heads = fit_heads(&model, &bundle, &[spec]).unwrap();
    Built {
        city,
        bundle,
        model,
        heads,
    }
}
