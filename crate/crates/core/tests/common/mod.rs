#![allow(dead_code)]

use bpurf_core::geometry::{Point, Polygon, Rect};
use bpurf_core::graph::{build_graph, GraphBundle};
use bpurf_core::prompt::BoundaryPrompt;
use bpurf_core::schema::{CityData, DataSchema, EntityTable, EntityTypeSpec, RelationDataset, RelationSpec};
use bpurf_core::embedding::{init_transr, TokenEmbeddingTable, TransrConfig};
use bpurf_core::region::RegionModel;
use bpurf_core::synth::{generate_city, SynthCity, SynthConfig};
use bpurf_core::trainer::{train, TrainingConfig};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_config(seed: u64) -> SynthConfig {
    SynthConfig {
        n_poi: 600,
        n_road: 150,
        n_junction: 60,
        trip_count: 800,
        seed,
        ..Default::default()
    }
}

pub fn city(cfg: &SynthConfig) -> (SynthCity, GraphBundle) {
    let city = generate_city(cfg).unwrap();
    let bundle = build_graph(&city.to_city_data()).unwrap();
    (city, bundle)
}

/// Rectangle with area fraction in `[lo, hi]` of `bbox`, inside it.
pub fn random_rect(rng: &mut impl Rng, bbox: &Rect, lo: f64, hi: f64) -> Rect {
    let frac = rng.random_range(lo..=hi);
    let aspect: f64 = rng.random_range(0.5..=2.0);
    let w = (frac * aspect).sqrt().min(1.0) * bbox.width();
    let h = (frac / aspect).sqrt().min(1.0) * bbox.height();
    let x0 = bbox.min_x + rng.random_range(0.0..=1.0) * (bbox.width() - w);
    let y0 = bbox.min_y + rng.random_range(0.0..=1.0) * (bbox.height() - h);
    Rect::new(x0, y0, x0 + w, y0 + h)
}

/// Star-shaped (possibly concave) simple polygon around a random center.
pub fn random_star(rng: &mut impl Rng, bbox: &Rect, radius_frac: f64) -> Polygon {
    let c = Point::new(
        rng.random_range(bbox.min_x..=bbox.max_x),
        rng.random_range(bbox.min_y..=bbox.max_y),
    );
    let r_max = radius_frac * bbox.width().min(bbox.height());
    let n = rng.random_range(5..12);
    let ring: Vec<Point> = (0..n)
        .map(|i| {
            let a = std::f64::consts::TAU * (i as f64 + rng.random_range(0.1..0.9)) / n as f64;
            let r = r_max * rng.random_range(0.3..=1.0);
            Point::new(c.x + r * a.cos(), c.y + r * a.sin())
        })
        .collect();
    Polygon::new(ring, vec![]).unwrap()
}

/// Rectangle with a centered rectangular hole.
pub fn rect_with_hole(r: &Rect, hole_frac: f64) -> BoundaryPrompt {
    let (cx, cy) = ((r.min_x + r.max_x) / 2.0, (r.min_y + r.max_y) / 2.0);
    let (hw, hh) = (r.width() * hole_frac / 2.0, r.height() * hole_frac / 2.0);
    let ext = vec![
        Point::new(r.min_x, r.min_y),
        Point::new(r.max_x, r.min_y),
        Point::new(r.max_x, r.max_y),
        Point::new(r.min_x, r.max_y),
    ];
    let hole = vec![
        Point::new(cx - hw, cy - hh),
        Point::new(cx - hw, cy + hh),
        Point::new(cx + hw, cy + hh),
        Point::new(cx + hw, cy - hh),
    ];
    BoundaryPrompt::from_polygon(Polygon::new(ext, vec![hole]).unwrap())
}

/// Mixed boundaries: rectangles of several sizes, star polygons, one with a
/// hole, one two-part multipolygon.
pub fn mixed_boundaries(rng: &mut impl Rng, bbox: &Rect, n: usize) -> Vec<BoundaryPrompt> {
    let mut out = Vec::with_capacity(n);
    out.push(rect_with_hole(&random_rect(rng, bbox, 0.05, 0.1), 0.5));
    let a = random_rect(rng, bbox, 0.005, 0.02);
    let b = random_rect(rng, bbox, 0.005, 0.02);
    out.push(BoundaryPrompt::new(vec![Polygon::rect(a).unwrap(), Polygon::rect(b).unwrap()]).unwrap());
    while out.len() < n {
        let p = match out.len() % 3 {
            0 => BoundaryPrompt::rect(random_rect(rng, bbox, 0.0005, 0.01)).unwrap(),
            1 => BoundaryPrompt::rect(random_rect(rng, bbox, 0.01, 0.1)).unwrap(),
            _ => BoundaryPrompt::from_polygon(random_star(rng, bbox, 0.15)),
        };
        out.push(p);
    }
    out
}

/// A city of bare points of one spatial type, each linked to one of
/// `n_cat` categories.
pub fn points_city(points: &[Point], n_cat: usize) -> CityData {
    let schema = DataSchema {
        entity_types: vec![
            EntityTypeSpec {
                name: "poi".into(),
                spatial: true,
                file: Some("poi.csv".into()),
                id_column: "id".into(),
                x_column: Some("x".into()),
                y_column: Some("y".into()),
            },
            EntityTypeSpec {
                name: "cat".into(),
                spatial: false,
                file: None,
                id_column: "id".into(),
                x_column: None,
                y_column: None,
            },
        ],
        relations: vec![RelationSpec {
            src_type: "poi".into(),
            dst_type: "cat".into(),
            file: "rel.csv".into(),
            src_column: "poi".into(),
            dst_column: "cat".into(),
        }],
        base_dir: Default::default(),
    };
    CityData {
        entities: vec![
            EntityTable {
                type_name: "poi".into(),
                ids: (0..points.len()).map(|i| format!("p{i}")).collect(),
                coords: Some(points.to_vec()),
            },
            EntityTable {
                type_name: "cat".into(),
                ids: (0..n_cat).map(|i| format!("c{i}")).collect(),
                coords: None,
            },
        ],
        datasets: vec![RelationDataset {
            spec: schema.relations[0].clone(),
            pairs: (0..points.len()).map(|i| (format!("p{i}"), format!("c{}", i % n_cat))).collect(),
        }],
        schema,
    }
}

pub fn uniform_points(rng: &mut impl Rng, n: usize, bbox: &Rect) -> Vec<Point> {
    (0..n)
        .map(|_| Point::new(rng.random_range(bbox.min_x..=bbox.max_x), rng.random_range(bbox.min_y..=bbox.max_y)))
        .collect()
}

pub fn token_table(bundle: &GraphBundle, dim: usize) -> TokenEmbeddingTable {
    init_transr(
        &bundle.graph,
        &TransrConfig {
            dim,
            epochs: 20,
            ..Default::default()
        },
    )
    .unwrap()
}

/// Small training settings that run in well under a second.
pub fn tiny_training(steps: usize, seed: u64) -> TrainingConfig {
    TrainingConfig {
        batch_size: 8,
        steps,
        d_region: 24,
        pool_size: 16,
        seed,
        ..Default::default()
    }
}

pub fn tiny_model(city: &SynthCity, bundle: &GraphBundle, config: &TrainingConfig) -> RegionModel {
    let table = token_table(bundle, 8);
    train(bundle, table, &city.trips, config, None).unwrap().model
}
