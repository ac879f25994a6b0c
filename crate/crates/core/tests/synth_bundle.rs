mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use bpurf_core::downstream::TaskDataset;
use bpurf_core::geometry::{Point, Polygon, Rect};
use bpurf_core::prompt::BoundaryPrompt;
use bpurf_core::schema::{load_city, load_relation_dataset, load_schema, validate, write_schema};
use bpurf_core::synth::{city_schema, generate_city, label_points, SynthConfig, TaskKind};
use common::*;
use proptest::prelude::*;
use rand::Rng;

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn same_seed_gives_identical_bytes() {
    let cfg = SynthConfig {
        seed: 42,
        ..small_config(42)
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_city(&cfg).unwrap().write_bundle(a.path()).unwrap();
    generate_city(&cfg).unwrap().write_bundle(b.path()).unwrap();
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert!(fa.len() >= 10);
    assert_eq!(fa, fb);

    let c = tempfile::tempdir().unwrap();
    generate_city(&SynthConfig { seed: 43, ..cfg }).unwrap().write_bundle(c.path()).unwrap();
    assert_ne!(fa["poi.csv"], files(c.path())["poi.csv"]);
}

#[test]
fn no_pois_gives_header_only_files() {
    let cfg = SynthConfig {
        n_poi: 0,
        trip_count: 0,
        ..small_config(1)
    };
    let dir = tempfile::tempdir().unwrap();
    generate_city(&cfg).unwrap().write_bundle(dir.path()).unwrap();
    assert_eq!(fs::read_to_string(dir.path().join("poi.csv")).unwrap().trim(), "id,x,y");
    assert_eq!(
        fs::read_to_string(dir.path().join("rel_poi_poi_category.csv")).unwrap().trim(),
        "poi,poi_category"
    );
}

/// Lloyd's algorithm with k-means++ seeding; best of several restarts.
fn kmeans(points: &[Point], k: usize, seed: u64) -> Vec<Point> {
    let mut r = rng(seed);
    let mut best: Option<(f64, Vec<Point>)> = None;
    for _ in 0..10 {
        let mut centers = vec![points[r.random_range(0..points.len())]];
        while centers.len() < k {
            let d2: Vec<f64> = points
                .iter()
                .map(|p| centers.iter().map(|c| p.dist2(*c)).fold(f64::INFINITY, f64::min))
                .collect();
            let total: f64 = d2.iter().sum();
            let mut u = r.random_range(0.0..total);
            let mut pick = points.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            centers.push(points[pick]);
        }
        let mut inertia = 0.0;
        for _ in 0..100 {
            let mut sum = vec![(0.0, 0.0, 0usize); k];
            inertia = 0.0;
            for p in points {
                let (j, d) = centers
                    .iter()
                    .enumerate()
                    .map(|(j, c)| (j, p.dist2(*c)))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap();
                inertia += d;
                sum[j].0 += p.x;
                sum[j].1 += p.y;
                sum[j].2 += 1;
            }
            let next: Vec<Point> = sum
                .iter()
                .zip(&centers)
                .map(|(s, c)| if s.2 == 0 { *c } else { Point::new(s.0 / s.2 as f64, s.1 / s.2 as f64) })
                .collect();
            if next == centers {
                break;
            }
            centers = next;
        }
        if best.as_ref().is_none_or(|b| inertia < b.0) {
            best = Some((inertia, centers));
        }
    }
    best.unwrap().1
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn kmeans_recovers_cluster_centers() {
    let cfg = SynthConfig {
        n_poi: 1000,
        n_clusters: 4,
        trip_count: 0,
        seed: 42,
        ..Default::default()
    };
    let city = generate_city(&cfg).unwrap();
    let found = kmeans(&city.pois, 4, 7);
    let diag = cfg.bbox_rect().width().hypot(cfg.bbox_rect().height());
    let worst = permutations(4)
        .into_iter()
        .map(|perm| {
            perm.iter()
                .enumerate()
                .map(|(i, &j)| city.cluster_centers[i].dist(found[j]))
                .fold(0.0, f64::max)
        })
        .fold(f64::INFINITY, f64::min);
    assert!(worst <= 0.1 * diag, "worst center error {worst} vs diagonal {diag}");
}

#[test]
fn noiseless_labels_match_mixture_formula() {
    let cfg = SynthConfig {
        noise_sd: 0.0,
        trip_count: 0,
        ..small_config(3)
    };
    let city = generate_city(&cfg).unwrap();
    let mut r = rng(9);
    let pts: Vec<(Point, usize)> = (0..100)
        .map(|_| {
            let p = Point::new(r.random_range(0.0..1000.0), r.random_range(0.0..1000.0));
            (p, r.random_range(0..cfg.n_categories))
        })
        .collect();
    let got = label_points(&city.field, TaskKind::Intensity, &pts, 1.0, &mut r);
    for ((p, cat), y) in pts.iter().zip(got) {
        let mut want = city.field.category_coef[*cat];
        for b in &city.field.bumps {
            let (dx, dy) = (p.x - b.center.x, p.y - b.center.y);
            want += b.weight * (-(dx * dx + dy * dy) / (2.0 * b.bandwidth * b.bandwidth)).exp();
        }
        assert!((y - want).abs() <= 1e-12 * want.abs().max(1.0), "{y} vs {want}");
    }
}

#[test]
fn count_labels_add_over_disjoint_regions() {
    let city = generate_city(&small_config(5)).unwrap();
    assert!(!city.count_events.is_empty());
    let task = TaskDataset::new("count", city.count_events.clone()).unwrap();
    let bbox = city.config.bbox_rect();
    let mut r = rng(6);
    for _ in 0..50 {
        // Split a random rectangle at a random x into two disjoint halves.
        let outer = random_rect(&mut r, &bbox, 0.02, 0.3);
        let cut = r.random_range(outer.min_x + 1.0..outer.max_x - 1.0);
        let a = Rect::new(outer.min_x, outer.min_y, cut - 0.5, outer.max_y);
        let b = Rect::new(cut + 0.5, outer.min_y, outer.max_x, outer.max_y);
        let union = BoundaryPrompt::new(vec![Polygon::rect(a).unwrap(), Polygon::rect(b).unwrap()]).unwrap();
        let y = task.aggregate_labels(&[
            BoundaryPrompt::rect(a).unwrap(),
            BoundaryPrompt::rect(b).unwrap(),
            union,
        ]);
        assert_eq!(y[2], y[0] + y[1]);
        let scan = city
            .count_events
            .iter()
            .filter(|e| a.contains(Point::new(e.x, e.y)))
            .count();
        assert_eq!(y[0], scan as f64);
    }
}

#[test]
fn validation_counts_equal_generator_counts() {
    let city = generate_city(&small_config(8)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    city.write_bundle(dir.path()).unwrap();
    let data = load_city(&dir.path().join("schema.json")).unwrap();
    let report = validate(&data.schema, &data.entities, &data.datasets);
    assert!(report.issues.is_empty(), "{:?}", report.issues);
    let m = city.manifest();
    assert_eq!(report.entity_counts, m.entity_counts);
    let rel: BTreeMap<String, usize> = report.relation_counts.into_iter().collect();
    assert_eq!(rel, m.relation_counts);
}

#[test]
fn schema_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("schema.json");
    let s = city_schema();
    write_schema(&s, &path).unwrap();
    let back = load_schema(&path).unwrap();
    assert_eq!(back.entity_types, s.entity_types);
    assert_eq!(back.relations, s.relations);
}

fn first_appearance(pairs: &[(String, String)]) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = Vec::new();
    for p in pairs {
        if !out.contains(p) {
            out.push(p.clone());
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(32) })]

    #[test]
    fn dedup_is_idempotent(raw in prop::collection::vec((0u8..6, 0u8..4), 0..40)) {
        let dir = tempfile::tempdir().unwrap();
        let mut schema = city_schema();
        schema.base_dir = dir.path().to_path_buf();
        let spec = schema.relations[0].clone();
        let pairs: Vec<(String, String)> = raw.iter().map(|(a, b)| (format!("p{a}"), format!("c{b}"))).collect();
        let write = |pairs: &[(String, String)]| {
            let mut w = csv::Writer::from_path(dir.path().join(&spec.file)).unwrap();
            w.write_record(["poi", "poi_category"]).unwrap();
            for (a, b) in pairs {
                w.write_record([a, b]).unwrap();
            }
            w.flush().unwrap();
        };
        write(&pairs);
        let once = load_relation_dataset(&schema, &spec).unwrap();
        let twice = load_relation_dataset(&schema, &spec).unwrap();
        prop_assert_eq!(&once.pairs, &twice.pairs);
        prop_assert_eq!(&once.pairs, &first_appearance(&pairs));
        // Writing the deduplicated list back and reloading changes nothing.
        write(&once.pairs);
        prop_assert_eq!(load_relation_dataset(&schema, &spec).unwrap().pairs, once.pairs);
    }
}
