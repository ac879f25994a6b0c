//! Synthetic cities with planted spatial structure, gravity-model trips and
//! point-level task labels drawn from a known field.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, Rect};
use crate::rtree::{Entry, RTree, DEFAULT_BRANCHING};
use crate::schema::{write_schema, CityData, DataSchema, EntityTable, EntityTypeSpec, RelationDataset, RelationSpec};
use crate::trips::{write_trips, Trip};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_poi: usize,
    pub n_road: usize,
    pub n_junction: usize,
    pub n_categories: usize,
    pub n_road_categories: usize,
    pub n_clusters: usize,
    /// `[x_min, y_min, x_max, y_max]`.
    pub bbox: [f64; 4],
    pub trip_count: usize,
    pub gravity_decay: f64,
    pub noise_sd: f64,
    /// Cluster standard deviation as a fraction of the larger bbox side.
    pub cluster_spread: f64,
    /// Fraction of POIs placed uniformly instead of around a cluster.
    pub background_fraction: f64,
    /// Probability that a POI takes one of its cluster's preferred categories.
    pub category_bias: f64,
    /// Multiplier from intensity to expected event count.
    pub count_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_poi: 2000,
            n_road: 600,
            n_junction: 200,
            n_categories: 20,
            n_road_categories: 6,
            n_clusters: 6,
            bbox: [0.0, 0.0, 1000.0, 1000.0],
            trip_count: 6000,
            gravity_decay: 150.0,
            noise_sd: 0.05,
            cluster_spread: 0.07,
            background_fraction: 0.1,
            category_bias: 0.7,
            count_scale: 1.0,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn bbox_rect(&self) -> Rect {
        let [a, b, c, d] = self.bbox;
        Rect::new(a, b, c, d)
    }

    fn check(&self) -> Result<()> {
        let r = self.bbox_rect();
        if !(r.width() > 0.0 && r.height() > 0.0) || self.bbox.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateBbox);
        }
        if self.noise_sd < 0.0 || !self.noise_sd.is_finite() {
            return Err(Error::InvalidConfig("noise_sd must be a finite value >= 0".into()));
        }
        if self.n_poi > 0 && (self.n_clusters == 0 || self.n_categories == 0) {
            return Err(Error::InvalidConfig("POIs need at least one cluster and one category".into()));
        }
        if self.n_road > 0 && self.n_road_categories == 0 {
            return Err(Error::InvalidConfig("roads need at least one road category".into()));
        }
        if self.trip_count > 0 && self.gravity_decay <= 0.0 {
            return Err(Error::InvalidConfig("gravity_decay must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: Point,
    pub weight: f64,
    pub bandwidth: f64,
}

/// Ground-truth label field: a Gaussian mixture plus a per-category offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedField {
    pub bumps: Vec<Bump>,
    pub category_coef: Vec<f64>,
    pub noise_sd: f64,
}

impl PlantedField {
    /// Noise-free intensity at `p` for a point of category `cat`.
    pub fn intensity(&self, p: Point, cat: usize) -> f64 {
        let mix: f64 = self
            .bumps
            .iter()
            .map(|b| b.weight * (-p.dist2(b.center) / (2.0 * b.bandwidth * b.bandwidth)).exp())
            .sum();
        mix + self.category_coef.get(cat).copied().unwrap_or(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Count,
    Intensity,
}

/// Point-level labels. Intensity: field value plus Gaussian noise. Count: a
/// Poisson draw with mean `count_scale · max(intensity, 0)`.
pub fn label_points<R: Rng>(
    field: &PlantedField,
    task: TaskKind,
    points: &[(Point, usize)],
    count_scale: f64,
    rng: &mut R,
) -> Vec<f64> {
    let noise = Normal::new(0.0, field.noise_sd).expect("noise_sd >= 0");
    points
        .iter()
        .map(|&(p, cat)| {
            let v = field.intensity(p, cat) + noise.sample(rng);
            match task {
                TaskKind::Intensity => v,
                TaskKind::Count => {
                    let lambda = count_scale * v.max(0.0);
                    if lambda > 0.0 {
                        Poisson::new(lambda).expect("positive rate").sample(rng)
                    } else {
                        0.0
                    }
                }
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub x: f64,
    pub y: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub entity_counts: std::collections::BTreeMap<String, usize>,
    pub relation_counts: std::collections::BTreeMap<String, usize>,
    pub cluster_centers: Vec<Point>,
    pub trip_count: usize,
    pub intensity_events: usize,
    pub count_events: usize,
}

#[derive(Clone, Debug)]
pub struct SynthCity {
    pub config: SynthConfig,
    pub cluster_centers: Vec<Point>,
    pub pois: Vec<Point>,
    pub poi_category: Vec<usize>,
    pub roads: Vec<Point>,
    pub road_category: Vec<usize>,
    pub road_junctions: Vec<Vec<usize>>,
    pub junctions: Vec<Point>,
    pub trips: Vec<Trip>,
    pub field: PlantedField,
    pub intensity_events: Vec<Event>,
    pub count_events: Vec<Event>,
}

fn clamp_into(p: Point, r: &Rect) -> Point {
    Point::new(p.x.clamp(r.min_x, r.max_x), p.y.clamp(r.min_y, r.max_y))
}

fn uniform_in<R: Rng>(rng: &mut R, r: &Rect) -> Point {
    Point::new(rng.random_range(r.min_x..=r.max_x), rng.random_range(r.min_y..=r.max_y))
}

pub fn generate_city(config: &SynthConfig) -> Result<SynthCity> {
    config.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let bbox = config.bbox_rect();
    let extent = bbox.width().max(bbox.height());
    let inner = Rect::new(
        bbox.min_x + 0.1 * bbox.width(),
        bbox.min_y + 0.1 * bbox.height(),
        bbox.max_x - 0.1 * bbox.width(),
        bbox.max_y - 0.1 * bbox.height(),
    );

    // Cluster centers, kept apart by rejection with a relaxing threshold.
    let mut centers: Vec<Point> = Vec::with_capacity(config.n_clusters);
    let mut min_sep = 0.8 * extent / (config.n_clusters.max(1) as f64).sqrt();
    while centers.len() < config.n_clusters {
        let mut placed = false;
        for _ in 0..200 {
            let c = uniform_in(&mut rng, &inner);
            if centers.iter().all(|o| o.dist(c) >= min_sep) {
                centers.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            min_sep *= 0.8;
        }
    }

    let spread = config.cluster_spread * extent;
    let gauss = Normal::new(0.0, spread.max(f64::MIN_POSITIVE)).expect("finite spread");
    let around = |rng: &mut ChaCha8Rng, c: Point, scale: f64| {
        clamp_into(
            Point::new(c.x + scale * gauss.sample(rng), c.y + scale * gauss.sample(rng)),
            &bbox,
        )
    };

    let per_cluster = (config.n_categories / config.n_clusters.max(1)).max(1);
    let mut pois = Vec::with_capacity(config.n_poi);
    let mut poi_category = Vec::with_capacity(config.n_poi);
    for _ in 0..config.n_poi {
        let k = rng.random_range(0..config.n_clusters);
        let p = if rng.random::<f64>() < config.background_fraction {
            uniform_in(&mut rng, &bbox)
        } else {
            around(&mut rng, centers[k], 1.0)
        };
        let cat = if rng.random::<f64>() < config.category_bias {
            (k * per_cluster + rng.random_range(0..per_cluster)) % config.n_categories
        } else {
            rng.random_range(0..config.n_categories)
        };
        pois.push(p);
        poi_category.push(cat);
    }

    let mut junctions = Vec::with_capacity(config.n_junction);
    for _ in 0..config.n_junction {
        let p = if !centers.is_empty() && rng.random::<f64>() < 0.6 {
            let k = rng.random_range(0..centers.len());
            around(&mut rng, centers[k], 2.0)
        } else {
            uniform_in(&mut rng, &bbox)
        };
        junctions.push(p);
    }
    let jtree = RTree::bulk_load(
        junctions
            .iter()
            .enumerate()
            .map(|(i, &p)| Entry { point: p, item: i })
            .collect(),
        DEFAULT_BRANCHING,
    );
    let mut roads = Vec::with_capacity(config.n_road);
    let mut road_category = Vec::with_capacity(config.n_road);
    let mut road_junctions = Vec::with_capacity(config.n_road);
    for _ in 0..config.n_road {
        let p = if !centers.is_empty() && rng.random::<f64>() < 0.6 {
            let k = rng.random_range(0..centers.len());
            around(&mut rng, centers[k], 2.0)
        } else {
            uniform_in(&mut rng, &bbox)
        };
        roads.push(p);
        road_category.push(rng.random_range(0..config.n_road_categories));
        road_junctions.push(jtree.nearest_k(p, 2).into_iter().map(|(_, e)| e.item).collect());
    }

    let mut bumps = Vec::with_capacity(centers.len().max(1));
    for &c in &centers {
        bumps.push(Bump {
            center: c,
            weight: rng.random_range(1.0..3.0),
            bandwidth: spread * rng.random_range(1.0..2.0),
        });
    }
    if bumps.is_empty() {
        bumps.push(Bump {
            center: bbox.center(),
            weight: 1.0,
            bandwidth: 0.1 * extent,
        });
    }
    let category_coef = (0..config.n_categories).map(|_| rng.random_range(0.0..0.5)).collect();
    let field = PlantedField {
        bumps,
        category_coef,
        noise_sd: config.noise_sd,
    };

    let mut trips = Vec::with_capacity(config.trip_count);
    if !pois.is_empty() {
        while trips.len() < config.trip_count {
            let o = pois[rng.random_range(0..pois.len())];
            let d = pois[rng.random_range(0..pois.len())];
            if rng.random::<f64>() < (-o.dist(d) / config.gravity_decay).exp() {
                trips.push(Trip { origin: o, dest: d });
            }
        }
    }

    let labelled: Vec<(Point, usize)> = pois.iter().copied().zip(poi_category.iter().copied()).collect();
    let intensity = label_points(&field, TaskKind::Intensity, &labelled, config.count_scale, &mut rng);
    let intensity_events = pois
        .iter()
        .zip(&intensity)
        .map(|(p, &v)| Event { x: p.x, y: p.y, value: v })
        .collect();
    let counts = label_points(&field, TaskKind::Count, &labelled, config.count_scale, &mut rng);
    let mut count_events = Vec::new();
    for (p, &n) in pois.iter().zip(&counts) {
        for _ in 0..n as usize {
            count_events.push(Event { x: p.x, y: p.y, value: 1.0 });
        }
    }

    Ok(SynthCity {
        config: config.clone(),
        cluster_centers: centers,
        pois,
        poi_category,
        roads,
        road_category,
        road_junctions,
        junctions,
        trips,
        field,
        intensity_events,
        count_events,
    })
}

fn spatial_spec(name: &str) -> EntityTypeSpec {
    EntityTypeSpec {
        name: name.into(),
        spatial: true,
        file: Some(format!("{name}.csv").into()),
        id_column: "id".into(),
        x_column: Some("x".into()),
        y_column: Some("y".into()),
    }
}

fn virtual_spec(name: &str) -> EntityTypeSpec {
    EntityTypeSpec {
        name: name.into(),
        spatial: false,
        file: Some(format!("{name}.csv").into()),
        id_column: "id".into(),
        x_column: None,
        y_column: None,
    }
}

fn relation_spec(src: &str, dst: &str) -> RelationSpec {
    RelationSpec {
        src_type: src.into(),
        dst_type: dst.into(),
        file: format!("rel_{src}_{dst}.csv").into(),
        src_column: src.into(),
        dst_column: dst.into(),
    }
}

pub fn city_schema() -> DataSchema {
    DataSchema {
        entity_types: vec![
            spatial_spec("poi"),
            virtual_spec("poi_category"),
            spatial_spec("road"),
            spatial_spec("junction"),
            virtual_spec("road_category"),
        ],
        relations: vec![
            relation_spec("poi", "poi_category"),
            relation_spec("road", "junction"),
            relation_spec("road", "road_category"),
        ],
        base_dir: Default::default(),
    }
}

fn write_points(path: &Path, prefix: &str, pts: &[Point]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "x", "y"])?;
    for (i, p) in pts.iter().enumerate() {
        w.write_record([format!("{prefix}{i}"), p.x.to_string(), p.y.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn write_ids(path: &Path, prefix: &str, n: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id"])?;
    for i in 0..n {
        w.write_record([format!("{prefix}{i}")])?;
    }
    w.flush()?;
    Ok(())
}

fn write_pairs(path: &Path, header: [&str; 2], pairs: impl Iterator<Item = (String, String)>) -> Result<usize> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    let mut n = 0;
    for (a, b) in pairs {
        w.write_record([a, b])?;
        n += 1;
    }
    w.flush()?;
    Ok(n)
}

pub fn write_events(path: &Path, events: &[Event]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "y", "value"])?;
    for e in events {
        w.write_record([e.x.to_string(), e.y.to_string(), e.value.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

impl SynthCity {
    pub fn manifest(&self) -> SynthManifest {
        let mut entity_counts = std::collections::BTreeMap::new();
        entity_counts.insert("poi".to_string(), self.pois.len());
        entity_counts.insert("poi_category".to_string(), self.config.n_categories);
        entity_counts.insert("road".to_string(), self.roads.len());
        entity_counts.insert("junction".to_string(), self.junctions.len());
        entity_counts.insert("road_category".to_string(), self.config.n_road_categories);
        let mut relation_counts = std::collections::BTreeMap::new();
        relation_counts.insert("poi->poi_category".to_string(), self.pois.len());
        let mut rj: Vec<(usize, usize)> = self
            .road_junctions
            .iter()
            .enumerate()
            .flat_map(|(r, js)| js.iter().map(move |&j| (r, j)))
            .collect();
        rj.sort_unstable();
        rj.dedup();
        relation_counts.insert("road->junction".to_string(), rj.len());
        relation_counts.insert("road->road_category".to_string(), self.roads.len());
        SynthManifest {
            seed: self.config.seed,
            entity_counts,
            relation_counts,
            cluster_centers: self.cluster_centers.clone(),
            trip_count: self.trips.len(),
            intensity_events: self.intensity_events.len(),
            count_events: self.count_events.len(),
        }
    }

    /// The city as loaded tables, equal to what reading the written bundle gives.
    pub fn to_city_data(&self) -> CityData {
        let points = |name: &str, prefix: &str, pts: &[Point]| EntityTable {
            type_name: name.into(),
            ids: (0..pts.len()).map(|i| format!("{prefix}{i}")).collect(),
            coords: Some(pts.to_vec()),
        };
        let ids = |name: &str, prefix: &str, n: usize| EntityTable {
            type_name: name.into(),
            ids: (0..n).map(|i| format!("{prefix}{i}")).collect(),
            coords: None,
        };
        let schema = city_schema();
        let pairs = |k: usize| -> Vec<(String, String)> {
            match k {
                0 => self
                    .poi_category
                    .iter()
                    .enumerate()
                    .map(|(i, c)| (format!("p{i}"), format!("c{c}")))
                    .collect(),
                1 => self
                    .road_junctions
                    .iter()
                    .enumerate()
                    .flat_map(|(r, js)| js.iter().map(move |j| (format!("r{r}"), format!("j{j}"))))
                    .collect(),
                _ => self
                    .road_category
                    .iter()
                    .enumerate()
                    .map(|(i, c)| (format!("r{i}"), format!("k{c}")))
                    .collect(),
            }
        };
        let datasets = schema
            .relations
            .iter()
            .enumerate()
            .map(|(k, spec)| RelationDataset {
                spec: spec.clone(),
                pairs: pairs(k),
            })
            .collect();
        CityData {
            entities: vec![
                points("poi", "p", &self.pois),
                ids("poi_category", "c", self.config.n_categories),
                points("road", "r", &self.roads),
                points("junction", "j", &self.junctions),
                ids("road_category", "k", self.config.n_road_categories),
            ],
            datasets,
            schema,
        }
    }

    /// Write the bundle: schema, entity and relation CSVs, trips, events,
    /// the planted field and a manifest of ground-truth counts.
    pub fn write_bundle(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_schema(&city_schema(), &dir.join("schema.json"))?;
        write_points(&dir.join("poi.csv"), "p", &self.pois)?;
        write_points(&dir.join("road.csv"), "r", &self.roads)?;
        write_points(&dir.join("junction.csv"), "j", &self.junctions)?;
        write_ids(&dir.join("poi_category.csv"), "c", self.config.n_categories)?;
        write_ids(&dir.join("road_category.csv"), "k", self.config.n_road_categories)?;
        write_pairs(
            &dir.join("rel_poi_poi_category.csv"),
            ["poi", "poi_category"],
            self.poi_category.iter().enumerate().map(|(i, c)| (format!("p{i}"), format!("c{c}"))),
        )?;
        write_pairs(
            &dir.join("rel_road_junction.csv"),
            ["road", "junction"],
            self.road_junctions
                .iter()
                .enumerate()
                .flat_map(|(r, js)| js.iter().map(move |j| (format!("r{r}"), format!("j{j}")))),
        )?;
        write_pairs(
            &dir.join("rel_road_road_category.csv"),
            ["road", "road_category"],
            self.road_category.iter().enumerate().map(|(i, c)| (format!("r{i}"), format!("k{c}"))),
        )?;
        write_trips(&self.trips, &dir.join("trips.csv"))?;
        write_events(&dir.join("events_intensity.csv"), &self.intensity_events)?;
        write_events(&dir.join("events_count.csv"), &self.count_events)?;
        fs::write(dir.join("field.json"), serde_json::to_string_pretty(&self.field)?)?;
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest())?)?;
        fs::write(dir.join("synth_config.json"), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }
}
