//! Data-schema declaration and relation dataset loading.
//!
//! A schema is one JSON document naming entity types (spatial or virtual) and
//! the relations between them. Entity and relation rows live in CSV files with
//! a header row; file paths are resolved relative to the schema file.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityTypeSpec {
    pub name: String,
    pub spatial: bool,
    /// Entity table; mandatory for spatial types, optional for virtual ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    #[serde(default = "default_id_column")]
    pub id_column: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_column: Option<String>,
}

fn default_id_column() -> String {
    "id".to_string()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSpec {
    pub src_type: String,
    pub dst_type: String,
    pub file: PathBuf,
    pub src_column: String,
    pub dst_column: String,
}

impl RelationSpec {
    pub fn name(&self) -> String {
        format!("{}->{}", self.src_type, self.dst_type)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSchema {
    pub entity_types: Vec<EntityTypeSpec>,
    pub relations: Vec<RelationSpec>,
    /// Directory that relative file paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DataSchema {
    pub fn type_spec(&self, name: &str) -> Option<&EntityTypeSpec> {
        self.entity_types.iter().find(|t| t.name == name)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Check uniqueness, spatial columns and cross references.
    pub fn check(&self, path: &Path) -> Result<()> {
        let mut seen = HashSet::new();
        for t in &self.entity_types {
            if t.name.is_empty() {
                return Err(Error::MalformedSchema {
                    path: path.to_path_buf(),
                    detail: "entity_types[].name must be non-empty".into(),
                });
            }
            if !seen.insert(t.name.as_str()) {
                return Err(Error::DuplicateTypeName(t.name.clone()));
            }
            if t.spatial && (t.x_column.is_none() || t.y_column.is_none() || t.file.is_none()) {
                return Err(Error::SpatialColumnsMissing(t.name.clone()));
            }
        }
        for r in &self.relations {
            for ty in [&r.src_type, &r.dst_type] {
                if !seen.contains(ty.as_str()) {
                    return Err(Error::UnknownTypeReference {
                        relation: r.name(),
                        type_name: ty.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

pub fn load_schema(path: &Path) -> Result<DataSchema> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let mut schema: DataSchema = serde_json::from_str(&text).map_err(|e| Error::MalformedSchema {
        path: path.to_path_buf(),
        detail: format!("line {}, column {}: {e}", e.line(), e.column()),
    })?;
    schema.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    schema.check(path)?;
    Ok(schema)
}

pub fn write_schema(schema: &DataSchema, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(schema)?)?;
    Ok(())
}

/// Rows of one entity file: external ids and, for spatial types, coordinates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EntityTable {
    pub type_name: String,
    pub ids: Vec<String>,
    pub coords: Option<Vec<Point>>,
}

impl EntityTable {
    pub fn coordinate_map(&self) -> HashMap<&str, Point> {
        match &self.coords {
            Some(c) => self.ids.iter().map(String::as_str).zip(c.iter().copied()).collect(),
            None => HashMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationDataset {
    pub spec: RelationSpec,
    pub pairs: Vec<(String, String)>,
}

impl RelationDataset {
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::MissingColumn {
            file: path.to_path_buf(),
            column: name.to_string(),
        })
}

fn parse_coord(s: &str, path: &Path, line: usize) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| Error::MalformedData {
        file: path.to_path_buf(),
        detail: format!("line {line}: `{s}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::MalformedData {
            file: path.to_path_buf(),
            detail: format!("line {line}: non-finite coordinate"),
        });
    }
    Ok(v)
}

/// Load an entity table. Duplicate ids keep their first row.
pub fn load_entity_table(schema: &DataSchema, spec: &EntityTypeSpec) -> Result<EntityTable> {
    let mut table = EntityTable {
        type_name: spec.name.clone(),
        ids: Vec::new(),
        coords: spec.spatial.then(Vec::new),
    };
    let Some(file) = &spec.file else {
        return Ok(table);
    };
    let path = schema.resolve(file);
    let mut rdr = open_csv(&path)?;
    let headers = rdr.headers()?.clone();
    let id_col = column(&headers, &spec.id_column, &path)?;
    let xy = if spec.spatial {
        let x = spec.x_column.as_deref().ok_or_else(|| Error::SpatialColumnsMissing(spec.name.clone()))?;
        let y = spec.y_column.as_deref().ok_or_else(|| Error::SpatialColumnsMissing(spec.name.clone()))?;
        Some((column(&headers, x, &path)?, column(&headers, y, &path)?))
    } else {
        None
    };
    let mut seen = HashSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let id = rec.get(id_col).unwrap_or("").to_string();
        if !seen.insert(id.clone()) {
            continue;
        }
        if let (Some((xc, yc)), Some(coords)) = (xy, table.coords.as_mut()) {
            let x = parse_coord(rec.get(xc).unwrap_or(""), &path, line)?;
            let y = parse_coord(rec.get(yc).unwrap_or(""), &path, line)?;
            coords.push(Point::new(x, y));
        }
        table.ids.push(id);
    }
    Ok(table)
}

/// Load a relation file, dropping exact duplicate pairs while keeping the
/// order of first appearance.
pub fn load_relation_dataset(schema: &DataSchema, spec: &RelationSpec) -> Result<RelationDataset> {
    let path = schema.resolve(&spec.file);
    let mut rdr = open_csv(&path)?;
    let headers = rdr.headers()?.clone();
    let s = column(&headers, &spec.src_column, &path)?;
    let d = column(&headers, &spec.dst_column, &path)?;
    let mut seen = HashSet::new();
    let mut pairs = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let pair = (
            rec.get(s).unwrap_or("").to_string(),
            rec.get(d).unwrap_or("").to_string(),
        );
        if seen.insert(pair.clone()) {
            pairs.push(pair);
        }
    }
    if pairs.is_empty() {
        log::warn!("relation {} has an empty dataset ({})", spec.name(), path.display());
    }
    Ok(RelationDataset {
        spec: spec.clone(),
        pairs,
    })
}

/// A schema together with every entity table and relation dataset it names.
#[derive(Clone, Debug)]
pub struct CityData {
    pub schema: DataSchema,
    pub entities: Vec<EntityTable>,
    pub datasets: Vec<RelationDataset>,
}

pub fn load_city(schema_path: &Path) -> Result<CityData> {
    let schema = load_schema(schema_path)?;
    let entities = schema
        .entity_types
        .iter()
        .map(|t| load_entity_table(&schema, t))
        .collect::<Result<Vec<_>>>()?;
    let datasets = schema
        .relations
        .iter()
        .map(|r| load_relation_dataset(&schema, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(CityData {
        schema,
        entities,
        datasets,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValidationIssue {
    /// A relation references a spatial id with no coordinate row.
    DanglingReference {
        relation: String,
        type_name: String,
        id: String,
    },
    /// A dataset's spec names a type the schema does not declare.
    UndeclaredType { relation: String, type_name: String },
    EmptyDataset { relation: String },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Distinct ids per type across entity files and relations.
    pub entity_counts: BTreeMap<String, usize>,
    pub relation_counts: Vec<(String, usize)>,
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        !self
            .issues
            .iter()
            .any(|i| !matches!(i, ValidationIssue::EmptyDataset { .. }))
    }
}

pub fn validate(schema: &DataSchema, entities: &[EntityTable], datasets: &[RelationDataset]) -> ValidationReport {
    let mut ids: BTreeMap<&str, HashSet<&str>> = schema
        .entity_types
        .iter()
        .map(|t| (t.name.as_str(), HashSet::new()))
        .collect();
    let mut coords: HashMap<&str, HashSet<&str>> = HashMap::new();
    for table in entities {
        if let Some(set) = ids.get_mut(table.type_name.as_str()) {
            set.extend(table.ids.iter().map(String::as_str));
        }
        if table.coords.is_some() {
            coords.insert(table.type_name.as_str(), table.ids.iter().map(String::as_str).collect());
        }
    }
    let mut report = ValidationReport::default();
    for ds in datasets {
        let rel = ds.spec.name();
        report.relation_counts.push((rel.clone(), ds.pairs.len()));
        if ds.pairs.is_empty() {
            report.issues.push(ValidationIssue::EmptyDataset { relation: rel.clone() });
        }
        let mut declared = true;
        for ty in [&ds.spec.src_type, &ds.spec.dst_type] {
            if schema.type_spec(ty).is_none() {
                declared = false;
                report.issues.push(ValidationIssue::UndeclaredType {
                    relation: rel.clone(),
                    type_name: ty.clone(),
                });
            }
        }
        if !declared {
            continue;
        }
        for (a, b) in &ds.pairs {
            for (ty, id) in [(&ds.spec.src_type, a), (&ds.spec.dst_type, b)] {
                ids.get_mut(ty.as_str()).expect("declared").insert(id.as_str());
                let spatial = schema.type_spec(ty).is_some_and(|t| t.spatial);
                if spatial && !coords.get(ty.as_str()).is_some_and(|s| s.contains(id.as_str())) {
                    report.issues.push(ValidationIssue::DanglingReference {
                        relation: rel.clone(),
                        type_name: ty.clone(),
                        id: id.clone(),
                    });
                }
            }
        }
    }
    report.entity_counts = ids.into_iter().map(|(k, v)| (k.to_string(), v.len())).collect();
    report
}
