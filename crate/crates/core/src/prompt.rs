//! Boundary prompts: polygons (with optional holes, or several parts) that
//! define a region at inference time.

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{Point, Polygon, Rect};

#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryPrompt {
    polygons: Vec<Polygon>,
    mbr: Rect,
    pub label: Option<String>,
}

impl BoundaryPrompt {
    pub fn new(polygons: Vec<Polygon>) -> Result<Self> {
        let mbr = polygons
            .iter()
            .map(|p| p.mbr())
            .reduce(|a, b| a.union(b))
            .ok_or_else(|| Error::InvalidPolygon("prompt has no polygons".into()))?;
        Ok(Self {
            polygons,
            mbr,
            label: None,
        })
    }

    pub fn from_polygon(polygon: Polygon) -> Self {
        Self::new(vec![polygon]).expect("one polygon")
    }

    pub fn rect(rect: Rect) -> Result<Self> {
        Ok(Self::from_polygon(Polygon::rect(rect)?))
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn polygons(&self) -> &[Polygon] {
        &self.polygons
    }

    pub fn mbr(&self) -> Rect {
        self.mbr
    }

    /// Union semantics over the parts; each part honours its holes.
    pub fn contains(&self, p: Point) -> bool {
        self.mbr.contains(p) && self.polygons.iter().any(|poly| poly.contains(p))
    }

    pub fn area(&self) -> f64 {
        self.polygons.iter().map(Polygon::area).sum()
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        let polygons: Vec<Polygon> = self.polygons.iter().map(|p| p.translate(dx, dy)).collect();
        let mut out = Self::new(polygons).expect("non-empty");
        out.label = self.label.clone();
        out
    }

    /// Stable content hash of the vertex coordinates (label excluded).
    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        for poly in &self.polygons {
            h.update(b"P");
            for ring in std::iter::once(poly.exterior()).chain(poly.holes().iter().map(Vec::as_slice)) {
                h.update(b"R");
                for v in ring {
                    h.update(v.x.to_le_bytes());
                    h.update(v.y.to_le_bytes());
                }
            }
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// GeoJSON geometry: Polygon for a single part, MultiPolygon otherwise.
    pub fn to_geojson(&self) -> Value {
        let ring = |r: &[Point]| {
            let mut pts: Vec<Value> = r.iter().map(|p| json!([p.x, p.y])).collect();
            if let Some(first) = r.first() {
                pts.push(json!([first.x, first.y]));
            }
            Value::Array(pts)
        };
        let poly = |p: &Polygon| {
            let mut rings = vec![ring(p.exterior())];
            rings.extend(p.holes().iter().map(|h| ring(h)));
            Value::Array(rings)
        };
        if let [only] = self.polygons.as_slice() {
            json!({"type": "Polygon", "coordinates": poly(only)})
        } else {
            json!({"type": "MultiPolygon", "coordinates": self.polygons.iter().map(poly).collect::<Vec<_>>()})
        }
    }

    /// Accepts a GeoJSON Polygon, MultiPolygon or Feature wrapping one, or a
    /// compact array of `[x, y]` vertex pairs.
    pub fn from_json(v: &Value) -> Result<Self> {
        match v {
            Value::Array(_) => Ok(Self::from_polygon(Polygon::new(parse_ring(v)?, vec![])?)),
            Value::Object(obj) => match obj.get("type").and_then(Value::as_str) {
                Some("Feature") => {
                    let geom = obj
                        .get("geometry")
                        .ok_or_else(|| Error::InvalidPolygon("feature without geometry".into()))?;
                    let mut p = Self::from_json(geom)?;
                    p.label = obj
                        .get("properties")
                        .and_then(|props| props.get("label").or_else(|| props.get("name")))
                        .and_then(Value::as_str)
                        .map(str::to_string);
                    Ok(p)
                }
                Some("Polygon") => Ok(Self::from_polygon(parse_polygon(coordinates(obj)?)?)),
                Some("MultiPolygon") => {
                    let parts = coordinates(obj)?
                        .as_array()
                        .ok_or_else(|| Error::InvalidPolygon("MultiPolygon coordinates must be an array".into()))?
                        .iter()
                        .map(parse_polygon)
                        .collect::<Result<Vec<_>>>()?;
                    Self::new(parts)
                }
                Some(other) => Err(Error::InvalidPolygon(format!("unsupported geometry type `{other}`"))),
                None => Err(Error::InvalidPolygon("object without a `type` member".into())),
            },
            _ => Err(Error::InvalidPolygon("expected a GeoJSON object or vertex array".into())),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::InvalidPolygon(e.to_string()))?;
        Self::from_json(&v)
    }
}

/// Parse a prompt collection: a FeatureCollection, a JSON array of prompts,
/// or a single prompt.
pub fn parse_prompt_collection(text: &str) -> Result<Vec<BoundaryPrompt>> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::InvalidPolygon(e.to_string()))?;
    if let Some(features) = v
        .get("type")
        .filter(|t| t.as_str() == Some("FeatureCollection"))
        .and(v.get("features"))
    {
        let arr = features
            .as_array()
            .ok_or_else(|| Error::InvalidPolygon("features must be an array".into()))?;
        return arr.iter().map(BoundaryPrompt::from_json).collect();
    }
    if let Value::Array(items) = &v {
        // A compact single prompt is an array of numeric pairs.
        let compact = items.first().and_then(Value::as_array).is_some_and(|a| a.first().is_some_and(Value::is_number));
        if !compact {
            return items.iter().map(BoundaryPrompt::from_json).collect();
        }
    }
    Ok(vec![BoundaryPrompt::from_json(&v)?])
}

fn coordinates(obj: &serde_json::Map<String, Value>) -> Result<&Value> {
    obj.get("coordinates")
        .ok_or_else(|| Error::InvalidPolygon("geometry without coordinates".into()))
}

fn parse_polygon(v: &Value) -> Result<Polygon> {
    let rings = v
        .as_array()
        .filter(|a| !a.is_empty())
        .ok_or_else(|| Error::InvalidPolygon("polygon needs at least an exterior ring".into()))?;
    let exterior = parse_ring(&rings[0])?;
    let holes = rings[1..].iter().map(parse_ring).collect::<Result<Vec<_>>>()?;
    Polygon::new(exterior, holes)
}

fn parse_ring(v: &Value) -> Result<Vec<Point>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::InvalidPolygon("ring must be an array".into()))?;
    arr.iter()
        .map(|pt| {
            let pair = pt.as_array().filter(|p| p.len() >= 2);
            match pair.map(|p| (p[0].as_f64(), p[1].as_f64())) {
                Some((Some(x), Some(y))) => Ok(Point::new(x, y)),
                _ => Err(Error::InvalidPolygon(format!("bad vertex {pt}"))),
            }
        })
        .collect()
}
