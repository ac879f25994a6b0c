//! Planar geometry primitives: points, axis-aligned rectangles and polygons
//! with holes.
//!
//! Coordinates are planar and unit-agnostic. Point-in-polygon uses even-odd
//! ray casting; points lying on a ring count as on the boundary, and the
//! boundary belongs to the polygon.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist2(self, other: Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    pub fn dist(self, other: Point) -> f64 {
        self.dist2(other).sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Axis-aligned rectangle, used both as bounding box and as MBR in the R-tree.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Rect {
    pub fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Self {
        Self {
            min_x: min_x.min(max_x),
            min_y: min_y.min(max_y),
            max_x: max_x.max(min_x),
            max_y: max_y.max(min_y),
        }
    }

    pub fn from_point(p: Point) -> Self {
        Self {
            min_x: p.x,
            min_y: p.y,
            max_x: p.x,
            max_y: p.y,
        }
    }

    /// Smallest rectangle covering all points, `None` for an empty iterator.
    pub fn from_points<I: IntoIterator<Item = Point>>(points: I) -> Option<Self> {
        let mut it = points.into_iter();
        let first = it.next()?;
        Some(it.fold(Rect::from_point(first), |r, p| r.expand(p)))
    }

    pub fn expand(mut self, p: Point) -> Self {
        self.min_x = self.min_x.min(p.x);
        self.min_y = self.min_y.min(p.y);
        self.max_x = self.max_x.max(p.x);
        self.max_y = self.max_y.max(p.y);
        self
    }

    pub fn union(self, o: Rect) -> Self {
        Self {
            min_x: self.min_x.min(o.min_x),
            min_y: self.min_y.min(o.min_y),
            max_x: self.max_x.max(o.max_x),
            max_y: self.max_y.max(o.max_y),
        }
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }

    pub fn center(&self) -> Point {
        Point::new(
            0.5 * (self.min_x + self.max_x),
            0.5 * (self.min_y + self.max_y),
        )
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.width() > 0.0 && self.height() > 0.0)
            || ![self.min_x, self.min_y, self.max_x, self.max_y]
                .iter()
                .all(|v| v.is_finite())
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.min_x && p.x <= self.max_x && p.y >= self.min_y && p.y <= self.max_y
    }

    pub fn intersects(&self, o: &Rect) -> bool {
        self.min_x <= o.max_x && o.min_x <= self.max_x && self.min_y <= o.max_y && o.min_y <= self.max_y
    }

    /// Squared distance from `p` to the closest point of the rectangle.
    pub fn min_dist2(&self, p: Point) -> f64 {
        let dx = (self.min_x - p.x).max(0.0).max(p.x - self.max_x);
        let dy = (self.min_y - p.y).max(0.0).max(p.y - self.max_y);
        dx * dx + dy * dy
    }

    /// Counter-clockwise corner ring.
    pub fn corners(&self) -> Vec<Point> {
        vec![
            Point::new(self.min_x, self.min_y),
            Point::new(self.max_x, self.min_y),
            Point::new(self.max_x, self.max_y),
            Point::new(self.min_x, self.max_y),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Containment {
    Outside,
    Boundary,
    Inside,
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    cross(a, b, p) == 0.0
        && p.x >= a.x.min(b.x)
        && p.x <= a.x.max(b.x)
        && p.y >= a.y.min(b.y)
        && p.y <= a.y.max(b.y)
}

/// Classify `p` against a ring given without its closing vertex.
pub fn ring_containment(ring: &[Point], p: Point) -> Containment {
    let n = ring.len();
    if n == 0 {
        return Containment::Outside;
    }
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let a = ring[j];
        let b = ring[i];
        if on_segment(a, b, p) {
            return Containment::Boundary;
        }
        if (b.y > p.y) != (a.y > p.y) {
            let x_cross = b.x + (p.y - b.y) * (a.x - b.x) / (a.y - b.y);
            if p.x < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    if inside {
        Containment::Inside
    } else {
        Containment::Outside
    }
}

fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    on_segment(q1, q2, p1) || on_segment(q1, q2, p2) || on_segment(p1, p2, q1) || on_segment(p1, p2, q2)
}

/// Strip an explicit closing vertex and consecutive duplicates.
fn normalize_ring(mut ring: Vec<Point>) -> Vec<Point> {
    ring.dedup();
    while ring.len() > 1 && ring.first() == ring.last() {
        ring.pop();
    }
    ring
}

fn check_ring(ring: &[Point], what: &str) -> Result<()> {
    if ring.len() < 3 {
        return Err(Error::InvalidPolygon(format!(
            "{what} has {} distinct vertices, need at least 3",
            ring.len()
        )));
    }
    if ring.iter().any(|p| !p.is_finite()) {
        return Err(Error::InvalidPolygon(format!("{what} has non-finite coordinates")));
    }
    let n = ring.len();
    for i in 0..n {
        let (a1, a2) = (ring[i], ring[(i + 1) % n]);
        for j in (i + 1)..n {
            let (b1, b2) = (ring[j], ring[(j + 1) % n]);
            let adjacent_next = j == i + 1;
            let adjacent_wrap = i == 0 && j == n - 1;
            if adjacent_next || adjacent_wrap {
                // Adjacent edges share exactly one vertex; any extra contact is a fold-back.
                let (a_other, b_other) = if adjacent_next { (a1, b2) } else { (a2, b1) };
                if on_segment(a1, a2, b_other) || on_segment(b1, b2, a_other) {
                    return Err(Error::InvalidPolygon(format!(
                        "{what} folds back on itself at vertex {}",
                        if adjacent_next { j } else { 0 }
                    )));
                }
                continue;
            }
            if segments_intersect(a1, a2, b1, b2) {
                return Err(Error::InvalidPolygon(format!(
                    "{what} self-intersects between edges {i} and {j}"
                )));
            }
        }
    }
    Ok(())
}

/// A simple polygon with optional holes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    exterior: Vec<Point>,
    holes: Vec<Vec<Point>>,
    mbr: Rect,
}

impl Polygon {
    pub fn new(exterior: Vec<Point>, holes: Vec<Vec<Point>>) -> Result<Self> {
        let exterior = normalize_ring(exterior);
        check_ring(&exterior, "exterior ring")?;
        let holes = holes
            .into_iter()
            .enumerate()
            .map(|(i, h)| {
                let h = normalize_ring(h);
                check_ring(&h, &format!("hole {i}"))?;
                Ok(h)
            })
            .collect::<Result<Vec<_>>>()?;
        let mbr = Rect::from_points(exterior.iter().copied()).expect("non-empty ring");
        Ok(Self { exterior, holes, mbr })
    }

    pub fn rect(r: Rect) -> Result<Self> {
        Self::new(r.corners(), Vec::new())
    }

    pub fn exterior(&self) -> &[Point] {
        &self.exterior
    }

    pub fn holes(&self) -> &[Vec<Point>] {
        &self.holes
    }

    pub fn mbr(&self) -> Rect {
        self.mbr
    }

    /// Boundary-inclusive membership; points strictly inside a hole are excluded.
    pub fn contains(&self, p: Point) -> bool {
        if !self.mbr.contains(p) {
            return false;
        }
        if ring_containment(&self.exterior, p) == Containment::Outside {
            return false;
        }
        !self
            .holes
            .iter()
            .any(|h| ring_containment(h, p) == Containment::Inside)
    }

    /// Absolute area of the exterior minus holes (shoelace).
    pub fn area(&self) -> f64 {
        fn ring_area(r: &[Point]) -> f64 {
            let n = r.len();
            (0..n)
                .map(|i| {
                    let a = r[i];
                    let b = r[(i + 1) % n];
                    a.x * b.y - b.x * a.y
                })
                .sum::<f64>()
                .abs()
                * 0.5
        }
        ring_area(&self.exterior) - self.holes.iter().map(|h| ring_area(h)).sum::<f64>()
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        let shift = |r: &[Point]| r.iter().map(|p| Point::new(p.x + dx, p.y + dy)).collect::<Vec<_>>();
        let exterior = shift(&self.exterior);
        let mbr = Rect::from_points(exterior.iter().copied()).expect("non-empty ring");
        Self {
            exterior,
            holes: self.holes.iter().map(|h| shift(h)).collect(),
            mbr,
        }
    }
}
