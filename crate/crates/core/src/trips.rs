//! Trip records (origin/destination coordinate pairs) used for mobility flows.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trip {
    pub origin: Point,
    pub dest: Point,
}

#[derive(Deserialize)]
struct TripRow {
    origin_x: f64,
    origin_y: f64,
    dest_x: f64,
    dest_y: f64,
}

pub fn load_trips(path: &Path) -> Result<Vec<Trip>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let r: TripRow = row?;
        let t = Trip {
            origin: Point::new(r.origin_x, r.origin_y),
            dest: Point::new(r.dest_x, r.dest_y),
        };
        if !t.origin.is_finite() || !t.dest.is_finite() {
            return Err(Error::MalformedData {
                file: path.to_path_buf(),
                detail: format!("non-finite trip at row {}", out.len() + 1),
            });
        }
        out.push(t);
    }
    Ok(out)
}

pub fn write_trips(trips: &[Trip], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["origin_x", "origin_y", "dest_x", "dest_y"])?;
    for t in trips {
        w.write_record([
            t.origin.x.to_string(),
            t.origin.y.to_string(),
            t.dest.x.to_string(),
            t.dest.y.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
