//! Cached training-time subgraphs that populate relevance sets at inference.
//!
//! `context_pool.bin`: "BPRF", u32 version, u64 entry count, then per entry
//! the boundary (polygons, rings, vertices as f64 pairs), center, token list
//! (u16 type, u32 local), per-type degree sequences and the aggregated
//! vector `h_s` as f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::extraction::RegionSubgraph;
use crate::geometry::{Point, Polygon};
use crate::graph::{TokenRef, GRAPH_FORMAT_VERSION, MAGIC};
use crate::prompt::BoundaryPrompt;

#[derive(Clone, Debug, PartialEq)]
pub struct PoolEntry {
    pub boundary: BoundaryPrompt,
    pub center: Point,
    pub tokens: Vec<TokenRef>,
    pub degrees: Vec<Vec<u32>>,
    pub h_s: Vec<f64>,
}

impl PoolEntry {
    pub fn new(boundary: BoundaryPrompt, sub: &RegionSubgraph, n_types: usize, h_s: Vec<f64>) -> Self {
        Self {
            boundary,
            center: sub.center,
            tokens: sub.nodes().collect(),
            degrees: sub.degree_sequences(n_types),
            h_s,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContextPool {
    pub entries: Vec<PoolEntry>,
}

fn write_ring(w: &mut impl Write, ring: &[Point]) -> Result<()> {
    w.write_u32::<LittleEndian>(ring.len() as u32)?;
    for p in ring {
        w.write_f64::<LittleEndian>(p.x)?;
        w.write_f64::<LittleEndian>(p.y)?;
    }
    Ok(())
}

fn read_ring(r: &mut impl Read) -> Result<Vec<Point>> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    (0..n)
        .map(|_| Ok(Point::new(r.read_f64::<LittleEndian>()?, r.read_f64::<LittleEndian>()?)))
        .collect()
}

impl ContextPool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(GRAPH_FORMAT_VERSION)?;
        w.write_u64::<LittleEndian>(self.entries.len() as u64)?;
        for e in &self.entries {
            w.write_u32::<LittleEndian>(e.boundary.polygons().len() as u32)?;
            for poly in e.boundary.polygons() {
                w.write_u32::<LittleEndian>(1 + poly.holes().len() as u32)?;
                write_ring(w, poly.exterior())?;
                for h in poly.holes() {
                    write_ring(w, h)?;
                }
            }
            w.write_f64::<LittleEndian>(e.center.x)?;
            w.write_f64::<LittleEndian>(e.center.y)?;
            w.write_u32::<LittleEndian>(e.tokens.len() as u32)?;
            for t in &e.tokens {
                w.write_u16::<LittleEndian>(t.type_index)?;
                w.write_u32::<LittleEndian>(t.local_id)?;
            }
            w.write_u32::<LittleEndian>(e.degrees.len() as u32)?;
            for d in &e.degrees {
                w.write_u32::<LittleEndian>(d.len() as u32)?;
                for &v in d {
                    w.write_u32::<LittleEndian>(v)?;
                }
            }
            w.write_u32::<LittleEndian>(e.h_s.len() as u32)?;
            for &v in &e.h_s {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        let version = r.read_u32::<LittleEndian>()?;
        if &magic != MAGIC || version != GRAPH_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                what: "context pool".into(),
                expected: format!("BPRF v{GRAPH_FORMAT_VERSION}"),
                found: format!("{} v{version}", String::from_utf8_lossy(&magic)),
            });
        }
        let n = r.read_u64::<LittleEndian>()? as usize;
        let mut entries = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let n_poly = r.read_u32::<LittleEndian>()? as usize;
            let mut polys = Vec::with_capacity(n_poly);
            for _ in 0..n_poly {
                let n_rings = r.read_u32::<LittleEndian>()? as usize;
                if n_rings == 0 {
                    return Err(Error::InvalidPolygon("pool polygon without exterior".into()));
                }
                let exterior = read_ring(r)?;
                let holes = (1..n_rings).map(|_| read_ring(r)).collect::<Result<Vec<_>>>()?;
                polys.push(Polygon::new(exterior, holes)?);
            }
            let boundary = BoundaryPrompt::new(polys)?;
            let center = Point::new(r.read_f64::<LittleEndian>()?, r.read_f64::<LittleEndian>()?);
            let nt = r.read_u32::<LittleEndian>()? as usize;
            let tokens = (0..nt)
                .map(|_| Ok(TokenRef::new(r.read_u16::<LittleEndian>()?, r.read_u32::<LittleEndian>()?)))
                .collect::<Result<Vec<_>>>()?;
            let ndeg = r.read_u32::<LittleEndian>()? as usize;
            let mut degrees = Vec::with_capacity(ndeg);
            for _ in 0..ndeg {
                let len = r.read_u32::<LittleEndian>()? as usize;
                degrees.push((0..len).map(|_| r.read_u32::<LittleEndian>()).collect::<std::io::Result<Vec<_>>>()?);
            }
            let nh = r.read_u32::<LittleEndian>()? as usize;
            let h_s = (0..nh).map(|_| r.read_f64::<LittleEndian>()).collect::<std::io::Result<Vec<_>>>()?;
            entries.push(PoolEntry {
                boundary,
                center,
                tokens,
                degrees,
                h_s,
            });
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rect;

    #[test]
    fn round_trip() {
        let outer = vec![
            Point::new(0.0, 0.0),
            Point::new(10.0, 0.0),
            Point::new(10.0, 10.0),
            Point::new(0.0, 10.0),
        ];
        let hole = vec![Point::new(2.0, 2.0), Point::new(3.0, 2.0), Point::new(3.0, 3.0)];
        let b = BoundaryPrompt::new(vec![
            Polygon::new(outer, vec![hole]).unwrap(),
            Polygon::rect(Rect::new(20.0, 20.0, 21.5, 22.0)).unwrap(),
        ])
        .unwrap();
        let pool = ContextPool {
            entries: vec![PoolEntry {
                boundary: b,
                center: Point::new(1.0 / 3.0, 2.5),
                tokens: vec![TokenRef::new(0, 4), TokenRef::new(1, 0)],
                degrees: vec![vec![2, 1], vec![]],
                h_s: vec![0.1, -7.25, 1e-300],
            }],
        };
        let mut buf = Vec::new();
        pool.write(&mut buf).unwrap();
        assert_eq!(ContextPool::read(&mut buf.as_slice()).unwrap(), pool);
        let mut empty = Vec::new();
        ContextPool::default().write(&mut empty).unwrap();
        assert!(ContextPool::read(&mut empty.as_slice()).unwrap().is_empty());
    }

    #[test]
    fn bad_magic() {
        let buf = b"XXXX\x01\0\0\0\0\0\0\0\0\0\0\0".to_vec();
        assert!(matches!(ContextPool::read(&mut buf.as_slice()), Err(Error::VersionMismatch { .. })));
    }
}
