//! The `BPRF-EMB` matrix file: magic, u32 version, u32 rows, u32 cols, then
//! row-major little-endian f32 values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::matrix::Matrix;
use crate::error::{Error, Result};

pub const EMB_MAGIC: &[u8; 8] = b"BPRF-EMB";
pub const EMB_VERSION: u32 = 1;

pub fn write_matrix(w: &mut impl Write, m: &Matrix) -> Result<()> {
    w.write_all(EMB_MAGIC)?;
    w.write_u32::<LittleEndian>(EMB_VERSION)?;
    w.write_u32::<LittleEndian>(m.rows() as u32)?;
    w.write_u32::<LittleEndian>(m.cols() as u32)?;
    for &v in m.data() {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    Ok(())
}

pub fn read_matrix(r: &mut impl Read) -> Result<Matrix> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != EMB_MAGIC {
        return Err(Error::VersionMismatch {
            what: "embedding file".into(),
            expected: "BPRF-EMB".into(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != EMB_VERSION {
        return Err(Error::VersionMismatch {
            what: "embedding file".into(),
            expected: EMB_VERSION.to_string(),
            found: version.to_string(),
        });
    }
    let rows = r.read_u32::<LittleEndian>()? as usize;
    let cols = r.read_u32::<LittleEndian>()? as usize;
    let mut data = vec![0f32; rows * cols];
    r.read_f32_into::<LittleEndian>(&mut data)?;
    Matrix::new(rows, cols, data.into_iter().map(f64::from).collect())
}

pub fn save_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_matrix(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn load_matrix(path: &Path) -> Result<Matrix> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    read_matrix(&mut BufReader::new(File::open(path)?))
}

/// A u32 count followed by that many matrices.
pub fn save_matrix_list(path: &Path, ms: &[&Matrix]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_u32::<LittleEndian>(ms.len() as u32)?;
    for m in ms {
        write_matrix(&mut w, m)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_matrix_list(path: &Path) -> Result<Vec<Matrix>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = BufReader::new(File::open(path)?);
    let n = r.read_u32::<LittleEndian>()? as usize;
    (0..n).map(|_| read_matrix(&mut r)).collect()
}
