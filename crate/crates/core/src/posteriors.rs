//! `fbnk-post` files: an `N x C` posterior matrix stored as f32le behind a
//! length-prefixed JSON header (`FPST1` magic).

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SeplError};
use crate::feature_bank::{read_json_header, take_f32};

const MAGIC: &[u8; 5] = b"FPST1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    n_rows: usize,
    n_cols: usize,
    dtype: String,
}

pub fn posteriors_to_bytes(posteriors: &Array2<f64>) -> Vec<u8> {
    let header = Header { n_rows: posteriors.nrows(), n_cols: posteriors.ncols(), dtype: "f32le".into() };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(9 + json.len() + posteriors.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for &v in posteriors.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn posteriors_from_bytes(bytes: &[u8]) -> Result<Array2<f64>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(SeplError::Format("bad magic: not a posteriors file".into()));
    }
    let (header, mut cursor) = read_json_header::<Header>(bytes, MAGIC.len())?;
    if header.dtype != "f32le" {
        return Err(SeplError::Format(format!("unsupported dtype {:?}", header.dtype)));
    }
    let data = take_f32(bytes, &mut cursor, header.n_rows * header.n_cols, "posteriors")?;
    if cursor != bytes.len() {
        return Err(SeplError::Format("size mismatch: trailing bytes after posteriors".into()));
    }
    let m = Array2::from_shape_vec((header.n_rows, header.n_cols), data).expect("sized");
    Ok(m.mapv(f64::from))
}

pub fn write_posteriors(posteriors: &Array2<f64>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, posteriors_to_bytes(posteriors))?;
    Ok(())
}

pub fn read_posteriors(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    posteriors_from_bytes(&fs::read(path)?)
}
