//! Plain-text interchange: node-by-time matrices as CSV, JSON documents,
//! and content hashes for manifests.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub(crate) fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Reader::from_reader(file))
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

/// Writes an `N x T` matrix as CSV with one row per time step and one
/// column per node (header `n0..n{N-1}`).
pub fn write_rates_csv(path: &Path, values: ArrayView2<'_, f64>) -> Result<()> {
    let mut wtr = crate::io::csv_writer(path)?;
    let header: Vec<String> = (0..values.nrows()).map(|i| format!("n{i}")).collect();
    wtr.write_record(&header)?;
    for t in 0..values.ncols() {
        let row: Vec<String> = values.column(t).iter().map(|v| v.to_string()).collect();
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a matrix written by [`write_rates_csv`], returning it as `N x T`.
pub fn read_rates_csv(path: &Path) -> Result<Array2<f64>> {
    let mut rdr = crate::io::csv_reader(path)?;
    let n = rdr.headers()?.len();
    let mut flat = Vec::new();
    let mut t = 0;
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{}: row {t} has {} columns, header has {n}",
                path.display(),
                rec.len()
            )));
        }
        for field in rec.iter() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::InvalidParameter(format!("{}: bad number {field:?}", path.display()))
            })?;
            flat.push(v);
        }
        t += 1;
    }
    let by_time = Array2::from_shape_vec((t, n), flat)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    Ok(by_time.t().as_standard_layout().into_owned())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}
