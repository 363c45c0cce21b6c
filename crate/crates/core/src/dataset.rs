//! Dataset files.
//!
//! The binary format is the 4-byte magic `MXS1`, then `n` and `d` as
//! little-endian `u32`, then `n·d` little-endian `f64` values row-major.
//! CSV import reads one sample per line with no header.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 4] = b"MXS1";

pub fn write_mxs<W: Write>(mut w: W, data: &Matrix) -> Result<()> {
    let n = u32::try_from(data.nrows()).map_err(|_| Error::Format("too many rows".into()))?;
    let d = u32::try_from(data.ncols()).map_err(|_| Error::Format("too many columns".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&n.to_le_bytes())?;
    w.write_all(&d.to_le_bytes())?;
    for v in data.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_mxs<R: Read>(mut r: R) -> Result<Matrix> {
    let mut header = [0u8; 12];
    r.read_exact(&mut header)
        .map_err(|_| Error::Format("file shorter than the 12-byte header".into()))?;
    if &header[..4] != MAGIC {
        return Err(Error::Format("bad magic, expected MXS1".into()));
    }
    let n = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != n * d * 8 {
        return Err(Error::Format(format!(
            "header declares {n}x{d} values but payload has {} bytes",
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Matrix::from_vec(n, d, values)
}

pub fn save_mxs(path: impl AsRef<Path>, data: &Matrix) -> Result<()> {
    write_mxs(BufWriter::new(File::create(path)?), data)
}

pub fn load_mxs(path: impl AsRef<Path>) -> Result<Matrix> {
    read_mxs(BufReader::new(File::open(path)?))
}

pub fn read_csv<R: Read>(r: R) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(r);
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .map(|field| {
                field.parse::<f64>().map_err(|_| {
                    Error::Format(format!(
                        "line {}: cannot parse {field:?} as a number",
                        line + 1
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Format("CSV has no rows".into()));
    }
    Matrix::from_rows(&rows).map_err(|e| Error::Format(e.to_string()))
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Matrix> {
    read_csv(BufReader::new(File::open(path)?))
}

/// Loads either format, choosing CSV for a `.csv` extension.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => load_csv(path),
        _ => load_mxs(path),
    }
}
