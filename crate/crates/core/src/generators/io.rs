//! AFGRID v1 files: one JSON header line, then a row-major little-endian
//! complex128 payload.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::grid::{GridFunction, GridSpec};
use crate::error::{Error, Result};

pub const GRID_MAGIC: &str = "AFGRID v1";

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
struct GridHeader {
    format: String,
    dim: usize,
    origin: Vec<f64>,
    spacing: Vec<f64>,
    extents: Vec<usize>,
    dtype: String,
}

/// Write a header line followed by the complex payload.
pub(crate) fn write_tagged<W: Write, H: Serialize>(mut w: W, header: &H, values: &[Complex64]) -> Result<()> {
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(values.len() * 16);
    for v in values {
        buf.extend_from_slice(&v.re.to_le_bytes());
        buf.extend_from_slice(&v.im.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

/// Read a header line and exactly `count(header)` complex values.
pub(crate) fn read_tagged<R: Read, H, F>(r: R, count: F) -> Result<(H, Vec<Complex64>)>
where
    H: for<'de> Deserialize<'de>,
    F: FnOnce(&H) -> Result<usize>,
{
    let mut r = BufReader::new(r);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: H = serde_json::from_str(line.trim_end()).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    let n = count(&header)?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != n * 16 {
        return Err(Error::Format(format!(
            "payload has {} bytes, expected {}",
            bytes.len(),
            n * 16
        )));
    }
    let values = bytes
        .chunks_exact(16)
        .map(|c| {
            let re = f64::from_le_bytes(c[..8].try_into().unwrap());
            let im = f64::from_le_bytes(c[8..].try_into().unwrap());
            Complex64::new(re, im)
        })
        .collect();
    Ok((header, values))
}

pub fn write_grid<W: Write>(w: W, g: &GridFunction) -> Result<()> {
    let header = GridHeader {
        format: GRID_MAGIC.into(),
        dim: g.dim(),
        origin: g.spec.origin.clone(),
        spacing: g.spec.spacing.clone(),
        extents: g.spec.extents.clone(),
        dtype: "c128".into(),
    };
    write_tagged(w, &header, &g.values)
}

pub fn read_grid<R: Read>(r: R) -> Result<GridFunction> {
    let (h, values) = read_tagged(r, |h: &GridHeader| {
        if h.format != GRID_MAGIC {
            return Err(Error::Format(format!("not an AFGRID v1 file: {:?}", h.format)));
        }
        if h.dtype != "c128" {
            return Err(Error::Format(format!("unsupported dtype {}", h.dtype)));
        }
        if h.origin.len() != h.dim || h.spacing.len() != h.dim || h.extents.len() != h.dim {
            return Err(Error::Format("header dimension mismatch".into()));
        }
        Ok(h.extents.iter().product())
    })?;
    let spec = GridSpec::new(h.origin, h.spacing, h.extents)?;
    GridFunction::new(spec, values)
}

pub fn save_grid(path: &Path, g: &GridFunction) -> Result<()> {
    write_grid(std::io::BufWriter::new(std::fs::File::create(path)?), g)
}

pub fn load_grid(path: &Path) -> Result<GridFunction> {
    read_grid(std::fs::File::open(path)?)
}

/// CSV with index columns i0..i{n−1}, then re, im.
pub fn write_grid_csv<W: Write>(w: W, g: &GridFunction) -> Result<()> {
    let n = g.dim();
    let mut wr = csv::Writer::from_writer(w);
    let mut head: Vec<String> = (0..n).map(|i| format!("i{i}")).collect();
    head.push("re".into());
    head.push("im".into());
    wr.write_record(&head)?;
    let mut idx = vec![0usize; n];
    for (flat, v) in g.values.iter().enumerate() {
        g.spec.unravel(flat, &mut idx);
        let mut rec: Vec<String> = idx.iter().map(|i| i.to_string()).collect();
        rec.push(format!("{:e}", v.re));
        rec.push(format!("{:e}", v.im));
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}
