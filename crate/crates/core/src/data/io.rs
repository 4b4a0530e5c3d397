//! Cube container: one JSON header line, then little-endian `f32` samples in
//! band-interleaved-by-pixel order, then an optional `u8` label plane.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HsiCube, LabelMap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CubeHeader {
    #[serde(rename = "M")]
    pub rows: usize,
    #[serde(rename = "N")]
    pub cols: usize,
    /// Zero for a labels-only file.
    #[serde(rename = "D")]
    pub bands: usize,
    #[serde(rename = "C")]
    pub classes: usize,
    pub dtype: String,
    pub byte_order: String,
    pub labels: bool,
    /// Free-form provenance, such as the configuration that produced the file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

fn write_container<W: Write>(mut w: W, header: &CubeHeader, data: Option<&Tensor>, labels: Option<&LabelMap>) -> Result<()> {
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    if let Some(t) = data {
        let mut buf = Vec::with_capacity(t.len() * 4);
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    if let Some(l) = labels {
        w.write_all(&l.data)?;
    }
    w.flush()?;
    Ok(())
}

fn read_container<R: BufRead>(mut r: R) -> Result<(CubeHeader, Option<Tensor>, Option<LabelMap>)> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if !line.ends_with('\n') {
        return Err(Error::Format("missing header line".into()));
    }
    let h: CubeHeader =
        serde_json::from_str(line.trim_end()).map_err(|e| Error::Format(format!("bad cube header: {e}")))?;
    if h.dtype != "float32" || h.byte_order != "little" {
        return Err(Error::Format(format!("unsupported sample type {} ({})", h.dtype, h.byte_order)));
    }
    if h.rows == 0 || h.cols == 0 {
        return Err(Error::Format("zero scene extent".into()));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let samples = h.rows * h.cols * h.bands;
    let expected = samples * 4 + if h.labels { h.rows * h.cols } else { 0 };
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "header promises {expected} payload bytes for {}x{}x{}, found {}",
            h.rows,
            h.cols,
            h.bands,
            payload.len()
        )));
    }
    let data = if h.bands > 0 {
        let v = payload[..samples * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Some(Tensor::new(&[h.rows, h.cols, h.bands], v)?)
    } else {
        None
    };
    let labels = if h.labels {
        let l = LabelMap::new(h.rows, h.cols, payload[samples * 4..].to_vec())?;
        l.check_classes(h.classes).map_err(|e| Error::Format(e.to_string()))?;
        Some(l)
    } else {
        None
    };
    Ok((h, data, labels))
}

fn header(rows: usize, cols: usize, bands: usize, classes: usize, labels: bool, meta: Option<&serde_json::Value>) -> CubeHeader {
    CubeHeader {
        rows,
        cols,
        bands,
        classes,
        dtype: "float32".into(),
        byte_order: "little".into(),
        labels,
        meta: meta.cloned(),
    }
}

pub fn write_cube_to<W: Write>(w: W, cube: &HsiCube, meta: Option<&serde_json::Value>) -> Result<()> {
    let h = header(cube.rows(), cube.cols(), cube.bands(), cube.classes, cube.labels.is_some(), meta);
    write_container(w, &h, Some(&cube.data), cube.labels.as_ref())
}

pub fn read_cube_from<R: BufRead>(r: R) -> Result<HsiCube> {
    let (h, data, labels) = read_container(r)?;
    let data = data.ok_or_else(|| Error::Format("file holds labels only".into()))?;
    HsiCube::new(data, labels, h.classes)
}

pub fn write_cube(path: impl AsRef<Path>, cube: &HsiCube, meta: Option<&serde_json::Value>) -> Result<()> {
    write_cube_to(BufWriter::new(File::create(path)?), cube, meta)
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<HsiCube> {
    read_cube_from(BufReader::new(File::open(path)?))
}

/// Writes a labels-only container (`D = 0`).
pub fn write_labels(
    path: impl AsRef<Path>,
    labels: &LabelMap,
    classes: usize,
    meta: Option<&serde_json::Value>,
) -> Result<()> {
    let h = header(labels.rows, labels.cols, 0, classes, true, meta);
    write_container(BufWriter::new(File::create(path)?), &h, None, Some(labels))
}

pub fn read_header(path: impl AsRef<Path>) -> Result<CubeHeader> {
    let mut line = String::new();
    BufReader::new(File::open(path)?).read_line(&mut line)?;
    serde_json::from_str(line.trim_end()).map_err(|e| Error::Format(format!("bad cube header: {e}")))
}

/// Reads the label plane of any container; returns the labels and class count.
pub fn read_labels(path: impl AsRef<Path>) -> Result<(LabelMap, usize)> {
    let (h, _, labels) = read_container(BufReader::new(File::open(path)?))?;
    let labels = labels.ok_or_else(|| Error::Format("file has no label plane".into()))?;
    Ok((labels, h.classes))
}
