//! Heatmap space: per-layer min-max normalization and Euclidean distance matrices.
//!
//! Error-inducing images are compared with normalized heatmaps so that distances of different
//! layers are on a common scale. Improvement images are compared against error-inducing images
//! with the raw LRP heatmaps.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lrp::{Heatmap, LayerHeatmaps};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub layer: usize,
    pub min: f64,
    pub max: f64,
}

/// Maps every entry `h` of every heatmap of the layer to `(h - min) / (max - min)`, with the
/// min and max taken over all entries of all heatmaps. A constant layer maps to zeros.
pub fn normalize_layer(maps: &LayerHeatmaps) -> Result<(LayerHeatmaps, NormalizationStats)> {
    if maps.is_empty() {
        return Err(Error::invalid(format!("layer {} has no heatmaps to normalize", maps.layer)));
    }
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in maps.maps.iter().flat_map(|m| &m.values) {
        min = min.min(*v);
        max = max.max(*v);
    }
    let stats = NormalizationStats {
        layer: maps.layer,
        min,
        max,
    };
    let range = max - min;
    let mut out = LayerHeatmaps::new(maps.layer, maps.rows, maps.cols);
    for (id, m) in maps.ids.iter().zip(&maps.maps) {
        let values = if range > 0.0 {
            m.values.iter().map(|v| ((v - min) / range).clamp(0.0, 1.0)).collect()
        } else {
            vec![0.0; m.values.len()]
        };
        out.push(id.clone(), Heatmap::new(m.layer, m.rows, m.cols, values)?)?;
    }
    Ok((out, stats))
}

#[inline]
fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn heatmap_distance(a: &Heatmap, b: &Heatmap) -> Result<f64> {
    if a.layer != b.layer || a.dims() != b.dims() {
        return Err(Error::DimensionMismatch(format!(
            "layer {} {}x{} vs layer {} {}x{}",
            a.layer, a.rows, a.cols, b.layer, b.rows, b.cols
        )));
    }
    Ok(euclidean(&a.values, &b.values))
}

/// Symmetric distance matrix with zero diagonal, stored as the packed strict lower triangle:
/// entry `(i, j)` with `i > j` lives at `i * (i - 1) / 2 + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub layer: usize,
    pub normalized: bool,
    ids: Vec<String>,
    packed: Vec<f64>,
}

#[inline]
fn packed_index(i: usize, j: usize) -> usize {
    let (hi, lo) = if i > j { (i, j) } else { (j, i) };
    hi * (hi - 1) / 2 + lo
}

impl DistanceMatrix {
    /// Builds a matrix from an explicit square table, checking symmetry, the zero diagonal and
    /// finiteness.
    pub fn from_dense(layer: usize, ids: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let n = ids.len();
        if rows.len() != n || rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidMatrix(format!("expected a {n}x{n} table")));
        }
        let mut packed = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            if rows[i][i] != 0.0 {
                return Err(Error::InvalidMatrix(format!("nonzero diagonal at {i}")));
            }
            for j in 0..i {
                let (a, b) = (rows[i][j], rows[j][i]);
                if !a.is_finite() || a < 0.0 {
                    return Err(Error::InvalidMatrix(format!("entry ({i}, {j}) is {a}")));
                }
                if a != b {
                    return Err(Error::InvalidMatrix(format!("not symmetric at ({i}, {j})")));
                }
                packed.push(a);
            }
        }
        Ok(Self {
            layer,
            normalized: false,
            ids,
            packed,
        })
    }

    /// Builds a matrix from its packed lower triangle.
    pub fn from_packed(layer: usize, normalized: bool, ids: Vec<String>, packed: Vec<f64>) -> Result<Self> {
        let n = ids.len();
        if packed.len() != n * n.saturating_sub(1) / 2 {
            return Err(Error::InvalidMatrix(format!(
                "{} packed entries for {n} images",
                packed.len()
            )));
        }
        if let Some(v) = packed.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidMatrix(format!("entry {v} is not a distance")));
        }
        Ok(Self {
            layer,
            normalized,
            ids,
            packed,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn packed(&self) -> &[f64] {
        &self.packed
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            0.0
        } else {
            self.packed[packed_index(i, j)]
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.len();
        (0..n).map(|i| (0..n).map(|j| self.get(i, j)).collect()).collect()
    }

    /// Writes the binary matrix to `path` and the image ids to `<path>.ids.csv`.
    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        let n = self.len();
        write_matrix(path.as_ref(), MatrixKind::Symmetric, self.layer, n, n, self.normalized, &self.packed)?;
        write_ids(path.as_ref(), &[("row", &self.ids)])
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self> {
        let raw = read_matrix(path.as_ref())?;
        if raw.kind != MatrixKind::Symmetric {
            return Err(Error::InvalidMatrix("file holds a rectangular matrix".into()));
        }
        let ids = read_ids(path.as_ref(), "row")?;
        if ids.len() != raw.rows {
            return Err(Error::InvalidMatrix("id sidecar does not match matrix size".into()));
        }
        Self::from_packed(raw.layer, raw.normalized, ids, raw.values)
    }
}

/// Distances from every row heatmap to every column heatmap, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RectDistanceMatrix {
    pub layer: usize,
    pub row_ids: Vec<String>,
    pub col_ids: Vec<String>,
    values: Vec<f64>,
}

impl RectDistanceMatrix {
    pub fn new(layer: usize, row_ids: Vec<String>, col_ids: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if values.len() != row_ids.len() * col_ids.len() {
            return Err(Error::InvalidMatrix(format!(
                "{} values for a {}x{} matrix",
                values.len(),
                row_ids.len(),
                col_ids.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidMatrix(format!("entry {v} is not a distance")));
        }
        Ok(Self {
            layer,
            row_ids,
            col_ids,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.col_ids.len()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.col_ids.len() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let m = self.col_ids.len();
        &self.values[row * m..(row + 1) * m]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Writes the binary matrix to `path` and row and column ids to `<path>.ids.csv`.
    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        write_matrix(
            path.as_ref(),
            MatrixKind::Rectangular,
            self.layer,
            self.rows(),
            self.cols(),
            false,
            &self.values,
        )?;
        write_ids(path.as_ref(), &[("row", &self.row_ids), ("col", &self.col_ids)])
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self> {
        let raw = read_matrix(path.as_ref())?;
        if raw.kind != MatrixKind::Rectangular {
            return Err(Error::InvalidMatrix("file holds a symmetric matrix".into()));
        }
        let rows = read_ids(path.as_ref(), "row")?;
        let cols = read_ids(path.as_ref(), "col")?;
        if rows.len() != raw.rows || cols.len() != raw.cols {
            return Err(Error::InvalidMatrix("id sidecar does not match matrix size".into()));
        }
        Self::new(raw.layer, rows, cols, raw.values)
    }
}

/// Pairwise distances between the (normalized) heatmaps of one layer. Rows are computed in
/// parallel; the result does not depend on the number of workers.
pub fn distance_matrix(maps: &LayerHeatmaps, normalized: bool) -> Result<DistanceMatrix> {
    let n = maps.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "layer {}: a distance matrix needs at least 2 images, got {n}",
            maps.layer
        )));
    }
    let rows: Vec<Vec<f64>> = (1..n)
        .into_par_iter()
        .map(|i| {
            let a = &maps.maps[i].values;
            (0..i).map(|j| euclidean(a, &maps.maps[j].values)).collect()
        })
        .collect();
    DistanceMatrix::from_packed(maps.layer, normalized, maps.ids.clone(), rows.concat())
}

/// Distances from each improvement-set heatmap (rows) to each error-inducing heatmap
/// (columns), both raw.
pub fn improvement_distance_matrix(
    improvement: &LayerHeatmaps,
    errors: &LayerHeatmaps,
) -> Result<RectDistanceMatrix> {
    if improvement.is_empty() || errors.is_empty() {
        return Err(Error::invalid("improvement and error-inducing sets must be nonempty"));
    }
    if improvement.layer != errors.layer || (improvement.rows, improvement.cols) != (errors.rows, errors.cols) {
        return Err(Error::DimensionMismatch(format!(
            "improvement heatmaps are layer {} {}x{}, error heatmaps layer {} {}x{}",
            improvement.layer, improvement.rows, improvement.cols, errors.layer, errors.rows, errors.cols
        )));
    }
    let values: Vec<Vec<f64>> = improvement
        .maps
        .par_iter()
        .map(|a| errors.maps.iter().map(|b| euclidean(&a.values, &b.values)).collect())
        .collect();
    RectDistanceMatrix::new(
        errors.layer,
        improvement.ids.clone(),
        errors.ids.clone(),
        values.concat(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MatrixKind {
    Symmetric,
    Rectangular,
}

struct RawMatrix {
    kind: MatrixKind,
    layer: usize,
    rows: usize,
    cols: usize,
    normalized: bool,
    values: Vec<f64>,
}

const MATRIX_MAGIC: &[u8; 8] = b"HUDDDST1";

/// Header: magic, kind byte (0 symmetric packed, 1 rectangular), normalized byte, then layer,
/// rows and cols as u64, followed by the f64 payload; all little-endian.
fn write_matrix(
    path: &Path,
    kind: MatrixKind,
    layer: usize,
    rows: usize,
    cols: usize,
    normalized: bool,
    values: &[f64],
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&[(kind == MatrixKind::Rectangular) as u8, normalized as u8])?;
    for v in [layer, rows, cols] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_matrix(path: &Path) -> Result<RawMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    let short = |offset| Error::Parse {
        offset,
        reason: "unexpected end of distance matrix file".into(),
    };
    if bytes.len() < 34 {
        return Err(short(bytes.len()));
    }
    if &bytes[..8] != MATRIX_MAGIC {
        return Err(Error::Version("not a distance matrix file".into()));
    }
    let kind = match bytes[8] {
        0 => MatrixKind::Symmetric,
        1 => MatrixKind::Rectangular,
        k => {
            return Err(Error::Parse {
                offset: 8,
                reason: format!("unknown matrix kind {k}"),
            })
        }
    };
    let normalized = bytes[9] != 0;
    let word = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize;
    let (layer, rows, cols) = (word(10), word(18), word(26));
    let count = match kind {
        MatrixKind::Symmetric => rows * rows.saturating_sub(1) / 2,
        MatrixKind::Rectangular => rows * cols,
    };
    let payload = &bytes[34..];
    if payload.len() != count * 8 {
        return Err(Error::Parse {
            offset: 34,
            reason: format!("expected {count} values, found {} bytes", payload.len()),
        });
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(RawMatrix {
        kind,
        layer,
        rows,
        cols,
        normalized,
        values,
    })
}

pub fn ids_sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".ids.csv");
    PathBuf::from(s)
}

fn write_ids(path: &Path, axes: &[(&str, &[String])]) -> Result<()> {
    let side = ids_sidecar_path(path);
    let mut w = csv::Writer::from_path(&side)?;
    w.write_record(["axis", "index", "id"])?;
    for (axis, ids) in axes {
        for (i, id) in ids.iter().enumerate() {
            w.write_record([*axis, &i.to_string(), id])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_ids(path: &Path, axis: &str) -> Result<Vec<String>> {
    let side = ids_sidecar_path(path);
    let mut r = csv::Reader::from_path(&side)?;
    let mut ids = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.get(0) == Some(axis) {
            ids.push(rec.get(2).unwrap_or_default().to_string());
        }
    }
    Ok(ids)
}
