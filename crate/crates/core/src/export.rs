//! Tidy CSV and JSON outputs, their readers, and atomic file writes.

use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::Band;
use crate::model::{CovarianceSurface, FittedModel};

/// Write `bytes` to a sibling temporary file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.{}.tmp",
        name.to_string_lossy(),
        std::process::id()
    ));
    let mut file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Serialise rows under an explicit header (written even when there are no rows).
pub fn csv_bytes<T: Serialize>(header: &[&str], rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io {
        path: "<csv buffer>".into(),
        source: e.into_error(),
    })
}

pub fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    write_atomic(path, &csv_bytes(header, rows)?)
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    })?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub const EFFECT_HEADER: [&str; 4] = ["effect", "dimension", "t", "value"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectRow {
    pub effect: String,
    pub dimension: String,
    pub t: f64,
    pub value: f64,
}

/// Every fixed-effect function on `grid`.
pub fn effect_rows(model: &FittedModel, grid: &[f64]) -> Result<Vec<EffectRow>> {
    let names = model.effect_names();
    let labels = model.labels();
    let mut rows = Vec::new();
    for (a, name) in names.iter().enumerate() {
        for (p, values) in model.effect_function(a, grid)?.iter().enumerate() {
            for (i, &t) in grid.iter().enumerate() {
                rows.push(EffectRow {
                    effect: name.clone(),
                    dimension: labels[p].clone(),
                    t,
                    value: values[i],
                });
            }
        }
    }
    Ok(rows)
}

pub const BAND_HEADER: [&str; 10] = [
    "effect",
    "kind",
    "level",
    "multiplier",
    "dimension",
    "t",
    "point",
    "se",
    "lower",
    "upper",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandRow {
    pub effect: String,
    pub kind: String,
    pub level: f64,
    pub multiplier: f64,
    pub dimension: String,
    pub t: f64,
    pub point: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
}

pub fn band_rows(band: &Band, effect: &str, labels: &[String]) -> Vec<BandRow> {
    let mut rows = Vec::new();
    for (p, label) in labels.iter().enumerate() {
        for (i, &t) in band.grid.iter().enumerate() {
            rows.push(BandRow {
                effect: effect.to_string(),
                kind: band.kind.as_str().to_string(),
                level: band.level,
                multiplier: band.multiplier,
                dimension: label.clone(),
                t,
                point: band.point[p][i],
                se: band.se[p][i],
                lower: band.lower[p][i],
                upper: band.upper[p][i],
            });
        }
    }
    rows
}

pub const SURFACE_HEADER: [&str; 6] = ["which", "p", "p2", "t", "t2", "value"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceRow {
    pub which: String,
    pub p: String,
    pub p2: String,
    pub t: f64,
    pub t2: f64,
    pub value: f64,
}

/// Long form of a covariance surface: `P² · |grid|²` rows.
pub fn surface_rows(which: &str, surface: &CovarianceSurface) -> Vec<SurfaceRow> {
    let g = &surface.grid;
    let mut rows = Vec::with_capacity(surface.dims().pow(2) * g.len().pow(2));
    for (p, row) in surface.blocks.iter().enumerate() {
        for (p2, block) in row.iter().enumerate() {
            for (i, &t) in g.iter().enumerate() {
                for (j, &t2) in g.iter().enumerate() {
                    rows.push(SurfaceRow {
                        which: which.to_string(),
                        p: surface.labels[p].clone(),
                        p2: surface.labels[p2].clone(),
                        t,
                        t2,
                        value: block[(i, j)],
                    });
                }
            }
        }
    }
    rows
}

pub const SCREE_HEADER: [&str; 3] = ["k", "eigenvalue", "cumulative_pve"];
