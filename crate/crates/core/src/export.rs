//! Detection lists and per-block heatmaps.
//!
//! Heatmaps are written as binary PGM: the ASCII header `P5\n8 8\n255\n`
//! followed by 64 bytes, row-major in [`children_z20`] order, each byte
//! `floor(255·p + 0.5)`.
//!
//! Detections are written as an RFC 7946 `FeatureCollection` of `Point`
//! features with `[lon, lat]` coordinates and the properties
//! `probability`, `zoom`, `tile_x`, `tile_y`, `coordinate_mode`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use thiserror::Error;

use crate::geo::{self, children_z20, CoordMode, GeoError, GeoPoint, TileId, CHILDREN_PER_EDGE, CHILDREN_PER_TILE};

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("no probability for chip {tile} of block {parent}")]
    Incomplete { parent: TileId, tile: TileId },
    #[error("probability {probability} for {tile} is outside [0, 1]")]
    Probability { tile: TileId, probability: f64 },
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error("malformed PGM: {0}")]
    Pgm(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ExportError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExportError + '_ {
    move |source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn check_probability(tile: TileId, probability: f64) -> Result<()> {
    if (0.0..=1.0).contains(&probability) {
        Ok(())
    } else {
        Err(ExportError::Probability { tile, probability })
    }
}

/// How repeated observations of one chip combine into a single value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Aggregation {
    #[default]
    Max,
    Mean,
}

impl std::str::FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "max" => Ok(Aggregation::Max),
            "mean" => Ok(Aggregation::Mean),
            other => Err(format!("unknown aggregation {other:?} (max|mean)")),
        }
    }
}

/// Collapses `(tile, probability)` observations to one value per tile.
pub fn aggregate(observations: &[(TileId, f64)], how: Aggregation) -> Result<BTreeMap<TileId, f64>> {
    let mut acc: BTreeMap<TileId, (f64, usize)> = BTreeMap::new();
    for &(tile, p) in observations {
        check_probability(tile, p)?;
        let e = acc.entry(tile).or_insert((
            match how {
                Aggregation::Max => f64::NEG_INFINITY,
                Aggregation::Mean => 0.0,
            },
            0,
        ));
        match how {
            Aggregation::Max => e.0 = e.0.max(p),
            Aggregation::Mean => e.0 += p,
        }
        e.1 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(t, (v, n))| {
            let v = match how {
                Aggregation::Max => v,
                Aggregation::Mean => v / n as f64,
            };
            (t, v)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapGrid {
    pub parent: TileId,
    /// Row-major, in [`children_z20`] order.
    pub cells: [f64; CHILDREN_PER_TILE],
}

impl HeatmapGrid {
    pub fn max(&self) -> f64 {
        self.cells.iter().copied().fold(0.0, f64::max)
    }

    /// Child tiles whose cell value is at least `threshold`.
    pub fn hot_tiles(&self, threshold: f64) -> Vec<TileId> {
        children_z20(self.parent)
            .expect("parent is zoom 17")
            .into_iter()
            .zip(self.cells)
            .filter(|&(_, p)| p >= threshold)
            .map(|(t, _)| t)
            .collect()
    }
}

/// Arranges the 64 child-chip probabilities of `parent` into its grid.
pub fn build_heatmap(parent: TileId, chip_probs: &BTreeMap<TileId, f64>) -> Result<HeatmapGrid> {
    let mut cells = [0.0; CHILDREN_PER_TILE];
    for (cell, child) in cells.iter_mut().zip(children_z20(parent)?) {
        let p = *chip_probs
            .get(&child)
            .ok_or(ExportError::Incomplete { parent, tile: child })?;
        check_probability(child, p)?;
        *cell = p;
    }
    Ok(HeatmapGrid { parent, cells })
}

/// `floor(255·p + 0.5)`: round half up.
pub fn quantize(p: f64) -> u8 {
    (255.0 * p.clamp(0.0, 1.0) + 0.5).floor() as u8
}

const PGM_HEADER: &[u8] = b"P5\n8 8\n255\n";

pub fn heatmap_pgm_bytes(grid: &HeatmapGrid) -> Vec<u8> {
    let mut out = PGM_HEADER.to_vec();
    out.extend(grid.cells.iter().map(|&p| quantize(p)));
    out
}

pub fn write_heatmap_pgm(grid: &HeatmapGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, heatmap_pgm_bytes(grid)).map_err(io_err(path))
}

/// Parses an 8×8 P5 PGM back into quantised cell values (`byte / 255`).
pub fn parse_heatmap_pgm(bytes: &[u8]) -> Result<[u8; CHILDREN_PER_TILE]> {
    let mut fields = Vec::new();
    let mut pos = 0;
    // Magic, width, height, maxval, each followed by one whitespace byte.
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if bytes.get(pos) == Some(&b'#') {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(ExportError::Pgm("truncated header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let edge = CHILDREN_PER_EDGE.to_string();
    if fields != ["P5", edge.as_str(), edge.as_str(), "255"] {
        return Err(ExportError::Pgm(format!("unexpected header {fields:?}")));
    }
    let body = bytes.get(pos..).unwrap_or_default();
    body.try_into()
        .map_err(|_| ExportError::Pgm(format!("expected {CHILDREN_PER_TILE} pixels, found {}", body.len())))
}

pub fn read_heatmap_pgm(path: impl AsRef<Path>) -> Result<[u8; CHILDREN_PER_TILE]> {
    let path = path.as_ref();
    parse_heatmap_pgm(&fs::read(path).map_err(io_err(path))?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    /// Zoom-20 chip.
    pub tile: TileId,
    pub point: GeoPoint,
    pub probability: f64,
}

/// Chips with probability at least `threshold`, located in `mode`, in tile order.
pub fn detections(chip_probs: &BTreeMap<TileId, f64>, threshold: f64, mode: CoordMode) -> Result<Vec<Detection>> {
    chip_probs
        .iter()
        .filter(|&(_, &p)| p >= threshold)
        .map(|(&tile, &probability)| {
            check_probability(tile, probability)?;
            if tile.zoom != 20 {
                return Err(GeoError::WrongZoom {
                    expected: 20,
                    actual: tile.zoom,
                }
                .into());
            }
            Ok(Detection {
                tile,
                point: geo::chip_point(tile, mode)?,
                probability,
            })
        })
        .collect()
}

/// GeoJSON `FeatureCollection` for `detections`; points not already in
/// `mode` are recomputed from their tile.
pub fn detections_geojson(detections: &[Detection], mode: CoordMode) -> Result<Value> {
    let features = detections
        .iter()
        .map(|d| {
            let point = if d.point.mode == mode {
                d.point
            } else {
                geo::chip_point(d.tile, mode)?
            };
            Ok(json!({
                "type": "Feature",
                "geometry": { "type": "Point", "coordinates": [point.lon, point.lat] },
                "properties": {
                    "probability": d.probability,
                    "zoom": d.tile.zoom,
                    "tile_x": d.tile.x,
                    "tile_y": d.tile.y,
                    "coordinate_mode": mode.to_string(),
                },
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(json!({ "type": "FeatureCollection", "features": features }))
}

pub fn write_detections_geojson(detections: &[Detection], path: impl AsRef<Path>, mode: CoordMode) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(&detections_geojson(detections, mode)?).expect("JSON values serialise");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}
