//! Slippy-map tile geodesy.
//!
//! Two coordinate systems live here:
//!
//! * **paper mode** — the linear zoom-17 → zoom-20 conversion used to
//!   geo-reference the survey imagery: an affine map from tile index to
//!   degrees, followed by a fixed ±4·D offset to the zoom-20 grid corner.
//!   It is a local approximation and is unbounded.
//! * **mercator mode** — standard web-mercator tile math, used for any
//!   coordinate that leaves the process (GeoJSON, CSV exports).
//!
//! All paper-mode constants are dyadic rationals, so every result in that
//! mode is exact in binary floating point over the tile ranges in use.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Latitude limit of the square web-mercator world.
pub const MAX_MERCATOR_LAT: f64 = 85.051_128_779_806_59;

/// Tiles per zoom-17 tile edge at zoom 20.
pub const CHILDREN_PER_EDGE: u32 = 8;

pub const CHILDREN_PER_TILE: usize = (CHILDREN_PER_EDGE * CHILDREN_PER_EDGE) as usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("tile ({x}, {y}) is outside the 2^{zoom} grid")]
    TileOutOfRange { zoom: u8, x: u32, y: u32 },
    #[error("zoom {0} is not supported (0..=30)")]
    UnsupportedZoom(u8),
    #[error("expected a zoom-{expected} tile, got zoom {actual}")]
    WrongZoom { expected: u8, actual: u8 },
    #[error("latitude {0} outside web-mercator range ±{MAX_MERCATOR_LAT}")]
    LatitudeOutOfRange(f64),
    #[error("longitude {0} outside [-180, 180)")]
    LongitudeOutOfRange(f64),
    #[error("point is in {0} mode, operation needs the other mode")]
    WrongMode(CoordMode),
}

pub type Result<T> = std::result::Result<T, GeoError>;

/// Constants of the linear tile → degree conversion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TileConstants {
    /// Reference tile index.
    pub ref_tile: f64,
    /// Degrees between adjacent zoom-17 tiles.
    pub step: f64,
    /// Degrees at the reference tile.
    pub origin: f64,
    /// Degrees between adjacent zoom-20 tiles.
    pub z20_step: f64,
}

impl TileConstants {
    pub const PAPER: TileConstants = TileConstants {
        ref_tile: 42295.0,
        step: 0.0054931640625,
        origin: 52.33612060546875,
        z20_step: 6.866455078125e-4,
    };
}

impl Default for TileConstants {
    fn default() -> Self {
        Self::PAPER
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileId {
    pub zoom: u8,
    pub x: u32,
    pub y: u32,
}

impl TileId {
    pub fn new(zoom: u8, x: u32, y: u32) -> Result<Self> {
        if zoom > 30 {
            return Err(GeoError::UnsupportedZoom(zoom));
        }
        let n = 1u64 << zoom;
        if u64::from(x) >= n || u64::from(y) >= n {
            return Err(GeoError::TileOutOfRange { zoom, x, y });
        }
        Ok(Self { zoom, x, y })
    }

    pub fn parent_z17(&self) -> Result<TileId> {
        if self.zoom != 20 {
            return Err(GeoError::WrongZoom {
                expected: 20,
                actual: self.zoom,
            });
        }
        Ok(TileId {
            zoom: 17,
            x: self.x / CHILDREN_PER_EDGE,
            y: self.y / CHILDREN_PER_EDGE,
        })
    }

    /// Position `(dx, dy)` of a zoom-20 tile inside its zoom-17 parent.
    pub fn offset_in_parent(&self) -> (u32, u32) {
        (self.x % CHILDREN_PER_EDGE, self.y % CHILDREN_PER_EDGE)
    }
}

impl fmt::Display for TileId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.zoom, self.x, self.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CoordMode {
    Paper,
    #[default]
    Mercator,
}

impl fmt::Display for CoordMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CoordMode::Paper => "paper",
            CoordMode::Mercator => "mercator",
        })
    }
}

impl std::str::FromStr for CoordMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "paper" => Ok(CoordMode::Paper),
            "mercator" => Ok(CoordMode::Mercator),
            other => Err(format!("unknown coordinate mode {other:?} (paper|mercator)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
    pub mode: CoordMode,
}

impl GeoPoint {
    pub fn paper(lat: f64, lon: f64) -> Self {
        Self {
            lat,
            lon,
            mode: CoordMode::Paper,
        }
    }

    /// Validated web-mercator point.
    pub fn mercator(lat: f64, lon: f64) -> Result<Self> {
        check_mercator(lat, lon)?;
        Ok(Self {
            lat,
            lon,
            mode: CoordMode::Mercator,
        })
    }
}

fn check_mercator(lat: f64, lon: f64) -> Result<()> {
    if !(-MAX_MERCATOR_LAT..=MAX_MERCATOR_LAT).contains(&lat) {
        return Err(GeoError::LatitudeOutOfRange(lat));
    }
    if !(-180.0..180.0).contains(&lon) {
        return Err(GeoError::LongitudeOutOfRange(lon));
    }
    Ok(())
}

fn affine(index: i64, c: &TileConstants) -> f64 {
    ((index as f64 - c.ref_tile) * c.step) + c.origin
}

/// Latitude of a zoom-17 tile row under the linear conversion.
pub fn paper_lat_from_tile(y_tile: i64) -> f64 {
    paper_lat_from_tile_with(y_tile, &TileConstants::PAPER)
}

pub fn paper_lat_from_tile_with(y_tile: i64, constants: &TileConstants) -> f64 {
    affine(y_tile, constants)
}

/// Longitude of a zoom-17 tile column; same affine map as the latitude.
pub fn paper_lon_from_tile(x_tile: i64) -> f64 {
    paper_lon_from_tile_with(x_tile, &TileConstants::PAPER)
}

pub fn paper_lon_from_tile_with(x_tile: i64, constants: &TileConstants) -> f64 {
    affine(x_tile, constants)
}

/// Paper-mode midpoint of a zoom-17 tile.
pub fn paper_midpoint(tile: TileId) -> Result<GeoPoint> {
    if tile.zoom != 17 {
        return Err(GeoError::WrongZoom {
            expected: 17,
            actual: tile.zoom,
        });
    }
    Ok(GeoPoint::paper(
        paper_lat_from_tile(i64::from(tile.y)),
        paper_lon_from_tile(i64::from(tile.x)),
    ))
}

/// Zoom-20 grid corner: `(lat + 4·D, lon − 4·D)`, signs as in the survey pipeline.
pub fn corner20(mid: GeoPoint) -> Result<GeoPoint> {
    corner20_with(mid, &TileConstants::PAPER)
}

pub fn corner20_with(mid: GeoPoint, constants: &TileConstants) -> Result<GeoPoint> {
    if mid.mode != CoordMode::Paper {
        return Err(GeoError::WrongMode(mid.mode));
    }
    let d = constants.z20_step;
    Ok(GeoPoint::paper(mid.lat + 4.0 * d, mid.lon - 4.0 * d))
}

/// Paper-mode location of a zoom-20 chip: the parent's zoom-20 corner,
/// stepped `dx·D` east and `dy·D` south for the chip's place in the 8×8 grid.
pub fn paper_chip_point(tile: TileId) -> Result<GeoPoint> {
    let parent = tile.parent_z17()?;
    let corner = corner20(paper_midpoint(parent)?)?;
    let (dx, dy) = tile.offset_in_parent();
    let d = TileConstants::PAPER.z20_step;
    Ok(GeoPoint::paper(
        corner.lat - f64::from(dy) * d,
        corner.lon + f64::from(dx) * d,
    ))
}

/// The 64 zoom-20 tiles covering a zoom-17 tile, row-major (y outer, x inner).
pub fn children_z20(tile: TileId) -> Result<Vec<TileId>> {
    if tile.zoom != 17 {
        return Err(GeoError::WrongZoom {
            expected: 17,
            actual: tile.zoom,
        });
    }
    let mut out = Vec::with_capacity(CHILDREN_PER_TILE);
    for dy in 0..CHILDREN_PER_EDGE {
        for dx in 0..CHILDREN_PER_EDGE {
            out.push(TileId {
                zoom: 20,
                x: tile.x * CHILDREN_PER_EDGE + dx,
                y: tile.y * CHILDREN_PER_EDGE + dy,
            });
        }
    }
    Ok(out)
}

/// Total zoom-20 chips produced by expanding `z17_tiles` zoom-17 tiles.
pub fn expanded_chip_count(z17_tiles: u64) -> u64 {
    z17_tiles * CHILDREN_PER_TILE as u64
}

fn tiles_at(zoom: u8) -> f64 {
    (1u64 << zoom) as f64
}

/// Latitude of the northern edge of tile row `y` (fractional rows allowed).
fn mercator_lat(y: f64, zoom: u8) -> f64 {
    (PI * (1.0 - 2.0 * y / tiles_at(zoom))).sinh().atan().to_degrees()
}

fn mercator_lon(x: f64, zoom: u8) -> f64 {
    x / tiles_at(zoom) * 360.0 - 180.0
}

/// North-west corner of a tile.
pub fn mercator_tile_to_latlon(tile: TileId) -> GeoPoint {
    GeoPoint {
        lat: mercator_lat(f64::from(tile.y), tile.zoom),
        lon: mercator_lon(f64::from(tile.x), tile.zoom),
        mode: CoordMode::Mercator,
    }
}

pub fn mercator_tile_center(tile: TileId) -> GeoPoint {
    GeoPoint {
        lat: mercator_lat(f64::from(tile.y) + 0.5, tile.zoom),
        lon: mercator_lon(f64::from(tile.x) + 0.5, tile.zoom),
        mode: CoordMode::Mercator,
    }
}

/// `(north, west, south, east)` edges in degrees.
pub fn mercator_bounds(tile: TileId) -> (f64, f64, f64, f64) {
    let nw = mercator_tile_to_latlon(tile);
    let south = mercator_lat(f64::from(tile.y) + 1.0, tile.zoom);
    let east = mercator_lon(f64::from(tile.x) + 1.0, tile.zoom);
    (nw.lat, nw.lon, south, east)
}

/// Tile containing a point.
pub fn mercator_latlon_to_tile(point: GeoPoint, zoom: u8) -> Result<TileId> {
    if point.mode != CoordMode::Mercator {
        return Err(GeoError::WrongMode(point.mode));
    }
    if zoom > 30 {
        return Err(GeoError::UnsupportedZoom(zoom));
    }
    check_mercator(point.lat, point.lon)?;
    let n = tiles_at(zoom);
    let max = (1u64 << zoom) - 1;
    let lat = point.lat.to_radians();
    let x = ((point.lon + 180.0) / 360.0 * n).floor();
    let y = ((1.0 - (lat.tan() + 1.0 / lat.cos()).ln() / PI) / 2.0 * n).floor();
    let clamp = |v: f64| (v.max(0.0) as u64).min(max) as u32;
    TileId::new(zoom, clamp(x), clamp(y))
}

/// Coordinate of a zoom-20 chip in the requested mode (mercator: tile center).
pub fn chip_point(tile: TileId, mode: CoordMode) -> Result<GeoPoint> {
    match mode {
        CoordMode::Mercator => Ok(mercator_tile_center(tile)),
        CoordMode::Paper => paper_chip_point(tile),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const C: TileConstants = TileConstants::PAPER;

    #[test]
    fn constants_are_dyadic() {
        assert_eq!(8.0 * C.z20_step, C.step);
        assert_eq!(4.0 * C.z20_step, 0.00274658203125);
    }

    #[test]
    fn paper_lat_examples() {
        assert_eq!(paper_lat_from_tile(42295), 52.33612060546875);
        assert_eq!(paper_lat_from_tile(42296), 52.34161376953125);
        assert_eq!(paper_lat_from_tile(42293), 52.32513427734375);
    }

    #[test]
    fn paper_lon_examples() {
        assert_eq!(paper_lon_from_tile(42295), 52.33612060546875);
        assert_eq!(paper_lon_from_tile(42303), 52.38006591796875);
        assert_eq!(paper_lon_from_tile(0), C.origin - 42295.0 * C.step);
    }

    #[test]
    fn neighbor_delta_is_exact() {
        for y in 0..(1 << 17) {
            assert_eq!(paper_lat_from_tile(y + 1) - paper_lat_from_tile(y), C.step, "y = {y}");
        }
    }

    #[test]
    fn corner_examples() {
        let mid = GeoPoint::paper(52.33612060546875, 52.33612060546875);
        let corner = corner20(mid).unwrap();
        assert_eq!(corner.lat, 52.3388671875);
        assert_eq!(corner.lon, 52.3333740234375);

        let flat = TileConstants { z20_step: 0.0, ..C };
        assert_eq!(corner20_with(mid, &flat).unwrap(), mid);

        let merc = GeoPoint::mercator(10.0, 10.0).unwrap();
        assert!(corner20(merc).is_err());
    }

    #[test]
    fn children_examples() {
        let kids = children_z20(TileId::new(17, 0, 0).unwrap()).unwrap();
        assert_eq!(kids.len(), 64);
        assert!(kids.iter().all(|t| t.zoom == 20 && t.x < 8 && t.y < 8));
        assert_eq!(kids[0], TileId::new(20, 0, 0).unwrap());
        assert_eq!(kids[9], TileId::new(20, 1, 1).unwrap());

        let kids = children_z20(TileId::new(17, 93_000, 53_000).unwrap()).unwrap();
        let distinct: std::collections::HashSet<_> = kids.iter().collect();
        assert_eq!(distinct.len(), 64);
        assert!(kids
            .iter()
            .all(|k| k.parent_z17().unwrap() == TileId::new(17, 93_000, 53_000).unwrap()));

        assert_eq!(
            children_z20(TileId::new(20, 1, 1).unwrap()).unwrap_err(),
            GeoError::WrongZoom {
                expected: 17,
                actual: 20
            }
        );
        assert_eq!(expanded_chip_count(787_100), 50_374_400);
    }

    #[test]
    fn tile_range_checked() {
        assert!(TileId::new(17, 1 << 17, 0).is_err());
        assert!(TileId::new(17, (1 << 17) - 1, 0).is_ok());
    }

    #[test]
    fn mercator_edges() {
        for z in [0u8, 1, 17, 20] {
            let nw = mercator_tile_to_latlon(TileId::new(z, 0, 0).unwrap());
            assert_eq!(nw.lon, -180.0);
            assert!((nw.lat - MAX_MERCATOR_LAT).abs() < 1e-9);
        }
        for z in [1u8, 5, 17, 20] {
            let t = mercator_latlon_to_tile(GeoPoint::mercator(0.0, 0.0).unwrap(), z).unwrap();
            let half = 1u32 << (z - 1);
            assert_eq!((t.x, t.y), (half, half));
            let corner = mercator_tile_to_latlon(t);
            assert_eq!(corner.lon, 0.0);
            assert!(corner.lat.abs() < 1e-12);
        }
        assert!(matches!(
            GeoPoint::mercator(86.0, 0.0),
            Err(GeoError::LatitudeOutOfRange(_))
        ));
        assert!(GeoPoint::mercator(0.0, 180.0).is_err());
    }

    #[test]
    fn children_tile_parent_bounds() {
        let parent = TileId::new(17, 93_004, 53_318).unwrap();
        let (n, w, s, e) = mercator_bounds(parent);
        let kids = children_z20(parent).unwrap();
        for dy in 0..8 {
            for dx in 0..8 {
                let (kn, kw, ks, ke) = mercator_bounds(kids[dy * 8 + dx]);
                if dx == 0 {
                    assert_eq!(kw, w);
                }
                if dx == 7 {
                    assert_eq!(ke, e);
                }
                if dy == 0 {
                    assert_eq!(kn, n);
                }
                if dy == 7 {
                    assert_eq!(ks, s);
                }
                if dx < 7 {
                    assert_eq!(ke, mercator_bounds(kids[dy * 8 + dx + 1]).1);
                }
                if dy < 7 {
                    assert_eq!(ks, mercator_bounds(kids[(dy + 1) * 8 + dx]).0);
                }
            }
        }
    }

    #[test]
    fn paper_chip_point_steps_from_corner() {
        let parent = TileId::new(17, 42295, 42295).unwrap();
        let kids = children_z20(parent).unwrap();
        let first = paper_chip_point(kids[0]).unwrap();
        assert_eq!(first.lat, 52.3388671875);
        assert_eq!(first.lon, 52.3333740234375);
        let last = paper_chip_point(kids[63]).unwrap();
        assert_eq!(last.lat, 52.3388671875 - 7.0 * C.z20_step);
        assert_eq!(last.lon, 52.3333740234375 + 7.0 * C.z20_step);
    }
}
