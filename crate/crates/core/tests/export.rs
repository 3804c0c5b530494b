use std::collections::BTreeMap;
use std::fs;

use kilnmap_core::export::{
    aggregate, build_heatmap, detections, quantize, read_heatmap_pgm, write_detections_geojson, write_heatmap_pgm,
    Aggregation, ExportError,
};
use kilnmap_core::geo::{self, children_z20, CoordMode, TileId};

fn parent() -> TileId {
    TileId::new(17, 92_450, 53_820).unwrap()
}

fn ramp() -> BTreeMap<TileId, f64> {
    children_z20(parent())
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, t)| (t, i as f64 / 63.0))
        .collect()
}

fn parse(path: &std::path::Path) -> geojson::FeatureCollection {
    let text = fs::read_to_string(path).unwrap();
    match text.parse::<geojson::GeoJson>().unwrap() {
        geojson::GeoJson::FeatureCollection(fc) => fc,
        other => panic!("not a feature collection: {other:?}"),
    }
}

#[test]
fn geojson_parses_with_independent_reader() {
    let dir = tempfile::tempdir().unwrap();
    for mode in [CoordMode::Mercator, CoordMode::Paper] {
        let dets = detections(&ramp(), 0.5, mode).unwrap();
        assert_eq!(dets.len(), 32);
        let path = dir.path().join(format!("{mode}.geojson"));
        write_detections_geojson(&dets, &path, mode).unwrap();
        let fc = parse(&path);
        assert_eq!(fc.features.len(), dets.len());
        for (f, d) in fc.features.iter().zip(&dets) {
            let expect = geo::chip_point(d.tile, mode).unwrap();
            match &f.geometry.as_ref().unwrap().value {
                geojson::Value::Point(c) => {
                    assert!((c[0] - expect.lon).abs() < 1e-9);
                    assert!((c[1] - expect.lat).abs() < 1e-9);
                }
                other => panic!("{other:?}"),
            }
            let props = f.properties.as_ref().unwrap();
            assert_eq!(props["probability"].as_f64().unwrap(), d.probability);
            assert_eq!(props["tile_x"].as_u64().unwrap(), u64::from(d.tile.x));
            assert_eq!(props["tile_y"].as_u64().unwrap(), u64::from(d.tile.y));
            assert_eq!(props["coordinate_mode"].as_str().unwrap(), mode.to_string());
        }
    }
}

#[test]
fn modes_give_distinct_points() {
    let tile = children_z20(parent()).unwrap()[9];
    let p = geo::chip_point(tile, CoordMode::Paper).unwrap();
    let m = geo::chip_point(tile, CoordMode::Mercator).unwrap();
    assert_ne!((p.lat, p.lon), (m.lat, m.lon));
    assert_eq!(p.mode, CoordMode::Paper);
    assert_eq!(m.mode, CoordMode::Mercator);
}

#[test]
fn empty_detections_give_empty_collection() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("none.geojson");
    let dets = detections(&ramp(), 1.5, CoordMode::Mercator).unwrap();
    assert!(dets.is_empty());
    write_detections_geojson(&dets, &path, CoordMode::Mercator).unwrap();
    assert!(parse(&path).features.is_empty());
}

#[test]
fn pgm_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("heat.pgm");
    let grid = build_heatmap(parent(), &ramp()).unwrap();
    write_heatmap_pgm(&grid, &path).unwrap();
    let raw = fs::read(&path).unwrap();
    assert!(raw.starts_with(b"P5\n8 8\n255\n"));
    assert_eq!(raw.len(), 11 + 64);
    let back = read_heatmap_pgm(&path).unwrap();
    for (i, &b) in back.iter().enumerate() {
        assert_eq!(b, quantize(i as f64 / 63.0));
    }
    assert_eq!((back[0], back[63]), (0, 255));
}

#[test]
fn missing_child_is_reported() {
    let mut map = ramp();
    let gone = children_z20(parent()).unwrap()[17];
    map.remove(&gone);
    match build_heatmap(parent(), &map) {
        Err(ExportError::Incomplete { tile, .. }) => assert_eq!(tile, gone),
        other => panic!("{other:?}"),
    }
}

#[test]
fn repeated_observations_aggregate() {
    let t = children_z20(parent()).unwrap()[0];
    let obs = [(t, 0.2), (t, 0.8), (t, 0.5)];
    assert_eq!(aggregate(&obs, Aggregation::Max).unwrap()[&t], 0.8);
    assert!((aggregate(&obs, Aggregation::Mean).unwrap()[&t] - 0.5).abs() < 1e-15);
}
