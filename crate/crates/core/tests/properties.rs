use std::collections::BTreeMap;

use kilnmap_core::dataset::{ChipRecord, ClassLabel, Manifest, Split};
use kilnmap_core::eval::{binarize, confusion, evaluate_probabilities, f1_score, metrics, ConfusionCounts};
use kilnmap_core::export::{build_heatmap, detections, heatmap_pgm_bytes, parse_heatmap_pgm, quantize};
use kilnmap_core::geo::{self, children_z20, CoordMode, GeoPoint, TileId};
use kilnmap_core::gradcheck::op_suite;
use kilnmap_core::tensor::Tensor;
use proptest::prelude::*;

fn tile_at(zoom: u8) -> impl Strategy<Value = TileId> {
    // Stay inside the latitude band where mercator rows are invertible.
    let n = 1u32 << zoom;
    (0..n, n / 16..n - n / 16).prop_map(move |(x, y)| TileId::new(zoom, x, y).unwrap())
}

fn z17() -> impl Strategy<Value = TileId> {
    tile_at(17)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn mercator_center_round_trips(tile in prop_oneof![tile_at(17), tile_at(20)]) {
        let c = geo::mercator_tile_center(tile);
        let p = GeoPoint::mercator(c.lat, c.lon).unwrap();
        prop_assert_eq!(geo::mercator_latlon_to_tile(p, tile.zoom).unwrap(), tile);
    }

    #[test]
    fn children_lie_inside_parent(parent in z17()) {
        let (n, w, s, e) = geo::mercator_bounds(parent);
        let kids = children_z20(parent).unwrap();
        prop_assert_eq!(kids.len(), 64);
        for (i, kid) in kids.iter().enumerate() {
            prop_assert_eq!(kid.parent_z17().unwrap(), parent);
            let (dx, dy) = kid.offset_in_parent();
            prop_assert_eq!((dy * 8 + dx) as usize, i);
            let c = geo::mercator_tile_center(*kid);
            prop_assert!(c.lat < n && c.lat > s && c.lon > w && c.lon < e);
        }
    }
}

fn probability_rows(n: usize) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(proptest::collection::vec(0.001f64..1.0, 11), n).prop_map(|rows| {
        let data: Vec<f64> = rows
            .iter()
            .flat_map(|r| {
                let s: f64 = r.iter().sum();
                r.iter().map(move |v| v / s).collect::<Vec<_>>()
            })
            .collect();
        Tensor::new(vec![rows.len(), 11], data).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn confusion_matches_naive_loop(pairs in proptest::collection::vec((any::<bool>(), any::<bool>()), 0..200)) {
        let (p, a): (Vec<bool>, Vec<bool>) = pairs.iter().copied().unzip();
        let c = confusion(&p, &a).unwrap();
        let mut naive = [0usize; 4];
        for i in 0..p.len() {
            let k = match (p[i], a[i]) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            };
            naive[k] += 1;
        }
        prop_assert_eq!([c.tp, c.fp, c.fn_, c.tn], naive);
        prop_assert_eq!(c.total(), p.len());
    }

    #[test]
    fn f1_between_precision_and_recall(tp in 0usize..50, fp in 0usize..50, fn_ in 0usize..50) {
        let m = metrics(ConfusionCounts { tp, fp, fn_, tn: 0 }, 0.5);
        if let (Some(p), Some(r), Some(f)) = (m.precision, m.recall, m.f1) {
            prop_assert!(f <= p.max(r) + 1e-15);
            prop_assert!(f >= p.min(r) - 1e-15);
        }
        prop_assert_eq!(m.precision.is_none(), tp + fp == 0);
        prop_assert_eq!(m.recall.is_none(), tp + fn_ == 0);
    }

    #[test]
    fn raising_threshold_is_monotone(
        probs in probability_rows(40),
        labels in proptest::collection::vec(0usize..11, 40),
        t1 in 0.01f64..0.99,
        t2 in 0.01f64..0.99,
    ) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let r = evaluate_probabilities(&probs, &labels, &[lo, hi]).unwrap();
        prop_assert!(r[1].counts.fp <= r[0].counts.fp);
        prop_assert!(r[1].counts.fn_ >= r[0].counts.fn_);
    }

    #[test]
    fn metrics_ignore_joint_permutation(
        pairs in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..100),
        seed in any::<u64>(),
    ) {
        let (p, a): (Vec<bool>, Vec<bool>) = pairs.iter().copied().unzip();
        let mut idx: Vec<usize> = (0..p.len()).collect();
        let mut s = seed;
        for i in (1..idx.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            idx.swap(i, (s >> 33) as usize % (i + 1));
        }
        let pp: Vec<bool> = idx.iter().map(|&i| p[i]).collect();
        let aa: Vec<bool> = idx.iter().map(|&i| a[i]).collect();
        prop_assert_eq!(
            metrics(confusion(&p, &a).unwrap(), 0.5),
            metrics(confusion(&pp, &aa).unwrap(), 0.5)
        );
    }

    #[test]
    fn equal_precision_recall_fixed_point(r in 0.0f64..=1.0) {
        prop_assert_eq!(f1_score(r, r), r);
    }

    #[test]
    fn binarize_is_inclusive_threshold(probs in probability_rows(20), t in 0.01f64..0.99) {
        let b = binarize(&probs, t).unwrap();
        for (row, &pos) in probs.data().chunks(11).zip(&b) {
            prop_assert_eq!(pos, row[0] >= t);
        }
    }

    #[test]
    fn heatmap_max_and_pgm_round_trip(parent in z17(), values in proptest::collection::vec(0.0f64..=1.0, 64)) {
        let kids = children_z20(parent).unwrap();
        let map: BTreeMap<TileId, f64> = kids.iter().copied().zip(values.iter().copied()).collect();
        let grid = build_heatmap(parent, &map).unwrap();
        let max = values.iter().copied().fold(0.0, f64::max);
        prop_assert_eq!(grid.max(), max);
        let bytes = parse_heatmap_pgm(&heatmap_pgm_bytes(&grid)).unwrap();
        let expected: Vec<u8> = values.iter().map(|&p| quantize(p)).collect();
        prop_assert_eq!(bytes.to_vec(), expected);
    }

    #[test]
    fn heatmap_agrees_with_detections(parent in z17(), values in proptest::collection::vec(0.0f64..=1.0, 64), t in 0.05f64..0.95) {
        let kids = children_z20(parent).unwrap();
        let map: BTreeMap<TileId, f64> = kids.iter().copied().zip(values.iter().copied()).collect();
        let grid = build_heatmap(parent, &map).unwrap();
        let from_grid = grid.hot_tiles(t);
        let mut from_list: Vec<TileId> = detections(&map, t, CoordMode::Mercator)
            .unwrap()
            .into_iter()
            .map(|d| d.tile)
            .collect();
        let mut from_grid_sorted = from_grid.clone();
        from_grid_sorted.sort();
        from_list.sort();
        prop_assert_eq!(from_grid_sorted, from_list);
    }
}

fn record() -> impl Strategy<Value = ChipRecord> {
    (
        "[a-z][a-z0-9_/]{0,20}\\.png",
        0usize..11,
        -85.0f64..85.0,
        -180.0f64..180.0,
        0u32..1_048_576,
        0u32..1_048_576,
        0usize..3,
    )
        .prop_map(|(path, label, lat, lon, x, y, split)| ChipRecord {
            image_path: path,
            label: ClassLabel::from_index(label).unwrap(),
            lat,
            lon,
            zoom: 20,
            tile_x: x,
            tile_y: y,
            split: [Split::Train, Split::Val, Split::Test][split],
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn manifest_csv_round_trips(mut records in proptest::collection::vec(record(), 2..40), seed in proptest::option::of(any::<u64>())) {
        records.sort_by(|a, b| a.image_path.cmp(&b.image_path));
        records.dedup_by(|a, b| a.image_path == b.image_path);
        prop_assume!(records.len() >= 2);
        records[0].split = Split::Train;
        records[1].split = Split::Val;
        let m = Manifest::new(records, seed, "data");
        let back = Manifest::parse(&m.to_csv(), "data").unwrap();
        prop_assert_eq!(back, m);
    }
}

#[test]
fn every_op_passes_twenty_trials() {
    let checks = op_suite(20, 1e-5, 2024).unwrap();
    assert!(checks.len() >= 14);
    for c in checks {
        assert_eq!(c.trials, 20);
        assert!(c.report.passes(1e-4), "{}: {:?}", c.name, c.report);
    }
}
