use std::fs;

use kilnmap_core::dataset::{
    load_manifest, split_assign, synth_generate, ChipSet, ClassLabel, DatasetError, Split, SplitFractions,
    SynthOptions, NUM_CLASSES,
};

#[test]
fn synth_is_bit_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = synth_generate(a.path(), &SynthOptions::new(4, 24, 99)).unwrap();
    let mb = synth_generate(b.path(), &SynthOptions::new(4, 24, 99)).unwrap();
    assert_eq!(ma.records, mb.records);
    assert_eq!(
        fs::read(a.path().join("manifest.csv")).unwrap(),
        fs::read(b.path().join("manifest.csv")).unwrap()
    );
    for r in &ma.records {
        assert_eq!(
            fs::read(a.path().join(&r.image_path)).unwrap(),
            fs::read(b.path().join(&r.image_path)).unwrap(),
            "{}",
            r.image_path
        );
    }
    let c = tempfile::tempdir().unwrap();
    synth_generate(c.path(), &SynthOptions::new(4, 24, 100)).unwrap();
    let first = &ma.records[0].image_path;
    assert_ne!(
        fs::read(a.path().join(first)).unwrap(),
        fs::read(c.path().join(first)).unwrap()
    );
}

#[test]
fn synth_manifest_loads_and_is_stratified() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_generate(dir.path(), &SynthOptions::new(10, 16, 1)).unwrap();
    let loaded = load_manifest(dir.path().join("manifest.csv")).unwrap();
    assert_eq!(loaded.records, m.records);
    assert_eq!(loaded.seed, Some(1));
    for label in ClassLabel::ALL {
        let count = |s| m.records.iter().filter(|r| r.label == label && r.split == s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (8, 1, 1));
    }
    let again = split_assign(&m, SplitFractions::default(), 1).unwrap();
    assert_eq!(again.records, m.records);
    let set = ChipSet::load(&m, Split::Train).unwrap();
    assert_eq!((set.len(), set.chip_size()), (88, 16));
}

/// Per-channel mean and standard deviation plus mean absolute horizontal
/// and vertical differences.
fn features(chip: &[f64], size: usize) -> Vec<f64> {
    let plane = size * size;
    let mut f = Vec::new();
    for c in 0..3 {
        let p = &chip[c * plane..(c + 1) * plane];
        let mean = p.iter().sum::<f64>() / plane as f64;
        let var = p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / plane as f64;
        f.push(mean);
        f.push(var.sqrt());
    }
    let luma: Vec<f64> = (0..plane)
        .map(|i| (chip[i] + chip[plane + i] + chip[2 * plane + i]) / 3.0)
        .collect();
    let (mut dx, mut dy) = (0.0, 0.0);
    for y in 0..size {
        for x in 0..size {
            if x + 1 < size {
                dx += (luma[y * size + x + 1] - luma[y * size + x]).abs();
            }
            if y + 1 < size {
                dy += (luma[(y + 1) * size + x] - luma[y * size + x]).abs();
            }
        }
    }
    f.push(dx / plane as f64);
    f.push(dy / plane as f64);
    f
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn classes_are_separable_by_simple_features() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_generate(dir.path(), &SynthOptions::new(20, 32, 4)).unwrap();
    let feats = |split| {
        let set = ChipSet::load(&m, split).unwrap();
        let (chips, labels) = set.stack(&(0..set.len()).collect::<Vec<_>>(), None);
        let per = 3 * 32 * 32;
        let f: Vec<Vec<f64>> = chips.data().chunks(per).map(|c| features(c, 32)).collect();
        (f, labels)
    };
    let (train_f, train_l) = feats(Split::Train);
    let mut centroids = vec![vec![0.0; train_f[0].len()]; NUM_CLASSES];
    let mut counts = vec![0usize; NUM_CLASSES];
    for (f, &l) in train_f.iter().zip(&train_l) {
        counts[l] += 1;
        for (c, v) in centroids[l].iter_mut().zip(f) {
            *c += v;
        }
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= *n as f64);
    }
    for i in 0..NUM_CLASSES {
        for j in i + 1..NUM_CLASSES {
            assert!(dist(&centroids[i], &centroids[j]) > 0.01, "classes {i} and {j} overlap");
        }
    }
    let (mut test_f, mut test_l) = feats(Split::Test);
    let (val_f, val_l) = feats(Split::Val);
    test_f.extend(val_f);
    test_l.extend(val_l);
    let correct = test_f
        .iter()
        .zip(&test_l)
        .filter(|(f, &l)| {
            let best = (0..NUM_CLASSES)
                .min_by(|&a, &b| dist(f, &centroids[a]).total_cmp(&dist(f, &centroids[b])))
                .unwrap();
            best == l
        })
        .count();
    let acc = correct as f64 / test_l.len() as f64;
    assert!(acc > 0.6, "nearest-centroid accuracy {acc}");
}

#[test]
fn bad_images_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_generate(dir.path(), &SynthOptions::new(3, 16, 2)).unwrap();
    let victim = m.split_records(Split::Train).next().unwrap().image_path.clone();
    image::RgbImage::new(16, 12).save(dir.path().join(&victim)).unwrap();
    assert!(matches!(
        ChipSet::load(&m, Split::Train),
        Err(DatasetError::Image { .. })
    ));
    fs::remove_file(dir.path().join(&victim)).unwrap();
    assert!(matches!(
        ChipSet::load(&m, Split::Train),
        Err(DatasetError::Image { .. })
    ));
}

#[test]
fn malformed_manifest_rows_are_numbered() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    fs::write(
        &path,
        "image_path,label,lat,lon,zoom,tile_x,tile_y,split\n\
         a.png,house,31.5,74.3,20,1,1,train\n\
         b.png,castle,31.5,74.3,20,1,2,val\n",
    )
    .unwrap();
    match load_manifest(&path) {
        Err(DatasetError::Row { row, detail }) => {
            assert_eq!(row, 2);
            assert!(detail.contains("castle"));
        }
        other => panic!("{other:?}"),
    }
    fs::write(&path, "path,label\n").unwrap();
    assert!(matches!(load_manifest(&path), Err(DatasetError::Header(_))));
}
