//! Chip manifests for the 11-class land-use taxonomy.
//!
//! A manifest is a UTF-8 CSV with the fixed header
//! `image_path,label,lat,lon,zoom,tile_x,tile_y,split`, LF line endings,
//! and no quoting (paths may not contain commas). An optional first line
//! `# seed=<n>` records the dataset-level seed. Image paths are relative
//! to the directory holding the manifest.

mod batch;
mod split;
mod synth;

pub use batch::{Augment, Batches, ChipSet};
pub use split::{split_assign, SplitFractions};
pub use synth::{synth_generate, SynthOptions};

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::geo::MAX_MERCATOR_LAT;

pub const MANIFEST_HEADER: &str = "image_path,label,lat,lon,zoom,tile_x,tile_y,split";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest row {row}: {detail}")]
    Row { row: usize, detail: String },
    #[error("manifest header must be `{MANIFEST_HEADER}`, found `{0}`")]
    Header(String),
    #[error("manifest is invalid: {0}")]
    Invalid(String),
    #[error("class {label} has {count} records; stratified splitting needs at least 3")]
    Stratification { label: ClassLabel, count: usize },
    #[error("split fractions must be positive and sum to 1, got {0:?}")]
    Fractions((f64, f64, f64)),
    #[error("{path}: {detail}")]
    Image { path: PathBuf, detail: String },
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

macro_rules! labels {
    ($($variant:ident => $name:literal),+ $(,)?) => {
        /// Scene classes. The integer encoding is the declaration order;
        /// `BrickKiln` must stay at index 0.
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum ClassLabel {
            $($variant),+
        }

        impl ClassLabel {
            pub const ALL: [ClassLabel; 11] = [$(ClassLabel::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $(ClassLabel::$variant => $name),+
                }
            }
        }

        impl FromStr for ClassLabel {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
                match s {
                    $($name => Ok(ClassLabel::$variant),)+
                    other => Err(format!("unknown label {other:?}")),
                }
            }
        }
    };
}

labels! {
    BrickKiln => "brick_kiln",
    House => "house",
    Road => "road",
    TennisCourt => "tennis_court",
    Farm => "farm",
    SparseTrees => "sparse_trees",
    DenseTrees => "dense_trees",
    Orchard => "orchard",
    Parking => "parking",
    Park => "park",
    BarrenLand => "barren_land",
}

pub const NUM_CLASSES: usize = ClassLabel::ALL.len();

impl ClassLabel {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (train|val|test)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChipRecord {
    pub image_path: String,
    pub label: ClassLabel,
    pub lat: f64,
    pub lon: f64,
    pub zoom: u8,
    pub tile_x: u32,
    pub tile_y: u32,
    pub split: Split,
}

impl ChipRecord {
    fn to_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.image_path, self.label, self.lat, self.lon, self.zoom, self.tile_x, self.tile_y, self.split
        )
    }

    fn parse(line: &str) -> std::result::Result<Self, String> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(format!("expected 8 fields, found {}", fields.len()));
        }
        fn num<T: FromStr>(name: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("{name} {v:?} is not a valid number"))
        }
        let image_path = fields[0].to_string();
        if image_path.is_empty() {
            return Err("empty image_path".into());
        }
        let lat: f64 = num("lat", fields[2])?;
        let lon: f64 = num("lon", fields[3])?;
        if !(-MAX_MERCATOR_LAT..=MAX_MERCATOR_LAT).contains(&lat) {
            return Err(format!("lat {lat} outside web-mercator bounds"));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(format!("lon {lon} outside [-180, 180]"));
        }
        Ok(Self {
            image_path,
            label: fields[1].parse()?,
            lat,
            lon,
            zoom: num("zoom", fields[4])?,
            tile_x: num("tile_x", fields[5])?,
            tile_y: num("tile_y", fields[6])?,
            split: fields[7].parse()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Manifest {
    pub seed: Option<u64>,
    pub records: Vec<ChipRecord>,
    /// Directory image paths are relative to.
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(records: Vec<ChipRecord>, seed: Option<u64>, root: impl Into<PathBuf>) -> Self {
        Self {
            seed,
            records,
            root: root.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_counts(&self) -> BTreeMap<ClassLabel, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.label).or_insert(0) += 1;
        }
        counts
    }

    pub fn split_records(&self, split: Split) -> impl Iterator<Item = &ChipRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.split_records(split).count()
    }

    pub fn resolve(&self, record: &ChipRecord) -> PathBuf {
        self.root.join(&record.image_path)
    }

    /// Duplicate paths and empty train/val splits.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            if r.image_path.contains(',') || r.image_path.contains('\n') {
                return Err(DatasetError::Row {
                    row: i + 1,
                    detail: format!("image_path {:?} contains a delimiter", r.image_path),
                });
            }
            if !seen.insert(r.image_path.as_str()) {
                return Err(DatasetError::Row {
                    row: i + 1,
                    detail: format!("duplicate image_path {}", r.image_path),
                });
            }
        }
        for split in [Split::Train, Split::Val] {
            if self.split_len(split) == 0 {
                return Err(DatasetError::Invalid(format!("split {split} is empty")));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if let Some(seed) = self.seed {
            out.push_str(&format!("# seed={seed}\n"));
        }
        out.push_str(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.to_row());
            out.push('\n');
        }
        out
    }

    /// Parses manifest text. Row numbers in errors count data rows from 1.
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut lines = text.split('\n').peekable();
        let mut seed = None;
        if let Some(first) = lines.peek() {
            if let Some(rest) = first.strip_prefix("# seed=") {
                seed = Some(
                    rest.trim()
                        .parse()
                        .map_err(|_| DatasetError::Invalid(format!("bad seed comment {first:?}")))?,
                );
                lines.next();
            }
        }
        let header = lines.next().unwrap_or_default();
        if header != MANIFEST_HEADER {
            return Err(DatasetError::Header(header.to_string()));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let record = ChipRecord::parse(line).map_err(|detail| DatasetError::Row { row: i + 1, detail })?;
            records.push(record);
        }
        let manifest = Self {
            seed,
            records,
            root: root.into(),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(io_err(path))
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    Manifest::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(path: &str, label: &str, split: &str) -> String {
        format!("{path},{label},31.5,74.3,20,750000,430000,{split}")
    }

    fn text(rows: &[String]) -> String {
        let mut s = format!("{MANIFEST_HEADER}\n");
        for r in rows {
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    #[test]
    fn label_encoding() {
        assert_eq!(ClassLabel::BrickKiln.index(), 0);
        for (i, l) in ClassLabel::ALL.iter().enumerate() {
            assert_eq!(l.index(), i);
            assert_eq!(ClassLabel::from_index(i), Some(*l));
            assert_eq!(l.as_str().parse::<ClassLabel>().unwrap(), *l);
        }
        assert_eq!(ClassLabel::from_index(11), None);
    }

    #[test]
    fn parses_three_rows() {
        let m = Manifest::parse(
            &text(&[
                row("a.png", "brick_kiln", "train"),
                row("b.png", "house", "val"),
                row("c.png", "road", "test"),
            ]),
            "",
        )
        .unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.records[1].label, ClassLabel::House);
        assert_eq!(m.records[2].split, Split::Test);
    }

    #[test]
    fn rejects_non_canonical_label_with_row() {
        let err = Manifest::parse(
            &text(&[row("a.png", "brick_kiln", "train"), row("b.png", "kiln", "val")]),
            "",
        )
        .unwrap_err();
        match err {
            DatasetError::Row { row, detail } => {
                assert_eq!(row, 2);
                assert!(detail.contains("kiln"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_duplicates_and_bad_rows() {
        let err = Manifest::parse(
            &text(&[row("a.png", "house", "train"), row("a.png", "house", "val")]),
            "",
        )
        .unwrap_err();
        assert!(matches!(err, DatasetError::Row { row: 2, .. }));

        let err = Manifest::parse(&text(&["a.png,house,1.0".into()]), "").unwrap_err();
        assert!(matches!(err, DatasetError::Row { row: 1, .. }));

        let err = Manifest::parse(&text(&[row("a.png", "house", "train")]), "").unwrap_err();
        assert!(matches!(err, DatasetError::Invalid(_)));

        let err = Manifest::parse("path,label\n", "").unwrap_err();
        assert!(matches!(err, DatasetError::Header(_)));
    }

    #[test]
    fn seed_comment_round_trip() {
        let m = Manifest::parse(
            &format!(
                "# seed=7\n{}",
                text(&[row("a.png", "house", "train"), row("b.png", "farm", "val")])
            ),
            "",
        )
        .unwrap();
        assert_eq!(m.seed, Some(7));
        assert_eq!(Manifest::parse(&m.to_csv(), "").unwrap(), m);
    }
}
