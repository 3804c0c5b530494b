//! Brick-kiln scene classification: a small autodiff engine, the
//! Tiny-Inception-ResNet-v2 family, satellite-tile geodesy, chip datasets,
//! training, kiln-vs-rest evaluation, and geolocated export.

pub mod arch;
pub mod dataset;
pub mod eval;
pub mod export;
pub mod geo;
pub mod gradcheck;
pub mod tensor;
pub mod train;

pub use arch::{build_network, ArchError, ForwardOptions, Network, NetworkConfig, Stem};
pub use dataset::{ChipRecord, ChipSet, ClassLabel, DatasetError, Manifest, Split, NUM_CLASSES};
pub use eval::{ConfusionCounts, EvalError, MetricsReport};
pub use export::{Detection, ExportError, HeatmapGrid};
pub use geo::{CoordMode, GeoError, GeoPoint, TileId};
pub use tensor::{Graph, Mode, Tensor, TensorError, Var};
pub use train::{TrainConfig, TrainError, TrainLog};

/// Any error raised by this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Export(#[from] ExportError),
}

impl Error {
    /// True for problems with the inputs or configuration, as opposed to
    /// failures while computing (numeric breakdown, I/O).
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Tensor(e) => !matches!(e, TensorError::NonFinite(_)),
            Error::Arch(e) => match e {
                ArchError::Config(_) | ArchError::Collapse { .. } | ArchError::Checkpoint(_) => true,
                ArchError::Tensor(t) => !matches!(t, TensorError::NonFinite(_)),
                ArchError::Io { .. } => false,
            },
            Error::Geo(_) => true,
            Error::Dataset(e) => !matches!(e, DatasetError::Io { .. }),
            Error::Train(e) => matches!(e, TrainError::Config(_) | TrainError::Dataset(_)),
            Error::Eval(e) => !matches!(e, EvalError::Io { .. } | EvalError::Arch(_)),
            Error::Export(e) => !matches!(e, ExportError::Io { .. }),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
