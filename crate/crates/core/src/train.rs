//! Seeded mini-batch SGD with momentum and weight decay.
//!
//! Update rule per parameter `p` with gradient `g`:
//! `v ← μ·v + (g + λ·p)`, `p ← p − η·v`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::arch::{save_checkpoint, ArchError, ForwardOptions, Network};
use crate::dataset::{Augment, ChipSet, DatasetError, Manifest, Split, NUM_CLASSES};
use crate::tensor::{kernels, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Write `last.ckpt` every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub augment: Augment,
    /// Fill the `seconds` column with wall time; off keeps logs bit-reproducible.
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            checkpoint_every: 0,
            augment: Augment::Flip,
            record_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::Config(m.into()));
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive");
        }
        // Zero is allowed so a run can be checked to leave parameters untouched.
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return fail("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must be in [0, 1)");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail("weight_decay must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch,train_loss,val_loss,val_acc,seconds";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch, r.train_loss, r.val_loss, r.val_acc, r.seconds
            )
            .unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Plain SGD state: one velocity buffer per parameter.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>, grads: &[Tensor]) {
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if self.velocity.len() <= i {
                self.velocity.push(vec![0.0; p.len()]);
            }
            let v = &mut self.velocity[i];
            for ((p, g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *v = self.momentum * *v + (g + self.weight_decay * *p);
                *p -= self.learning_rate * *v;
            }
        }
    }
}

/// Result of [`train`].
pub struct TrainOutcome {
    /// Network after the final epoch.
    pub last: Network,
    /// Network at the epoch with the lowest validation loss.
    pub best: Network,
    pub best_epoch: usize,
    pub log: TrainLog,
}

/// Eval-mode mean cross-entropy and top-1 accuracy over `set`.
pub fn evaluate_loss(network: &Network, set: &ChipSet, batch_size: usize) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Err(TrainError::Config("cannot evaluate an empty split".into()));
    }
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for (chips, labels) in set.batches(batch_size, None, Augment::None) {
        let logits = network.logits(&chips)?;
        let (loss, probs) = kernels::softmax_cross_entropy(&logits, &labels).map_err(ArchError::from)?;
        loss_sum += loss * labels.len() as f64;
        let k = probs.shape()[1];
        for (row, &label) in probs.data().chunks_exact(k).zip(&labels) {
            if argmax(row) == label {
                correct += 1;
            }
        }
    }
    Ok((loss_sum / set.len() as f64, correct as f64 / set.len() as f64))
}

/// [`evaluate_loss`] on one split of a manifest.
pub fn evaluate_split(network: &Network, manifest: &Manifest, split: Split, batch_size: usize) -> Result<(f64, f64)> {
    evaluate_loss(network, &ChipSet::load(manifest, split)?, batch_size)
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains on `train_set`, validating on `val_set` after every epoch.
///
/// With `out_dir`, `best.ckpt` is rewritten whenever validation loss
/// improves and `last.ckpt` every `checkpoint_every` epochs and at the end.
/// `progress` sees each epoch record as it completes.
pub fn train(
    mut network: Network,
    train_set: &ChipSet,
    val_set: &ChipSet,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::Config("train and val splits must be non-empty".into()));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|source| TrainError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    let mut opt = Sgd::new(config.learning_rate, config.momentum, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, Network)> = None;

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let shuffle_seed: u64 = rng.random();
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (batch, (chips, labels)) in train_set
            .batches(config.batch_size, Some(shuffle_seed), config.augment)
            .enumerate()
        {
            let dropout_seed: u64 = rng.random();
            // Batchnorm needs more than one value per channel; a trailing
            // singleton batch is skipped (it is reshuffled next epoch).
            if labels.len() == 1 && train_set.len() > 1 {
                continue;
            }
            let diverged = |loss| TrainError::Divergence {
                epoch,
                batch: batch + 1,
                loss,
            };
            let (loss, grads, stats) =
                match network.loss_and_grads(&chips, &labels, ForwardOptions::train(Some(dropout_seed))) {
                    Err(ArchError::Tensor(TensorError::NonFinite(_))) => return Err(diverged(f64::NAN)),
                    other => other?,
                };
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(diverged(loss));
            }
            opt.step(network.params_mut().iter_mut().map(|p| &mut p.value), &grads);
            network.apply_bn_updates(&stats);
            loss_sum += loss * labels.len() as f64;
            seen += labels.len();
        }
        let (val_loss, val_acc) = match evaluate_loss(&network, val_set, config.batch_size) {
            Err(TrainError::Arch(ArchError::Tensor(TensorError::NonFinite(_)))) => (f64::NAN, 0.0),
            other => other?,
        };
        if !val_loss.is_finite() {
            return Err(TrainError::Divergence {
                epoch,
                batch: 0,
                loss: val_loss,
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            val_loss,
            val_acc,
            seconds: if config.record_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        progress(&record);
        log.records.push(record);

        if best.as_ref().is_none_or(|(l, _, _)| val_loss < *l) {
            if let Some(dir) = out_dir {
                save_checkpoint(&network, dir.join("best.ckpt"))?;
            }
            best = Some((val_loss, epoch, network.clone()));
        }
        let periodic = config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0;
        if let Some(dir) = out_dir {
            if periodic || epoch == config.epochs {
                save_checkpoint(&network, dir.join("last.ckpt"))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        log.write_csv(dir.join("train_log.csv"))?;
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        last: network,
        best,
        best_epoch,
        log,
    })
}

/// Loads the train and val splits of `manifest` and runs [`train`].
pub fn train_manifest(
    network: Network,
    manifest: &Manifest,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    progress: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if network.config().num_classes != NUM_CLASSES {
        return Err(TrainError::Config(format!(
            "network has {} classes, the taxonomy has {NUM_CLASSES}",
            network.config().num_classes
        )));
    }
    let train_set = ChipSet::load(manifest, Split::Train)?;
    let val_set = ChipSet::load(manifest, Split::Val)?;
    train(network, &train_set, &val_set, config, out_dir, progress)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_matches_hand_step() {
        let mut p = [Tensor::new(vec![2], vec![1.0, -2.0]).unwrap()];
        let g = [Tensor::new(vec![2], vec![0.5, 0.25]).unwrap()];
        let mut opt = Sgd::new(0.1, 0.9, 0.01);
        opt.step(p.iter_mut(), &g);
        // v = g + wd·p
        let v1 = [0.5 + 0.01 * 1.0, 0.25 + 0.01 * -2.0];
        let p1 = [1.0 - 0.1 * v1[0], -2.0 - 0.1 * v1[1]];
        assert_eq!(p[0].data(), &p1);
        opt.step(p.iter_mut(), &g);
        let v2 = [0.9 * v1[0] + 0.5 + 0.01 * p1[0], 0.9 * v1[1] + 0.25 + 0.01 * p1[1]];
        assert_eq!(p[0].data(), &[p1[0] - 0.1 * v2[0], p1[1] - 0.1 * v2[1]]);
    }

    #[test]
    fn config_checked() {
        let bad = TrainConfig {
            momentum: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            learning_rate: f64::NAN,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn argmax_first_wins() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[1.0]), 0);
    }

    #[test]
    fn csv_layout() {
        let log = TrainLog {
            records: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                val_loss: 0.25,
                val_acc: 1.0,
                seconds: 0.0,
            }],
        };
        assert_eq!(
            log.to_csv(),
            "epoch,train_loss,val_loss,val_acc,seconds\n1,0.5,0.25,1,0\n"
        );
    }
}
