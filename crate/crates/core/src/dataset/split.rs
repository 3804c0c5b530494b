use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::{ClassLabel, DatasetError, Manifest, Result, Split};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        let sum: f64 = all.iter().sum();
        if all.iter().any(|f| !(f.is_finite() && *f > 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(DatasetError::Fractions((self.train, self.val, self.test)));
        }
        Ok(())
    }

    /// Per-class `(train, val, test)` counts for `n` records.
    fn counts(&self, n: usize) -> (usize, usize, usize) {
        let mut train = (n as f64 * self.train).round() as usize;
        let mut val = (n as f64 * self.val).round() as usize;
        if train + val > n {
            val = n - train;
        }
        // Every split keeps at least one record of every class.
        if val == 0 {
            val = 1;
            train -= 1;
        }
        if train + val == n {
            train -= 1;
        }
        (train, val, n - train - val)
    }
}

/// Order-independent per-record key: SHA-256 of `seed ‖ image_path`.
fn rank_key(seed: u64, path: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(path.as_bytes());
    h.finalize().into()
}

/// Stratified, seeded train/val/test assignment.
///
/// Records of each class are ranked by a hash of their path, so the result
/// depends only on the set of paths and the seed, never on row order.
pub fn split_assign(manifest: &Manifest, fractions: SplitFractions, seed: u64) -> Result<Manifest> {
    fractions.validate()?;
    let mut by_class: BTreeMap<ClassLabel, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        by_class.entry(r.label).or_default().push(i);
    }
    let mut out = manifest.clone();
    out.seed = Some(seed);
    for (label, mut idx) in by_class {
        if idx.len() < 3 {
            return Err(DatasetError::Stratification {
                label,
                count: idx.len(),
            });
        }
        idx.sort_by_cached_key(|&i| {
            let path = &manifest.records[i].image_path;
            (rank_key(seed, path), path.clone())
        });
        let (train, val, _) = fractions.counts(idx.len());
        for (rank, &i) in idx.iter().enumerate() {
            out.records[i].split = if rank < train {
                Split::Train
            } else if rank < train + val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    Ok(out)
}
