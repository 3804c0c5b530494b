use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DatasetError, Manifest, Result, Split};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Augment {
    #[default]
    None,
    /// Horizontal flip with probability 1/2.
    Flip,
}

/// Decoded chips of one split, stored planar (`[3, S, S]` per chip) in [0, 1].
#[derive(Clone, Debug)]
pub struct ChipSet {
    size: usize,
    images: Vec<Vec<f64>>,
    labels: Vec<usize>,
    paths: Vec<String>,
}

impl ChipSet {
    pub fn load(manifest: &Manifest, split: Split) -> Result<Self> {
        let mut set = ChipSet {
            size: 0,
            images: Vec::new(),
            labels: Vec::new(),
            paths: Vec::new(),
        };
        for record in manifest.split_records(split) {
            let path = manifest.resolve(record);
            let img_err = |detail: String| DatasetError::Image {
                path: path.clone(),
                detail,
            };
            let img = image::open(&path).map_err(|e| img_err(e.to_string()))?.to_rgb8();
            let (w, h) = img.dimensions();
            if w != h {
                return Err(img_err(format!("chip must be square, got {w}x{h}")));
            }
            let s = w as usize;
            if set.size == 0 {
                set.size = s;
            } else if s != set.size {
                return Err(img_err(format!("chip is {s}px but earlier chips are {}px", set.size)));
            }
            let mut planar = vec![0.0; 3 * s * s];
            for (i, px) in img.pixels().enumerate() {
                for c in 0..3 {
                    planar[c * s * s + i] = f64::from(px.0[c]) / 255.0;
                }
            }
            set.images.push(planar);
            set.labels.push(record.label.index());
            set.paths.push(record.image_path.clone());
        }
        Ok(set)
    }

    /// Builds a set from already-decoded planar images.
    pub fn from_parts(size: usize, images: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() || images.iter().any(|im| im.len() != 3 * size * size) {
            return Err(DatasetError::Config(
                "images and labels disagree in count or chip size".into(),
            ));
        }
        let paths = (0..images.len()).map(|i| format!("#{i}")).collect();
        Ok(Self {
            size,
            images,
            labels,
            paths,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn chip_size(&self) -> usize {
        self.size
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn paths(&self) -> &[String] {
        &self.paths
    }

    /// A new set holding the chips at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            size: self.size,
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            paths: indices.iter().map(|&i| self.paths[i].clone()).collect(),
        }
    }

    /// Stacks the chips at `indices` into an `[N, 3, S, S]` tensor.
    pub fn stack(&self, indices: &[usize], flips: Option<&[bool]>) -> (Tensor, Vec<usize>) {
        let s = self.size;
        let mut data = Vec::with_capacity(indices.len() * 3 * s * s);
        for (k, &i) in indices.iter().enumerate() {
            let img = &self.images[i];
            if flips.is_some_and(|f| f[k]) {
                for row in img.chunks_exact(s) {
                    data.extend(row.iter().rev());
                }
            } else {
                data.extend_from_slice(img);
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let t = Tensor::new(vec![indices.len(), 3, s, s], data).expect("non-empty batch");
        (t, labels)
    }

    /// One epoch of mini-batches. With a seed the order is a seeded
    /// permutation, otherwise chips come in manifest order. The last batch
    /// may be short.
    pub fn batches(&self, batch_size: usize, seed: Option<u64>, augment: Augment) -> Batches<'_> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let rng = seed.map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            order.shuffle(&mut rng);
            rng
        });
        Batches {
            set: self,
            order,
            pos: 0,
            batch_size: batch_size.max(1),
            augment,
            rng,
        }
    }
}

pub struct Batches<'a> {
    set: &'a ChipSet,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    augment: Augment,
    rng: Option<ChaCha8Rng>,
}

impl Iterator for Batches<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let flips: Option<Vec<bool>> = match (self.augment, self.rng.as_mut()) {
            (Augment::Flip, Some(rng)) => Some(idx.iter().map(|_| rng.random_bool(0.5)).collect()),
            _ => None,
        };
        Some(self.set.stack(idx, flips.as_deref()))
    }
}
