//! Image classification datasets, augmentation and seeded batching.

mod augment;
mod cifar;
mod idx;
mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

pub use augment::{augment_sample, Augment, CROP_PAD};
pub use cifar::{load_cifar10, CIFAR_BATCH_BYTES, CIFAR_RECORD_BYTES};
pub use idx::{load_idx, parse_idx_images, parse_idx_labels};
pub use synth::{synth_dataset, SynthSpec, SYNTH_MAX_CLASSES};

/// Images stored as `N x C x H x W` bytes with one label each.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    /// `(C, H, W)`.
    pub shape: (usize, usize, usize),
    pub classes: usize,
}

impl Dataset {
    pub fn new(
        images: Vec<u8>,
        labels: Vec<u8>,
        shape: (usize, usize, usize),
        classes: usize,
    ) -> Result<Self> {
        let per = shape.0 * shape.1 * shape.2;
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::Data(format!(
                "{} image bytes do not hold {} images of shape {:?}",
                images.len(),
                labels.len(),
                shape
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Data(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            shape,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Copies the given samples, in order, into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.sample_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            images,
            labels,
            shape: self.shape,
            classes: self.classes,
        }
    }

    /// Number of samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// SHA-256 over shape, labels and pixels, as lowercase hex.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for d in [
            self.shape.0,
            self.shape.1,
            self.shape.2,
            self.classes,
            self.len(),
        ] {
            h.update((d as u64).to_le_bytes());
        }
        h.update(&self.labels);
        h.update(&self.images);
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Normalised (and optionally augmented) batch of the given samples.
    pub fn batch<T: Scalar>(
        &self,
        indices: &[usize],
        norm: &Normalizer,
        augment: Option<&Augment>,
        epoch: u64,
    ) -> (Tensor<T>, Vec<usize>) {
        let (c, h, w) = self.shape;
        let n = self.sample_len();
        let mut data = vec![T::zero(); indices.len() * n];
        let mut scratch = vec![0.0f32; n];
        for (slot, &i) in indices.iter().enumerate() {
            norm.apply(self.image(i), &mut scratch);
            let out = &mut data[slot * n..(slot + 1) * n];
            match augment {
                Some(a) => augment_sample(&scratch, (c, h, w), a.params(epoch, i as u64), out),
                None => {
                    for (o, &v) in out.iter_mut().zip(&scratch) {
                        *o = T::from_f64(v as f64);
                    }
                }
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i] as usize).collect();
        let x = Tensor::from_vec([indices.len(), c, h, w], data)
            .expect("batch buffer sized from shape");
        (x, labels)
    }
}

/// Train, validation and test splits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Moves `val_size` samples, chosen by a seeded shuffle, from `train` to a
/// validation split. The remaining training samples keep their order.
pub fn carve_validation(train: &Dataset, val_size: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if val_size >= train.len() {
        return Err(Error::Data(format!(
            "validation split of {val_size} leaves no training data out of {}",
            train.len()
        )));
    }
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val_idx = idx[..val_size].to_vec();
    let mut train_idx = idx[val_size..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((train.subset(&train_idx), train.subset(&val_idx)))
}

/// Per-channel mean and standard deviation in pixel units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(channels: usize) -> Self {
        Normalizer {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn fit(data: &Dataset) -> Self {
        let (c, h, w) = data.shape;
        let hw = h * w;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for i in 0..data.len() {
            for (ch, plane) in data.image(i).chunks(hw).enumerate() {
                for &p in plane {
                    let p = p as f64;
                    sum[ch] += p;
                    sq[ch] += p * p;
                }
            }
        }
        let count = (data.len() * hw).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / count - m * m).max(0.0).sqrt().max(1e-3))
            .collect();
        Normalizer { mean, std }
    }

    /// Normalises one `C x H x W` image into `out`.
    pub fn apply(&self, image: &[u8], out: &mut [f32]) {
        let hw = image.len() / self.mean.len();
        for (ch, (src, dst)) in image.chunks(hw).zip(out.chunks_mut(hw)).enumerate() {
            let (m, s) = (self.mean[ch], self.std[ch]);
            for (d, &p) in dst.iter_mut().zip(src) {
                *d = ((p as f64 - m) / s) as f32;
            }
        }
    }
}

/// Deterministic sample order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch)));
    idx
}

/// Batches of indices for one epoch; the last batch may be short.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    epoch_order(n, seed, epoch)
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Combines two words into a seed (SplitMix64 finaliser over their mix).
pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let images = (0..4 * 2 * 2 * 2).map(|v| v as u8).collect();
        Dataset::new(images, vec![0, 1, 0, 1], (2, 2, 2), 2).unwrap()
    }

    #[test]
    fn rejects_inconsistent_sizes_and_labels() {
        assert!(Dataset::new(vec![0; 7], vec![0], (2, 2, 2), 2).is_err());
        assert!(Dataset::new(vec![0; 8], vec![2], (2, 2, 2), 2).is_err());
    }

    #[test]
    fn validation_is_disjoint_and_deterministic() {
        let d = synth_dataset(&SynthSpec {
            samples: 100,
            ..Default::default()
        });
        let (tr, va) = carve_validation(&d, 20, 7).unwrap();
        assert_eq!((tr.len(), va.len()), (80, 20));
        let (tr2, va2) = carve_validation(&d, 20, 7).unwrap();
        assert_eq!((tr, va.clone()), (tr2, va2));
        let (_, va3) = carve_validation(&d, 20, 8).unwrap();
        assert_ne!(va, va3);
        let mut all: Vec<&[u8]> = (0..d.len()).map(|i| d.image(i)).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 100, "synthetic images are distinct");
    }

    #[test]
    fn normaliser_centres_each_channel() {
        let d = tiny();
        let norm = Normalizer::fit(&d);
        let (x, labels) = d.batch::<f64>(&[0, 1, 2, 3], &norm, None, 0);
        assert_eq!(labels, vec![0, 1, 0, 1]);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| x.sample(n)[ch * 4..ch * 4 + 4].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / 16.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn batch_order_depends_only_on_seed_and_epoch() {
        assert_eq!(epoch_order(50, 3, 1), epoch_order(50, 3, 1));
        assert_ne!(epoch_order(50, 3, 1), epoch_order(50, 3, 2));
        let b = epoch_batches(10, 4, 0, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut flat: Vec<usize> = b.concat();
        flat.sort_unstable();
        assert_eq!(flat, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn checksum_is_stable() {
        let d = tiny();
        assert_eq!(d.checksum(), d.clone().checksum());
        assert_eq!(d.checksum().len(), 64);
        assert_ne!(d.checksum(), d.subset(&[1, 0, 2, 3]).checksum());
    }
}
