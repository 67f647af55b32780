//! Labelled image sets: synthetic class-clustered fixtures and IDX (MNIST) files.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if images.batch() != labels.len() {
            return Err(shape_err(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(shape_err(format!("label {bad} outside [0, {class_count})")));
        }
        Ok(Self {
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn item_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Dataset {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        })
    }

    pub fn shuffled(&self, seed: u64) -> Dataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        self.subset(&idx).expect("non-empty")
    }

    /// First `n` examples (or all, if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx).expect("non-empty")
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Seeded sample of at most `total` examples with at most `per_class` from
    /// each class, taken round-robin over classes. Order is class-interleaved.
    pub fn balanced_sample(&self, total: usize, per_class: usize, seed: u64) -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.class_count];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        for v in &mut by_class {
            v.shuffle(&mut rng);
            v.truncate(per_class);
        }
        let mut picked = Vec::new();
        let mut round = 0;
        while picked.len() < total {
            let mut any = false;
            for v in &by_class {
                if let Some(&i) = v.get(round) {
                    if picked.len() < total {
                        picked.push(i);
                    }
                    any = true;
                }
            }
            if !any {
                break;
            }
            round += 1;
        }
        self.subset(&picked)
    }

    /// Splits `[0, n)` into the first `round(frac * n)` examples and the rest.
    pub fn split(&self, frac: f64) -> Result<(Dataset, Dataset)> {
        let cut = ((self.len() as f64) * frac).round() as usize;
        let a: Vec<usize> = (0..cut).collect();
        let b: Vec<usize> = (cut..self.len()).collect();
        Ok((self.subset(&a)?, self.subset(&b)?))
    }

    /// Mini-batches of at most `size` in order.
    pub fn batches(&self, size: usize) -> impl Iterator<Item = (Tensor, &[usize])> + '_ {
        let size = size.max(1);
        (0..self.len()).step_by(size).map(move |start| {
            let end = (start + size).min(self.len());
            let idx: Vec<usize> = (start..end).collect();
            (self.images.select(&idx), &self.labels[start..end])
        })
    }
}

/// Generator for synthetic class-clustered images.
///
/// Each class owns a smooth prototype built from a few Gaussian blobs. An
/// image is `separation * prototype + noise * N(0, 1)`, randomly shifted by up
/// to `jitter` pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixtureSpec {
    pub class_count: usize,
    pub images_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub separation: f32,
    pub noise: f32,
    pub jitter: usize,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            class_count: 4,
            images_per_class: 96,
            channels: 1,
            height: 10,
            width: 10,
            separation: 1.0,
            noise: 0.6,
            jitter: 1,
            seed: 0,
        }
    }
}

impl FixtureSpec {
    /// Class prototypes, shape `[class_count, channels, height, width]`.
    fn prototypes(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
        let (h, w) = (self.height as f32, self.width as f32);
        let plane = self.height * self.width;
        (0..self.class_count)
            .map(|_| {
                let mut img = vec![0.0f32; self.channels * plane];
                for c in 0..self.channels {
                    for _ in 0..3 {
                        let cy = rng.random_range(0.0..h);
                        let cx = rng.random_range(0.0..w);
                        let sigma = rng.random_range(1.0..2.5f32);
                        let amp = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                        for y in 0..self.height {
                            for x in 0..self.width {
                                let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                                img[c * plane + y * self.width + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                            }
                        }
                    }
                }
                img
            })
            .collect()
    }

    pub fn generate(&self) -> Result<Dataset> {
        if self.class_count == 0 || self.images_per_class == 0 {
            return Err(Error::EmptyDataset);
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(shape_err("fixture image dimensions must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let protos = self.prototypes(&mut rng);
        let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
        let plane = self.height * self.width;
        let n = self.class_count * self.images_per_class;
        let mut data = Vec::with_capacity(n * self.channels * plane);
        let mut labels = Vec::with_capacity(n);
        let j = self.jitter as i64;
        for i in 0..n {
            let class = i % self.class_count;
            let (dy, dx) = if j > 0 {
                (rng.random_range(-j..=j) as isize, rng.random_range(-j..=j) as isize)
            } else {
                (0, 0)
            };
            for c in 0..self.channels {
                for y in 0..self.height as isize {
                    for x in 0..self.width as isize {
                        let (sy, sx) = (y - dy, x - dx);
                        let inside = sy >= 0 && sx >= 0 && (sy as usize) < self.height && (sx as usize) < self.width;
                        let base = if inside {
                            protos[class][c * plane + sy as usize * self.width + sx as usize]
                        } else {
                            0.0
                        };
                        data.push(self.separation * base + self.noise * normal.sample(&mut rng));
                    }
                }
            }
            labels.push(class);
        }
        let images = Tensor::new(vec![n, self.channels, self.height, self.width], data)?;
        Dataset::new(images, labels, self.class_count)
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format {
            offset,
            message: format!("file ends before byte {}", offset + 4),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(Error::Format {
            offset: 0,
            message: format!("expected IDX magic {expected:#010x}, found {found:#010x}"),
        });
    }
    Ok(())
}

/// Parses an IDX image file. Pixels are scaled to `[0, 1]`; shape `[n, 1, rows, cols]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let need = n * rows * cols;
    let pixels = &bytes[16..];
    if pixels.len() != need {
        return Err(Error::Format {
            offset: 16,
            message: format!("expected {need} pixel bytes, found {}", pixels.len()),
        });
    }
    let data = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let labels = &bytes[8..];
    if labels.len() != n {
        return Err(Error::Format {
            offset: 8,
            message: format!("expected {n} label bytes, found {}", labels.len()),
        });
    }
    Ok(labels.iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label pair. The class count is `max(label) + 1`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if images.batch() != labels.len() {
        return Err(Error::Format {
            offset: 4,
            message: format!("{} images but {} labels", images.batch(), labels.len()),
        });
    }
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(images, labels, class_count)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_is_deterministic_and_balanced() {
        let spec = FixtureSpec {
            images_per_class: 5,
            ..FixtureSpec::default()
        };
        let a = spec.generate().unwrap();
        let b = spec.generate().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), vec![5; 4]);
        assert_eq!(a.item_shape(), &[1, 10, 10]);
    }

    #[test]
    fn balanced_sample_caps_per_class() {
        let d = FixtureSpec::default().generate().unwrap();
        let s = d.balanced_sample(40, 6, 1).unwrap();
        assert_eq!(s.len(), 24);
        assert!(s.class_counts().iter().all(|&c| c == 6));
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let images = Tensor::zeros(&[2, 1, 2, 2]);
        assert!(Dataset::new(images, vec![0, 3], 3).is_err());
    }

    #[test]
    fn idx_magic_mismatch_names_both_values() {
        let mut labels = vec![0, 0, 8, 1, 0, 0, 0, 1, 7];
        let err = parse_idx_images(&labels).unwrap_err().to_string();
        assert!(err.contains("0x00000803") && err.contains("0x00000801"), "{err}");
        labels.truncate(8);
        labels[7] = 0;
        assert!(matches!(parse_idx_labels(&labels), Err(Error::EmptyDataset)));
    }
}
