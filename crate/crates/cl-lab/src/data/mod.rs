//! Dataset ingestion and task-sequence construction.
//!
//! MNIST arrives as IDX streams, CIFAR-100 as fixed-width binary records;
//! both parse to a [`LabeledSet`] with pixels scaled to [0, 1], then get
//! normalized and split into Task-IL / Class-IL task sequences.

mod cifar;
mod fetch;
mod idx;
mod split;

pub use cifar::{parse_cifar100, serialize_cifar100};
pub use fetch::{fetch_dataset, DatasetName, Fetcher, HttpFetcher};
pub use idx::{parse_idx, serialize_idx, IdxContent};
pub use split::{
    make_split_cifar100, make_split_mnist, minibatch_iterator, IlMode, TaskSequence, TaskSpec,
    TaskView,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images plus global labels for one split of a dataset.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    /// [N, C, H, W]
    pub images: Tensor,
    pub global_labels: Vec<usize>,
    pub split: Split,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.global_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.global_labels.is_empty()
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        (
            self.images.dim(1),
            self.images.dim(2),
            self.images.dim(3),
        )
    }

    /// One image as a [1, C, H, W] tensor.
    pub fn image(&self, i: usize) -> Tensor {
        let per = self.images.numel() / self.len().max(1);
        Tensor {
            shape: vec![1, self.images.dim(1), self.images.dim(2), self.images.dim(3)],
            data: self.images.data[i * per..(i + 1) * per].to_vec(),
        }
    }

    /// Subset by index list, preserving order.
    pub fn subset(&self, indices: &[usize]) -> LabeledSet {
        let per = self.images.numel() / self.len().max(1);
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data[i * per..(i + 1) * per]);
            labels.push(self.global_labels[i]);
        }
        LabeledSet {
            images: Tensor {
                shape: vec![
                    indices.len(),
                    self.images.dim(1),
                    self.images.dim(2),
                    self.images.dim(3),
                ],
                data,
            },
            global_labels: labels,
            split: self.split,
        }
    }
}

/// Per-channel normalization statistics computed from a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Applies (x - mean) / std per channel. When `stats` is `None` they are
/// computed from `s` first (the training split); a zero-variance channel
/// falls back to std 1.
pub fn normalize_dataset(s: &LabeledSet, stats: Option<&ChannelStats>) -> (LabeledSet, ChannelStats) {
    let (c, h, w) = s.image_dims();
    let chw = c * h * w;
    let hw = h * w;
    let n = s.len();
    let stats = match stats {
        Some(st) => st.clone(),
        None => {
            let mut mean = vec![0.0; c];
            let mut std = vec![0.0; c];
            let count = (n * hw) as f64;
            for i in 0..n {
                for ci in 0..c {
                    let base = i * chw + ci * hw;
                    mean[ci] += s.images.data[base..base + hw].iter().sum::<f64>();
                }
            }
            for m in &mut mean {
                *m /= count;
            }
            for i in 0..n {
                for ci in 0..c {
                    let base = i * chw + ci * hw;
                    let mu = mean[ci];
                    std[ci] += s.images.data[base..base + hw]
                        .iter()
                        .map(|v| (v - mu) * (v - mu))
                        .sum::<f64>();
                }
            }
            for sd in &mut std {
                *sd = (*sd / count).sqrt();
                if *sd == 0.0 {
                    *sd = 1.0;
                }
            }
            ChannelStats { mean, std }
        }
    };
    let mut data = s.images.data.clone();
    for i in 0..n {
        for ci in 0..c {
            let base = i * chw + ci * hw;
            let (mu, sd) = (stats.mean[ci], stats.std[ci]);
            for v in &mut data[base..base + hw] {
                *v = (*v - mu) / sd;
            }
        }
    }
    (
        LabeledSet {
            images: Tensor {
                shape: s.images.shape.clone(),
                data,
            },
            global_labels: s.global_labels.clone(),
            split: s.split,
        },
        stats,
    )
}

/// Dataset cache directory: `$CL_LAB_DATA` if set, else `./data`.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os("CL_LAB_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Loads MNIST train/test splits from IDX files under `dir`.
pub fn load_mnist(dir: &Path) -> Result<(LabeledSet, LabeledSet)> {
    let read = |name: &str| -> Result<Vec<u8>> {
        std::fs::read(dir.join(name))
            .map_err(|e| Error::Input(format!("cannot read {}: {e}", dir.join(name).display())))
    };
    let mut sets = Vec::new();
    for (img, lbl, split) in [
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", Split::Train),
        ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", Split::Test),
    ] {
        let images = match parse_idx(&read(img)?)? {
            IdxContent::Images(t) => t,
            IdxContent::Labels(_) => {
                return Err(Error::Input(format!("{img} holds labels, expected images")))
            }
        };
        let labels = match parse_idx(&read(lbl)?)? {
            IdxContent::Labels(l) => l,
            IdxContent::Images(_) => {
                return Err(Error::Input(format!("{lbl} holds images, expected labels")))
            }
        };
        if images.dim(0) != labels.len() {
            return Err(Error::Input(format!(
                "{img}: {} images but {} labels",
                images.dim(0),
                labels.len()
            )));
        }
        sets.push(LabeledSet {
            images,
            global_labels: labels.into_iter().map(|b| b as usize).collect(),
            split,
        });
    }
    let test = sets.pop().unwrap();
    let train = sets.pop().unwrap();
    Ok((train, test))
}

/// Loads CIFAR-100 train/test splits from binary files under `dir`.
pub fn load_cifar100(dir: &Path) -> Result<(LabeledSet, LabeledSet)> {
    let mut sets = Vec::new();
    for (name, split) in [("train.bin", Split::Train), ("test.bin", Split::Test)] {
        let path = dir.join(name);
        let bytes = std::fs::read(&path)
            .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
        let mut set = parse_cifar100(&bytes)?;
        set.split = split;
        sets.push(set);
    }
    let test = sets.pop().unwrap();
    let train = sets.pop().unwrap();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_set(values: &[f64]) -> LabeledSet {
        LabeledSet {
            images: Tensor {
                shape: vec![values.len(), 1, 1, 1],
                data: values.to_vec(),
            },
            global_labels: vec![0; values.len()],
            split: Split::Train,
        }
    }

    #[test]
    fn normalize_zero_mean_unit_variance() {
        let s = toy_set(&[1.0, 2.0, 3.0, 4.0]);
        let (out, stats) = normalize_dataset(&s, None);
        let mean: f64 = out.images.data.iter().sum::<f64>() / 4.0;
        let var: f64 = out.images.data.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-10);
        assert!((stats.mean[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn normalize_constant_channel_guard() {
        let s = toy_set(&[5.0, 5.0, 5.0]);
        let (out, stats) = normalize_dataset(&s, None);
        assert_eq!(stats.std[0], 1.0);
        assert!(out.images.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn double_normalization_composes_affinely() {
        let s = toy_set(&[1.0, 3.0]);
        let (once, stats) = normalize_dataset(&s, None);
        let (twice, _) = normalize_dataset(&once, Some(&stats));
        // second application shifts the mean to -mu/sigma of pass one
        let mean2: f64 = twice.images.data.iter().sum::<f64>() / 2.0;
        assert!((mean2 - (-stats.mean[0] / stats.std[0])).abs() < 1e-12);
    }

    #[test]
    fn subset_preserves_order_and_labels() {
        let mut s = toy_set(&[10.0, 20.0, 30.0]);
        s.global_labels = vec![7, 8, 9];
        let sub = s.subset(&[2, 0]);
        assert_eq!(sub.images.data, vec![30.0, 10.0]);
        assert_eq!(sub.global_labels, vec![9, 7]);
    }
}
