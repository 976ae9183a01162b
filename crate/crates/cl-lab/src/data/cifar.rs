//! CIFAR-100 binary format: repeated 3074-byte records of coarse label
//! byte, fine label byte, then 3072 pixel bytes (1024 R, 1024 G, 1024 B,
//! row-major).

use super::{LabeledSet, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RECORD_LEN: usize = 3074;
const PIXELS: usize = 3072;

/// Parses fine labels and RGB pixels; coarse labels are discarded.
pub fn parse_cifar100(bytes: &[u8]) -> Result<LabeledSet> {
    if bytes.len() % RECORD_LEN != 0 {
        return Err(Error::Parse {
            offset: bytes.len() - bytes.len() % RECORD_LEN,
            message: format!(
                "stream length {} is not a multiple of the {RECORD_LEN}-byte record",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / RECORD_LEN;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * PIXELS);
    for rec in bytes.chunks(RECORD_LEN) {
        labels.push(rec[1] as usize);
        data.extend(rec[2..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(LabeledSet {
        images: Tensor {
            shape: vec![n, 3, 32, 32],
            data,
        },
        global_labels: labels,
        split: Split::Train,
    })
}

/// Re-serializes a parsed set; coarse labels are not retained by
/// [`parse_cifar100`], so they must be supplied.
pub fn serialize_cifar100(set: &LabeledSet, coarse: &[u8]) -> Result<Vec<u8>> {
    if coarse.len() != set.len() {
        return Err(Error::Input(format!(
            "{} coarse labels for {} records",
            coarse.len(),
            set.len()
        )));
    }
    let mut out = Vec::with_capacity(set.len() * RECORD_LEN);
    for i in 0..set.len() {
        out.push(coarse[i]);
        out.push(set.global_labels[i] as u8);
        out.extend(
            set.images.data[i * PIXELS..(i + 1) * PIXELS]
                .iter()
                .map(|&v| (v * 255.0).round() as u8),
        );
    }
    Ok(out)
}
