//! IDX binary format: 4-byte big-endian magic (0x00000801 labels,
//! 0x00000803 images), one 4-byte big-endian size per dimension, then raw
//! unsigned bytes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC_LABELS: u32 = 0x0000_0801;
pub const MAGIC_IMAGES: u32 = 0x0000_0803;

#[derive(Debug, Clone)]
pub enum IdxContent {
    /// [N, 1, H, W], pixel bytes scaled to [0, 1].
    Images(Tensor),
    Labels(Vec<u8>),
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Parse {
            offset,
            message: format!("truncated: need 4 bytes, have {}", bytes.len() - offset.min(bytes.len())),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxContent> {
    let magic = read_be_u32(bytes, 0)?;
    match magic {
        MAGIC_LABELS => {
            let n = read_be_u32(bytes, 4)? as usize;
            let payload = &bytes[8..];
            if payload.len() != n {
                return Err(Error::Parse {
                    offset: 8,
                    message: format!("label payload is {} bytes, header says {n}", payload.len()),
                });
            }
            Ok(IdxContent::Labels(payload.to_vec()))
        }
        MAGIC_IMAGES => {
            let n = read_be_u32(bytes, 4)? as usize;
            let h = read_be_u32(bytes, 8)? as usize;
            let w = read_be_u32(bytes, 12)? as usize;
            let payload = &bytes[16..];
            if payload.len() != n * h * w {
                return Err(Error::Parse {
                    offset: 16,
                    message: format!(
                        "image payload is {} bytes, dims {n}x{h}x{w} imply {}",
                        payload.len(),
                        n * h * w
                    ),
                });
            }
            let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
            Ok(IdxContent::Images(Tensor {
                shape: vec![n, 1, h, w],
                data,
            }))
        }
        other => Err(Error::Parse {
            offset: 0,
            message: format!("unknown IDX magic 0x{other:08X}"),
        }),
    }
}

/// Inverse of [`parse_idx`]; parsing then re-serializing reproduces the
/// original byte stream exactly.
pub fn serialize_idx(content: &IdxContent) -> Vec<u8> {
    match content {
        IdxContent::Labels(labels) => {
            let mut out = Vec::with_capacity(8 + labels.len());
            out.extend_from_slice(&MAGIC_LABELS.to_be_bytes());
            out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
            out.extend_from_slice(labels);
            out
        }
        IdxContent::Images(t) => {
            let (n, h, w) = (t.dim(0), t.dim(2), t.dim(3));
            let mut out = Vec::with_capacity(16 + t.numel());
            out.extend_from_slice(&MAGIC_IMAGES.to_be_bytes());
            out.extend_from_slice(&(n as u32).to_be_bytes());
            out.extend_from_slice(&(h as u32).to_be_bytes());
            out.extend_from_slice(&(w as u32).to_be_bytes());
            out.extend(t.data.iter().map(|&v| (v * 255.0).round() as u8));
            out
        }
    }
}
