//! IDX and CIFAR-10 binary readers.

use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX: &str = "IDX";
const CIFAR: &str = "CIFAR-10";
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// A decoded IDX container of unsigned bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses `00 00 08 <ndims>`, big-endian u32 dimensions, then the payload.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let malformed = |detail: String| Error::Format { format: IDX, detail };
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            format: IDX,
            expected: 4,
            actual: bytes.len(),
        });
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(malformed(format!("bad magic {:02x} {:02x}", bytes[0], bytes[1])));
    }
    if bytes[2] != 0x08 {
        return Err(malformed(format!(
            "element type {:#04x} is not unsigned byte",
            bytes[2]
        )));
    }
    let ndims = bytes[3] as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::Truncated {
            format: IDX,
            expected: header,
            actual: bytes.len(),
        });
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let payload: usize = dims.iter().product();
    if bytes.len() - header != payload {
        return Err(Error::Truncated {
            format: IDX,
            expected: header + payload,
            actual: bytes.len(),
        });
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Images `[n, h, w]` and labels `[n]`; pixels scaled to `[0, 1]`, classes = max label + 1.
pub fn idx_dataset(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let images = parse_idx(images)?;
    let labels = parse_idx(labels)?;
    let malformed = |detail: String| Error::Format { format: IDX, detail };
    if images.dims.len() != 3 {
        return Err(malformed(format!("images must be [n, h, w], got {:?}", images.dims)));
    }
    if labels.dims.len() != 1 {
        return Err(malformed(format!("labels must be [n], got {:?}", labels.dims)));
    }
    if images.dims[0] != labels.dims[0] {
        return Err(malformed(format!(
            "{} images but {} labels",
            images.dims[0], labels.dims[0]
        )));
    }
    let [n, h, w] = [images.dims[0], images.dims[1], images.dims[2]];
    let pixels = images.data.iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = labels.data.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    Dataset::new(
        Tensor::new(vec![n, 1, h, w], pixels)?,
        labels,
        num_classes,
        Split::Train,
    )
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    idx_dataset(&read(images_path.as_ref())?, &read(labels_path.as_ref())?)
}

/// Records of one label byte and 3072 channel-major pixels.
pub fn cifar10_dataset(bytes: &[u8]) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format {
            format: CIFAR,
            detail: format!("{} bytes is not a multiple of {CIFAR_RECORD}", bytes.len()),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for record in bytes.chunks_exact(CIFAR_RECORD) {
        if record[0] >= 10 {
            return Err(Error::Format {
                format: CIFAR,
                detail: format!("label {} out of range", record[0]),
            });
        }
        labels.push(record[0] as usize);
        pixels.extend(record[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], pixels)?, labels, 10, Split::Train)
}

pub fn load_cifar10_bin<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for p in paths {
        bytes.extend(read(p.as_ref())?);
    }
    cifar10_dataset(&bytes)
}
