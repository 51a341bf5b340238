//! The IDX container used by MNIST and FashionMNIST.
//!
//! Header: a big-endian `u32` magic (`0x00000803` for rank-3 `u8` image
//! files, `0x00000801` for rank-1 label files), one big-endian `u32` per
//! extent, then the raw payload.

use std::fs;
use std::path::Path;

use super::ImageDataset;
use crate::error::{Error, Result};
use crate::flow::Shape3;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize, what: &'static str) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => Err(Error::Parse {
            what,
            offset: bytes.len() as u64,
            detail: format!("header truncated, needed bytes {offset}..{}", offset + 4),
        }),
    }
}

/// Parses the header and checks the payload length; returns the extents
/// and the payload slice.
fn parse_container<'a>(
    bytes: &'a [u8],
    magic: u32,
    what: &'static str,
) -> Result<(Vec<usize>, &'a [u8])> {
    let found = read_u32(bytes, 0, what)?;
    if found != magic {
        return Err(Error::Parse {
            what,
            offset: 0,
            detail: format!("unsupported IDX type: magic {found:#010x}, expected {magic:#010x}"),
        });
    }
    let rank = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(rank);
    for k in 0..rank {
        dims.push(read_u32(bytes, 4 + 4 * k, what)? as usize);
    }
    let start = 4 + 4 * rank;
    let len: usize = dims.iter().product();
    let end = start + len;
    if bytes.len() < end {
        return Err(Error::Parse {
            what,
            offset: bytes.len() as u64,
            detail: format!("payload truncated: expected {len} bytes ending at byte {end}"),
        });
    }
    if bytes.len() > end {
        return Err(Error::Parse {
            what,
            offset: end as u64,
            detail: format!("{} trailing bytes after the payload", bytes.len() - end),
        });
    }
    Ok((dims, &bytes[start..end]))
}

pub fn parse_idx(bytes: &[u8], provenance: &str) -> Result<ImageDataset> {
    let (dims, payload) = parse_container(bytes, IMAGES_MAGIC, "IDX image file")?;
    let (h, w) = (dims[1], dims[2]);
    if h == 0 || w == 0 {
        return Err(Error::Parse {
            what: "IDX image file",
            offset: 8,
            detail: format!("image extents {h}x{w} must be positive"),
        });
    }
    ImageDataset::new(Shape3::new(1, h, w), payload.to_vec(), provenance)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let (_, payload) = parse_container(bytes, LABELS_MAGIC, "IDX label file")?;
    Ok(payload.to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<ImageDataset> {
    let path = path.as_ref();
    parse_idx(&read(path)?, &path.display().to_string())
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    parse_idx_labels(&read(path.as_ref())?)
}

pub fn encode_idx(ds: &ImageDataset) -> Result<Vec<u8>> {
    if ds.shape.c != 1 {
        return Err(Error::contract(format!(
            "IDX image files hold single-channel images, dataset is {}",
            ds.shape
        )));
    }
    let mut out = Vec::with_capacity(16 + ds.pixels().len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for extent in [ds.len(), ds.shape.h, ds.shape.w] {
        out.extend_from_slice(&(extent as u32).to_be_bytes());
    }
    out.extend_from_slice(ds.pixels());
    Ok(out)
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn write_idx(path: impl AsRef<Path>, ds: &ImageDataset) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_idx(ds)?).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_idx_labels(labels)).map_err(|e| Error::io(path, e))
}
