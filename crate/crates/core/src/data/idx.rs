//! IDX binary format: big-endian magic `00 00 <type> <ndims>`, one big-endian
//! `u32` per dimension, then the raw payload. Only unsigned-byte payloads
//! (type `0x08`) are supported, which is what MNIST ships.

use std::path::Path;

use super::{Dataset, ImageShape};
use crate::error::{Error, Result};

/// Environment variable naming the directory holding the MNIST IDX files.
pub const MNIST_DIR_ENV: &str = "FLP_DATA_DIR";

const UBYTE: u8 = 0x08;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::Idx("truncated header".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Idx(format!(
            "bad magic {:02x}{:02x}",
            bytes[0], bytes[1]
        )));
    }
    if bytes[2] != UBYTE {
        return Err(Error::Idx(format!("unsupported element type 0x{:02x}", bytes[2])));
    }
    let ndims = bytes[3] as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::Idx("truncated dimension table".into()));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let total: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != total {
        return Err(Error::Idx(format!(
            "payload has {} bytes, dims imply {}",
            payload.len(),
            total
        )));
    }
    Ok(IdxArray {
        dims,
        data: payload.to_vec(),
    })
}

pub fn write_idx(dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, UBYTE, dims.len() as u8];
    for d in dims {
        out.extend_from_slice(&(*d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

fn read_first(dir: &Path, names: &[&str]) -> Result<IdxArray> {
    for name in names {
        let p = dir.join(name);
        if p.exists() {
            return parse_idx(&std::fs::read(&p)?);
        }
    }
    Err(Error::Config(format!(
        "none of {names:?} found in {}",
        dir.display()
    )))
}

fn to_dataset(images: IdxArray, labels: IdxArray, limit: usize) -> Result<Dataset> {
    if images.dims.len() != 3 || labels.dims.len() != 1 {
        return Err(Error::Idx("expected 3-d images and 1-d labels".into()));
    }
    let (count, h, w) = (images.dims[0], images.dims[1], images.dims[2]);
    if labels.dims[0] != count {
        return Err(Error::Idx(format!(
            "{count} images but {} labels",
            labels.dims[0]
        )));
    }
    let n = count.min(limit);
    let dim = h * w;
    let features = images.data[..n * dim]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let labels: Vec<usize> = labels.data[..n].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(
        features,
        labels,
        dim,
        classes,
        Some(ImageShape {
            height: h,
            width: w,
        }),
    )
}

/// Loads the first `train_limit` / `test_limit` samples of MNIST from `dir`.
pub fn load_mnist(dir: &Path, train_limit: usize, test_limit: usize) -> Result<(Dataset, Dataset)> {
    let train = to_dataset(
        read_first(dir, &["train-images-idx3-ubyte", "train-images.idx3-ubyte"])?,
        read_first(dir, &["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"])?,
        train_limit,
    )?;
    let test = to_dataset(
        read_first(dir, &["t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"])?,
        read_first(dir, &["t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"])?,
        test_limit,
    )?;
    Ok((train, test))
}
