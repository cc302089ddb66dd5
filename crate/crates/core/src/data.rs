//! IDX dataset files (the MNIST distribution format).
//!
//! Both files start with a big-endian magic word (`0x0803` images,
//! `0x0801` labels), followed by big-endian `u32` dimensions and raw bytes.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 0x0803;
const LABEL_MAGIC: u32 = 0x0801;

/// Images as `[n, rows, cols, 1]` in `[0, 1]` plus integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            offset: bytes.len() as u64,
            context: format!("{} ends inside its header", path.display()),
        })
}

fn read_idx(path: &Path, magic: u32) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    let found = be_u32(&bytes, 0, path)?;
    if found != magic {
        return Err(Error::Format(format!(
            "{}: magic 0x{found:08x}, expected 0x{magic:08x}",
            path.display()
        )));
    }
    let rank = (magic & 0xff) as usize;
    let dims = (0..rank)
        .map(|d| be_u32(&bytes, 4 + 4 * d, path).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * rank;
    let len: usize = dims.iter().product();
    if bytes.len() < start + len {
        return Err(Error::Truncated {
            offset: bytes.len() as u64,
            context: format!("{} declares {len} data bytes after offset {start}", path.display()),
        });
    }
    Ok((dims, bytes[start..start + len].to_vec()))
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (idims, pixels) = read_idx(images_path.as_ref(), IMAGE_MAGIC)?;
    let (ldims, labels) = read_idx(labels_path.as_ref(), LABEL_MAGIC)?;
    if idims[0] != ldims[0] {
        return Err(Error::Validation(format!(
            "{} images but {} labels",
            idims[0], ldims[0]
        )));
    }
    if idims[0] == 0 {
        return Err(Error::Validation("dataset is empty".into()));
    }
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    let data = pixels.into_iter().map(|p| p as f32 / 255.0).collect();
    Ok(Dataset {
        images: Tensor::new(vec![idims[0], idims[1], idims[2], 1], data)?,
        labels,
        num_classes,
    })
}

/// Standard MNIST file names inside `dir`.
pub fn mnist_paths(dir: &Path, train: bool) -> (PathBuf, PathBuf) {
    let prefix = if train { "train" } else { "t10k" };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Training and test split of MNIST-layout files in `dir`.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let (ti, tl) = mnist_paths(dir, true);
    let (vi, vl) = mnist_paths(dir, false);
    Ok((load_idx(ti, tl)?, load_idx(vi, vl)?))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn one_hot(&self, rows: &[usize]) -> Tensor {
        let c = self.num_classes;
        let mut data = vec![0f32; rows.len() * c];
        for (r, &i) in rows.iter().enumerate() {
            data[r * c + self.labels[i]] = 1.0;
        }
        Tensor::new(vec![rows.len(), c], data).expect("one-hot shape")
    }

    /// Images of the given rows, in order.
    pub fn gather(&self, rows: &[usize]) -> Tensor {
        let width: usize = self.sample_shape().iter().product();
        let src = self.images.data();
        let mut data = Vec::with_capacity(rows.len() * width);
        for &i in rows {
            data.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(self.sample_shape());
        Tensor::new(shape, data).expect("gathered shape")
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let rows: Vec<usize> = (0..n).collect();
        Dataset {
            images: self.gather(&rows),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
        }
    }

    /// A random permutation of the sample indices.
    pub fn shuffled_indices(&self, rng: &mut impl Rng) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx
    }
}
