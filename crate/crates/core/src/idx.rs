//! MNIST in the IDX container format.
//!
//! All header integers are big-endian. Images: magic `0x00000803`, then
//! count, rows, cols, then one unsigned byte per pixel. Labels: magic
//! `0x00000801`, then count, then one byte per label.

use std::path::Path;

use crate::error::{read_file, Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_SIDE: usize = 28;
pub const MNIST_CLASSES: usize = 10;

/// Grey-scale images scaled to `[0, 1]` with their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub rows: usize,
    pub cols: usize,
    pixels: Vec<f64>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(rows: usize, cols: usize, pixels: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if pixels.len() != rows * cols * labels.len() {
            return Err(Error::Dimension(format!(
                "{} pixels do not form {} images of {rows}x{cols}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Input(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(Self {
            rows,
            cols,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// The first `n` samples (all of them if there are fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            rows: self.rows,
            cols: self.cols,
            pixels: self.pixels[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Parse {
            offset: bytes.len() as u64,
            msg: format!("truncated header, needed 4 bytes at offset {offset}"),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = be_u32(bytes, 0)?;
    if magic != expected {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("bad magic 0x{magic:08x}, expected 0x{expected:08x}"),
        });
    }
    Ok(())
}

fn payload(bytes: &[u8], start: usize, len: usize) -> Result<&[u8]> {
    bytes.get(start..start + len).ok_or_else(|| Error::Parse {
        offset: bytes.len() as u64,
        msg: format!(
            "truncated payload: expected {len} bytes from offset {start}, file ends at {}",
            bytes.len()
        ),
    })
}

/// Parses an IDX image file into `(count, rows, cols, pixels / 255)`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let data = payload(bytes, 16, count * rows * cols)?;
    let pixels = data.iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((count, rows, cols, pixels))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let data = payload(bytes, 8, count)?;
    if let Some(i) = data.iter().position(|&l| l as usize >= MNIST_CLASSES) {
        return Err(Error::Parse {
            offset: (8 + i) as u64,
            msg: format!("label {} out of range", data[i]),
        });
    }
    Ok(data.to_vec())
}

/// Loads an MNIST image/label file pair; images must be 28×28.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (count, rows, cols, pixels) = parse_images(&read_file(images_path)?)?;
    if rows != MNIST_SIDE || cols != MNIST_SIDE {
        return Err(Error::Parse {
            offset: 8,
            msg: format!("images are {rows}x{cols}, expected 28x28"),
        });
    }
    let labels = parse_labels(&read_file(labels_path)?)?;
    if labels.len() != count {
        return Err(Error::Parse {
            offset: 4,
            msg: format!("{} labels for {count} images", labels.len()),
        });
    }
    Dataset::new(rows, cols, pixels, labels)
}

pub fn encode_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&((pixels.len() / (rows * cols)) as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
