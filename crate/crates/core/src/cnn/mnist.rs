//! Reader and writer for the IDX files MNIST is distributed in.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Ingest { path: self.path.to_path_buf(), offset: offset as u64, msg: msg.into() }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| self.err(self.pos, format!("truncated header: missing {what}")))?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
    }

    fn body(&self, len: usize) -> Result<&'a [u8]> {
        let have = self.bytes.len() - self.pos;
        if have < len {
            return Err(self.err(self.bytes.len(), format!("truncated data: expected {len} bytes, found {have}")));
        }
        Ok(&self.bytes[self.pos..self.pos + len])
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn check_magic(cur: &mut Cursor<'_>, expected: u32) -> Result<()> {
    let magic = cur.u32("magic number")?;
    if magic != expected {
        return Err(cur.err(0, format!("bad magic 0x{magic:08x}, expected 0x{expected:08x}")));
    }
    Ok(())
}

/// Images scaled to `[0, 1]` by dividing each byte by 255.
pub fn read_idx_images(path: &Path) -> Result<Vec<Array2<f64>>> {
    let bytes = read(path)?;
    let mut cur = Cursor { path, bytes: &bytes, pos: 0 };
    check_magic(&mut cur, IMAGES_MAGIC)?;
    let count = cur.u32("image count")? as usize;
    let rows = cur.u32("row count")? as usize;
    let cols = cur.u32("column count")? as usize;
    let size = rows * cols;
    let body = cur.body(count * size)?;
    Ok(body
        .chunks_exact(size.max(1))
        .take(count)
        .map(|px| Array2::from_shape_fn((rows, cols), |(r, c)| f64::from(px[r * cols + c]) / 255.0))
        .collect())
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read(path)?;
    let mut cur = Cursor { path, bytes: &bytes, pos: 0 };
    check_magic(&mut cur, LABELS_MAGIC)?;
    let count = cur.u32("label count")? as usize;
    Ok(cur.body(count)?.to_vec())
}

/// Images and, when a label file is given, labels; the counts must agree.
pub fn load_mnist_idx(images: &Path, labels: Option<&Path>) -> Result<(Vec<Array2<f64>>, Option<Vec<u8>>)> {
    let imgs = read_idx_images(images)?;
    let labels = match labels {
        Some(path) => {
            let l = read_idx_labels(path)?;
            if l.len() != imgs.len() {
                return Err(Error::input(path, format!("{} labels for {} images", l.len(), imgs.len())));
            }
            Some(l)
        }
        None => None,
    };
    Ok((imgs, labels))
}

/// Write raw 8-bit images as an IDX image file.
pub fn write_idx_images(path: &Path, images: &[Array2<u8>]) -> Result<()> {
    let (rows, cols) = images.first().map_or((0, 0), Array2::dim);
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [IMAGES_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in images {
        if img.dim() != (rows, cols) {
            return Err(Error::shape("all images in an IDX file must share one size"));
        }
        out.extend(img.iter().copied());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
