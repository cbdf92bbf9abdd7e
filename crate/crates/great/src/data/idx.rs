//! Loader for the IDX binary image format (big-endian headers, u8 payload).

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    path: &'a Path,
    bytes: Vec<u8>,
    pos: usize,
}

impl<'a> Reader<'a> {
    fn open(path: &'a Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(Reader { path, bytes, pos: 0 })
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.display().to_string(),
            line: 0,
            msg: msg.into(),
        }
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        if self.pos + 4 > self.bytes.len() {
            return Err(self.err(format!("file ends early reading {what}")));
        }
        let v = u32::from_be_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    fn payload(&mut self, len: usize, what: &str) -> Result<&[u8]> {
        if self.pos + len > self.bytes.len() {
            return Err(self.err(format!(
                "file ends early: {what} needs {len} bytes, {} remain",
                self.bytes.len() - self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(slice)
    }

    fn expect_eof(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err(format!(
                "{} trailing bytes after payload",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Loads an image/label file pair into a dataset.
///
/// Images become `[n, rows, cols, 1]` with pixel values scaled to [0, 1];
/// the class count is the largest label plus one. Both files must parse
/// exactly: bad magic numbers, mismatched counts, truncation, and trailing
/// bytes are all errors.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let mut ir = Reader::open(images)?;
    let magic = ir.u32_be("magic")?;
    if magic != IMAGE_MAGIC {
        return Err(ir.err(format!(
            "bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"
        )));
    }
    let n = ir.u32_be("image count")? as usize;
    let rows = ir.u32_be("row count")? as usize;
    let cols = ir.u32_be("column count")? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(ir.err(format!("degenerate image dimensions {n}x{rows}x{cols}")));
    }
    let pixels = ir.payload(n * rows * cols, "pixels")?.to_vec();
    ir.expect_eof()?;

    let mut lr = Reader::open(labels)?;
    let magic = lr.u32_be("magic")?;
    if magic != LABEL_MAGIC {
        return Err(lr.err(format!(
            "bad label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"
        )));
    }
    let ln = lr.u32_be("label count")? as usize;
    if ln != n {
        return Err(lr.err(format!("{ln} labels for {n} images")));
    }
    let raw_labels = lr.payload(n, "labels")?.to_vec();
    lr.expect_eof()?;

    let values: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let y: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let num_classes = y.iter().max().map_or(0, |m| m + 1).max(2);
    Dataset::new(
        Tensor::from_vec(vec![n, rows, cols, 1], values)?,
        y,
        num_classes,
    )
}

#[cfg(test)]
pub(crate) fn write_idx_fixture(
    dir: &Path,
    images: &[Vec<u8>],
    rows: usize,
    cols: usize,
    labels: &[u8],
) -> (std::path::PathBuf, std::path::PathBuf) {
    let mut img = Vec::new();
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(images.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for image in images {
        img.extend_from_slice(image);
    }
    let mut lab = Vec::new();
    lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    let ip = dir.join("images.idx");
    let lp = dir.join("labels.idx");
    std::fs::write(&ip, img).unwrap();
    std::fs::write(&lp, lab).unwrap();
    (ip, lp)
}
