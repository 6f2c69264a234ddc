use std::fs;
use std::path::Path;

use super::{BankSource, DigitBank};
use crate::error::{Error, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes(b.try_into().unwrap()))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::Parse {
                offset: self.bytes.len() as u64,
                message: format!("truncated while reading {what} ({n} bytes needed at byte {})", self.pos),
            }),
        }
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let got = self.u32("magic number")?;
        if got != expected {
            return Err(Error::Parse {
                offset: 0,
                message: format!("bad magic 0x{got:08x}, expected 0x{expected:08x}"),
            });
        }
        Ok(())
    }
}

/// Parses an IDX image file (`0x00000803`): `(rows, cols, images)` with
/// pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<f32>>)> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(IMAGE_MAGIC)?;
    let n = r.u32("image count")? as usize;
    let rows = r.u32("row count")? as usize;
    let cols = r.u32("column count")? as usize;
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let px = r.take(rows * cols, &format!("image {i}"))?;
        images.push(px.iter().map(|&b| b as f32 / 255.0).collect());
    }
    Ok((rows, cols, images))
}

/// Parses an IDX label file (`0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(LABEL_MAGIC)?;
    let n = r.u32("label count")? as usize;
    Ok(r.take(n, "labels")?.to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::load(path, e.to_string()))
}

/// Loads an MNIST-style image/label file pair.
pub fn load_idx(images: &Path, labels: &Path) -> Result<DigitBank> {
    let (rows, cols, imgs) = parse_idx_images(&read(images)?)?;
    let labs = parse_idx_labels(&read(labels)?)?;
    if imgs.len() != labs.len() {
        return Err(Error::Validation(format!(
            "{} images in {} but {} labels in {}",
            imgs.len(),
            images.display(),
            labs.len(),
            labels.display()
        )));
    }
    DigitBank::new(rows, cols, imgs, labs, BankSource::IdxFiles)
}

#[cfg(test)]
pub(crate) fn encode_images(rows: u32, cols: u32, images: &[Vec<u8>]) -> Vec<u8> {
    let mut out = IMAGE_MAGIC.to_be_bytes().to_vec();
    for v in [images.len() as u32, rows, cols] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in images {
        out.extend_from_slice(img);
    }
    out
}

#[cfg(test)]
pub(crate) fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = LABEL_MAGIC.to_be_bytes().to_vec();
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(dir: &Path, n_labels: usize) -> (std::path::PathBuf, std::path::PathBuf) {
        let imgs: Vec<Vec<u8>> = (0..3u8).map(|i| vec![i * 100; 4]).collect();
        let labels: Vec<u8> = (0..n_labels as u8).collect();
        let ip = dir.join("images.idx");
        let lp = dir.join("labels.idx");
        fs::write(&ip, encode_images(2, 2, &imgs)).unwrap();
        fs::write(&lp, encode_labels(&labels)).unwrap();
        (ip, lp)
    }

    #[test]
    fn three_image_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path(), 3);
        let bank = load_idx(&ip, &lp).unwrap();
        assert_eq!(bank.len(), 3);
        assert_eq!((bank.height, bank.width), (2, 2));
        assert_eq!(bank.images[2][0], 200.0 / 255.0);
    }

    #[test]
    fn zero_magic_is_parse_error() {
        let err = parse_idx_images(&[0, 0, 0, 0, 0, 0, 0, 1]).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 0, .. }));
    }

    #[test]
    fn truncation_reports_offset() {
        let mut bytes = encode_images(2, 2, &[vec![1, 2, 3, 4], vec![5, 6, 7, 8]]);
        bytes.truncate(bytes.len() - 1);
        let err = parse_idx_images(&bytes).unwrap_err();
        assert!(matches!(err, Error::Parse { offset, .. } if offset == bytes.len() as u64));
    }

    #[test]
    fn count_mismatch_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path(), 2);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Validation(_))));
    }
}
