use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Provenance, UltraSample};
use crate::error::{Error, Result};
use crate::patching::Image;

pub const INDEX_FILE: &str = "index.csv";
pub const RECORD_DIR: &str = "records";
const RECORD_MAGIC: &[u8; 8] = b"UMNREC01";

#[derive(Debug, Serialize, Deserialize)]
struct IndexRow {
    id: u64,
    label: u8,
    seed: u64,
}

fn record_path(dir: &Path, id: u64) -> PathBuf {
    dir.join(RECORD_DIR).join(format!("{id:06}.bin"))
}

/// Record layout: magic, u32 height, u32 width, u32 channels, u8 label,
/// u32 provenance length, provenance JSON, one byte per pixel value.
fn encode(sample: &UltraSample) -> Result<Vec<u8>> {
    let img = &sample.image;
    let prov = serde_json::to_vec(&sample.provenance).map_err(|e| Error::Validation(e.to_string()))?;
    let mut out = Vec::with_capacity(29 + prov.len() + img.data.len());
    out.extend_from_slice(RECORD_MAGIC);
    for v in [img.height, img.width, img.channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(sample.label);
    out.extend_from_slice(&(prov.len() as u32).to_le_bytes());
    out.extend_from_slice(&prov);
    for &v in &img.data {
        let q = (v * 255.0).round();
        if (q / 255.0 - v).abs() > 0.0 || !(0.0..=255.0).contains(&q) {
            return Err(Error::Validation(format!("pixel {v} is not an 8-bit level in [0, 1]")));
        }
        out.push(q as u8);
    }
    Ok(out)
}

fn decode(path: &Path, bytes: &[u8]) -> Result<UltraSample> {
    let bad = |m: &str| Error::load(path, m.to_string());
    if bytes.len() < 29 || &bytes[..8] != RECORD_MAGIC {
        return Err(bad("not a sample record"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (h, w, c) = (u32_at(8), u32_at(12), u32_at(16));
    let label = bytes[20];
    let plen = u32_at(21);
    let pix_start = 25 + plen;
    if bytes.len() != pix_start + h * w * c {
        return Err(bad("record size does not match its header"));
    }
    let provenance: Provenance =
        serde_json::from_slice(&bytes[25..pix_start]).map_err(|e| bad(&format!("provenance: {e}")))?;
    let data = bytes[pix_start..].iter().map(|&b| b as f32 / 255.0).collect();
    Ok(UltraSample {
        image: Image::new(h, w, c, data).map_err(|e| bad(&e.to_string()))?,
        label,
        provenance,
    })
}

/// Writes `index.csv` plus one record per sample into `dir`.
pub fn save_dataset(dir: &Path, samples: &[UltraSample]) -> Result<()> {
    fs::create_dir_all(dir.join(RECORD_DIR))?;
    let mut w = csv::Writer::from_path(dir.join(INDEX_FILE)).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for (id, s) in samples.iter().enumerate() {
        fs::write(record_path(dir, id as u64), encode(s)?)?;
        w.serialize(IndexRow {
            id: id as u64,
            label: s.label,
            seed: s.provenance.seed,
        })
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a dataset written by [`save_dataset`], checking the index against
/// every record.
pub fn load_dataset(dir: &Path) -> Result<Vec<UltraSample>> {
    let index = dir.join(INDEX_FILE);
    let mut rdr = csv::Reader::from_path(&index).map_err(|e| Error::load(&index, e.to_string()))?;
    let header = rdr.headers().map_err(|e| Error::load(&index, e.to_string()))?;
    if header != vec!["id", "label", "seed"] {
        return Err(Error::load(&index, format!("unexpected header {header:?}")));
    }
    let mut samples = Vec::new();
    let mut ids = BTreeSet::new();
    for (line, row) in rdr.deserialize::<IndexRow>().enumerate() {
        let row = row.map_err(|e| Error::load(&index, format!("row {}: {e}", line + 1)))?;
        if row.id != samples.len() as u64 {
            return Err(Error::load(
                &index,
                format!("row {} has id {}, expected {}", line + 1, row.id, samples.len()),
            ));
        }
        let path = record_path(dir, row.id);
        let bytes = fs::read(&path).map_err(|e| Error::load(&path, e.to_string()))?;
        let s = decode(&path, &bytes)?;
        if s.label != row.label || s.provenance.seed != row.seed {
            return Err(Error::load(
                &path,
                format!("record disagrees with index row {}", row.id),
            ));
        }
        ids.insert(row.id);
        samples.push(s);
    }
    let records = dir.join(RECORD_DIR);
    let on_disk = fs::read_dir(&records)
        .map_err(|e| Error::load(&records, e.to_string()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "bin"))
        .count();
    if on_disk != ids.len() {
        return Err(Error::load(
            &index,
            format!("index lists {} samples but {on_disk} records exist", ids.len()),
        ));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_ultramnist, procedural_digits, UltraConfig};

    fn dataset(dir: &Path, n: usize) -> Vec<UltraSample> {
        let cfg = UltraConfig {
            image_size: 32,
            ..UltraConfig::default()
        };
        let s = generate_ultramnist(&procedural_digits(), n, &cfg, 1).unwrap();
        save_dataset(dir, &s).unwrap();
        s
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let s = dataset(dir.path(), 5);
        assert_eq!(load_dataset(dir.path()).unwrap(), s);
    }

    #[test]
    fn missing_record_fails() {
        let dir = tempfile::tempdir().unwrap();
        dataset(dir.path(), 3);
        fs::remove_file(record_path(dir.path(), 1)).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Load { .. })));
    }

    #[test]
    fn partial_index_fails() {
        let dir = tempfile::tempdir().unwrap();
        dataset(dir.path(), 3);
        let idx = dir.path().join(INDEX_FILE);
        let text = fs::read_to_string(&idx).unwrap();
        let kept: Vec<&str> = text.lines().take(3).collect();
        fs::write(&idx, kept.join("\n") + "\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Load { .. })));
        let truncated = &text[..text.len() - 4];
        fs::write(&idx, truncated).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }
}
