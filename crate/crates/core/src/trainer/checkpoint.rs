//! Checkpoint files: magic, u64 manifest length, JSON manifest, then the
//! little-endian values of every array in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{AdamState, DType, Optimizer, OptimizerKind, ParamStore, Scalar, Tensor};

const MAGIC: &[u8; 8] = b"PGDCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: DType,
    pub mode: String,
    pub epoch: usize,
    pub optimizer: OptimizerKind,
    pub optimizer_steps: u64,
    pub best_val_accuracy: Option<f64>,
    pub params: Vec<ArrayEntry>,
    /// Whether Adam moments follow the parameters (`m` block, then `v`).
    pub adam_moments: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub manifest: Manifest,
    pub params: Vec<Tensor<T>>,
    pub adam: Option<AdamState<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn capture(
        mode: &str,
        epoch: usize,
        best_val_accuracy: Option<f64>,
        store: &ParamStore<T>,
        opt: &Optimizer<T>,
    ) -> Self {
        let adam = match opt {
            Optimizer::Adam(a) => Some(a.state.clone()),
            Optimizer::Sgd(_) => None,
        };
        Self {
            manifest: Manifest {
                dtype: T::DTYPE,
                mode: mode.to_string(),
                epoch,
                optimizer: opt.kind(),
                optimizer_steps: adam.as_ref().map_or(0, |a| a.t),
                best_val_accuracy,
                params: store
                    .iter()
                    .map(|(_, p)| ArrayEntry {
                        name: p.name.clone(),
                        shape: p.value.shape().to_vec(),
                    })
                    .collect(),
                adam_moments: adam.is_some(),
            },
            params: store.iter().map(|(_, p)| p.value.clone()).collect(),
            adam,
        }
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.manifest
            .params
            .iter()
            .position(|e| e.name == name)
            .map(|i| &self.params[i])
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest).map_err(|e| Error::Validation(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        let mut arrays: Vec<&Tensor<T>> = self.params.iter().collect();
        if let Some(a) = &self.adam {
            arrays.extend(&a.m);
            arrays.extend(&a.v);
        }
        for t in arrays {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let err = |m: String| Error::load(path, m);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(err("missing checkpoint header".into()));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = 16usize
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| err(format!("manifest length {mlen} runs past the end of the file")))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[16..body]).map_err(|e| err(format!("corrupted manifest: {e}")))?;
        if manifest.dtype != T::DTYPE {
            return Err(err(format!(
                "checkpoint holds {} values, expected {}",
                manifest.dtype.name(),
                T::DTYPE.name()
            )));
        }
        let width = T::DTYPE.size_bytes() as usize;
        let mut pos = body;
        let mut read = |entry: &ArrayEntry, what: &str| -> Result<Tensor<T>> {
            let n: usize = entry.shape.iter().product();
            let end = pos + n * width;
            if end > bytes.len() {
                return Err(err(format!("{what} `{}` is truncated", entry.name)));
            }
            let data = bytes[pos..end].chunks_exact(width).map(T::read_le).collect();
            pos = end;
            Tensor::new(entry.shape.clone(), data).map_err(|e| err(format!("{what} `{}`: {e}", entry.name)))
        };
        let params = manifest
            .params
            .iter()
            .map(|e| read(e, "parameter"))
            .collect::<Result<Vec<_>>>()?;
        let adam = if manifest.adam_moments {
            let m = manifest
                .params
                .iter()
                .map(|e| read(e, "first moment"))
                .collect::<Result<_>>()?;
            let v = manifest
                .params
                .iter()
                .map(|e| read(e, "second moment"))
                .collect::<Result<_>>()?;
            Some(AdamState {
                m,
                v,
                t: manifest.optimizer_steps,
            })
        } else {
            None
        };
        if pos != bytes.len() {
            return Err(err(format!(
                "{} trailing bytes after the last array",
                bytes.len() - pos
            )));
        }
        Ok(Self { manifest, params, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::load(path, e.to_string()))?;
        Self::from_bytes(path, &bytes)
    }

    /// Copies every parameter (and the optimizer state) into `store`/`opt`.
    /// Names and shapes must match exactly.
    pub fn restore(&self, path: &Path, store: &mut ParamStore<T>, opt: &mut Optimizer<T>) -> Result<()> {
        if self.manifest.params.len() != store.len() {
            return Err(Error::load(
                path,
                format!(
                    "checkpoint has {} parameters, model has {}",
                    self.manifest.params.len(),
                    store.len()
                ),
            ));
        }
        let mut next = Vec::with_capacity(store.len());
        for ((id, p), entry) in store.iter().zip(&self.manifest.params) {
            if p.name != entry.name || p.value.shape() != entry.shape.as_slice() {
                return Err(Error::load(
                    path,
                    format!(
                        "parameter `{}` {:?} does not match checkpoint entry `{}` {:?}",
                        p.name,
                        p.value.shape(),
                        entry.name,
                        entry.shape
                    ),
                ));
            }
            next.push((id, self.params[next.len()].clone()));
        }
        match (opt, &self.adam) {
            (Optimizer::Adam(a), Some(state)) => a.state = state.clone(),
            (Optimizer::Sgd(_), None) => {}
            (o, _) => {
                return Err(Error::load(
                    path,
                    format!(
                        "optimizer {:?} does not match checkpoint {:?}",
                        o.kind(),
                        self.manifest.optimizer
                    ),
                ))
            }
        }
        for (id, v) in next {
            *store.value_mut(id) = v;
        }
        Ok(())
    }

    /// Copies parameters whose name starts with `prefix`; everything else
    /// in `store` keeps its value. Returns the number of tensors copied.
    pub fn restore_prefix(&self, path: &Path, store: &mut ParamStore<T>, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (entry, value) in self.manifest.params.iter().zip(&self.params) {
            if !entry.name.starts_with(prefix) {
                continue;
            }
            let id = store
                .id(&entry.name)
                .ok_or_else(|| Error::load(path, format!("model has no parameter `{}`", entry.name)))?;
            if store.value(id).shape() != value.shape() {
                return Err(Error::load(
                    path,
                    format!(
                        "parameter `{}` has shape {:?} in the checkpoint but {:?} in the model",
                        entry.name,
                        value.shape(),
                        store.value(id).shape()
                    ),
                ));
            }
            *store.value_mut(id) = value.clone();
            copied += 1;
        }
        if copied == 0 {
            return Err(Error::load(path, format!("no parameters with prefix `{prefix}`")));
        }
        Ok(copied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::AdamConfig;

    fn setup() -> (ParamStore<f32>, Optimizer<f32>) {
        let mut s = ParamStore::new();
        s.add("backbone.w", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5))
            .unwrap();
        s.add("head.b", Tensor::from_fn(&[4], |i| -(i as f32))).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Adam, &s, AdamConfig::default());
        let grads = vec![Tensor::full(&[2, 3], 0.1), Tensor::full(&[4], -0.2)];
        opt.step(&mut s, &grads, 0.01).unwrap();
        (s, opt)
    }

    #[test]
    fn roundtrip_bit_identical() {
        let (s, opt) = setup();
        let ck = Checkpoint::capture("patchgd", 3, Some(0.5), &s, &opt);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(Path::new("x"), &bytes).unwrap();
        assert_eq!(back, ck);
        let mut s2 = ParamStore::new();
        s2.add_zeros("backbone.w", &[2, 3]).unwrap();
        s2.add_zeros("head.b", &[4]).unwrap();
        let mut o2 = Optimizer::new(OptimizerKind::Adam, &s2, AdamConfig::default());
        back.restore(Path::new("x"), &mut s2, &mut o2).unwrap();
        assert_eq!(s2, s);
        assert_eq!(o2, opt);
    }

    #[test]
    fn corrupted_header_is_load_error() {
        let (s, opt) = setup();
        let mut bytes = Checkpoint::capture("gd", 0, None, &s, &opt).to_bytes().unwrap();
        bytes[20] ^= 0xff;
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(Path::new("x"), &bytes),
            Err(Error::Load { .. })
        ));
        assert!(Checkpoint::<f32>::from_bytes(Path::new("x"), b"nope").is_err());
    }

    #[test]
    fn shape_mismatch_names_parameter() {
        let (s, opt) = setup();
        let ck = Checkpoint::capture("gd", 0, None, &s, &opt);
        let mut s2 = ParamStore::<f32>::new();
        s2.add_zeros("backbone.w", &[3, 2]).unwrap();
        s2.add_zeros("head.b", &[4]).unwrap();
        let mut o2 = Optimizer::new(OptimizerKind::Adam, &s2, AdamConfig::default());
        let err = ck.restore(Path::new("x"), &mut s2, &mut o2).unwrap_err();
        assert!(err.to_string().contains("backbone.w"), "{err}");
    }

    #[test]
    fn prefix_restore_leaves_rest() {
        let (s, opt) = setup();
        let ck = Checkpoint::capture("gd", 0, None, &s, &opt);
        let mut s2 = ParamStore::<f32>::new();
        s2.add_zeros("backbone.w", &[2, 3]).unwrap();
        s2.add(String::from("head.b"), Tensor::full(&[4], 9.0)).unwrap();
        assert_eq!(ck.restore_prefix(Path::new("x"), &mut s2, "backbone.").unwrap(), 1);
        assert_eq!(
            s2.value(s2.id("backbone.w").unwrap()),
            s.value(s.id("backbone.w").unwrap())
        );
        assert!(s2.value(s2.id("head.b").unwrap()).data().iter().all(|&v| v == 9.0));
    }
}
